#include "cfm/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cfm {

bool RunConfig::operator==(const RunConfig& o) const {
    return serialize_run_config(*this) == serialize_run_config(o);
}

namespace {

struct KeyHandler {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
    throw ConfigError("key '" + key + "': bad value '" + value + "' (" + expected + ")");
}

long long parse_int(const std::string& key, const std::string& v, long long lo, long long hi) {
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size() || out < lo || out > hi) {
        bad_value(key, v, "integer in [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
    }
    return out;
}

double parse_real(const std::string& key, const std::string& v, double lo, double hi) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size() || !(out >= lo) || !(out <= hi)) throw std::invalid_argument("");
        return out;
    } catch (...) {
        bad_value(key, v, "real in [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    bad_value(key, v, "true|false");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(v);
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

std::string real_str(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

NetVariant parse_variant(const std::string& key, const std::string& v) {
    if (v == "full") return NetVariant::full;
    if (v == "no_cfm") return NetVariant::no_cfm;
    if (v == "no_res") return NetVariant::no_res;
    if (v == "no_immod") return NetVariant::no_immod;
    bad_value(key, v, "full|no_cfm|no_res|no_immod");
}

ModulationKind parse_kind(const std::string& key, const std::string& v) {
    if (v == "shift") return ModulationKind::shift;
    if (v == "scale") return ModulationKind::scale;
    if (v == "affine") return ModulationKind::affine;
    bad_value(key, v, "shift|scale|affine");
}

const std::map<std::string, KeyHandler>& schema() {
    static const std::map<std::string, KeyHandler> s = [] {
        std::map<std::string, KeyHandler> m;

        m["model.in_channels"] = {
            [](RunConfig& c, const std::string& v) {
                c.model.in_channels = parse_int("model.in_channels", v, 1, 3);
                if (c.model.in_channels == 2) bad_value("model.in_channels", v, "1 or 3");
            },
            [](const RunConfig& c) { return std::to_string(c.model.in_channels); }};
        m["model.widths"] = {
            [](RunConfig& c, const std::string& v) {
                const auto parts = split_list(v);
                if (parts.size() != 3) bad_value("model.widths", v, "three comma-separated widths");
                for (int i = 0; i < 3; ++i) {
                    c.model.scale_widths[static_cast<std::size_t>(i)] =
                        parse_int("model.widths", parts[static_cast<std::size_t>(i)], 1, 4096);
                }
            },
            [](const RunConfig& c) {
                return std::to_string(c.model.scale_widths[0]) + "," +
                       std::to_string(c.model.scale_widths[1]) + "," +
                       std::to_string(c.model.scale_widths[2]);
            }};
        m["model.cfm_per_position"] = {
            [](RunConfig& c, const std::string& v) {
                c.model.cfm_per_position = static_cast<int>(parse_int("model.cfm_per_position", v, 1, 4));
            },
            [](const RunConfig& c) { return std::to_string(c.model.cfm_per_position); }};
        m["model.shifting_ops"] = {
            [](RunConfig& c, const std::string& v) {
                c.model.num_shifting_ops = static_cast<int>(parse_int("model.shifting_ops", v, 1, 4));
            },
            [](const RunConfig& c) { return std::to_string(c.model.num_shifting_ops); }};
        m["model.kind"] = {
            [](RunConfig& c, const std::string& v) { c.model.kind = parse_kind("model.kind", v); },
            [](const RunConfig& c) { return to_string(c.model.kind); }};
        m["model.variant"] = {
            [](RunConfig& c, const std::string& v) {
                c.model.variant = parse_variant("model.variant", v);
            },
            [](const RunConfig& c) { return to_string(c.model.variant); }};

        m["train.patch_size"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.patch_size = parse_int("train.patch_size", v, 8, 512);
            },
            [](const RunConfig& c) { return std::to_string(c.train.patch_size); }};
        m["train.batch_size"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.batch_size = parse_int("train.batch_size", v, 1, 1024);
            },
            [](const RunConfig& c) { return std::to_string(c.train.batch_size); }};
        m["train.patches_per_epoch"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.patches_per_epoch = parse_int("train.patches_per_epoch", v, 1, 1 << 24);
            },
            [](const RunConfig& c) { return std::to_string(c.train.patches_per_epoch); }};
        m["train.sigma_min"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.sigma_min = parse_real("train.sigma_min", v, 0.0, 255.0) / 255.0;
            },
            [](const RunConfig& c) { return real_str(c.train.sigma_min * 255.0); }};
        m["train.sigma_max"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.sigma_max = parse_real("train.sigma_max", v, 0.0, 255.0) / 255.0;
            },
            [](const RunConfig& c) { return real_str(c.train.sigma_max * 255.0); }};
        m["train.epochs_main"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.epochs_main = static_cast<int>(parse_int("train.epochs_main", v, 1, 10000));
            },
            [](const RunConfig& c) { return std::to_string(c.train.epochs_main); }};
        m["train.epochs_finetune"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.epochs_finetune =
                    static_cast<int>(parse_int("train.epochs_finetune", v, 0, 10000));
            },
            [](const RunConfig& c) { return std::to_string(c.train.epochs_finetune); }};
        m["train.lr_start"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.lr_start = parse_real("train.lr_start", v, 1e-12, 1.0);
            },
            [](const RunConfig& c) { return real_str(c.train.lr_start); }};
        m["train.lr_end_main"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.lr_end_main = parse_real("train.lr_end_main", v, 1e-14, 1.0);
            },
            [](const RunConfig& c) { return real_str(c.train.lr_end_main); }};
        m["train.lr_end_finetune"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.lr_end_finetune = parse_real("train.lr_end_finetune", v, 1e-16, 1.0);
            },
            [](const RunConfig& c) { return real_str(c.train.lr_end_finetune); }};
        m["train.augment_flip"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.augment_flip = parse_bool("train.augment_flip", v);
            },
            [](const RunConfig& c) { return c.train.augment_flip ? "true" : "false"; }};
        m["train.augment_rotate"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.augment_rotate = parse_bool("train.augment_rotate", v);
            },
            [](const RunConfig& c) { return c.train.augment_rotate ? "true" : "false"; }};
        m["train.augment_rescale"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.augment_rescale = parse_bool("train.augment_rescale", v);
            },
            [](const RunConfig& c) { return c.train.augment_rescale ? "true" : "false"; }};
        m["train.seed"] = {
            [](RunConfig& c, const std::string& v) {
                c.train.seed = static_cast<std::uint64_t>(
                    parse_int("train.seed", v, 0, std::numeric_limits<long long>::max()));
            },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }};

        m["data.train_dir"] = {[](RunConfig& c, const std::string& v) { c.train_dir = v; },
                               [](const RunConfig& c) { return c.train_dir; }};
        m["data.val_dir"] = {[](RunConfig& c, const std::string& v) { c.val_dir = v; },
                             [](const RunConfig& c) { return c.val_dir; }};
        m["out.dir"] = {[](RunConfig& c, const std::string& v) { c.out_dir = v; },
                        [](const RunConfig& c) { return c.out_dir; }};

        m["ablate.variants"] = {
            [](RunConfig& c, const std::string& v) {
                c.ablate_variants.clear();
                for (const auto& part : split_list(v)) {
                    c.ablate_variants.push_back(parse_variant("ablate.variants", part));
                }
                if (c.ablate_variants.empty()) bad_value("ablate.variants", v, "non-empty list");
            },
            [](const RunConfig& c) {
                std::string out;
                for (std::size_t i = 0; i < c.ablate_variants.size(); ++i) {
                    out += (i ? "," : "") + to_string(c.ablate_variants[i]);
                }
                return out;
            }};
        m["ablate.kinds"] = {
            [](RunConfig& c, const std::string& v) {
                c.ablate_kinds.clear();
                for (const auto& part : split_list(v)) {
                    c.ablate_kinds.push_back(parse_kind("ablate.kinds", part));
                }
                if (c.ablate_kinds.empty()) bad_value("ablate.kinds", v, "non-empty list");
            },
            [](const RunConfig& c) {
                std::string out;
                for (std::size_t i = 0; i < c.ablate_kinds.size(); ++i) {
                    out += (i ? "," : "") + to_string(c.ablate_kinds[i]);
                }
                return out;
            }};
        m["ablate.ops"] = {
            [](RunConfig& c, const std::string& v) {
                c.ablate_ops.clear();
                for (const auto& part : split_list(v)) {
                    c.ablate_ops.push_back(static_cast<int>(parse_int("ablate.ops", part, 1, 4)));
                }
                if (c.ablate_ops.empty()) bad_value("ablate.ops", v, "non-empty list");
            },
            [](const RunConfig& c) {
                std::string out;
                for (std::size_t i = 0; i < c.ablate_ops.size(); ++i) {
                    out += (i ? "," : "") + std::to_string(c.ablate_ops[i]);
                }
                return out;
            }};
        m["ablate.epochs"] = {
            [](RunConfig& c, const std::string& v) {
                c.ablate_epochs = static_cast<int>(parse_int("ablate.epochs", v, 1, 1000));
            },
            [](const RunConfig& c) { return std::to_string(c.ablate_epochs); }};
        return m;
    }();
    return s;
}

std::string strip(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig config;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = strip(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" +
                              line + "'");
        }
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        auto it = schema().find(key);
        if (it == schema().end()) {
            throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
        if (value.empty()) {
            throw ConfigError("line " + std::to_string(line_no) + ": empty value for key '" + key +
                              "'");
        }
        try {
            it->second.set(config, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    config.model.validate();
    config.train.validate();
    return config;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string serialize_run_config(const RunConfig& config) {
    std::string out;
    for (const auto& [key, handler] : schema()) {
        const std::string value = handler.get(config);
        if (value.empty()) continue;  // unset path
        out += key + " = " + value + "\n";
    }
    return out;
}

}  // namespace cfm
