#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cfm/config.hpp"
#include "cfm/data.hpp"
#include "cfm/image_io.hpp"
#include "cfm/metrics.hpp"
#include "cfm/net.hpp"
#include "cfm/noise.hpp"
#include "cfm/selftest.hpp"
#include "cfm/train.hpp"

namespace fs = std::filesystem;

namespace {

// Exit code contract: 0 success, 1 selftest failure, 2 config error,
// 3 data error, 4 argument domain error.
constexpr int kExitSelftest = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDomain = 4;

int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const cfm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const cfm::DomainError& e) {
        std::cerr << "argument error: " << e.what() << "\n";
        return kExitDomain;
    } catch (const cfm::Error& e) {  // data, load, shape, structural
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// Median wall time of an eval-mode forward pass on a fixed-size input.
double time_inference(cfm::CFMNet<float>& net, std::int64_t side, int repeats = 5) {
    cfm::CounterRng rng(7);
    auto y = cfm::Tensor<float>::zeros(cfm::Shape4{1, net.config().in_channels, side, side});
    for (auto& v : y.data()) v = static_cast<float>(rng.uniform01());
    auto m = cfm::Tensor<float>::full(cfm::Shape4{1, 1, side, side}, 0.15f);
    cfm::NoGradGuard no_grad;
    net.forward(y, m);  // warmup
    std::vector<double> times;
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        net.forward(y, m);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    return median_of(times);
}

struct AblateRow {
    std::string sweep;
    std::string setting;
    std::int64_t params = 0;
    double train_seconds = 0;
    double infer_seconds = 0;
    double psnr = 0;
    double ssim = 0;
    std::string paper_note;  // reference values, explicitly not reproduced
};

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& resume_path,
              int stop_after_epochs) {
    const cfm::RunConfig run = cfm::load_run_config(config_path);
    if (run.train_dir.empty()) throw cfm::ConfigError("data.train_dir is not set");

    const cfm::Corpus corpus = cfm::load_corpus(run.train_dir, run.model.in_channels);
    for (const auto& w : corpus.warnings) std::cerr << "warning: " << w << "\n";
    if (corpus.empty()) throw cfm::DataError("corpus '" + run.train_dir + "' has no usable images");

    cfm::Corpus val;
    if (!run.val_dir.empty()) {
        val = cfm::load_corpus(run.val_dir, run.model.in_channels);
        for (const auto& w : val.warnings) std::cerr << "warning: " << w << "\n";
    }

    fs::create_directories(run.out_dir);
    std::ofstream log(run.out_dir + "/train.log", std::ios::app);

    cfm::TrainProgress progress;
    cfm::CFMNet<float> net = resume_path.empty()
                                 ? cfm::CFMNet<float>(run.model, run.train.seed)
                                 : cfm::load_train_checkpoint<float>(resume_path, run.model,
                                                                     run.train, progress);

    std::cout << "training " << to_string(run.model.variant) << " model, "
              << net.parameter_count() << " parameters, corpus of " << corpus.images.size()
              << " images\n";
    const auto result = cfm::train(net, corpus, run.train, val.empty() ? nullptr : &val, &log,
                                   run.out_dir, progress, stop_after_epochs);

    if (stop_after_epochs >= 0) {
        std::cout << "stopped after " << stop_after_epochs
                  << " epoch(s); resume from " << run.out_dir << "/latest.ckpt\n";
        return 0;
    }
    const std::string model_path = run.out_dir + "/model.bin";
    cfm::save_net(net, model_path);
    std::cout << "final loss " << cfm::format_metric(result.final_loss) << ", model written to "
              << model_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// denoise
// ---------------------------------------------------------------------------

int cmd_denoise(const std::string& model_path, const std::string& input_path, double sigma255,
                const std::string& map_path, double peaks_sigma255, const std::string& out_path,
                const std::string& ref_path) {
    auto net = cfm::load_net_auto<float>(model_path);
    const cfm::Image noisy = cfm::load_image(input_path);
    if (noisy.channels != net.config().in_channels) {
        throw cfm::DataError("image has " + std::to_string(noisy.channels) +
                             " channels but the model expects " +
                             std::to_string(net.config().in_channels));
    }

    cfm::NoiseLevelMap map;
    if (!map_path.empty()) {
        const cfm::Image map_img = cfm::load_image(map_path);
        if (map_img.channels != 1) throw cfm::DomainError("noise map must be a single-channel PGM");
        if (map_img.height != noisy.height || map_img.width != noisy.width) {
            throw cfm::DomainError("noise map dimensions do not match the image");
        }
        map = cfm::custom_map(map_img.data, map_img.height, map_img.width);
    } else if (peaks_sigma255 > 0.0) {
        map = cfm::peaks_map(peaks_sigma255 / 255.0, noisy.height, noisy.width);
    } else {
        if (sigma255 < 0.0) throw cfm::DomainError("sigma must be >= 0");
        map = cfm::uniform_map(sigma255 / 255.0, noisy.height, noisy.width);
    }

    const cfm::Image denoised = cfm::denoise_image(net, noisy, map);
    cfm::save_image(denoised, out_path);
    std::cout << "wrote " << out_path << " (" << denoised.width << "x" << denoised.height << ")\n";

    if (!ref_path.empty()) {
        const cfm::Image ref = cfm::load_image(ref_path);
        std::cout << "psnr_noisy=" << cfm::format_metric(cfm::psnr(ref, noisy))
                  << " psnr=" << cfm::format_metric(cfm::psnr(ref, denoised))
                  << " ssim=" << cfm::format_metric(cfm::ssim(ref, denoised)) << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& model_path, const std::string& testdir,
             const std::string& sigmas_arg, const std::string& map_kind_arg,
             const std::string& out_path, std::uint64_t seed) {
    auto net = cfm::load_net_auto<float>(model_path);
    const cfm::Corpus testset = cfm::load_corpus(testdir, net.config().in_channels);
    for (const auto& w : testset.warnings) std::cerr << "warning: " << w << "\n";
    if (testset.empty()) throw cfm::DataError("test directory '" + testdir + "' has no usable images");

    std::vector<double> sigmas;
    {
        std::stringstream ss(sigmas_arg);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const double s = std::stod(item);
            if (s < 0.0 || s > 255.0) throw cfm::DomainError("sigma out of [0,255]: " + item);
            sigmas.push_back(s);
        }
        if (sigmas.empty()) throw cfm::DomainError("no sigmas given");
    }
    cfm::MapKind kind;
    if (map_kind_arg == "uniform") {
        kind = cfm::MapKind::uniform;
    } else if (map_kind_arg == "peaks") {
        kind = cfm::MapKind::peaks;
    } else {
        throw cfm::DomainError("map kind must be uniform or peaks, got '" + map_kind_arg + "'");
    }

    const auto table = cfm::evaluate(net, testset, sigmas, kind, seed);
    const std::string csv = cfm::to_csv(table);
    if (out_path.empty() || out_path == "-") {
        std::cout << csv;
    } else {
        std::ofstream out(out_path, std::ios::trunc);
        if (!out) throw cfm::DataError("cannot write '" + out_path + "'");
        out << csv;
        std::cout << "wrote " << out_path << " (" << table.rows.size() << " rows, mean psnr "
                  << cfm::format_metric(table.mean.psnr_denoised) << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const std::string& config_path) {
    const cfm::RunConfig run = cfm::load_run_config(config_path);
    if (run.train_dir.empty()) throw cfm::ConfigError("data.train_dir is not set");
    const cfm::Corpus corpus = cfm::load_corpus(run.train_dir, run.model.in_channels);
    if (corpus.empty()) throw cfm::DataError("corpus '" + run.train_dir + "' has no usable images");
    const cfm::Corpus evalset =
        run.val_dir.empty() ? corpus : cfm::load_corpus(run.val_dir, run.model.in_channels);

    cfm::TrainConfig tcfg = run.train;
    tcfg.epochs_main = run.ablate_epochs;
    tcfg.epochs_finetune = 0;

    std::vector<AblateRow> rows;
    auto run_one = [&](const std::string& sweep, const std::string& setting,
                       cfm::CFMNetConfig model_cfg, const std::string& note) {
        model_cfg.validate();
        cfm::CFMNet<float> net(model_cfg, tcfg.seed);
        const auto t0 = std::chrono::steady_clock::now();
        cfm::train(net, corpus, tcfg);
        const auto t1 = std::chrono::steady_clock::now();

        const auto table = cfm::evaluate(net, evalset, {50.0}, cfm::MapKind::uniform, tcfg.seed);

        AblateRow row;
        row.sweep = sweep;
        row.setting = setting;
        row.params = net.parameter_count();
        row.train_seconds = std::chrono::duration<double>(t1 - t0).count();
        row.infer_seconds = time_inference(net, 96);
        row.psnr = table.mean.psnr_denoised;
        row.ssim = table.mean.ssim_denoised;
        row.paper_note = note;
        rows.push_back(row);
        std::cout << sweep << "/" << setting << ": psnr " << cfm::format_metric(row.psnr)
                  << " ssim " << cfm::format_metric(row.ssim) << " infer "
                  << cfm::format_metric(row.infer_seconds) << "s\n";
        return row;
    };

    // Sweep 1: network variants (reference: 29.50/0.8150 w/o CFM, 29.56/0.8173
    // w/o Res, 29.54/0.8164 w/o ImMod, 29.64/0.8195 full; not reproduced here).
    for (const auto variant : run.ablate_variants) {
        cfm::CFMNetConfig cfg = run.model;
        cfg.variant = variant;
        cfg.kind = cfm::ModulationKind::shift;
        const char* note = variant == cfm::NetVariant::no_cfm      ? "ref 29.50/0.8150"
                           : variant == cfm::NetVariant::no_res    ? "ref 29.56/0.8173"
                           : variant == cfm::NetVariant::no_immod  ? "ref 29.54/0.8164"
                                                                   : "ref 29.64/0.8195";
        run_one("variant", to_string(variant), cfg, note);
    }

    // Sweep 2: modulation kinds (reference: 29.64/0.8195 shift, 29.66/0.8199
    // scaling, 29.66/0.8200 affine).
    for (const auto kind : run.ablate_kinds) {
        cfm::CFMNetConfig cfg = run.model;
        cfg.variant = cfm::NetVariant::full;
        cfg.kind = kind;
        const char* note = kind == cfm::ModulationKind::shift   ? "ref 29.64/0.8195"
                           : kind == cfm::ModulationKind::scale ? "ref 29.66/0.8199"
                                                                : "ref 29.66/0.8200";
        run_one("kind", to_string(kind), cfg, note);
    }

    // Sweep 3: shifting operations per block (reference psnr 29.54 / 29.64 /
    // 29.64 / 29.65 and running time 0.1142 / 0.1621 / 0.2228 / 0.2788 s).
    std::vector<std::pair<int, double>> op_times;
    for (const int ops : run.ablate_ops) {
        cfm::CFMNetConfig cfg = run.model;
        cfg.variant = cfm::NetVariant::full;
        cfg.kind = cfm::ModulationKind::shift;
        cfg.num_shifting_ops = ops;
        static const char* notes[4] = {"ref 29.54/0.8162 0.1142s", "ref 29.64/0.8195 0.1621s",
                                       "ref 29.64/0.8196 0.2228s", "ref 29.65/0.8198 0.2788s"};
        const auto row = run_one("shifting_ops", std::to_string(ops), cfg,
                                 notes[std::clamp(ops - 1, 0, 3)]);
        op_times.emplace_back(ops, row.infer_seconds);
    }

    fs::create_directories(run.out_dir);
    const std::string report_path = run.out_dir + "/ablate_report.csv";
    std::ofstream out(report_path, std::ios::trunc);
    out << "sweep,setting,params,train_s,infer_s,psnr,ssim,paper_reference\n";
    for (const auto& r : rows) {
        out << r.sweep << "," << r.setting << "," << r.params << ","
            << cfm::format_metric(r.train_seconds) << "," << cfm::format_metric(r.infer_seconds)
            << "," << cfm::format_metric(r.psnr) << "," << cfm::format_metric(r.ssim) << ","
            << r.paper_note << " (not reproduced at desk scale)\n";
    }

    std::sort(op_times.begin(), op_times.end());
    bool monotone = op_times.size() >= 2;
    for (std::size_t i = 1; i < op_times.size(); ++i) {
        monotone = monotone && op_times[i].second > op_times[i - 1].second;
    }
    if (!op_times.empty()) {
        std::cout << "inference time strictly increasing over shifting ops: "
                  << (monotone ? "yes" : "NO") << "\n";
    }
    std::cout << "report written to " << report_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, int count, std::int64_t size, bool color,
                 std::uint64_t seed) {
    fs::create_directories(out_dir);
    for (int i = 0; i < count; ++i) {
        const cfm::Image img = cfm::synth_image(cfm::CounterRng::derive(seed, static_cast<std::uint64_t>(i)),
                                                color ? 3 : 1, size, size);
        char name[64];
        std::snprintf(name, sizeof name, "synth_%03d.%s", i, color ? "ppm" : "pgm");
        cfm::save_image(img, out_dir + "/" + name);
    }
    std::cout << "wrote " << count << " images to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CFMNet: flexible non-blind Gaussian denoiser with conditional feature modulation"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model from a run configuration");
    std::string train_config, resume_path;
    int stop_after_epochs = -1;
    train_cmd->add_option("--config", train_config, "run configuration file")->required();
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
    train_cmd->add_option("--stop-after-epochs", stop_after_epochs,
                          "interrupt the run after this many epochs (for resume tests)");

    // denoise
    auto* den = app.add_subcommand("denoise", "denoise one image with a trained model");
    std::string den_model, den_input, den_map, den_out, den_ref;
    double den_sigma = -1.0, den_peaks = -1.0;
    den->add_option("--model", den_model, "model file")->required();
    den->add_option("--input", den_input, "noisy input image (PGM/PPM)")->required();
    den->add_option("--output", den_out, "output image path")->required();
    den->add_option("--sigma", den_sigma, "uniform noise level on the 0-255 scale");
    den->add_option("--map", den_map, "noise level map as a PGM (pixel value = sigma)");
    den->add_option("--peaks-sigma", den_peaks, "spatially variant peaks map, peak sigma (0-255)");
    den->add_option("--ref", den_ref, "clean reference; prints PSNR/SSIM when given");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a model over a directory of images");
    std::string ev_model, ev_dir, ev_sigmas = "15,25,50,75", ev_kind = "uniform", ev_out;
    std::uint64_t ev_seed = 1;
    ev->add_option("--model", ev_model, "model file")->required();
    ev->add_option("--testdir", ev_dir, "directory of clean test images")->required();
    ev->add_option("--sigmas", ev_sigmas, "comma-separated sigmas on the 0-255 scale");
    ev->add_option("--map-kind", ev_kind, "uniform | peaks");
    ev->add_option("--out", ev_out, "CSV output path ('-' for stdout)");
    ev->add_option("--seed", ev_seed, "noise synthesis seed");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run the ablation sweeps at a desk-scale budget");
    std::string ab_config;
    ab->add_option("--config", ab_config, "run configuration file")->required();

    // selftest
    auto* st = app.add_subcommand("selftest", "run the invariant suite");
    bool inject_bug = false;
    st->add_flag("--inject-conv-bug", inject_bug,
                 "corrupt the conv weight gradient (negative-control hook)");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate deterministic synthetic images");
    std::string gen_out;
    int gen_count = 8;
    std::int64_t gen_size = 96;
    bool gen_color = false;
    std::uint64_t gen_seed = 7;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "number of images");
    gen->add_option("--size", gen_size, "image side length");
    gen->add_flag("--color", gen_color, "write RGB PPM instead of grayscale PGM");
    gen->add_option("--seed", gen_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (train_cmd->parsed()) {
        return guarded([&] { return cmd_train(train_config, resume_path, stop_after_epochs); });
    }
    if (den->parsed()) {
        return guarded([&] {
            if (den_map.empty() && den_peaks <= 0.0 && den_sigma < 0.0) {
                throw cfm::DomainError("one of --sigma, --map or --peaks-sigma is required");
            }
            return cmd_denoise(den_model, den_input, den_sigma, den_map, den_peaks, den_out,
                               den_ref);
        });
    }
    if (ev->parsed()) {
        return guarded([&] { return cmd_eval(ev_model, ev_dir, ev_sigmas, ev_kind, ev_out, ev_seed); });
    }
    if (ab->parsed()) return guarded([&] { return cmd_ablate(ab_config); });
    if (st->parsed()) {
        return guarded([&] {
            cfm::debug::corrupt_conv_backward() = inject_bug;
            const auto result = cfm::run_selftest(std::cout);
            return result.all_pass ? 0 : kExitSelftest;
        });
    }
    if (gen->parsed()) {
        return guarded([&] { return cmd_gen_data(gen_out, gen_count, gen_size, gen_color, gen_seed); });
    }
    return kExitConfig;
}
