#pragma once

#include <string>
#include <vector>

#include "cfm/net.hpp"
#include "cfm/optim.hpp"

namespace cfm {

// Plain-text key=value run configuration ('#' comments, UTF-8). Unknown keys
// are rejected; every value is validated against its typed range.
// parse_run_config(serialize_run_config(c)) == c.
struct RunConfig {
    CFMNetConfig model;
    TrainConfig train;

    std::string train_dir;
    std::string val_dir;
    std::string out_dir = "runs/out";

    // ablation sweep selection
    std::vector<NetVariant> ablate_variants{NetVariant::full, NetVariant::no_cfm,
                                            NetVariant::no_res, NetVariant::no_immod};
    std::vector<ModulationKind> ablate_kinds{ModulationKind::shift, ModulationKind::scale,
                                             ModulationKind::affine};
    std::vector<int> ablate_ops{1, 2, 3, 4};
    int ablate_epochs = 1;

    bool operator==(const RunConfig& o) const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& config);

}  // namespace cfm
