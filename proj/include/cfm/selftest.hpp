#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace cfm {

struct SelftestResult {
    std::vector<std::pair<std::string, bool>> checks;
    bool all_pass = true;
};

// Runs the full invariant suite (gradient checks in high precision, the
// input-concatenation equivalence, norm fusion, residual identity and
// locality, noise statistics) and prints one machine-readable line per
// check: "ok <name>" or "FAIL <name> <detail>".
SelftestResult run_selftest(std::ostream& out);

}  // namespace cfm
