#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace mvhuber::cli {

struct GradcheckOptions {
    std::uint64_t seed = 0;
    int trials = 200;         // per loss family, and per SPD-backward regime
    bool inject_fault = false;  // perturbs the analytic gradients (harness self-test)
    double tolerance = 1e-5;
    double degenerate_tolerance = 1e-4;
};

struct GradcheckReport {
    std::map<std::string, double> worst_family;  // loss family -> max relative error
    double worst_backward = 0.0;             // random spectra
    double worst_backward_degenerate = 0.0;  // eigenvalue gaps in [1e-12, 1e-6]
    double worst_log_det = 0.0;
    int configurations = 0;
    bool passed = false;
};

// Central finite differences (h = 1e-6) against loss_from_raw and
// backward_through_remap / log_det_backward. Relative error is
// max |analytic - fd| / max(1, max |fd|).
GradcheckReport run_gradcheck(const GradcheckOptions& opt);

}  // namespace mvhuber::cli
