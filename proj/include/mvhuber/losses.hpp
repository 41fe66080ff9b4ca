#pragma once

#include <string>
#include <string_view>

#include "mvhuber/huber_dist.hpp"
#include "mvhuber/spd_param.hpp"

namespace mvhuber {

enum class LossFamily { huber, gauss, laplace, charbonnier };
enum class CovarianceMode { identity, diagonal, full };
enum class Parameterization { nu_form, mu_form };

std::string_view to_string(LossFamily f);
std::string_view to_string(CovarianceMode m);
std::string_view to_string(Parameterization p);
// Throw std::invalid_argument on unknown names.
LossFamily parse_family(std::string_view s);
CovarianceMode parse_mode(std::string_view s);
Parameterization parse_parameterization(std::string_view s);

struct LossConfig {
    LossFamily family = LossFamily::huber;
    CovarianceMode mode = CovarianceMode::full;
    double delta = kDefaultDelta;  // huber only
    double theta = 0.1;
    double eig_tie_tol = 1e-8;
    Parameterization parameterization = Parameterization::nu_form;
    bool include_normalizer = true;

    void validate() const;
    RemapConfig remap() const { return RemapConfig{theta, eig_tie_tol}; }
};

// Per-keypoint raw output width: d for identity mode, d + d(d+1)/2 otherwise.
int raw_width(int d, CovarianceMode mode);

// Network-output analog: `keypoints` consecutive blocks of raw_width(d, mode).
struct RawOutput {
    Vector values;
    int keypoints = 1;
};

// Data term rho(r) of each family: huber h_delta(r), gauss r^2/2,
// laplace r, charbonnier sqrt(r^2 + 1) - 1.
double family_rho(LossFamily f, double r, double delta);
// rho'(r) / r, the IRLS weight; finite at r = 0 for every family.
double family_weight(LossFamily f, double r, double delta);
// log of the integral over R^d of exp(-rho(||x||)).
double family_log_normalizer(LossFamily f, int d, double delta);
// E||X||^2 / d for the standard (nu = 0, A = I) density of each family.
double family_variance_factor(LossFamily f, int d, double delta);

double huber_nll(const Vector& y, const Vector& nu, const SpdMatrix& a, double delta,
                 bool include_normalizer);
double gauss_nll(const Vector& y, const Vector& nu, const SpdMatrix& a, bool include_normalizer);
double laplace_nll(const Vector& y, const Vector& nu, const SpdMatrix& a, bool include_normalizer);
double charbonnier_nll(const Vector& y, const Vector& nu, const SpdMatrix& a,
                       bool include_normalizer);
double family_nll(LossFamily f, const Vector& y, const Vector& nu, const SpdMatrix& a,
                  double delta, bool include_normalizer);

struct ParamGradient {
    Vector d_nu;
    SymMatrix d_a;  // symmetric part of the gradient with respect to A
};

// Gradient of family_nll with respect to (nu, A). With include_det = false
// the -log|A| contribution is left out.
ParamGradient grad_nu_a(LossFamily f, const Vector& y, const Vector& nu, const SpdMatrix& a,
                        double delta, bool include_det = true);

struct LossResult {
    double loss = 0.0;
    Vector grad;  // same layout as RawOutput::values
};

// (nu, A) for keypoint k of a raw output; mu_form raw entries are mapped to
// nu = A mu.
struct KeypointParams {
    Vector nu;
    SpdMatrix a;
};
KeypointParams decode_keypoint(const RawOutput& raw, int d, int k, const LossConfig& cfg);

// Sum over keypoints of the family NLL. Keypoints are visited in ascending
// order. y has length keypoints * d.
LossResult loss_from_raw(const RawOutput& raw, const Vector& y, const LossConfig& cfg);
// Same loss without the gradient.
double loss_value_from_raw(const RawOutput& raw, const Vector& y, const LossConfig& cfg);

struct SegmentEndpoint {
    Vector nu;
    Matrix a;
};

struct ConvexityReport {
    int samples = 0;
    double max_violation = 0.0;  // max over interior points of L(t) - chord/midpoint bound
    bool convex = true;          // max_violation <= 1e-9
};

// Probes (nu, A) -> family NLL along the segment between two endpoints whose
// A has every eigenvalue above cfg.theta (PreconditionError otherwise).
ConvexityReport check_convexity_segment(const LossConfig& cfg, const Vector& y,
                                        const SegmentEndpoint& e1, const SegmentEndpoint& e2,
                                        int samples, bool include_data_term = true);

}  // namespace mvhuber
