#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvhuber/fusion.hpp"
#include "mvhuber/huber_dist.hpp"
#include "mvhuber/losses.hpp"

namespace mvhuber {

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class NoiseFamily { gauss, huber };

std::string_view to_string(NoiseFamily f);
NoiseFamily parse_noise_family(std::string_view s);

struct SyntheticConfig {
    int n_train = 1000;
    int n_test = 1000;
    int input_dim = 4;
    int keypoints = 2;
    int dim = 2;
    NoiseFamily noise = NoiseFamily::huber;
    // Principal standard-deviation scale of the noise precision. 0 disables noise.
    double noise_scale = 0.3;
    // Ratio between the largest and smallest principal scale of the noise.
    double noise_anisotropy = 3.0;
    double noise_delta = kDefaultDelta;
    double outlier_fraction = 0.1;
    double outlier_range = 10.0;
    double weight_scale = 1.0;
    double scale_min = 0.5;  // per-sample normalization scale ~ U[scale_min, scale_max]
    double scale_max = 1.5;

    void validate() const;
    int target_width() const { return keypoints * dim; }
};

struct SyntheticDataset {
    SyntheticConfig config;
    std::uint64_t seed = 0;
    Matrix inputs;          // n x input_dim, rows [train..., test...]
    Matrix targets;         // n x (keypoints * dim), noisy and contaminated
    Matrix clean_targets;   // W_true x
    Vector normalization_scale;
    Matrix w_true;          // (keypoints * dim) x input_dim
    std::vector<HuberParams> noise;  // centred noise distribution per keypoint (huber noise)
    std::vector<Matrix> noise_precision;  // Lambda per keypoint
    std::vector<std::uint8_t> is_outlier;  // per (sample, keypoint), row-major

    int size() const { return static_cast<int>(inputs.rows()); }
    int n_train() const { return config.n_train; }
    int n_test() const { return config.n_test; }
};

// Deterministic in (config, seed): regenerating yields bit-identical data.
SyntheticDataset generate(const SyntheticConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Whitening and affine frames
// ---------------------------------------------------------------------------

// y = linear * z + offset
struct AffineMap {
    Matrix linear;
    Vector offset;
};

// Distribution of y = map(z) when z follows p. The result is again an L2
// Huber distribution; A' is the SPD polar factor of A L^{-1}.
HuberParams transform(const HuberParams& p, const AffineMap& map);

// Per-keypoint z = M (y - m) with M = Cov^{-1/2}.
class WhiteningTransform {
public:
    WhiteningTransform() = default;
    WhiteningTransform(std::vector<Vector> shift, std::vector<Matrix> linear);

    int keypoints() const { return static_cast<int>(shift_.size()); }
    int dim() const { return shift_.empty() ? 0 : static_cast<int>(shift_.front().size()); }
    const Vector& shift(int k) const { return shift_[k]; }
    const Matrix& linear(int k) const { return linear_[k]; }
    const Matrix& inverse_linear(int k) const { return inverse_[k]; }
    // Map from whitened to original coordinates for keypoint k.
    AffineMap unwhitening_map(int k) const;
    double log_abs_det(int k) const;

    Vector apply(const Vector& y) const;
    Vector invert(const Vector& z) const;
    Matrix apply_rows(const Matrix& y) const;
    Matrix invert_rows(const Matrix& z) const;

private:
    std::vector<Vector> shift_;
    std::vector<Matrix> linear_;
    std::vector<Matrix> inverse_;
};

// Rows of `targets` are samples of keypoints * d coordinates. Throws
// std::domain_error for fewer than d + 1 rows or a singular covariance.
WhiteningTransform whitening_fit(const Matrix& targets, int keypoints);

// ---------------------------------------------------------------------------
// Metrics and calibration
// ---------------------------------------------------------------------------

struct Metrics {
    double nme = 0.0;
    double pckh = 0.0;
};

// Rows are samples; columns keypoints * dim coordinates.
Metrics evaluate_metrics(const Matrix& predictions, const Matrix& targets,
                         const Vector& normalization_scale, int dim, double threshold = 0.5);

struct CalibrationBin {
    double expected = 0.0;   // RMS of predicted expected errors in the bin
    double empirical = 0.0;  // RMS of observed error norms in the bin
    int count = 0;
};

// sqrt(alpha(delta, d) tr(Lambda^{-1})) with Lambda = A^2.
double expected_error(const HuberParams& p);

// Sorts samples by expected error (stable) and groups consecutive runs of
// bin_size; the last bin holds the remainder.
std::vector<CalibrationBin> calibration_curve(const std::vector<HuberParams>& predicted,
                                              const std::vector<Vector>& errors, int bin_size);
std::vector<CalibrationBin> calibration_curve(const std::vector<double>& expected,
                                              const std::vector<double>& error_norms, int bin_size);

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

enum class Schedule { constant, cosine };

std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view s);

struct OptimizerConfig {
    int steps = 2000;
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    Schedule schedule = Schedule::cosine;
    int checkpoints = 4;  // held-out NLL evaluations spread over the run
    int calibration_bin_size = 100;

    void validate() const;
    double rate_at(int step) const;
};

// Adam on a flat parameter vector.
class AdamState {
public:
    AdamState(Eigen::Index size, const OptimizerConfig& cfg);
    void step(Vector& params, const Vector& grad);
    int iteration() const { return t_; }

private:
    OptimizerConfig cfg_;
    Vector m_;
    Vector v_;
    int t_ = 0;
};

struct Checkpoint {
    int step = 0;
    double train_loss = 0.0;
    double test_nll = 0.0;
};

struct FitReport {
    LossConfig loss;
    OptimizerConfig optimizer;
    std::vector<double> loss_trace;
    std::vector<Checkpoint> checkpoints;
    Matrix w;  // (keypoints * raw_width) x (input_dim + 1), last column is the bias
    bool diverged = false;
    std::string failure;
    double test_nll = 0.0;           // mean per test sample, original units, normalizers included
    double test_mean_error = 0.0;    // mean ||mu - y|| over test samples and keypoints
    double median_param_error = 0.0; // median ||mu - W_true x|| (distance to the generating map)
    double nme = 0.0;
    double pckh = 0.0;
    std::vector<CalibrationBin> calibration;
};

// Per-sample predicted distributions (original coordinates) from a fitted head.
struct Prediction {
    std::vector<HuberParams> params;  // keypoints entries
    Matrix means;                     // keypoints x d
};

class LinearHead {
public:
    LinearHead(Matrix w, LossConfig loss, WhiteningTransform whitening, int dim);

    Prediction predict(const Vector& x) const;
    // Raw output in whitened space.
    RawOutput raw(const Vector& x) const;
    const Matrix& weights() const { return w_; }
    const WhiteningTransform& whitening() const { return whitening_; }

private:
    Matrix w_;
    LossConfig loss_;
    WhiteningTransform whitening_;
    int dim_;
};

FitReport fit(const SyntheticDataset& data, const LossConfig& loss, const OptimizerConfig& opt);

// Head reconstructed from a report (for predictions after fit()).
LinearHead head_from_report(const SyntheticDataset& data, const FitReport& report);

// Direct maximum-likelihood fit of one Huber distribution to samples (rows)
// through the SPD parameterization. Throws std::domain_error on degenerate
// samples (fewer than d + 1 rows or singular covariance).
struct MleResult {
    HuberParams params;
    double nll = 0.0;  // mean per sample, normalizer included
    int steps = 0;
};
MleResult fit_mle(const Matrix& samples, double delta, double theta, const OptimizerConfig& opt);

// ---------------------------------------------------------------------------
// Test-time augmentation
// ---------------------------------------------------------------------------

enum class TtaMode { probabilistic, mean };

// mirror_map takes mirrored-frame coordinates to the original frame.
Vector tta_fuse(const HuberParams& original, const HuberParams& mirrored, const AffineMap& mirror_map,
                TtaMode mode);

}  // namespace mvhuber
