#include "mvhuber/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "mvhuber/errors.hpp"

namespace mvhuber {

namespace {

constexpr double kPi = 3.14159265358979323846;

Matrix random_rotation(int d, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    Matrix g(d, d);
    for (int j = 0; j < d; ++j)
        for (int i = 0; i < d; ++i) g(i, j) = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    // Fix column signs so Q is a deterministic function of g.
    const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < d; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

}  // namespace

std::string_view to_string(NoiseFamily f) { return f == NoiseFamily::gauss ? "gauss" : "huber"; }

NoiseFamily parse_noise_family(std::string_view s) {
    if (s == "gauss") return NoiseFamily::gauss;
    if (s == "huber") return NoiseFamily::huber;
    throw std::invalid_argument("unknown noise family '" + std::string(s) + "'");
}

void SyntheticConfig::validate() const {
    if (n_train < 1 || n_test < 0) throw std::domain_error("SyntheticConfig: need n_train >= 1, n_test >= 0");
    if (input_dim < 1 || keypoints < 1 || dim < 1 || dim > kMaxEigenDim)
        throw std::domain_error("SyntheticConfig: invalid input_dim / keypoints / dim");
    if (!(noise_scale >= 0.0) || !(noise_anisotropy >= 1.0))
        throw std::domain_error("SyntheticConfig: noise_scale >= 0 and noise_anisotropy >= 1 required");
    if (!(noise_delta > 0.0)) throw std::domain_error("SyntheticConfig: noise_delta must be positive");
    if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0))
        throw std::domain_error("SyntheticConfig: outlier_fraction must lie in [0, 1)");
    if (!(outlier_range > 0.0)) throw std::domain_error("SyntheticConfig: outlier_range must be positive");
    if (!(weight_scale >= 0.0)) throw std::domain_error("SyntheticConfig: weight_scale must be >= 0");
    if (!(scale_min > 0.0 && scale_max >= scale_min))
        throw std::domain_error("SyntheticConfig: need 0 < scale_min <= scale_max");
}

SyntheticDataset generate(const SyntheticConfig& config, std::uint64_t seed) {
    config.validate();
    const int n = config.n_train + config.n_test;
    const int p = config.input_dim;
    const int k_count = config.keypoints;
    const int d = config.dim;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    SyntheticDataset data;
    data.config = config;
    data.seed = seed;

    data.w_true.resize(k_count * d, p);
    for (int j = 0; j < p; ++j)
        for (int i = 0; i < k_count * d; ++i) data.w_true(i, j) = config.weight_scale * normal(rng);

    std::vector<Matrix> noise_sqrt_cov;
    for (int k = 0; k < k_count; ++k) {
        const Matrix q = random_rotation(d, rng);
        Vector scales(d);
        for (int j = 0; j < d; ++j) {
            const double frac = d == 1 ? 0.0 : static_cast<double>(j) / (d - 1);
            scales(j) = config.noise_scale * std::pow(config.noise_anisotropy, -frac);
        }
        noise_sqrt_cov.push_back(q * scales.asDiagonal() * q.transpose());
        if (config.noise_scale > 0.0) {
            const Matrix precision = q * scales.cwiseAbs2().cwiseInverse().asDiagonal() * q.transpose();
            data.noise_precision.push_back(SymMatrix::symmetrized(precision).matrix());
            const Matrix a = q * scales.cwiseInverse().asDiagonal() * q.transpose();
            data.noise.push_back(HuberParams{Vector::Zero(d), SpdMatrix(SymMatrix::symmetrized(a)),
                                             config.noise_delta});
        }
    }

    data.inputs.resize(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) data.inputs(i, j) = normal(rng);
    data.clean_targets = data.inputs * data.w_true.transpose();
    data.targets = data.clean_targets;

    if (config.noise_scale > 0.0) {
        for (int k = 0; k < k_count; ++k) {
            Matrix noise;
            if (config.noise == NoiseFamily::huber) {
                noise = sample(data.noise[k], n, rng());
            } else {
                noise.resize(n, d);
                for (int i = 0; i < n; ++i) {
                    Vector z(d);
                    for (int j = 0; j < d; ++j) z(j) = normal(rng);
                    noise.row(i) = (noise_sqrt_cov[k] * z).transpose();
                }
            }
            data.targets.middleCols(k * d, d) += noise;
        }
    }

    data.is_outlier.assign(static_cast<std::size_t>(n) * k_count, 0);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < k_count; ++k) {
            if (unit(rng) < config.outlier_fraction) {
                data.is_outlier[static_cast<std::size_t>(i) * k_count + k] = 1;
                for (int j = 0; j < d; ++j)
                    data.targets(i, k * d + j) = config.outlier_range * (2.0 * unit(rng) - 1.0);
            }
        }
    }

    data.normalization_scale.resize(n);
    for (int i = 0; i < n; ++i)
        data.normalization_scale(i) = config.scale_min + (config.scale_max - config.scale_min) * unit(rng);
    return data;
}

HuberParams transform(const HuberParams& p, const AffineMap& map) {
    p.validate();
    const int d = p.dim();
    if (map.linear.rows() != d || map.linear.cols() != d || map.offset.size() != d)
        throw std::domain_error("transform: affine map dimension mismatch");
    const Eigen::FullPivLU<Matrix> lu(map.linear);
    if (!lu.isInvertible()) throw std::domain_error("transform: affine map is singular");
    const Matrix g = p.a.matrix() * lu.inverse();
    const SpdMatrix gram(SymMatrix::symmetrized(g.transpose() * g));
    const EigenDecomposition& eig = gram.eigen();
    SpdMatrix s = SpdMatrix::from_eigen({eig.vectors, eig.values.cwiseSqrt()});
    const Vector nu0 = g * map.offset + p.nu;
    Vector nu = s.solve(g.transpose() * nu0);
    return HuberParams{std::move(nu), std::move(s), p.delta};
}

WhiteningTransform::WhiteningTransform(std::vector<Vector> shift, std::vector<Matrix> linear)
    : shift_(std::move(shift)), linear_(std::move(linear)) {
    if (shift_.size() != linear_.size()) throw std::domain_error("WhiteningTransform: size mismatch");
    for (const Matrix& m : linear_) {
        const Eigen::FullPivLU<Matrix> lu(m);
        if (!lu.isInvertible()) throw std::domain_error("WhiteningTransform: singular linear map");
        inverse_.push_back(lu.inverse());
    }
}

AffineMap WhiteningTransform::unwhitening_map(int k) const { return AffineMap{inverse_[k], shift_[k]}; }

double WhiteningTransform::log_abs_det(int k) const {
    return std::log(std::abs(linear_[k].determinant()));
}

Vector WhiteningTransform::apply(const Vector& y) const {
    const int d = dim();
    if (y.size() != keypoints() * d) throw std::domain_error("WhiteningTransform: length mismatch");
    Vector z(y.size());
    for (int k = 0; k < keypoints(); ++k) z.segment(k * d, d) = linear_[k] * (y.segment(k * d, d) - shift_[k]);
    return z;
}

Vector WhiteningTransform::invert(const Vector& z) const {
    const int d = dim();
    if (z.size() != keypoints() * d) throw std::domain_error("WhiteningTransform: length mismatch");
    Vector y(z.size());
    for (int k = 0; k < keypoints(); ++k) y.segment(k * d, d) = inverse_[k] * z.segment(k * d, d) + shift_[k];
    return y;
}

Matrix WhiteningTransform::apply_rows(const Matrix& y) const {
    Matrix z(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) z.row(i) = apply(y.row(i).transpose()).transpose();
    return z;
}

Matrix WhiteningTransform::invert_rows(const Matrix& z) const {
    Matrix y(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) y.row(i) = invert(z.row(i).transpose()).transpose();
    return y;
}

WhiteningTransform whitening_fit(const Matrix& targets, int keypoints) {
    if (keypoints < 1 || targets.cols() % keypoints != 0 || targets.cols() == 0)
        throw std::domain_error("whitening_fit: column count not divisible by keypoints");
    const int d = static_cast<int>(targets.cols() / keypoints);
    if (targets.rows() < d + 1) throw std::domain_error("whitening_fit: need at least d + 1 samples");
    std::vector<Vector> shift;
    std::vector<Matrix> linear;
    for (int k = 0; k < keypoints; ++k) {
        const Matrix block = targets.middleCols(k * d, d);
        const Vector mean = block.colwise().mean().transpose();
        const Matrix centred = block.rowwise() - mean.transpose();
        const Matrix cov = centred.transpose() * centred / static_cast<double>(block.rows());
        const EigenDecomposition eig = sym_eig(SymMatrix::symmetrized(cov));
        if (!(eig.values.minCoeff() > 1e-12 * std::max(eig.values.maxCoeff(), 1e-300)))
            throw std::domain_error("whitening_fit: singular target covariance");
        shift.push_back(mean);
        linear.push_back(eig.reconstruct(eig.values.cwiseSqrt().cwiseInverse()));
    }
    return WhiteningTransform(std::move(shift), std::move(linear));
}

Metrics evaluate_metrics(const Matrix& predictions, const Matrix& targets,
                         const Vector& normalization_scale, int dim, double threshold) {
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols() ||
        normalization_scale.size() != targets.rows())
        throw std::domain_error("evaluate_metrics: shape mismatch");
    if (dim < 1 || targets.cols() % dim != 0) throw std::domain_error("evaluate_metrics: bad dimension");
    if (targets.rows() == 0) throw std::domain_error("evaluate_metrics: empty input");
    if (!(normalization_scale.minCoeff() > 0.0))
        throw std::domain_error("evaluate_metrics: normalization scale must be positive");
    const Eigen::Index keypoints = targets.cols() / dim;
    double err_sum = 0.0;
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
        for (Eigen::Index k = 0; k < keypoints; ++k) {
            const double e = (predictions.row(i).segment(k * dim, dim) - targets.row(i).segment(k * dim, dim)).norm();
            err_sum += e / normalization_scale(i);
            if (e <= threshold * normalization_scale(i)) ++correct;
        }
    }
    const double count = static_cast<double>(targets.rows() * keypoints);
    return Metrics{err_sum / count, static_cast<double>(correct) / count};
}

double expected_error(const HuberParams& p) {
    p.validate();
    const double trace_cov = p.a.eigen().values.cwiseAbs2().cwiseInverse().sum();
    return std::sqrt(variance_factor(p.dim(), p.delta) * trace_cov);
}

std::vector<CalibrationBin> calibration_curve(const std::vector<double>& expected,
                                              const std::vector<double>& error_norms, int bin_size) {
    if (expected.empty()) throw std::domain_error("calibration_curve: empty input");
    if (expected.size() != error_norms.size()) throw std::domain_error("calibration_curve: length mismatch");
    if (bin_size < 1) throw std::domain_error("calibration_curve: bin_size must be >= 1");
    std::vector<std::size_t> order(expected.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return expected[i] < expected[j]; });
    std::vector<CalibrationBin> bins;
    for (std::size_t start = 0; start < order.size(); start += bin_size) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(bin_size));
        double e2 = 0.0;
        double o2 = 0.0;
        for (std::size_t i = start; i < end; ++i) {
            e2 += expected[order[i]] * expected[order[i]];
            o2 += error_norms[order[i]] * error_norms[order[i]];
        }
        const double count = static_cast<double>(end - start);
        bins.push_back(CalibrationBin{std::sqrt(e2 / count), std::sqrt(o2 / count), static_cast<int>(end - start)});
    }
    return bins;
}

std::vector<CalibrationBin> calibration_curve(const std::vector<HuberParams>& predicted,
                                              const std::vector<Vector>& errors, int bin_size) {
    if (predicted.size() != errors.size()) throw std::domain_error("calibration_curve: length mismatch");
    std::vector<double> expected;
    std::vector<double> norms;
    expected.reserve(predicted.size());
    norms.reserve(errors.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (errors[i].size() != predicted[i].dim()) throw std::domain_error("calibration_curve: dimension mismatch");
        expected.push_back(expected_error(predicted[i]));
        norms.push_back(errors[i].norm());
    }
    return calibration_curve(expected, norms, bin_size);
}

std::string_view to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

Schedule parse_schedule(std::string_view s) {
    if (s == "constant") return Schedule::constant;
    if (s == "cosine") return Schedule::cosine;
    throw std::invalid_argument("unknown schedule '" + std::string(s) + "'");
}

void OptimizerConfig::validate() const {
    if (steps < 0) throw std::domain_error("OptimizerConfig: steps must be >= 0");
    if (!(learning_rate > 0.0)) throw std::domain_error("OptimizerConfig: learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw std::domain_error("OptimizerConfig: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw std::domain_error("OptimizerConfig: epsilon must be positive");
    if (checkpoints < 0) throw std::domain_error("OptimizerConfig: checkpoints must be >= 0");
    if (calibration_bin_size < 1) throw std::domain_error("OptimizerConfig: calibration_bin_size must be >= 1");
}

double OptimizerConfig::rate_at(int step) const {
    if (schedule == Schedule::constant || steps == 0) return learning_rate;
    return 0.5 * learning_rate * (1.0 + std::cos(kPi * static_cast<double>(step) / steps));
}

AdamState::AdamState(Eigen::Index size, const OptimizerConfig& cfg)
    : cfg_(cfg), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

void AdamState::step(Vector& params, const Vector& grad) {
    const double rate = cfg_.rate_at(t_);
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    params.array() -= rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
}

LinearHead::LinearHead(Matrix w, LossConfig loss, WhiteningTransform whitening, int dim)
    : w_(std::move(w)), loss_(loss), whitening_(std::move(whitening)), dim_(dim) {}

RawOutput LinearHead::raw(const Vector& x) const {
    Vector xt(x.size() + 1);
    xt << x, 1.0;
    return RawOutput{w_ * xt, whitening_.keypoints()};
}

Prediction LinearHead::predict(const Vector& x) const {
    const RawOutput r = raw(x);
    Prediction out;
    out.means.resize(r.keypoints, dim_);
    for (int k = 0; k < r.keypoints; ++k) {
        KeypointParams kp = decode_keypoint(r, dim_, k, loss_);
        const HuberParams white{std::move(kp.nu), std::move(kp.a), loss_.delta};
        HuberParams orig = transform(white, whitening_.unwhitening_map(k));
        out.means.row(k) = orig.mean().transpose();
        out.params.push_back(std::move(orig));
    }
    return out;
}

namespace {

Matrix with_bias(const Matrix& inputs) {
    Matrix x(inputs.rows(), inputs.cols() + 1);
    x << inputs, Vector::Ones(inputs.rows());
    return x;
}

struct TestEvaluation {
    double nll = 0.0;
    double mean_error = 0.0;
    double median_param_error = 0.0;
    Metrics metrics;
    std::vector<double> expected;
    std::vector<double> error_norms;
};

TestEvaluation evaluate_test(const SyntheticDataset& data, const LinearHead& head, const LossConfig& loss) {
    const int d = data.config.dim;
    const int k_count = data.config.keypoints;
    const int start = data.n_train();
    const int n_test = data.n_test();
    TestEvaluation ev;
    if (n_test == 0) return ev;
    const WhiteningTransform& wt = head.whitening();
    const double var_factor = family_variance_factor(loss.family, d, loss.delta);
    Matrix preds(n_test, k_count * d);
    std::vector<double> param_errors;
    double nll = 0.0;
    double err = 0.0;
    for (int i = 0; i < n_test; ++i) {
        const Vector x = data.inputs.row(start + i).transpose();
        const Vector y = data.targets.row(start + i).transpose();
        const Vector clean = data.clean_targets.row(start + i).transpose();
        const RawOutput raw = head.raw(x);
        const Vector z = wt.apply(y);
        const Prediction pred = head.predict(x);
        for (int k = 0; k < k_count; ++k) {
            const KeypointParams kp = decode_keypoint(raw, d, k, loss);
            nll += family_nll(loss.family, z.segment(k * d, d), kp.nu, kp.a, loss.delta, true) - wt.log_abs_det(k);
            const Vector mu = pred.means.row(k).transpose();
            const double e = (mu - y.segment(k * d, d)).norm();
            err += e;
            param_errors.push_back((mu - clean.segment(k * d, d)).norm());
            preds.row(i).segment(k * d, d) = mu.transpose();
            const double trace_cov = pred.params[k].a.eigen().values.cwiseAbs2().cwiseInverse().sum();
            ev.expected.push_back(std::sqrt(var_factor * trace_cov));
            ev.error_norms.push_back(e);
        }
    }
    ev.nll = nll / n_test;
    ev.mean_error = err / (static_cast<double>(n_test) * k_count);
    auto mid = param_errors.begin() + static_cast<std::ptrdiff_t>(param_errors.size() / 2);
    std::nth_element(param_errors.begin(), mid, param_errors.end());
    double median = *mid;
    if (param_errors.size() % 2 == 0) median = 0.5 * (median + *std::max_element(param_errors.begin(), mid));
    ev.median_param_error = median;
    ev.metrics = evaluate_metrics(preds, data.targets.bottomRows(n_test), data.normalization_scale.tail(n_test), d);
    return ev;
}

Matrix initial_weights(int keypoints, int d, int inputs_with_bias, const LossConfig& loss, double diag_init) {
    const int width = raw_width(d, loss.mode);
    Matrix w = Matrix::Zero(static_cast<Eigen::Index>(keypoints) * width, inputs_with_bias);
    if (loss.mode == CovarianceMode::identity) return w;
    const Vector unit = sym_to_vec(SymMatrix(diag_init * Matrix::Identity(d, d)));
    for (int k = 0; k < keypoints; ++k)
        w.col(inputs_with_bias - 1).segment(k * width + d, triangular(d)) = unit;
    return w;
}

}  // namespace

FitReport fit(const SyntheticDataset& data, const LossConfig& loss, const OptimizerConfig& opt) {
    loss.validate();
    opt.validate();
    const int d = data.config.dim;
    const int k_count = data.config.keypoints;
    const int n_train = data.n_train();

    FitReport report;
    report.loss = loss;
    report.optimizer = opt;

    const WhiteningTransform wt = whitening_fit(data.targets.topRows(n_train), k_count);
    const Matrix z = wt.apply_rows(data.targets.topRows(n_train));
    const Matrix x = with_bias(data.inputs.topRows(n_train));

    LossConfig train_cfg = loss;
    train_cfg.include_normalizer = false;
    const double normalizer = loss.include_normalizer ? k_count * family_log_normalizer(loss.family, d, loss.delta) : 0.0;

    Matrix w = initial_weights(k_count, d, static_cast<int>(x.cols()), loss, 1.0);
    Vector params = Eigen::Map<Vector>(w.data(), w.size());
    AdamState adam(params.size(), opt);

    std::vector<int> checkpoint_steps;
    for (int c = 1; c <= opt.checkpoints; ++c) checkpoint_steps.push_back(opt.steps * c / opt.checkpoints);

    auto evaluate_train = [&](const Matrix& weights, Matrix* grad) {
        double total = 0.0;
        if (grad) grad->setZero(weights.rows(), weights.cols());
        for (int i = 0; i < n_train; ++i) {
            const RawOutput raw{weights * x.row(i).transpose(), k_count};
            const Vector zi = z.row(i).transpose();
            if (grad) {
                const LossResult r = loss_from_raw(raw, zi, train_cfg);
                total += r.loss;
                grad->noalias() += r.grad * x.row(i);
            } else {
                total += loss_value_from_raw(raw, zi, train_cfg);
            }
        }
        if (grad) *grad /= n_train;
        return total / n_train + normalizer;
    };

    Matrix grad;
    try {
        for (int step = 0; step <= opt.steps; ++step) {
            const Matrix current = Eigen::Map<const Matrix>(params.data(), w.rows(), w.cols());
            const bool last = step == opt.steps;
            const double value = evaluate_train(current, last ? nullptr : &grad);
            report.loss_trace.push_back(value);
            if (!std::isfinite(value) || (!last && !grad.allFinite())) {
                report.diverged = true;
                report.failure = "non-finite training loss at step " + std::to_string(step);
                break;
            }
            if (std::find(checkpoint_steps.begin(), checkpoint_steps.end(), step) != checkpoint_steps.end()) {
                const LinearHead head(current, loss, wt, d);
                report.checkpoints.push_back(Checkpoint{step, value, evaluate_test(data, head, loss).nll});
            }
            if (last) break;
            adam.step(params, Eigen::Map<const Vector>(grad.data(), grad.size()));
        }
    } catch (const std::range_error& e) {
        report.diverged = true;
        report.failure = e.what();
    } catch (const NumericError& e) {
        report.diverged = true;
        report.failure = e.what();
    } catch (const std::domain_error& e) {
        // inputs were validated above, so this is a non-finite parameter
        report.diverged = true;
        report.failure = e.what();
    }

    report.w = Eigen::Map<const Matrix>(params.data(), w.rows(), w.cols());
    if (report.diverged) return report;

    const LinearHead head(report.w, loss, wt, d);
    const TestEvaluation ev = evaluate_test(data, head, loss);
    report.test_nll = ev.nll;
    report.test_mean_error = ev.mean_error;
    report.median_param_error = ev.median_param_error;
    report.nme = ev.metrics.nme;
    report.pckh = ev.metrics.pckh;
    if (!ev.expected.empty()) report.calibration = calibration_curve(ev.expected, ev.error_norms, opt.calibration_bin_size);
    return report;
}

LinearHead head_from_report(const SyntheticDataset& data, const FitReport& report) {
    const WhiteningTransform wt = whitening_fit(data.targets.topRows(data.n_train()), data.config.keypoints);
    return LinearHead(report.w, report.loss, wt, data.config.dim);
}

MleResult fit_mle(const Matrix& samples, double delta, double theta, const OptimizerConfig& opt) {
    opt.validate();
    const int d = static_cast<int>(samples.cols());
    if (d < 1 || d > kMaxEigenDim) throw std::domain_error("fit_mle: unsupported dimension");
    if (samples.rows() < d + 1) throw std::domain_error("fit_mle: need at least d + 1 samples");
    if (!samples.allFinite()) throw std::domain_error("fit_mle: non-finite sample");
    const WhiteningTransform wt = whitening_fit(samples, 1);
    const Matrix z = wt.apply_rows(samples);
    const int n = static_cast<int>(samples.rows());

    LossConfig cfg;
    cfg.family = LossFamily::huber;
    cfg.mode = CovarianceMode::full;
    cfg.delta = delta;
    cfg.theta = theta;
    cfg.include_normalizer = false;
    cfg.validate();

    // Whitened data has covariance I = alpha Lambda^{-1}, so A starts at sqrt(alpha) I.
    Vector params(raw_width(d, cfg.mode));
    params.head(d).setZero();
    params.tail(triangular(d)) = sym_to_vec(SymMatrix(std::sqrt(variance_factor(d, delta)) * Matrix::Identity(d, d)));

    // The parameters are shared by every sample, so the per-sample (nu, A)
    // gradients are averaged first and pushed through the remap once.
    const RemapConfig remap = cfg.remap();
    auto data_term = [&](const Vector& p, Vector* grad) {
        const SpdConstruction c = build_spd(Vector(p.tail(triangular(d))), remap);
        const Vector nu = p.head(d);
        const Matrix r = (z * c.a.matrix()).rowwise() - nu.transpose();
        const Vector norms = r.rowwise().norm();
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += huber_fn(norms(i), delta);
        if (grad) {
            const Vector w = norms.unaryExpr([delta](double x) { return x <= delta ? 1.0 : delta / x; });
            const Matrix wr = r.array().colwise() * w.array();
            const Vector d_nu = -wr.colwise().sum().transpose() / n;
            const Matrix d_a = SymMatrix::symmetrized(wr.transpose() * z / n).matrix();
            const Matrix d_b = backward_through_remap(c.eig, d_a, remap).matrix() - log_det_backward(c.eig, remap).matrix();
            grad->head(d) = d_nu;
            grad->tail(triangular(d)) = sym_to_vec(SymMatrix::symmetrized(d_b));
        }
        return total / n - c.a.log_det();
    };

    AdamState adam(params.size(), opt);
    Vector grad(params.size());
    for (int step = 0; step < opt.steps; ++step) {
        data_term(params, &grad);
        if (!grad.allFinite()) throw NumericError("fit_mle: non-finite gradient");
        adam.step(params, grad);
    }
    const double nll = data_term(params, nullptr) + log_normalizing_constant(d, delta) - wt.log_abs_det(0);

    KeypointParams kp = decode_keypoint(RawOutput{params, 1}, d, 0, cfg);
    HuberParams white{std::move(kp.nu), std::move(kp.a), delta};
    return MleResult{transform(white, wt.unwhitening_map(0)), nll, opt.steps};
}

Vector tta_fuse(const HuberParams& original, const HuberParams& mirrored, const AffineMap& mirror_map,
                TtaMode mode) {
    const HuberParams mapped = transform(mirrored, mirror_map);
    if (mapped.delta != original.delta || mapped.dim() != original.dim())
        throw std::domain_error("tta_fuse: predictions differ in delta or dimension");
    if (mode == TtaMode::mean) return 0.5 * (original.mean() + mapped.mean());
    FusionProblem problem;
    problem.estimates = {original, mapped};
    return fuse(problem).y_star;
}

}  // namespace mvhuber
