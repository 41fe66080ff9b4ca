#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "mvhuber/errors.hpp"
#include "mvhuber/io.hpp"

#ifndef MVHUBER_VERSION
#define MVHUBER_VERSION "0.0.0"
#endif

namespace mvhuber::cli {

namespace {

using io::json;

constexpr const char* kExpectedErrorLabel = "rms: sqrt(alpha * tr(Lambda^-1)) per sample; bins report RMS values";

json header(const std::string& command, std::optional<std::uint64_t> seed, json config) {
    json h;
    h["program"] = "mvhuber";
    h["version"] = MVHUBER_VERSION;
    h["command"] = command;
    h["seed"] = seed ? json(*seed) : json(nullptr);
    h["config"] = std::move(config);
    return h;
}

json document(json head, json result) {
    json doc;
    doc["header"] = std::move(head);
    doc["result"] = std::move(result);
    return doc;
}

std::ofstream open_output(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    return f;
}

void write_json_file(const std::string& path, const json& doc) { open_output(path) << doc.dump(2) << "\n"; }

// CSV cannot carry the configuration, so it goes to a sidecar next to it.
void write_csv_file(const std::string& path, const json& head, const std::vector<std::string>& columns,
                    const Matrix& values) {
    auto f = open_output(path);
    io::write_csv(f, columns, values);
    write_json_file(path + ".meta.json", json{{"header", head}, {"file", path}});
}

void write_calibration_file(const std::string& path, const json& head, const std::vector<CalibrationBin>& bins) {
    auto f = open_output(path);
    io::write_calibration_csv(f, bins);
    write_json_file(path + ".meta.json", json{{"header", head}, {"file", path}});
}

HuberParams read_distribution(const std::string& path) {
    return io::distribution_from_json(io::read_json_file(path));
}

// ---------------------------------------------------------------------------

struct ConstantsArgs {
    int d = 0;
    double delta = 0.0;
};

void cmd_constants(const ConstantsArgs& a, std::ostream& out) {
    const json head = header("constants", std::nullopt, json{{"d", a.d}, {"delta", a.delta}});
    json r;
    r["log_c_d"] = log_normalizing_constant(a.d, a.delta);
    try {
        r["c_d"] = normalizing_constant(a.d, a.delta);
    } catch (const std::range_error&) {
        r["c_d"] = nullptr;  // not representable; see log_c_d
    }
    r["alpha"] = variance_factor(a.d, a.delta);
    out << document(head, r).dump(2) << "\n";
}

struct SampleArgs {
    std::string params;
    int n = 0;
    std::uint64_t seed = 0;
    std::string output;
};

void cmd_sample(const SampleArgs& a, std::ostream& out) {
    const HuberParams p = read_distribution(a.params);
    const json head = header("sample", a.seed,
                             json{{"params", a.params}, {"distribution", io::to_json(p)}, {"n", a.n}, {"output", a.output}});
    const Matrix x = sample(p, a.n, a.seed);
    write_csv_file(a.output, head, io::coordinate_header(p.dim()), x);
    json r;
    r["rows"] = a.n;
    r["d"] = p.dim();
    r["output"] = a.output;
    r["sample_mean"] = io::to_json(Vector(x.colwise().mean().transpose()));
    out << document(head, r).dump(2) << "\n";
}

struct LogpdfArgs {
    std::string params;
    std::string input;
    std::string output;
};

void cmd_logpdf(const LogpdfArgs& a, std::ostream& out) {
    const HuberParams p = read_distribution(a.params);
    const io::CsvTable table = io::read_csv_file(a.input);
    if (table.values.cols() != p.dim())
        throw std::invalid_argument("input has " + std::to_string(table.values.cols()) + " columns, distribution has d = " +
                                    std::to_string(p.dim()));
    json config{{"params", a.params}, {"distribution", io::to_json(p)}, {"input", a.input}};
    config["output"] = a.output.empty() ? json(nullptr) : json(a.output);
    const json head = header("logpdf", std::nullopt, config);
    Vector values(table.values.rows());
    for (Eigen::Index i = 0; i < values.size(); ++i) values(i) = log_pdf(table.values.row(i).transpose(), p);
    json r;
    r["count"] = values.size();
    r["sum"] = values.sum();
    if (a.output.empty())
        r["logpdf"] = io::to_json(values);
    else
        write_csv_file(a.output, head, {"logpdf"}, values);
    out << document(head, r).dump(2) << "\n";
}

struct FitMleArgs {
    std::string input;
    int d = 0;
    double delta = kDefaultDelta;
    double theta = 0.1;
    OptimizerConfig opt;
    std::string schedule = "cosine";
    std::string output;
};

void cmd_fit_mle(FitMleArgs a, std::ostream& out) {
    a.opt.schedule = parse_schedule(a.schedule);
    a.opt.validate();
    const io::CsvTable table = io::read_csv_file(a.input);
    if (a.d != 0 && table.values.cols() != a.d)
        throw std::invalid_argument("--d " + std::to_string(a.d) + " but input has " +
                                    std::to_string(table.values.cols()) + " columns");
    json config{{"input", a.input}, {"d", table.values.cols()}, {"delta", a.delta}, {"theta", a.theta},
                {"optimizer", io::to_json(a.opt)}};
    config["output"] = a.output.empty() ? json(nullptr) : json(a.output);
    const json head = header("fit-mle", std::nullopt, config);
    const MleResult fit = fit_mle(table.values, a.delta, a.theta, a.opt);
    const MomentForm m = to_moment(fit.params);
    json r;
    r["distribution"] = io::to_json(fit.params);
    r["mu"] = io::to_json(m.mu);
    r["Lambda"] = io::to_json(m.lambda.matrix());
    r["covariance"] = io::to_json(Matrix(variance_factor(fit.params.dim(), a.delta) * m.lambda.inverse()));
    r["nll"] = fit.nll;
    r["steps"] = fit.steps;
    r["samples"] = table.values.rows();
    const json doc = document(head, r);
    if (!a.output.empty()) write_json_file(a.output, doc);
    out << doc.dump(2) << "\n";
}

struct FuseArgs {
    std::string input;
    std::string output;
};

int cmd_fuse(const FuseArgs& a, std::ostream& out, std::ostream& err) {
    const FusionProblem problem = io::fusion_problem_from_json(io::read_json_file(a.input));
    json config{{"input", a.input}, {"problem", io::to_json(problem)}};
    config["output"] = a.output.empty() ? json(nullptr) : json(a.output);
    const json head = header("fuse", std::nullopt, config);
    const FusionResult result = fuse(problem);
    const json doc = document(head, io::to_json(result, problem));
    if (!a.output.empty()) write_json_file(a.output, doc);
    out << doc.dump(2) << "\n";
    if (!result.converged) {
        err << "fuse: max_iter reached without meeting the tolerances\n";
        return kNumeric;
    }
    return kOk;
}

int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out, std::ostream& err) {
    const json head = header("gradcheck", o.seed,
                             json{{"trials", o.trials},
                                  {"inject_fault", o.inject_fault},
                                  {"tolerance", o.tolerance},
                                  {"degenerate_tolerance", o.degenerate_tolerance}});
    const GradcheckReport rep = run_gradcheck(o);
    json r;
    json fam;
    for (const auto& [name, worst] : rep.worst_family) fam[name] = worst;
    r["worst_relative_error"] = {{"loss_families", fam},
                                 {"spd_backward", rep.worst_backward},
                                 {"spd_backward_degenerate", rep.worst_backward_degenerate},
                                 {"log_det_backward", rep.worst_log_det}};
    r["configurations"] = rep.configurations;
    r["passed"] = rep.passed;
    out << document(head, r).dump(2) << "\n";
    if (!rep.passed) {
        err << "gradcheck: relative error above tolerance\n";
        return kCheckFailed;
    }
    return kOk;
}

struct ExperimentArgs {
    std::string config;
    std::uint64_t seed = 0;
    bool allow_partial = false;
    std::string output;
    std::string calibration_dir;
};

struct ExperimentConfig {
    SyntheticConfig synthetic;
    OptimizerConfig optimizer;
    LossConfig loss;
    std::vector<LossFamily> families;
    std::vector<CovarianceMode> modes;
    int repeats = 1;
};

ExperimentConfig parse_experiment(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
    for (const auto& item : j.items()) {
        static const char* allowed[] = {"synthetic", "optimizer", "loss", "families", "modes", "repeats"};
        if (std::find_if(std::begin(allowed), std::end(allowed), [&](const char* k) { return item.key() == k; }) ==
            std::end(allowed))
            throw std::invalid_argument("unknown key '" + item.key() + "' in experiment config");
    }
    ExperimentConfig c;
    if (j.contains("synthetic")) c.synthetic = io::synthetic_config_from_json(j.at("synthetic"));
    if (j.contains("optimizer")) c.optimizer = io::optimizer_config_from_json(j.at("optimizer"));
    if (j.contains("loss")) c.loss = io::loss_config_from_json(j.at("loss"));
    auto names = [&](const char* key, std::vector<std::string> fallback) {
        if (!j.contains(key)) return fallback;
        const json& list = j.at(key);
        if (!list.is_array() || list.empty()) throw std::invalid_argument(std::string("'") + key + "' must be a non-empty array");
        std::vector<std::string> out;
        for (const json& s : list) {
            if (!s.is_string()) throw std::invalid_argument(std::string("'") + key + "' entries must be strings");
            out.push_back(s.get<std::string>());
        }
        return out;
    };
    for (const auto& s : names("families", {"huber", "gauss", "laplace", "charbonnier"})) c.families.push_back(parse_family(s));
    for (const auto& s : names("modes", {"identity", "diagonal", "full"})) c.modes.push_back(parse_mode(s));
    if (j.contains("repeats")) {
        if (!j.at("repeats").is_number_integer() || j.at("repeats").get<int>() < 1)
            throw std::invalid_argument("'repeats' must be a positive integer");
        c.repeats = j.at("repeats").get<int>();
    }
    return c;
}

json to_json(const ExperimentConfig& c) {
    json out;
    out["synthetic"] = io::to_json(c.synthetic);
    out["optimizer"] = io::to_json(c.optimizer);
    json loss = io::to_json(c.loss);
    loss.erase("family");
    loss.erase("mode");
    out["loss"] = std::move(loss);
    json fams = json::array();
    for (auto f : c.families) fams.push_back(std::string(to_string(f)));
    out["families"] = std::move(fams);
    json modes = json::array();
    for (auto m : c.modes) modes.push_back(std::string(to_string(m)));
    out["modes"] = std::move(modes);
    out["repeats"] = c.repeats;
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_experiment(const ExperimentArgs& a, std::ostream& out, std::ostream& err) {
    const ExperimentConfig cfg = parse_experiment(io::read_json_file(a.config));
    json config{{"config_file", a.config}, {"experiment", to_json(cfg)}, {"allow_partial", a.allow_partial},
                {"expected_error", kExpectedErrorLabel}};
    config["output"] = a.output.empty() ? json(nullptr) : json(a.output);
    config["calibration_dir"] = a.calibration_dir.empty() ? json(nullptr) : json(a.calibration_dir);
    const json head = header("experiment", a.seed, config);
    if (!a.calibration_dir.empty()) std::filesystem::create_directories(a.calibration_dir);

    json runs = json::array();
    json table = json::array();
    int diverged = 0;
    for (LossFamily f : cfg.families) {
        for (CovarianceMode m : cfg.modes) {
            LossConfig loss = cfg.loss;
            loss.family = f;
            loss.mode = m;
            std::vector<double> param_err, mean_err, nll, nme, pckh;
            int failed = 0;
            for (int k = 0; k < cfg.repeats; ++k) {
                const std::uint64_t seed = a.seed + static_cast<std::uint64_t>(k);
                const SyntheticDataset data = generate(cfg.synthetic, seed);
                const FitReport rep = fit(data, loss, cfg.optimizer);
                json run = io::to_json(rep);
                run.erase("loss");
                json entry{{"family", std::string(to_string(f))}, {"mode", std::string(to_string(m))}, {"seed", seed}};
                entry.update(run);
                runs.push_back(std::move(entry));
                if (rep.diverged) {
                    ++failed;
                    err << "experiment: " << to_string(f) << "/" << to_string(m) << " seed " << seed
                        << " diverged: " << rep.failure << "\n";
                    continue;
                }
                param_err.push_back(rep.median_param_error);
                mean_err.push_back(rep.test_mean_error);
                nll.push_back(rep.test_nll);
                nme.push_back(rep.nme);
                pckh.push_back(rep.pckh);
                if (!a.calibration_dir.empty()) {
                    const std::string name = std::string(to_string(f)) + "-" + std::string(to_string(m)) + "-seed" +
                                             std::to_string(seed) + ".csv";
                    write_calibration_file((std::filesystem::path(a.calibration_dir) / name).string(), head,
                                           rep.calibration);
                }
            }
            diverged += failed;
            auto stat = [](const std::vector<double>& v) { return v.empty() ? json(nullptr) : json(median(v)); };
            table.push_back(json{{"family", std::string(to_string(f))},
                                 {"mode", std::string(to_string(m))},
                                 {"median_param_error", stat(param_err)},
                                 {"test_mean_error", stat(mean_err)},
                                 {"test_nll", stat(nll)},
                                 {"nme", stat(nme)},
                                 {"pckh", stat(pckh)},
                                 {"runs", cfg.repeats},
                                 {"diverged", failed}});
        }
    }
    json r;
    r["table"] = std::move(table);
    r["runs"] = std::move(runs);
    r["diverged_runs"] = diverged;
    const json doc = document(head, r);
    if (!a.output.empty()) write_json_file(a.output, doc);
    out << doc.dump(2) << "\n";
    return diverged > 0 && !a.allow_partial ? kNumeric : kOk;
}

struct CalibrateArgs {
    int d = 2;
    double delta = kDefaultDelta;
    int n = 100000;
    int bin_size = 5000;
    double spread = 2.0;
    double tolerance = 0.05;
    std::uint64_t seed = 0;
    std::string output;
};

// Perfectly specified run: sample i has precision factor A_i = I / s_i with
// s_i log-uniform on [1/spread, spread], and its error is drawn from exactly
// that distribution.
int cmd_calibrate(const CalibrateArgs& a, std::ostream& out, std::ostream& err) {
    json config{{"d", a.d},           {"delta", a.delta},         {"n", a.n},
                {"bin_size", a.bin_size}, {"spread", a.spread},   {"tolerance", a.tolerance},
                {"expected_error", kExpectedErrorLabel}};
    config["output"] = a.output.empty() ? json(nullptr) : json(a.output);
    const json head = header("calibrate", a.seed, config);

    const Matrix z = sample(HuberParams{Vector::Zero(a.d), SpdMatrix::identity(a.d), a.delta}, a.n, a.seed);
    SplitMix64 scales(a.seed, std::numeric_limits<std::uint64_t>::max());
    const double log_spread = std::log(a.spread);
    std::vector<HuberParams> predicted;
    std::vector<Vector> errors;
    predicted.reserve(a.n);
    errors.reserve(a.n);
    for (int i = 0; i < a.n; ++i) {
        const double s = std::exp(log_spread * (2.0 * scales.uniform() - 1.0));
        Matrix ai = Matrix::Identity(a.d, a.d) / s;
        predicted.push_back(HuberParams{Vector::Zero(a.d), SpdMatrix(ai), a.delta});
        errors.push_back(s * z.row(i).transpose());
    }
    const std::vector<CalibrationBin> bins = calibration_curve(predicted, errors, a.bin_size);
    double worst = 0.0;
    json list = json::array();
    for (const CalibrationBin& b : bins) {
        worst = std::max(worst, std::abs(b.empirical / b.expected - 1.0));
        list.push_back(io::to_json(b));
    }
    if (!a.output.empty()) write_calibration_file(a.output, head, bins);
    json r;
    r["bins"] = std::move(list);
    r["max_relative_deviation"] = worst;
    r["within_tolerance"] = worst <= a.tolerance;
    out << document(head, r).dump(2) << "\n";
    if (worst > a.tolerance) {
        err << "calibrate: a bin deviates from the identity line by more than the tolerance\n";
        return kCheckFailed;
    }
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multivariate Huber distribution tools", "mvhuber"};
    app.require_subcommand(1, 1);

    ConstantsArgs constants;
    auto* c_cmd = app.add_subcommand("constants", "Normalizing constant c_d and variance factor alpha");
    c_cmd->add_option("--d", constants.d, "Dimension")->required()->check(CLI::Range(1, 1000000));
    c_cmd->add_option("--delta", constants.delta, "Huber threshold")->required()->check(CLI::PositiveNumber);

    SampleArgs samp;
    auto* s_cmd = app.add_subcommand("sample", "Draw samples from a distribution JSON into a CSV file");
    s_cmd->add_option("--params", samp.params, "Distribution JSON")->required()->check(CLI::ExistingFile);
    s_cmd->add_option("--n", samp.n, "Number of samples")->required()->check(CLI::Range(1, 100000000));
    s_cmd->add_option("--seed", samp.seed, "Random seed")->required();
    s_cmd->add_option("--output", samp.output, "Output CSV")->required();

    LogpdfArgs lp;
    auto* l_cmd = app.add_subcommand("logpdf", "Log density of each CSV row");
    l_cmd->add_option("--params", lp.params, "Distribution JSON")->required()->check(CLI::ExistingFile);
    l_cmd->add_option("--input", lp.input, "Points CSV")->required()->check(CLI::ExistingFile);
    l_cmd->add_option("--output", lp.output, "Output CSV (default: inline in the result)");

    FitMleArgs fm;
    auto* f_cmd = app.add_subcommand("fit-mle", "Maximum-likelihood (nu, A) of samples in a CSV file");
    f_cmd->add_option("--input", fm.input, "Samples CSV")->required()->check(CLI::ExistingFile);
    f_cmd->add_option("--d", fm.d, "Expected dimension (checked against the CSV)")->check(CLI::Range(1, kMaxEigenDim));
    f_cmd->add_option("--delta", fm.delta, "Huber threshold")->capture_default_str()->check(CLI::PositiveNumber);
    f_cmd->add_option("--theta", fm.theta, "Precision floor")->capture_default_str()->check(CLI::PositiveNumber);
    f_cmd->add_option("--steps", fm.opt.steps, "Optimizer steps")->capture_default_str()->check(CLI::NonNegativeNumber);
    f_cmd->add_option("--learning-rate", fm.opt.learning_rate, "Adam step size")->capture_default_str()->check(CLI::PositiveNumber);
    f_cmd->add_option("--schedule", fm.schedule, "constant or cosine")->capture_default_str()->check(CLI::IsMember({"constant", "cosine"}));
    f_cmd->add_option("--output", fm.output, "Output JSON");

    FuseArgs fu;
    auto* u_cmd = app.add_subcommand("fuse", "Maximum-likelihood point of a product of Huber densities");
    u_cmd->add_option("--input", fu.input, "Fusion problem JSON")->required()->check(CLI::ExistingFile);
    u_cmd->add_option("--output", fu.output, "Output JSON");

    GradcheckOptions gc;
    auto* g_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the analytic gradients");
    g_cmd->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
    g_cmd->add_option("--trials", gc.trials, "Configurations per loss family and SPD regime")->capture_default_str()
        ->check(CLI::Range(1, 1000000));
    g_cmd->add_flag("--inject-fault", gc.inject_fault, "Corrupt the analytic gradients (harness self-test)");

    ExperimentArgs ex;
    auto* e_cmd = app.add_subcommand("experiment", "Fit the family x covariance-mode grid on synthetic data");
    e_cmd->add_option("--config", ex.config, "Experiment JSON")->required()->check(CLI::ExistingFile);
    e_cmd->add_option("--seed", ex.seed, "Dataset seed (repeats use seed, seed+1, ...)")->required();
    e_cmd->add_flag("--allow-partial", ex.allow_partial, "Exit 0 even if some runs diverge");
    e_cmd->add_option("--output", ex.output, "Output JSON");
    e_cmd->add_option("--calibration-dir", ex.calibration_dir, "Directory for per-run calibration CSV files");

    CalibrateArgs ca;
    auto* k_cmd = app.add_subcommand("calibrate", "Calibration curve of a perfectly specified synthetic run");
    k_cmd->add_option("--d", ca.d, "Dimension")->capture_default_str()->check(CLI::Range(1, kMaxEigenDim));
    k_cmd->add_option("--delta", ca.delta, "Huber threshold")->capture_default_str()->check(CLI::PositiveNumber);
    k_cmd->add_option("--n", ca.n, "Number of samples")->capture_default_str()->check(CLI::Range(1, 100000000));
    k_cmd->add_option("--bin-size", ca.bin_size, "Samples per bin")->capture_default_str()->check(CLI::Range(1, 100000000));
    k_cmd->add_option("--spread", ca.spread, "Per-sample scale range factor (>= 1)")->capture_default_str()
        ->check(CLI::Range(1.0, 1e6));
    k_cmd->add_option("--tolerance", ca.tolerance, "Allowed relative deviation per bin")->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    k_cmd->add_option("--seed", ca.seed, "Random seed")->required();
    k_cmd->add_option("--output", ca.output, "Output CSV");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << "mvhuber: " << e.what() << "\n";
        return kUsage;
    }

    try {
        if (c_cmd->parsed()) {
            cmd_constants(constants, out);
            return kOk;
        }
        if (s_cmd->parsed()) {
            cmd_sample(samp, out);
            return kOk;
        }
        if (l_cmd->parsed()) {
            cmd_logpdf(lp, out);
            return kOk;
        }
        if (f_cmd->parsed()) {
            cmd_fit_mle(fm, out);
            return kOk;
        }
        if (u_cmd->parsed()) return cmd_fuse(fu, out, err);
        if (g_cmd->parsed()) return cmd_gradcheck(gc, out, err);
        if (e_cmd->parsed()) return cmd_experiment(ex, out, err);
        if (k_cmd->parsed()) return cmd_calibrate(ca, out, err);
    } catch (const std::invalid_argument& e) {
        err << "mvhuber: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "mvhuber: " << e.what() << "\n";
        return kNumeric;
    }
    return kUsage;
}

}  // namespace mvhuber::cli
