#include "mvhuber/io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mvhuber::io {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

const json& require(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) fail(std::string("missing key '") + key + "'");
    return j.at(key);
}

double number(const json& j, const char* what) {
    if (!j.is_number()) fail(std::string(what) + " must be a number");
    return j.get<double>();
}

template <typename T>
T value_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(std::string("bad value for '") + key + "': " + e.what());
    }
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
    if (!j.is_object()) fail(std::string(what) + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || item.key() == a;
        if (!ok) fail(std::string("unknown key '") + item.key() + "' in " + what);
    }
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\"");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\"");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

json to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

json to_json(const Matrix& m) {
    json out = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        out.push_back(std::move(row));
    }
    return out;
}

Vector vector_from_json(const json& j) {
    if (!j.is_array()) fail("expected a numeric array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number(j[i], "vector entry");
    return v;
}

Matrix matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty()) fail("expected a non-empty nested array");
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != cols) fail("matrix rows must be arrays of equal length");
        for (std::size_t k = 0; k < cols; ++k)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = number(j[i][k], "matrix entry");
    }
    return m;
}

json to_json(const HuberParams& p) {
    json out;
    out["d"] = p.dim();
    out["nu"] = to_json(p.nu);
    out["A"] = to_json(p.a.matrix());
    out["delta"] = p.delta;
    return out;
}

HuberParams distribution_from_json(const json& j, double default_delta) {
    reject_unknown_keys(j, {"d", "nu", "A", "mu", "Lambda", "delta"}, "distribution");
    const double delta = j.contains("delta") ? number(j.at("delta"), "delta") : default_delta;
    HuberParams p;
    try {
        if (j.contains("nu") || j.contains("A")) {
            if (j.contains("mu") || j.contains("Lambda")) fail("distribution mixes (nu, A) and (mu, Lambda)");
            p = HuberParams{vector_from_json(require(j, "nu")), SpdMatrix(matrix_from_json(require(j, "A"))), delta};
        } else {
            MomentForm m{vector_from_json(require(j, "mu")), SpdMatrix(matrix_from_json(require(j, "Lambda"))), delta};
            p = to_canonical(m);
        }
        p.validate();
    } catch (const std::domain_error& e) {
        fail(std::string("invalid distribution: ") + e.what());
    }
    if (j.contains("d") && j.at("d").get<int>() != p.dim()) fail("distribution 'd' disagrees with its arrays");
    return p;
}

json to_json(const LossConfig& c) {
    json out;
    out["family"] = std::string(to_string(c.family));
    out["mode"] = std::string(to_string(c.mode));
    out["delta"] = c.delta;
    out["theta"] = c.theta;
    out["parameterization"] = std::string(to_string(c.parameterization));
    out["normalizer"] = c.include_normalizer;
    out["eig_tie_tol"] = c.eig_tie_tol;
    return out;
}

LossConfig loss_config_from_json(const json& j) {
    reject_unknown_keys(j, {"family", "mode", "delta", "theta", "parameterization", "normalizer", "eig_tie_tol"},
                        "loss config");
    LossConfig c;
    c.family = parse_family(value_or<std::string>(j, "family", "huber"));
    c.mode = parse_mode(value_or<std::string>(j, "mode", "full"));
    c.delta = value_or(j, "delta", c.delta);
    c.theta = value_or(j, "theta", c.theta);
    c.eig_tie_tol = value_or(j, "eig_tie_tol", c.eig_tie_tol);
    c.parameterization = parse_parameterization(value_or<std::string>(j, "parameterization", "nu"));
    c.include_normalizer = value_or(j, "normalizer", c.include_normalizer);
    try {
        c.validate();
    } catch (const std::domain_error& e) {
        fail(e.what());
    }
    return c;
}

FusionProblem fusion_problem_from_json(const json& j) {
    reject_unknown_keys(j, {"delta", "estimates", "tol_step", "tol_obj", "tol_grad", "max_iter"}, "fusion input");
    const double delta = value_or(j, "delta", kDefaultDelta);
    const json& list = require(j, "estimates");
    if (!list.is_array()) fail("'estimates' must be an array");
    FusionProblem p;
    for (const json& e : list) p.estimates.push_back(distribution_from_json(e, delta));
    p.tol_step = value_or(j, "tol_step", p.tol_step);
    p.tol_obj = value_or(j, "tol_obj", p.tol_obj);
    p.tol_grad = value_or(j, "tol_grad", p.tol_grad);
    p.max_iter = value_or(j, "max_iter", p.max_iter);
    try {
        p.validate();
    } catch (const std::domain_error& e) {
        fail(e.what());
    }
    return p;
}

json to_json(const FusionProblem& p) {
    json out;
    out["delta"] = p.delta();
    json list = json::array();
    for (const HuberParams& e : p.estimates) list.push_back(to_json(e));
    out["estimates"] = std::move(list);
    out["tol_step"] = p.tol_step;
    out["tol_obj"] = p.tol_obj;
    out["tol_grad"] = p.tol_grad;
    out["max_iter"] = p.max_iter;
    return out;
}

json to_json(const FusionResult& r, const FusionProblem& p) {
    json out;
    out["y"] = to_json(r.y_star);
    out["objective"] = objective(p, r.y_star);
    out["iterations"] = r.iterations;
    out["converged"] = r.converged;
    return out;
}

json to_json(const SyntheticConfig& c) {
    json out;
    out["n_train"] = c.n_train;
    out["n_test"] = c.n_test;
    out["input_dim"] = c.input_dim;
    out["keypoints"] = c.keypoints;
    out["dim"] = c.dim;
    out["noise"] = std::string(to_string(c.noise));
    out["noise_scale"] = c.noise_scale;
    out["noise_anisotropy"] = c.noise_anisotropy;
    out["noise_delta"] = c.noise_delta;
    out["outlier_fraction"] = c.outlier_fraction;
    out["outlier_range"] = c.outlier_range;
    out["weight_scale"] = c.weight_scale;
    out["scale_min"] = c.scale_min;
    out["scale_max"] = c.scale_max;
    return out;
}

SyntheticConfig synthetic_config_from_json(const json& j) {
    reject_unknown_keys(j, {"n_train", "n_test", "input_dim", "keypoints", "dim", "noise", "noise_scale",
                            "noise_anisotropy", "noise_delta", "outlier_fraction", "outlier_range",
                            "weight_scale", "scale_min", "scale_max"},
                        "dataset config");
    SyntheticConfig c;
    c.n_train = value_or(j, "n_train", c.n_train);
    c.n_test = value_or(j, "n_test", c.n_test);
    c.input_dim = value_or(j, "input_dim", c.input_dim);
    c.keypoints = value_or(j, "keypoints", c.keypoints);
    c.dim = value_or(j, "dim", c.dim);
    c.noise = parse_noise_family(value_or<std::string>(j, "noise", std::string(to_string(c.noise))));
    c.noise_scale = value_or(j, "noise_scale", c.noise_scale);
    c.noise_anisotropy = value_or(j, "noise_anisotropy", c.noise_anisotropy);
    c.noise_delta = value_or(j, "noise_delta", c.noise_delta);
    c.outlier_fraction = value_or(j, "outlier_fraction", c.outlier_fraction);
    c.outlier_range = value_or(j, "outlier_range", c.outlier_range);
    c.weight_scale = value_or(j, "weight_scale", c.weight_scale);
    c.scale_min = value_or(j, "scale_min", c.scale_min);
    c.scale_max = value_or(j, "scale_max", c.scale_max);
    try {
        c.validate();
    } catch (const std::domain_error& e) {
        fail(e.what());
    }
    return c;
}

json to_json(const OptimizerConfig& c) {
    json out;
    out["steps"] = c.steps;
    out["learning_rate"] = c.learning_rate;
    out["beta1"] = c.beta1;
    out["beta2"] = c.beta2;
    out["epsilon"] = c.epsilon;
    out["schedule"] = std::string(to_string(c.schedule));
    out["checkpoints"] = c.checkpoints;
    out["calibration_bin_size"] = c.calibration_bin_size;
    return out;
}

OptimizerConfig optimizer_config_from_json(const json& j) {
    reject_unknown_keys(j, {"steps", "learning_rate", "beta1", "beta2", "epsilon", "schedule", "checkpoints",
                            "calibration_bin_size"},
                        "optimizer config");
    OptimizerConfig c;
    c.steps = value_or(j, "steps", c.steps);
    c.learning_rate = value_or(j, "learning_rate", c.learning_rate);
    c.beta1 = value_or(j, "beta1", c.beta1);
    c.beta2 = value_or(j, "beta2", c.beta2);
    c.epsilon = value_or(j, "epsilon", c.epsilon);
    c.schedule = parse_schedule(value_or<std::string>(j, "schedule", std::string(to_string(c.schedule))));
    c.checkpoints = value_or(j, "checkpoints", c.checkpoints);
    c.calibration_bin_size = value_or(j, "calibration_bin_size", c.calibration_bin_size);
    try {
        c.validate();
    } catch (const std::domain_error& e) {
        fail(e.what());
    }
    return c;
}

json to_json(const CalibrationBin& b) {
    json out;
    out["expected"] = b.expected;
    out["empirical"] = b.empirical;
    out["count"] = b.count;
    return out;
}

json to_json(const FitReport& r, bool include_trace) {
    json out;
    out["loss"] = to_json(r.loss);
    out["diverged"] = r.diverged;
    if (r.diverged) out["failure"] = r.failure;
    out["test_nll"] = r.test_nll;
    out["test_mean_error"] = r.test_mean_error;
    out["median_param_error"] = r.median_param_error;
    out["nme"] = r.nme;
    out["pckh"] = r.pckh;
    out["final_train_loss"] = r.loss_trace.empty() ? 0.0 : r.loss_trace.back();
    json cps = json::array();
    for (const Checkpoint& c : r.checkpoints)
        cps.push_back(json{{"step", c.step}, {"train_loss", c.train_loss}, {"test_nll", c.test_nll}});
    out["checkpoints"] = std::move(cps);
    json bins = json::array();
    for (const CalibrationBin& b : r.calibration) bins.push_back(to_json(b));
    out["calibration"] = std::move(bins);
    if (include_trace) out["loss_trace"] = r.loss_trace;
    out["w"] = to_json(r.w);
    return out;
}

std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

CsvTable read_csv(std::istream& in) {
    CsvTable table;
    std::string line;
    if (!std::getline(in, line)) fail("CSV input is empty");
    table.header = split(line);
    std::vector<std::vector<double>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::vector<std::string> cells = split(line);
        if (cells.size() != table.header.size())
            fail("CSV line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                 " fields, header has " + std::to_string(table.header.size()));
        std::vector<double> row;
        for (const std::string& c : cells) {
            double v = 0.0;
            const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
            if (res.ec != std::errc() || res.ptr != c.data() + c.size())
                fail("CSV line " + std::to_string(line_no) + ": '" + c + "' is not a number");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    table.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(table.header.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t k = 0; k < rows[i].size(); ++k)
            table.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    return table;
}

CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open '" + path + "'");
    return read_csv(in);
}

void write_csv(std::ostream& out, const std::vector<std::string>& header, const Matrix& values) {
    if (static_cast<Eigen::Index>(header.size()) != values.cols()) fail("write_csv: header width mismatch");
    for (std::size_t k = 0; k < header.size(); ++k) out << (k ? "," : "") << header[k];
    out << "\r\n";
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        for (Eigen::Index k = 0; k < values.cols(); ++k) out << (k ? "," : "") << format_double(values(i, k));
        out << "\r\n";
    }
}

void write_calibration_csv(std::ostream& out, const std::vector<CalibrationBin>& bins) {
    Matrix m(static_cast<Eigen::Index>(bins.size()), 3);
    for (std::size_t i = 0; i < bins.size(); ++i)
        m.row(static_cast<Eigen::Index>(i)) << bins[i].expected, bins[i].empirical, bins[i].count;
    write_csv(out, {"expected", "empirical", "count"}, m);
}

std::vector<std::string> coordinate_header(int d) {
    std::vector<std::string> h;
    for (int i = 1; i <= d; ++i) h.push_back("x" + std::to_string(i));
    return h;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail("'" + path + "' is not valid JSON: " + e.what());
    }
}

}  // namespace mvhuber::io
