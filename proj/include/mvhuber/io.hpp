#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "mvhuber/estimator.hpp"
#include "mvhuber/fusion.hpp"
#include "mvhuber/huber_dist.hpp"
#include "mvhuber/losses.hpp"

// JSON and CSV forms of the library types. Matrices are row-major nested
// arrays. Parsing errors throw std::invalid_argument.
namespace mvhuber::io {

using json = nlohmann::ordered_json;

json to_json(const Vector& v);
json to_json(const Matrix& m);
Vector vector_from_json(const json& j);
Matrix matrix_from_json(const json& j);

// {"d", "nu", "A", "delta"}
json to_json(const HuberParams& p);
// Accepts {"nu", "A"} or {"mu", "Lambda"}; "delta" falls back to
// default_delta and "d", when present, must match.
HuberParams distribution_from_json(const json& j, double default_delta = kDefaultDelta);

// {"family","mode","delta","theta","parameterization","normalizer","eig_tie_tol"}
json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const json& j);

// {"delta", "estimates": [...], optional "tol_step","tol_obj","max_iter"}
FusionProblem fusion_problem_from_json(const json& j);
json to_json(const FusionProblem& p);
// {"y", "objective", "iterations", "converged"}
json to_json(const FusionResult& r, const FusionProblem& p);

json to_json(const SyntheticConfig& c);
SyntheticConfig synthetic_config_from_json(const json& j);
json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_config_from_json(const json& j);

json to_json(const CalibrationBin& b);
json to_json(const FitReport& r, bool include_trace = false);

// Shortest round-trip decimal form of a double.
std::string format_double(double x);

struct CsvTable {
    std::vector<std::string> header;
    Matrix values;
};

// Numeric CSV with a single header row.
CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);
void write_csv(std::ostream& out, const std::vector<std::string>& header, const Matrix& values);
void write_calibration_csv(std::ostream& out, const std::vector<CalibrationBin>& bins);

// "x1,..,xd"
std::vector<std::string> coordinate_header(int d);

json read_json_file(const std::string& path);

}  // namespace mvhuber::io
