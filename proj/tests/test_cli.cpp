#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "mvhuber/io.hpp"
#include "oracles.hpp"

using namespace mvhuber;
using io::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
    json doc() const { return json::parse(out); }
};

Outcome call(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

// Scratch directory per test case, removed afterwards.
struct Scratch {
    fs::path dir;
    explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("mvhuber_cli_" + name)) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
    std::string path(const std::string& file) const { return (dir / file).string(); }
    std::string write(const std::string& file, const std::string& text) const {
        std::ofstream(dir / file, std::ios::binary) << text;
        return path(file);
    }
};

const std::string kConfigs = MVHUBER_CONFIG_DIR;

}  // namespace

TEST_CASE("constants") {
    Outcome r = call({"constants", "--d", "2", "--delta", "1"});
    REQUIRE(r.code == 0);
    json doc = r.doc();
    CHECK(doc["header"]["command"] == "constants");
    CHECK(doc["header"]["config"]["d"] == 2);
    CHECK(doc["result"]["alpha"].get<double>() == doctest::Approx(3.07).epsilon(0.01 / 3.07));
    const double mass = oracle::huber_mass_2d(1.0);
    CHECK(doc["result"]["c_d"].get<double>() == doctest::Approx(mass).epsilon(1e-9));

    r = call({"constants", "--d", "2", "--delta", "10"});
    REQUIRE(r.code == 0);
    CHECK(std::abs(r.doc()["result"]["alpha"].get<double>() - 1.0) < 0.02);

    r = call({"constants", "--d", "0", "--delta", "1"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--d") != std::string::npos);
    CHECK(call({"constants", "--d", "2", "--delta", "0"}).code == 2);
    CHECK(call({"constants", "--d", "2"}).code == 2);
}

TEST_CASE("usage errors") {
    CHECK(call({}).code == 2);
    CHECK(call({"nonsense"}).code == 2);
    CHECK(call({"constants", "--d", "2", "--delta", "1", "--bogus"}).code == 2);
    Scratch s("usage");
    const std::string params = kConfigs + "/example_distribution.json";
    CHECK(call({"sample", "--params", params, "--n", "10", "--output", s.path("x.csv")}).code == 2);
    CHECK(call({"experiment", "--config", kConfigs + "/tiny_noise_experiment.json"}).code == 2);
    CHECK(call({"calibrate", "--n", "100"}).code == 2);
    CHECK(call({"logpdf", "--params", s.path("missing.json"), "--input", params}).code == 2);
    const std::string bad = s.write("bad.json", R"({"mu": [0, 0], "Lambda": [[1, 0], [0, 1]], "sigma": 2})");
    CHECK(call({"sample", "--params", bad, "--n", "10", "--seed", "1", "--output", s.path("x.csv")}).code == 2);
    CHECK(call({"--help"}).code == 0);
}

TEST_CASE("gradcheck") {
    Outcome r = call({"gradcheck"});
    REQUIRE(r.code == 0);
    const json res = r.doc()["result"];
    CHECK(res["passed"] == true);
    for (const auto& item : res.at("worst_relative_error").at("loss_families").items()) CHECK(item.value().get<double>() < 1e-5);
    CHECK(res["worst_relative_error"]["spd_backward"].get<double>() < 1e-5);
    CHECK(res["worst_relative_error"]["spd_backward_degenerate"].get<double>() < 1e-4);
    CHECK(res["configurations"].get<int>() >= 1400);

    r = call({"gradcheck", "--inject-fault", "--trials", "3"});
    CHECK(r.code == 1);
    CHECK(r.doc()["result"]["passed"] == false);
    CHECK(call({"gradcheck", "--trials", "0"}).code == 2);
}

TEST_CASE("sample, logpdf and fit-mle round trip") {
    Scratch s("mle");
    const std::string dist = s.write("dist.json", R"({"mu": [1.0, -2.0], "Lambda": [[2.0, 0.6], [0.6, 1.0]], "delta": 1.0})");
    Outcome r = call({"sample", "--params", dist, "--n", "100000", "--seed", "21", "--output", s.path("x.csv")});
    REQUIRE(r.code == 0);
    CHECK(r.doc()["header"]["seed"] == 21);
    const json meta = json::parse(slurp(s.path("x.csv.meta.json")));
    CHECK(meta["header"]["config"]["n"] == 100000);

    const io::CsvTable table = io::read_csv_file(s.path("x.csv"));
    REQUIRE(table.values.rows() == 100000);
    const HuberParams truth = io::distribution_from_json(io::read_json_file(dist));
    CHECK((table.values - sample(truth, 100000, 21)).cwiseAbs().maxCoeff() == 0.0);

    r = call({"fit-mle", "--input", s.path("x.csv"), "--d", "2", "--delta", "1", "--theta", "0.1", "--output",
              s.path("fit.json")});
    REQUIRE(r.code == 0);
    CHECK(slurp(s.path("fit.json")) == r.out);
    const json res = r.doc()["result"];
    const Matrix lambda = io::matrix_from_json(res["Lambda"]);
    Matrix lambda_true(2, 2);
    lambda_true << 2.0, 0.6, 0.6, 1.0;
    const Matrix inv_fit = lambda.inverse();
    const Matrix inv_true = lambda_true.inverse();
    CHECK((inv_fit - inv_true).norm() / inv_true.norm() < 0.05);

    CHECK(call({"fit-mle", "--input", s.path("x.csv"), "--d", "3"}).code == 2);

    const std::string pts = s.write("pts.csv", "x1,x2\r\n0,0\r\n1,-2\r\n3.5,4\r\n");
    r = call({"logpdf", "--params", dist, "--input", pts});
    REQUIRE(r.code == 0);
    const Vector lp = io::vector_from_json(r.doc()["result"]["logpdf"]);
    CHECK(lp.size() == 3);
    Eigen::Vector2d y(3.5, 4.0);
    CHECK(lp(2) == doctest::Approx(log_pdf(y, truth)).epsilon(1e-15));
    CHECK(lp(1) > lp(0));
    r = call({"logpdf", "--params", dist, "--input", pts, "--output", s.path("lp.csv")});
    REQUIRE(r.code == 0);
    CHECK(io::read_csv_file(s.path("lp.csv")).values.col(0).isApprox(lp, 1e-15));
}

TEST_CASE("fit-mle degenerate and gaussian samples") {
    Scratch s("mle2");
    const std::string rep = s.write("rep.csv", "x1,x2\n1,2\n1,2\n1,2\n1,2\n1,2\n");
    Outcome r = call({"fit-mle", "--input", rep});
    CHECK(r.code == 3);
    CHECK_FALSE(r.err.empty());

    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    const int n = 20000;
    Matrix x(n, 2);
    for (int i = 0; i < n; ++i) {
        const double a = n01(rng), b = n01(rng);
        x.row(i) << 0.5 + 1.5 * a, -1.0 + 0.4 * a + 0.7 * b;
    }
    std::ofstream f(s.path("g.csv"), std::ios::binary);
    io::write_csv(f, {"x1", "x2"}, x);
    f.close();
    r = call({"fit-mle", "--input", s.path("g.csv"), "--delta", "10"});
    REQUIRE(r.code == 0);
    const Vector mu = io::vector_from_json(r.doc()["result"]["mu"]);
    const Vector mean = x.colwise().mean().transpose();
    const Matrix c = x.rowwise() - mean.transpose();
    const Vector se = ((c.transpose() * c).diagonal() / (static_cast<double>(n) * n)).cwiseSqrt();
    CHECK(((mu - mean).cwiseAbs().array() < 3.0 * se.array()).all());
}

TEST_CASE("fuse") {
    Scratch s("fuse");
    Outcome r = call({"fuse", "--input", kConfigs + "/example_fusion.json", "--output", s.path("f.json")});
    REQUIRE(r.code == 0);
    const json res = r.doc()["result"];
    CHECK(res["converged"] == true);
    FusionProblem p = io::fusion_problem_from_json(io::read_json_file(kConfigs + "/example_fusion.json"));
    const Vector ref = oracle::grid_minimize_2d(
        [&](const Vector& v) {
            double t = 0;
            for (const auto& e : p.estimates) t += oracle::huber((v - e.nu).norm(), 1.0);
            return t;
        },
        -2, 12);
    CHECK((io::vector_from_json(res["y"]) - ref).norm() < 1e-3);
    CHECK(slurp(s.path("f.json")) == r.out);

    const std::string slow = s.write("slow.json", R"({"delta": 0.01, "max_iter": 1, "estimates": [
        {"nu": [0, 0], "A": [[1, 0], [0, 1]]}, {"nu": [10, 0], "A": [[1, 0], [0, 1]]},
        {"nu": [0, 10], "A": [[1, 0], [0, 1]]}, {"nu": [7, 7], "A": [[1, 0], [0, 1]]}]})");
    r = call({"fuse", "--input", slow});
    CHECK(r.code == 3);
    CHECK(r.doc()["result"]["converged"] == false);

    const std::string mixed = s.write("mixed.json", R"({"estimates": [{"nu": [0, 0], "A": [[1, 0], [0, 1]], "delta": 2},
        {"nu": [1, 0], "A": [[1, 0], [0, 1]]}]})");
    CHECK(call({"fuse", "--input", mixed}).code == 2);
}

TEST_CASE("calibrate") {
    Scratch s("cal");
    Outcome r = call({"calibrate", "--seed", "4", "--n", "100000", "--bin-size", "5000", "--output", s.path("c.csv")});
    REQUIRE(r.code == 0);
    const json res = r.doc()["result"];
    CHECK(res["bins"].size() == 20);
    CHECK(res["max_relative_deviation"].get<double>() <= 0.05);
    CHECK(r.doc()["header"]["config"]["expected_error"].get<std::string>().rfind("rms", 0) == 0);
    const io::CsvTable t = io::read_csv_file(s.path("c.csv"));
    CHECK(t.header == std::vector<std::string>{"expected", "empirical", "count"});
    CHECK(t.values.col(2).sum() == 100000);
    // tiny bins are noisy, so the tolerance check fails
    CHECK(call({"calibrate", "--seed", "4", "--n", "2000", "--bin-size", "10"}).code == 1);
}

TEST_CASE("experiment") {
    Scratch s("exp");
    const std::string cfg = s.write("cfg.json", R"({
        "synthetic": {"n_train": 200, "n_test": 100},
        "optimizer": {"steps": 50},
        "families": ["huber", "gauss"], "modes": ["identity", "full"], "repeats": 2})");
    Outcome r = call({"experiment", "--config", cfg, "--seed", "7", "--output", s.path("e.json"), "--calibration-dir",
                      s.path("cal")});
    REQUIRE(r.code == 0);
    const json doc = r.doc();
    CHECK(doc["header"]["seed"] == 7);
    CHECK(doc["header"]["config"]["experiment"]["synthetic"]["n_train"] == 200);
    CHECK(doc["header"]["config"]["experiment"]["synthetic"]["outlier_fraction"] == 0.1);
    CHECK(doc["result"]["table"].size() == 4);
    CHECK(doc["result"]["runs"].size() == 8);
    CHECK(doc["result"]["runs"][1]["seed"] == 8);
    CHECK(fs::exists(s.path("cal/gauss-full-seed8.csv")));
    CHECK(fs::exists(s.path("cal/gauss-full-seed8.csv.meta.json")));
    CHECK(slurp(s.path("e.json")) == r.out);

    const std::string diverging = s.write("div.json", R"({
        "synthetic": {"n_train": 50, "n_test": 10},
        "optimizer": {"steps": 5, "learning_rate": 1e300, "schedule": "constant"},
        "families": ["huber"], "modes": ["full"]})");
    r = call({"experiment", "--config", diverging, "--seed", "1"});
    CHECK(r.code == 3);
    CHECK(r.doc()["result"]["diverged_runs"] == 1);
    CHECK(call({"experiment", "--config", diverging, "--seed", "1", "--allow-partial"}).code == 0);

    const std::string unknown = s.write("unknown.json", R"({"families": ["huber"], "epochs": 3})");
    CHECK(call({"experiment", "--config", unknown, "--seed", "1"}).code == 2);
    const std::string bad_family = s.write("bad_family.json", R"({"families": ["cauchy"]})");
    CHECK(call({"experiment", "--config", bad_family, "--seed", "1"}).code == 2);
}

TEST_CASE("tiny-noise experiment recovers the generating map") {
    Outcome r = call({"experiment", "--config", kConfigs + "/tiny_noise_experiment.json", "--seed", "3"});
    REQUIRE(r.code == 0);
    const json doc = r.doc();
    for (const json& row : doc["result"]["table"]) {
        CAPTURE(row.dump());
        CHECK(row["median_param_error"].get<double>() < 1e-3);
    }
}

TEST_CASE("bundled default experiment ordering") {
    Outcome r = call({"experiment", "--config", kConfigs + "/default_experiment.json", "--seed", "1"});
    REQUIRE(r.code == 0);
    std::map<std::string, double> err;
    const json doc = r.doc();
    for (const json& row : doc["result"]["table"])
        err[row["family"].get<std::string>() + "/" + row["mode"].get<std::string>()] = row["test_mean_error"].get<double>();
    for (const char* mode : {"identity", "diagonal", "full"}) {
        CAPTURE(mode);
        CHECK(err[std::string("huber/") + mode] < err[std::string("gauss/") + mode]);
        CHECK(err[std::string("laplace/") + mode] < err[std::string("gauss/") + mode]);
    }
}

TEST_CASE("reruns are byte-identical") {
    Scratch s("repro");
    const std::string dist = kConfigs + "/example_distribution.json";
    const std::string cfg = s.write("cfg.json", R"({"synthetic": {"n_train": 100, "n_test": 50},
        "optimizer": {"steps": 20}, "families": ["huber"], "modes": ["full"]})");
    const std::vector<std::vector<std::string>> commands = {
        {"constants", "--d", "3", "--delta", "0.5"},
        {"sample", "--params", dist, "--n", "500", "--seed", "9", "--output", s.path("x.csv")},
        {"logpdf", "--params", dist, "--input", s.path("x.csv")},
        {"fit-mle", "--input", s.path("x.csv"), "--steps", "100", "--output", s.path("m.json")},
        {"fuse", "--input", kConfigs + "/example_fusion.json"},
        {"gradcheck", "--seed", "3", "--trials", "20"},
        {"experiment", "--config", cfg, "--seed", "2", "--output", s.path("e.json"), "--calibration-dir", s.path("c")},
        {"calibrate", "--seed", "5", "--n", "5000", "--bin-size", "1000", "--output", s.path("k.csv")},
    };
    const std::vector<std::string> files = {"x.csv", "x.csv.meta.json", "m.json", "e.json", "k.csv", "c/huber-full-seed2.csv"};
    std::vector<std::string> first_out;
    std::map<std::string, std::string> first_files;
    for (const auto& c : commands) first_out.push_back(call(c).out);
    for (const auto& f : files) first_files[f] = slurp(s.path(f));
    for (std::size_t i = 0; i < commands.size(); ++i) {
        CAPTURE(commands[i][0]);
        CHECK(call(commands[i]).out == first_out[i]);
    }
    for (const auto& f : files) {
        CAPTURE(f);
        CHECK_FALSE(first_files[f].empty());
        CHECK(slurp(s.path(f)) == first_files[f]);
    }
}
