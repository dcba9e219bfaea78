#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "ldpm/commands.hpp"
#include "ldpm/config.hpp"
#include "ldpm/csv.hpp"
#include "ldpm/error.hpp"

using namespace ldpm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2) << '\n';
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LDPM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text, "run.json");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    return e.what();
  }
  FAIL("config accepted");
  return {};
}

json tiny_simulation(int n, int t, int k) {
  return {{"n_units", n},   {"n_periods", t},  {"posts_per_period", k}, {"embed_dim", 4},
          {"feature_dim", 4}, {"n_groups", 1}, {"noise_scale", 0.0}};
}

json fast_model() {
  return {{"n_groups", 1}, {"warmup_epochs", 500}, {"max_epochs", 500}, {"kmeans_restarts", 2},
          {"val_periods", 2}, {"learning_rate", 1e-2}, {"patience", 500}};
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults") {
    const auto cfg = parse_config("{}");
    CHECK(cfg.seed == 1);
    CHECK(cfg.alpha == 0.1);
    CHECK_FALSE(cfg.data.has_value());
  }
  SUBCASE("values reach the typed structs") {
    const auto cfg = parse_config(R"({"seed": 9, "simulation": {"n_units": 5, "rho": 0.2},
      "model": {"hidden": [8, 4], "lambda": 2.0}, "lag_columns": [{"column": 1, "lag": 2}],
      "split": {"train_end": 10, "cal_end": 14, "horizon": 3}})");
    CHECK(cfg.seed == 9);
    CHECK(cfg.simulation.seed == 9);
    CHECK(cfg.simulation.n_units == 5);
    CHECK(cfg.simulation.rho == 0.2);
    CHECK(cfg.pipeline.deep.hidden == std::vector<int>{8, 4});
    CHECK(cfg.pipeline.deep.lambda == 2.0);
    REQUIRE(cfg.lag_columns.has_value());
    CHECK(cfg.lag_columns->at(0) == LagColumn{0, 2});
    REQUIRE(cfg.split.has_value());
    CHECK(cfg.split->cal_end == 14);
  }
  SUBCASE("unknown keys are rejected with their line") {
    const auto msg = config_error("{\n  \"seed\": 1,\n  \"simulation\": {\n    \"n_unit\": 3\n  }\n}");
    CHECK(msg.find("run.json:4") != std::string::npos);
    CHECK(msg.find("n_unit") != std::string::npos);
    CHECK(config_error("{\"sed\": 1}").find("sed") != std::string::npos);
  }
  SUBCASE("wrong types and ranges") {
    CHECK(config_error("{\n\"seed\": \"one\"\n}").find("run.json:2") != std::string::npos);
    CHECK(config_error("{\"alpha\": 1.5}").find("alpha") != std::string::npos);
    config_error("{\"model\": {\"interior_activation\": \"tanh\"}}");
    config_error("{\"evaluation\": {\"methods\": [\"LDPM\", \"ARIMA\"]}}");
  }
  SUBCASE("malformed json reports a line") {
    CHECK(config_error("{\n\"seed\": 1,\n\"out\": }").find("run.json:3") != std::string::npos);
  }
}

TEST_CASE("exit codes") {
  CHECK(exit_code(Error(ErrorKind::Config, "x")) == 2);
  CHECK(exit_code(Error(ErrorKind::NotPSD, "x")) == 2);
  CHECK(exit_code(Error(ErrorKind::Io, "x")) == 2);
  CHECK(exit_code(Error(ErrorKind::NonFinite, "x")) == 3);
  CHECK(exit_code(Error(ErrorKind::RankDeficient, "x")) == 3);
  CHECK(exit_code(std::runtime_error("x")) == 1);
  CHECK_THROWS_AS(run_command("train", parse_config("{}")), Error);
}

TEST_CASE("simulate counts rows and is byte-identical on rerun") {
  const auto dir = testing::scratch_dir("cli_simulate");
  const auto cfg = write_config(dir, {{"seed", 4}, {"simulation", tiny_simulation(2, 4, 1)}});
  REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " + (dir / "a").string()) == 0);
  REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " + (dir / "b").string()) == 0);
  CHECK(csv::read(dir / "a" / "panel.csv").rows.size() == 8);
  CHECK(csv::read(dir / "a" / "posts.csv").rows.size() == 8);
  for (const char* f : {"panel.csv", "posts.csv", "truth.json"}) {
    CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));
  }
  // --seed overrides the config
  REQUIRE(run_cli("simulate --config " + cfg.string() + " --seed 5 --out " + (dir / "c").string()) == 0);
  CHECK(testing::slurp(dir / "a" / "panel.csv") != testing::slurp(dir / "c" / "panel.csv"));
}

TEST_CASE("cli user errors exit with 2") {
  const auto dir = testing::scratch_dir("cli_errors");
  json sim = tiny_simulation(2, 4, 1);
  sim["rho"] = 2.0;
  const auto bad_rho = write_config(dir, {{"simulation", sim}}, "rho.json");
  CHECK(run_cli("simulate --config " + bad_rho.string() + " --out " + (dir / "x").string()) == 2);
  CHECK(run_cli("simulate --config " + (dir / "absent.json").string()) == 2);
  CHECK(run_cli("simulate") == 2);
  CHECK(run_cli("bogus --config x") == 2);

  const auto ok = write_config(dir, {{"simulation", tiny_simulation(3, 12, 2)}}, "ok.json");
  REQUIRE(run_cli("simulate --config " + ok.string() + " --out " + (dir / "data").string()) == 0);
  fs::remove(dir / "data" / "posts.csv");
  const auto fit = write_config(dir, {{"data", (dir / "data").string()}, {"model", fast_model()}}, "fit.json");
  CHECK(run_cli("fit --config " + fit.string() + " --out " + (dir / "fit").string()) == 2);
}

TEST_CASE("fit on a noiseless panel, determinism, conformal and diagnose") {
  const auto dir = testing::scratch_dir("cli_fit");
  const auto sim = write_config(dir, {{"seed", 3}, {"simulation", tiny_simulation(4, 30, 4)}}, "sim.json");
  REQUIRE(run_cli("simulate --config " + sim.string() + " --out " + (dir / "data").string()) == 0);

  json model = fast_model();
  model["final_activation"] = "relu";
  const json fit = {{"seed", 3},
                    {"data", (dir / "data").string()},
                    {"model", model},
                    {"split", {{"train_end", 20}, {"cal_end", 26}, {"horizon", 4}}}};
  const auto fit_cfg = write_config(dir, fit, "fit.json");
  REQUIRE(run_cli("fit --config " + fit_cfg.string() + " --out " + (dir / "a").string()) == 0);
  REQUIRE(run_cli("fit --config " + fit_cfg.string() + " --out " + (dir / "b").string()) == 0);
  for (const char* f : {"model.json", "report.json", "residuals.csv"}) {
    CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));
  }
  const json report = json::parse(testing::slurp(dir / "a" / "report.json"));
  CHECK(report.at("train_pmse").get<double>() < 1e-2);
  CHECK(report.at("train_periods").get<int>() == 20);

  SUBCASE("conformal writes one row per unit and test period") {
    json conf = fit;
    conf["model_dir"] = (dir / "a").string();
    const auto c = write_config(dir, conf, "conformal.json");
    REQUIRE(run_cli("conformal --config " + c.string() + " --out " + (dir / "conf").string()) == 0);
    CHECK(csv::read(dir / "conf" / "intervals.csv").rows.size() == 4 * 4);
    const json cj = json::parse(testing::slurp(dir / "conf" / "conformal.json"));
    CHECK(cj.contains("quantiles"));
  }
  SUBCASE("diagnose reports an exact symmetry") {
    json diag = fit;
    diag["model_dir"] = (dir / "a").string();
    diag["diagnose"] = {{"n_inputs", 200}, {"grad_cells", 4}};
    const auto d = write_config(dir, diag, "diagnose.json");
    REQUIRE(run_cli("diagnose --config " + d.string() + " --out " + (dir / "diag").string()) == 0);
    const json dj = json::parse(testing::slurp(dir / "diag" / "diagnose.json"));
    CHECK(dj.at("symmetry").at("max_abs_delta").get<double>() < 1e-10);
    CHECK(dj.at("symmetry").at("assignment_unchanged").get<bool>());
  }
}

TEST_CASE("evaluate with the oracle method scores zero") {
  const auto dir = testing::scratch_dir("cli_evaluate");
  const json cfg = {{"simulation", tiny_simulation(3, 10, 2)},
                    {"evaluation", {{"methods", {"oracle"}}, {"horizons", {1, 2}}, {"rhos", {0.2, 0.8}}, {"n_reps", 2}}}};
  const auto p = write_config(dir, cfg);
  REQUIRE(run_cli("evaluate --config " + p.string() + " --out " + (dir / "out").string()) == 0);
  const auto t = csv::read(dir / "out" / "pmse_table.csv");
  REQUIRE(t.rows.size() == 4);
  for (const auto& row : t.rows) CHECK(std::stod(row[3]) == 0.0);
  CHECK(fs::exists(dir / "out" / "summary.md"));
}
