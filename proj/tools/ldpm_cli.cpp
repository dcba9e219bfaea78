#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ldpm/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Deep panel forecasting with text-derived surrogate outcomes"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  const char* commands[][2] = {
      {"simulate", "Simulate a grouped panel with ragged daily posts"},
      {"fit", "Fit the surrogate and deep panel stages on a dataset"},
      {"evaluate", "Monte Carlo PMSE comparison of LPM, LPM-E and LDPM"},
      {"conformal", "Group-wise split conformal intervals on a test window"},
      {"diagnose", "Symmetry, gradient and shortcut checks on a fitted model"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--out", out, "Output directory (overrides config)");
    sub->add_option("--seed", seed, "Root seed (overrides config)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ldpm::RunConfig cfg = ldpm::load_config(config_path);
    if (out) cfg.out = *out;
    if (seed) {
      cfg.seed = *seed;
      cfg.simulation.seed = *seed;
    }
    ldpm::run_command(app.get_subcommands().front()->get_name(), cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ldpm::exit_code(e);
  }
  return 0;
}
