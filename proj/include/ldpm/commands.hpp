#pragma once

#include <exception>
#include <string>

#include "json.hpp"
#include "ldpm/config.hpp"

namespace ldpm {

/// simulate: panel.csv, posts.csv, truth.json.
void cmd_simulate(const RunConfig& cfg);
/// fit: model.json, report.json, residuals.csv.
void cmd_fit(const RunConfig& cfg);
/// evaluate: pmse_table.csv, summary.md.
void cmd_evaluate(const RunConfig& cfg);
/// conformal: intervals.csv, conformal.json.
void cmd_conformal(const RunConfig& cfg);
/// diagnose: diagnose.json (symmetry, gradient and shortcut checks).
void cmd_diagnose(const RunConfig& cfg);

/// Dispatches on the subcommand name; unknown names raise Config.
void run_command(const std::string& command, const RunConfig& cfg);

/// 0 success, 2 user/config error, 3 numeric failure, 1 anything unexpected.
int exit_code(const std::exception& e);

}  // namespace ldpm
