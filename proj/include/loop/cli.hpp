#ifndef LOOP_CLI_HPP_
#define LOOP_CLI_HPP_

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loop/metrics.hpp"

namespace loop::cli {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2, kDivergence = 3 };

// Entry point of the `loop` binary. Output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Default run root: $LOOP_RUN_ROOT, else ./runs.
std::filesystem::path default_run_root();

// First 8 hex digits of the FNV-1a hash of the canonical JSON dump.
std::string config_hash(const nlohmann::json& snapshot);

// Applies "a.b=value" to `j`. The value is parsed as JSON when it parses,
// otherwise taken as a string. Throws ConfigError on a malformed override.
void apply_override(nlohmann::json& j, const std::string& assignment);

struct MetricComparison {
  std::string name;
  double base = 0.0;
  double trained = 0.0;
  double ratio = 0.0;  // trained / base; NaN when base is 0
};
// Throws ConfigError when either report covers zero rollouts.
std::vector<MetricComparison> compare_behavior(const BehaviorReport& base, const BehaviorReport& trained);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};
// Self-contained SVG line chart, one polyline per series plus a legend.
std::string render_svg(const std::vector<Series>& series, const std::string& title, const std::string& y_label);

}  // namespace loop::cli

#endif  // LOOP_CLI_HPP_
