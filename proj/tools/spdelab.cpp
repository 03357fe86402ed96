#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "spdelab/spdelab.h"

namespace {

struct Handle {
  spdelab_experiment* e = nullptr;
  ~Handle() { spdelab_experiment_destroy(e); }
};

int report_error(int code) {
  std::fprintf(stderr, "spdelab: %s\n", spdelab_last_error());
  return code;
}

int load(const std::string& path, Handle& h) {
  const int rc = spdelab_experiment_load(path.c_str(), &h.e);
  if (rc != SPDELAB_OK) return report_error(rc);
  return SPDELAB_OK;
}

// Accepts "a,b,c" or space-separated lists.
std::vector<double> parse_values(const std::vector<std::string>& raw) {
  std::vector<double> out;
  for (const auto& chunk : raw) {
    std::stringstream ss(chunk);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw CLI::ValidationError("--values", "not a number: " + item);
      out.push_back(v);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch runner for stochastic parabolic experiments"};
  app.set_version_flag("--version", spdelab_version());
  app.require_subcommand(1);

  std::string config;
  std::string output;

  auto* run = app.add_subcommand("run", "Run an experiment config");
  run->add_option("config", config, "Experiment config (YAML)")->required();
  run->add_option("-o,--output", output, "Output directory (overrides the config)");
  std::vector<std::string> set_raw;
  run->add_option("--set", set_raw, "Override a parameter, name=value (repeatable)");

  auto* sweep = app.add_subcommand("sweep", "Run a config over a ladder of parameter values");
  std::string param;
  std::vector<std::string> values_raw;
  sweep->add_option("config", config, "Experiment config (YAML)")->required();
  sweep->add_option("--param", param, "Parameter name (kappa, eps, dt, K, n_paths, ... or a dotted path)")->required();
  sweep->add_option("--values", values_raw, "Values, comma or space separated")->required();
  sweep->add_option("-o,--output", output, "Output directory (default: the config's output)");

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", config, "Experiment config (YAML)")->required();

  CLI11_PARSE(app, argc, argv);

  Handle h;
  if (const int rc = load(config, h)) return rc;

  if (*validate) {
    const int rc = spdelab_experiment_validate(h.e);
    if (rc != SPDELAB_OK) return report_error(rc);
    char hash[32];
    spdelab_experiment_hash(h.e, hash, sizeof hash);
    std::printf("%s: ok (hash %s)\n", config.c_str(), hash);
    return 0;
  }

  if (*run) {
    for (const auto& s : set_raw) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "spdelab: --set expects name=value, got '%s'\n", s.c_str());
        return SPDELAB_ECONFIG;
      }
      double v = 0.0;
      try {
        v = std::stod(s.substr(eq + 1));
      } catch (const std::exception&) {
        std::fprintf(stderr, "spdelab: --set value is not a number: '%s'\n", s.c_str());
        return SPDELAB_ECONFIG;
      }
      if (const int rc = spdelab_experiment_set_param(h.e, s.substr(0, eq).c_str(), v)) return report_error(rc);
    }
    if (!output.empty()) spdelab_experiment_set_output(h.e, output.c_str());
    const int rc = spdelab_experiment_run(h.e);
    const char* summary = spdelab_experiment_summary(h.e);
    if (*summary) std::printf("%s\n", summary);
    if (rc != SPDELAB_OK) std::fprintf(stderr, "spdelab: %s\n", spdelab_last_error());
    return rc;
  }

  std::vector<double> values;
  try {
    values = parse_values(values_raw);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "spdelab: %s\n", e.what());
    return SPDELAB_ECONFIG;
  }
  if (output.empty()) output = spdelab_experiment_output(h.e);
  const int rc = spdelab_sweep(h.e, param.c_str(), values.data(), values.size(), output.c_str());
  if (rc != SPDELAB_OK) return report_error(rc);
  std::printf("%s/sweep.csv\n", output.c_str());
  return 0;
}
