#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <yaml-cpp/yaml.h>

namespace spdelab {

extern const char* const kCodeVersion;

struct ExperimentOutcome {
  int exit_code = 0;  // 0 ok, 2 gate refusal, 3 numerics
  std::string status;
  std::string message;
  std::vector<std::pair<std::string, double>> headline;
  std::vector<std::string> files;  // relative to the output directory
};

// Experiment configuration held as a YAML tree. Loading checks YAML syntax only;
// validate() and run() check the whole document and report
// "<origin>:<line>:<col>: field '<path>': <problem>".
class Experiment {
 public:
  static Experiment from_file(const std::string& path);
  static Experiment from_string(const std::string& text, const std::string& base_dir = ".",
                                const std::string& origin = "<string>");

  Experiment(const Experiment& other);
  Experiment& operator=(const Experiment& other);
  Experiment(Experiment&&) noexcept = default;
  Experiment& operator=(Experiment&&) noexcept = default;

  void validate() const;
  [[nodiscard]] std::string kind() const;
  // Scalar knob by name (kappa, eps, dt, K, n_paths, seed, theta, delta, lambda,
  // p, grid, T, scale) or by dotted path into the document.
  void set_param(const std::string& name, double value);
  void set_output(const std::string& dir);
  [[nodiscard]] std::string output_dir() const;
  [[nodiscard]] std::string canonical() const;
  [[nodiscard]] std::string hash() const;

  // Runs the experiment and writes its reports plus manifest.json into the
  // output directory. Configuration problems throw Error(Config).
  [[nodiscard]] ExperimentOutcome run() const;

 private:
  Experiment(YAML::Node root, std::string base_dir, std::string origin);

  YAML::Node root_;
  std::string base_dir_;
  std::string origin_;
  std::string output_override_;
};

struct SweepOutcome {
  std::vector<double> values;
  std::vector<ExperimentOutcome> runs;
  std::vector<std::string> files;
};

// Runs `base` once per value of `param`, each in <out>/<param>_<index>/, and
// writes <out>/sweep.csv and <out>/manifest.json.
SweepOutcome run_sweep(const Experiment& base, const std::string& param, const std::vector<double>& values,
                       const std::string& out_dir);

// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace spdelab
