#include "core/experiment.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"

#include "core/error.hpp"
#include "core/evolution.hpp"
#include "core/field_io.hpp"
#include "core/morrey.hpp"
#include "core/spde.hpp"
#include "core/suites.hpp"

#ifndef SPDELAB_VERSION
#define SPDELAB_VERSION "0.0.0"
#endif

namespace spdelab {

const char* const kCodeVersion = SPDELAB_VERSION;

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

const std::set<std::string> kKinds{"resolvent-suite", "morrey-suite", "ito-suite", "energy",     "stability",
                                   "gaussian-benchmark", "lp",       "w1p",       "sweep"};

// ---------------------------------------------------------------------------
// Reading with diagnostics

struct Ctx {
  std::string origin;
  std::string base_dir;
};

std::string where(const Ctx& ctx, const YAML::Mark& mark) {
  std::ostringstream os;
  os << ctx.origin;
  if (!mark.is_null()) os << ':' << mark.line + 1 << ':' << mark.column + 1;
  return os.str();
}

[[noreturn]] void bad(const Ctx& ctx, const YAML::Mark& mark, const std::string& field, const std::string& msg) {
  fail(ErrorKind::Config, where(ctx, mark) + ": field '" + field + "': " + msg);
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Map section that remembers which keys were read so leftovers can be rejected.
class Section {
 public:
  Section(const Ctx& ctx, YAML::Node node, std::string path, YAML::Mark fallback)
      : ctx_(&ctx), node_(std::move(node)), path_(std::move(path)), mark_(fallback) {
    if (node_ && node_.IsDefined() && !node_.IsNull()) {
      if (!node_.IsMap()) bad(*ctx_, node_.Mark(), path_, "expected a mapping");
      mark_ = node_.Mark();
      present_ = true;
    }
  }

  [[nodiscard]] bool present() const { return present_; }
  [[nodiscard]] const std::string& path() const { return path_; }
  [[nodiscard]] const YAML::Mark& mark() const { return mark_; }
  [[nodiscard]] const Ctx& ctx() const { return *ctx_; }

  [[nodiscard]] bool has(const std::string& key) {
    used_.insert(key);
    return present_ && node_[key] && !node_[key].IsNull();
  }

  YAML::Node raw(const std::string& key) {
    used_.insert(key);
    return present_ ? node_[key] : YAML::Node();
  }

  Section child(const std::string& key) { return {*ctx_, raw(key), join(path_, key), mark_}; }

  double num(const std::string& key, double def) { return has(key) ? as_number(key) : def; }
  double num(const std::string& key) {
    require(key);
    return as_number(key);
  }
  int integer(const std::string& key, int def) { return has(key) ? as_int(key) : def; }
  int integer(const std::string& key) {
    require(key);
    return as_int(key);
  }
  bool flag(const std::string& key, bool def) {
    if (!has(key)) return def;
    try {
      return node_[key].as<bool>();
    } catch (const YAML::Exception&) {
      bad(*ctx_, node_[key].Mark(), join(path_, key), "expected true or false");
    }
  }
  std::string str(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const auto n = node_[key];
    if (!n.IsScalar()) bad(*ctx_, n.Mark(), join(path_, key), "expected a string");
    return n.Scalar();
  }
  std::string str(const std::string& key) {
    require(key);
    return str(key, "");
  }
  std::vector<double> nums(const std::string& key, std::vector<double> def) {
    if (!has(key)) return def;
    const auto n = node_[key];
    std::vector<double> out;
    if (n.IsScalar()) {
      out.push_back(as_number(key));
      return out;
    }
    if (!n.IsSequence()) bad(*ctx_, n.Mark(), join(path_, key), "expected a number or a list of numbers");
    for (const auto& e : n) out.push_back(number_of(e, join(path_, key)));
    return out;
  }

  void require(const std::string& key) {
    if (!has(key)) bad(*ctx_, mark_, join(path_, key), "required field is missing");
  }

  [[noreturn]] void error(const std::string& key, const std::string& msg) const {
    const YAML::Mark m = present_ && node_[key] ? node_[key].Mark() : mark_;
    bad(*ctx_, m, join(path_, key), msg);
  }

  // Rejects keys that were never read.
  void done() const {
    if (!present_) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!used_.count(key)) bad(*ctx_, kv.first.Mark(), join(path_, key), "unknown field");
    }
  }

  double number_of(const YAML::Node& n, const std::string& field) const {
    if (!n.IsScalar()) bad(*ctx_, n.Mark(), field, "expected a number");
    const std::string& s = n.Scalar();
    if (s == "inf" || s == ".inf") return std::numeric_limits<double>::infinity();
    try {
      const double v = n.as<double>();
      if (!std::isfinite(v)) bad(*ctx_, n.Mark(), field, "expected a finite number");
      return v;
    } catch (const YAML::Exception&) {
      bad(*ctx_, n.Mark(), field, "expected a number, got '" + s + "'");
    }
  }

 private:
  double as_number(const std::string& key) { return number_of(node_[key], join(path_, key)); }
  int as_int(const std::string& key) {
    const double v = as_number(key);
    if (v != std::floor(v) || std::abs(v) > 1e9) error(key, "expected an integer");
    return static_cast<int>(v);
  }

  const Ctx* ctx_;
  YAML::Node node_;
  std::string path_;
  YAML::Mark mark_;
  bool present_ = false;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Field specifications

struct FieldSpec {
  enum class Kind { Zero, Constant, Gaussian, Sine, Cosine, Power, File, Sum, Radial, Components, RotatedSine };
  Kind kind = Kind::Zero;
  double amplitude = 1.0;
  double value = 0.0;
  double width = 1.0;
  double power = 1.0;
  double cutoff = 0.0;
  std::vector<double> center;
  std::vector<double> mode;
  std::vector<double> values;
  std::string file;
  int component = -1;
  int time_index = 0;
  std::vector<FieldSpec> terms;
  std::string field;
  YAML::Mark mark;

  [[nodiscard]] bool zero() const {
    if (kind == Kind::Zero) return true;
    if (kind == Kind::Constant) return value == 0.0 && std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
    if (kind == Kind::Sum || kind == Kind::Components) {
      return std::all_of(terms.begin(), terms.end(), [](const FieldSpec& t) { return t.zero(); });
    }
    return amplitude == 0.0;
  }
};

FieldSpec parse_field(const Ctx& ctx, const YAML::Node& node, const std::string& field, bool vector) {
  FieldSpec s;
  s.field = field;
  s.mark = node.Mark();
  if (!node || node.IsNull()) return s;
  if (node.IsScalar()) {
    s.kind = FieldSpec::Kind::Constant;
    Section dummy(ctx, YAML::Node(), field, node.Mark());
    s.value = dummy.number_of(node, field);
    return s;
  }
  if (node.IsSequence()) {
    if (!vector) bad(ctx, node.Mark(), field, "a scalar field cannot be a list");
    s.kind = FieldSpec::Kind::Components;
    int i = 0;
    for (const auto& e : node) s.terms.push_back(parse_field(ctx, e, field + "[" + std::to_string(i++) + "]", false));
    return s;
  }
  Section sec(ctx, node, field, node.Mark());
  const std::string kind = sec.str("kind");
  if (kind == "zero") {
    s.kind = FieldSpec::Kind::Zero;
  } else if (kind == "constant") {
    s.kind = FieldSpec::Kind::Constant;
    if (vector) {
      s.values = sec.nums("values", {});
      if (s.values.empty()) s.value = sec.num("value");
    } else {
      s.value = sec.num("value");
    }
  } else if (kind == "gaussian" && !vector) {
    s.kind = FieldSpec::Kind::Gaussian;
    s.amplitude = sec.num("amplitude", 1.0);
    s.width = sec.num("width", 1.0);
    if (!(s.width > 0.0)) sec.error("width", "must be positive");
    s.center = sec.nums("center", {});
  } else if ((kind == "sine" || kind == "cosine") && !vector) {
    s.kind = kind == "sine" ? FieldSpec::Kind::Sine : FieldSpec::Kind::Cosine;
    s.amplitude = sec.num("amplitude", 1.0);
    s.mode = sec.nums("mode", {1.0});
    for (double m : s.mode) {
      if (m != std::floor(m)) sec.error("mode", "mode numbers must be integers");
    }
  } else if (kind == "power" && !vector) {
    s.kind = FieldSpec::Kind::Power;
    s.amplitude = sec.num("amplitude", 1.0);
    s.power = sec.num("power", 1.0);
    s.cutoff = sec.num("cutoff", 0.0);
  } else if (kind == "radial" && vector) {
    s.kind = FieldSpec::Kind::Radial;
    s.amplitude = sec.num("amplitude", 1.0);
    s.power = sec.num("power", 1.0);
    s.cutoff = sec.num("cutoff", 0.0);
  } else if (kind == "rotated_sine" && vector) {
    s.kind = FieldSpec::Kind::RotatedSine;
    s.amplitude = sec.num("amplitude", 1.0);
    s.mode = {sec.num("mode", 1.0)};
    if (s.mode[0] != std::floor(s.mode[0])) sec.error("mode", "mode number must be an integer");
  } else if (kind == "file") {
    s.kind = FieldSpec::Kind::File;
    const std::string rel = sec.str("path");
    fs::path p(rel);
    if (p.is_relative()) p = fs::path(ctx.base_dir) / p;
    if (!fs::exists(p)) sec.error("path", "file '" + p.string() + "' does not exist");
    s.file = p.string();
    s.component = sec.integer("component", vector ? -1 : 0);
    s.time_index = sec.integer("time_index", 0);
  } else if (kind == "sum") {
    s.kind = FieldSpec::Kind::Sum;
    const auto terms = sec.raw("terms");
    if (!terms || !terms.IsSequence() || terms.size() == 0) sec.error("terms", "expected a non-empty list");
    int i = 0;
    for (const auto& e : terms) s.terms.push_back(parse_field(ctx, e, field + ".terms[" + std::to_string(i++) + "]", vector));
  } else {
    sec.error("kind", "unknown " + std::string(vector ? "vector" : "scalar") + " field kind '" + kind + "'");
  }
  sec.done();
  return s;
}

[[noreturn]] void bad_spec(const Ctx& ctx, const FieldSpec& s, const std::string& msg) { bad(ctx, s.mark, s.field, msg); }

std::vector<Field> load_file_components(const Ctx& ctx, const FieldSpec& s, const SpectralTriple& tri) {
  FieldFile file;
  try {
    file = read_field_file(s.file);
    check_geometry(file, tri);
  } catch (const Error& e) {
    bad_spec(ctx, s, e.what());
  }
  if (s.time_index < 0 || s.time_index >= static_cast<int>(file.times.size())) bad_spec(ctx, s, "time_index out of range");
  return file.data[static_cast<std::size_t>(s.time_index)];
}

Field build_scalar(const Ctx& ctx, const FieldSpec& s, const SpectralTriple& tri) {
  const int d = tri.dim();
  const std::size_t n = tri.size();
  Field f(n, 0.0);
  switch (s.kind) {
    case FieldSpec::Kind::Zero:
      break;
    case FieldSpec::Kind::Constant:
      std::fill(f.begin(), f.end(), s.value);
      break;
    case FieldSpec::Kind::Gaussian: {
      if (!s.center.empty() && static_cast<int>(s.center.size()) != d) bad_spec(ctx, s, "center needs one entry per axis");
      for (std::size_t q = 0; q < n; ++q) {
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
          const double x = tri.coord(q, a) - (s.center.empty() ? 0.0 : s.center[static_cast<std::size_t>(a)]);
          r2 += x * x;
        }
        f[q] = s.amplitude * std::exp(-r2 / s.width);
      }
      break;
    }
    case FieldSpec::Kind::Sine:
    case FieldSpec::Kind::Cosine: {
      if (static_cast<int>(s.mode.size()) > d) bad_spec(ctx, s, "mode has more entries than axes");
      const double k = 2.0 * std::numbers::pi / tri.box();
      for (std::size_t q = 0; q < n; ++q) {
        double arg = 0.0;
        for (std::size_t a = 0; a < s.mode.size(); ++a) arg += s.mode[a] * k * tri.coord(q, static_cast<int>(a));
        f[q] = s.amplitude * (s.kind == FieldSpec::Kind::Sine ? std::sin(arg) : std::cos(arg));
      }
      break;
    }
    case FieldSpec::Kind::Power: {
      f = power_field(tri, s.power);
      const Field cut = s.cutoff > 0.0 ? smooth_cutoff(tri, s.cutoff) : Field(n, 1.0);
      for (std::size_t q = 0; q < n; ++q) f[q] *= s.amplitude * cut[q];
      break;
    }
    case FieldSpec::Kind::File: {
      auto comps = load_file_components(ctx, s, tri);
      if (s.component < 0 || s.component >= static_cast<int>(comps.size())) bad_spec(ctx, s, "component out of range");
      f = std::move(comps[static_cast<std::size_t>(s.component)]);
      break;
    }
    case FieldSpec::Kind::Sum:
      for (const auto& t : s.terms) {
        const Field g = build_scalar(ctx, t, tri);
        for (std::size_t q = 0; q < n; ++q) f[q] += g[q];
      }
      break;
    default:
      bad_spec(ctx, s, "not a scalar field");
  }
  return f;
}

std::vector<Field> build_vector(const Ctx& ctx, const FieldSpec& s, const SpectralTriple& tri, int comps) {
  const std::size_t n = tri.size();
  const int d = tri.dim();
  std::vector<Field> out(static_cast<std::size_t>(comps), Field(n, 0.0));
  switch (s.kind) {
    case FieldSpec::Kind::Zero:
      break;
    case FieldSpec::Kind::Constant:
      if (s.values.empty()) {
        for (auto& c : out) std::fill(c.begin(), c.end(), s.value);
      } else {
        if (static_cast<int>(s.values.size()) != comps) {
          bad_spec(ctx, s, "expected " + std::to_string(comps) + " values");
        }
        for (int k = 0; k < comps; ++k) std::fill(out[k].begin(), out[k].end(), s.values[static_cast<std::size_t>(k)]);
      }
      break;
    case FieldSpec::Kind::Radial: {
      if (comps != d) bad_spec(ctx, s, "radial fields need one component per axis");
      auto rad = radial_vector_field(tri, s.power);
      const Field cut = s.cutoff > 0.0 ? smooth_cutoff(tri, s.cutoff) : Field(n, 1.0);
      for (int a = 0; a < d; ++a) {
        for (std::size_t q = 0; q < n; ++q) out[a][q] = s.amplitude * rad[a][q] * cut[q];
      }
      break;
    }
    case FieldSpec::Kind::RotatedSine: {
      if (comps != d) bad_spec(ctx, s, "rotated_sine fields need one component per axis");
      const double k = 2.0 * std::numbers::pi * s.mode[0] / tri.box();
      for (int a = 0; a < d; ++a) {
        for (std::size_t q = 0; q < n; ++q) out[a][q] = s.amplitude * std::sin(k * tri.coord(q, (a + 1) % d));
      }
      break;
    }
    case FieldSpec::Kind::Components:
      if (static_cast<int>(s.terms.size()) != comps) bad_spec(ctx, s, "expected " + std::to_string(comps) + " components");
      for (int k = 0; k < comps; ++k) out[k] = build_scalar(ctx, s.terms[static_cast<std::size_t>(k)], tri);
      break;
    case FieldSpec::Kind::File: {
      auto all = load_file_components(ctx, s, tri);
      if (s.component >= 0) {
        if (comps != 1 || s.component >= static_cast<int>(all.size())) bad_spec(ctx, s, "component out of range");
        out[0] = std::move(all[static_cast<std::size_t>(s.component)]);
      } else {
        if (static_cast<int>(all.size()) != comps) bad_spec(ctx, s, "file has the wrong number of components");
        out = std::move(all);
      }
      break;
    }
    case FieldSpec::Kind::Sum:
      for (const auto& t : s.terms) {
        const auto g = build_vector(ctx, t, tri, comps);
        for (int k = 0; k < comps; ++k) {
          for (std::size_t q = 0; q < n; ++q) out[k][q] += g[k][q];
        }
      }
      break;
    default:
      bad_spec(ctx, s, "not a vector field");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Typed configuration

struct SplitSpec {
  FieldSpec singular, bounded;
  double alpha = 1.0;
};

struct DriftSpec {
  bool enabled = false;
  double amplitude = 0.0;
  double regularization = 0.5;
};

struct ProfileSpec {
  std::string kind = "constant";
  double rate = 0.0;
};

struct Config {
  std::string kind;
  std::string output;
  TripleSpec triple;
  bool triple_given = false;

  double rho0 = 1.0;
  double a_scale = 1.0;
  FieldSpec a_variation;
  double sigma_diagonal = 0.0;
  FieldSpec sigma_variation;
  SplitSpec b, beta, c, nu;
  DriftSpec drift;

  double r = 2.5;
  double lambda_exp = 1.0;
  int stride = 0;
  int radii = 4;
  double rmin_cells = 2.0;
  double rmax = 0.0;
  AssemblyOptions assembly;

  FieldSpec u0, f, g, frf, h;
  ProfileSpec f_profile, g_profile, frf_profile, h_profile;
  double scale = 1.0;

  NoiseModel noise;
  std::size_t n_paths = 1;
  Scheme scheme;

  ReportWeights weights;
  double p = 4.0;
  bool abstract = false;
  double abstract_epsilon = 1.0;
  bool trajectory_csv = true;
  bool field_dump = true;

  ResolventSuiteOptions resolvent;
  MorreySuiteOptions morrey;
  ItoSuiteOptions ito;

  std::vector<double> bench_times{0.5, 1.0, 2.0};
  std::uint64_t bench_seed = 3;
  double bench_drift = -1.0;
  struct Level {
    int grid = 0;
    double box = 0.0;
    int substeps = 1;
  };
  std::vector<Level> levels;
  double fine_dt = 5e-4;
  int fine_steps = 1000;
  double t0 = 0.5;
  int bumps = 4;
  std::uint64_t test_seed = 5;
  std::uint64_t noise_seed = 11;

  std::vector<double> eps;
  double mollify_p = 2.0;

  std::string sweep_kind, sweep_param;
  std::vector<double> sweep_values;
};

bool needs_problem(const std::string& kind) {
  return kind == "energy" || kind == "lp" || kind == "w1p" || kind == "stability";
}

SplitSpec parse_split(Section& parent, const std::string& key, bool vector, double default_alpha) {
  Section s = parent.child(key);
  SplitSpec out;
  out.alpha = default_alpha;
  if (!s.present()) return out;
  out.singular = parse_field(s.ctx(), s.raw("singular"), join(s.path(), "singular"), vector);
  out.bounded = parse_field(s.ctx(), s.raw("bounded"), join(s.path(), "bounded"), vector);
  out.alpha = s.num("alpha", default_alpha);
  if (out.alpha != 1.0 && out.alpha != 0.5) s.error("alpha", "admissibility order must be 1 or 0.5");
  s.done();
  return out;
}

ProfileSpec parse_profile(Section& parent, const std::string& key) {
  ProfileSpec p;
  const auto node = parent.raw(key);
  if (!node || node.IsNull()) return p;
  if (node.IsScalar()) {
    p.kind = node.Scalar();
  } else {
    Section s(parent.ctx(), node, join(parent.path(), key), parent.mark());
    p.kind = s.str("kind");
    p.rate = s.num("rate", 0.0);
    s.done();
  }
  if (p.kind != "constant" && p.kind != "exponential" && p.kind != "cosine" && p.kind != "step") {
    parent.error(key, "unknown profile '" + p.kind + "' (constant, exponential, cosine, step)");
  }
  return p;
}

std::function<double(double)> make_profile(const ProfileSpec& p) {
  const double rate = p.rate;
  if (p.kind == "exponential") return [rate](double t) { return std::exp(-rate * t); };
  if (p.kind == "cosine") return [rate](double t) { return std::cos(rate * t); };
  if (p.kind == "step") return [rate](double t) { return t < rate ? 1.0 : 0.0; };
  return {};
}

Config parse(const Ctx& ctx, const YAML::Node& root) {
  if (!root || !root.IsMap()) bad(ctx, root ? root.Mark() : YAML::Mark::null_mark(), "<root>", "expected a mapping");
  Section top(ctx, root, "", root.Mark());
  Config c;
  c.kind = top.str("kind");
  if (!kKinds.count(c.kind)) top.error("kind", "unknown experiment kind '" + c.kind + "'");
  c.output = top.str("output", "");
  top.str("description", "");

  std::string run_kind = c.kind;
  {
    Section s = top.child("sweep");
    if (c.kind == "sweep") {
      if (!s.present()) top.error("sweep", "kind 'sweep' needs a sweep section");
      c.sweep_kind = s.str("kind");
      if (!kKinds.count(c.sweep_kind) || c.sweep_kind == "sweep") s.error("kind", "unknown swept kind '" + c.sweep_kind + "'");
      c.sweep_param = s.str("param");
      c.sweep_values = s.nums("values", {});
      if (c.sweep_values.empty()) s.error("values", "at least one value is required");
      run_kind = c.sweep_kind;
    } else if (s.present()) {
      top.error("sweep", "only valid with kind 'sweep'");
    }
    s.done();
  }

  {
    Section s = top.child("triple");
    c.triple_given = s.present();
    if (run_kind == "resolvent-suite" && !s.present()) c.triple = {1, 128, 16.0 * std::numbers::pi, 1};
    c.triple.dim = s.integer("dim", c.triple.dim);
    c.triple.grid = s.integer("grid", c.triple.grid);
    c.triple.box = s.num("box", c.triple.box);
    c.triple.order = s.integer("order", (run_kind == "w1p") ? 2 : c.triple.order);
    if (c.triple.dim < 1 || c.triple.dim > 3) s.error("dim", "must be 1, 2 or 3");
    if (c.triple.grid < 2 || c.triple.grid % 2) s.error("grid", "must be an even number >= 2");
    if (!(c.triple.box > 0.0)) s.error("box", "must be positive");
    if (c.triple.order != 1 && c.triple.order != 2) s.error("order", "must be 1 or 2");
    if (run_kind == "lp" && c.triple.order != 1) s.error("order", "kind 'lp' runs on an order-1 triple");
    if (run_kind == "w1p" && c.triple.order != 2) s.error("order", "kind 'w1p' runs on an order-2 triple");
    s.done();
  }
  const int d = c.triple.dim;

  {
    Section s = top.child("noise");
    c.noise.channels = s.integer("channels", run_kind == "gaussian-benchmark" ? d : 1);
    if (c.noise.channels < 0) s.error("channels", "must be >= 0");
    const bool has_dt = s.has("dt"), has_T = s.has("T"), has_steps = s.has("steps");
    double dt = s.num("dt", 0.01), T = s.num("T", 1.0);
    int steps = s.integer("steps", 100);
    if (has_dt && has_T && has_steps) {
      if (std::abs(dt * steps - T) > 1e-12 * std::max(1.0, std::abs(T))) s.error("steps", "dt * steps must equal T");
    } else if (has_T && has_steps) {
      dt = T / steps;
    } else if (has_dt && has_T) {
      const double k = std::round(T / dt);
      if (k < 1 || std::abs(k * dt - T) > 1e-12 * std::max(1.0, std::abs(T))) s.error("dt", "T must be a whole number of steps dt");
      steps = static_cast<int>(k);
    } else if (has_dt && has_steps) {
      T = dt * steps;
    } else if (has_T) {
      dt = T / steps;
    } else {
      T = dt * steps;
    }
    if (!(dt > 0.0)) s.error("dt", "must be positive");
    if (steps < 1) s.error("steps", "must be >= 1");
    c.noise.dt = dt;
    c.noise.steps = steps;
    c.noise.seed = static_cast<std::uint64_t>(s.integer("seed", 1));
    c.noise.substeps = s.integer("substeps", 1);
    if (c.noise.substeps < 1) s.error("substeps", "must be >= 1");
    const int paths = s.integer("n_paths", 1);
    if (paths < 1) s.error("n_paths", "must be >= 1");
    c.n_paths = static_cast<std::size_t>(paths);
    s.done();
  }

  {
    Section s = top.child("coefficients");
    if (s.present() && !needs_problem(run_kind)) top.error("coefficients", "not used by kind '" + run_kind + "'");
    c.rho0 = s.num("rho0", 1.0);
    {
      Section a = s.child("a");
      c.a_scale = a.num("scale", 1.0);
      c.a_variation = parse_field(s.ctx(), a.raw("variation"), join(a.path(), "variation"), false);
      a.done();
    }
    {
      Section sg = s.child("sigma");
      c.sigma_diagonal = sg.num("diagonal", 0.0);
      c.sigma_variation = parse_field(s.ctx(), sg.raw("variation"), join(sg.path(), "variation"), false);
      sg.done();
    }
    c.b = parse_split(s, "b", true, 1.0);
    c.beta = parse_split(s, "beta", true, 1.0);
    c.c = parse_split(s, "c", false, 0.5);
    c.nu = parse_split(s, "nu", true, 1.0);
    {
      Section dd = s.child("dynamic_drift");
      if (dd.present()) {
        const std::string k = dd.str("kind", "moving_inverse_distance");
        if (k != "moving_inverse_distance") dd.error("kind", "only moving_inverse_distance is supported");
        c.drift.enabled = true;
        c.drift.amplitude = dd.num("amplitude");
        c.drift.regularization = dd.num("regularization", 0.5);
        if (c.drift.regularization < 0.0) dd.error("regularization", "must be >= 0");
        if (c.noise.channels < d) top.error("noise", "the moving drift rides on the first d noise channels");
      }
      dd.done();
    }
    for (const SplitSpec* sp : {&c.b, &c.beta, &c.c, &c.nu}) {
      if (!sp->singular.zero() && d < 3) bad(ctx, sp->singular.mark, sp->singular.field, "singular parts need dim >= 3");
    }
    s.done();
  }

  {
    Section s = top.child("admissibility");
    c.r = s.num("r", 2.5);
    c.lambda_exp = s.num("lambda", 1.0);
    c.stride = s.integer("stride", 0);
    c.radii = s.integer("radii", 4);
    c.rmin_cells = s.num("rmin_cells", 2.0);
    c.rmax = s.num("rmax", 0.0);
    c.assembly.theta = s.num("theta", 0.1);
    c.assembly.delta = s.num("delta", 0.5);
    if (s.has("n0")) {
      const auto n = s.raw("n0");
      if (n.IsScalar() && n.Scalar() == "auto") {
        c.assembly.n0 = -1.0;
      } else {
        c.assembly.n0 = s.num("n0");
        if (c.assembly.n0 < 0.0) s.error("n0", "must be >= 0 or 'auto'");
      }
    }
    c.assembly.enforce_gate = s.flag("enforce_gate", true);
    c.assembly.coercivity_samples = s.integer("coercivity_samples", 4);
    if (c.stride < 0) s.error("stride", "must be >= 0 (0 picks one)");
    if (c.radii < 1) s.error("radii", "must be >= 1");
    if (!(c.assembly.delta > 0.0 && c.assembly.delta <= 1.0)) s.error("delta", "must lie in (0, 1]");
    if (!(c.assembly.theta > 0.0)) s.error("theta", "must be positive");
    s.done();
  }

  {
    Section s = top.child("forcing");
    if (s.present() && !needs_problem(run_kind)) top.error("forcing", "not used by kind '" + run_kind + "'");
    c.u0 = parse_field(ctx, s.raw("u0"), join(s.path(), "u0"), false);
    c.f = parse_field(ctx, s.raw("f"), join(s.path(), "f"), false);
    c.g = parse_field(ctx, s.raw("g"), join(s.path(), "g"), false);
    c.frf = parse_field(ctx, s.raw("frf"), join(s.path(), "frf"), true);
    c.h = parse_field(ctx, s.raw("h"), join(s.path(), "h"), true);
    c.f_profile = parse_profile(s, "f_profile");
    c.g_profile = parse_profile(s, "g_profile");
    c.frf_profile = parse_profile(s, "frf_profile");
    c.h_profile = parse_profile(s, "h_profile");
    c.scale = s.num("scale", 1.0);
    s.done();
  }

  {
    Section s = top.child("scheme");
    c.scheme.solver_tolerance = s.num("solver_tolerance", c.scheme.solver_tolerance);
    c.scheme.max_iterations = s.integer("max_iterations", c.scheme.max_iterations);
    c.scheme.overflow_guard = s.num("overflow_guard", c.scheme.overflow_guard);
    if (!(c.scheme.solver_tolerance > 0.0)) s.error("solver_tolerance", "must be positive");
    if (c.scheme.max_iterations < 1) s.error("max_iterations", "must be >= 1");
    s.done();
  }

  {
    Section s = top.child("reports");
    c.weights.lambda = s.num("lambda", 1.0);
    c.weights.mu = s.num("mu", 0.0);
    c.weights.delta = s.num("delta", c.assembly.delta);
    c.p = s.num("p", 4.0);
    c.abstract = s.flag("abstract", false);
    c.abstract_epsilon = s.num("abstract_epsilon", 1.0);
    c.trajectory_csv = s.flag("trajectory_csv", true);
    c.field_dump = s.flag("field_dump", true);
    if (!(c.p >= 2.0)) s.error("p", "must be >= 2");
    if (c.weights.mu < 0.0) s.error("mu", "must be >= 0");
    s.done();
  }

  {
    Section s = top.child("suite");
    const bool suite_kind = run_kind == "resolvent-suite" || run_kind == "morrey-suite" || run_kind == "ito-suite";
    if (s.present() && !suite_kind) top.error("suite", "only valid for suite kinds");
    if (run_kind == "resolvent-suite") {
      auto& o = c.resolvent;
      o.lambdas = s.nums("lambdas", o.lambdas);
      o.random_fields = s.integer("random_fields", o.random_fields);
      o.max_power = s.integer("max_power", o.max_power);
      o.band_xi2 = s.num("band_xi2", o.band_xi2);
      o.tolerance = s.num("tolerance", o.tolerance);
      o.convergence_target = s.num("convergence_target", o.convergence_target);
      o.seed = static_cast<std::uint64_t>(s.integer("seed", static_cast<int>(o.seed)));
    } else if (run_kind == "morrey-suite") {
      auto& o = c.morrey;
      o.constant = s.num("constant", o.constant);
      o.rho0 = s.num("rho0", o.rho0);
      o.r = s.num("r", o.r);
      o.scaling_grid = s.integer("scaling_grid", o.scaling_grid);
      o.box = s.num("box", o.box);
      o.scaling_radii = s.integer("scaling_radii", o.scaling_radii);
      o.scaling_tolerance = s.num("scaling_tolerance", o.scaling_tolerance);
      const auto grids = s.nums("decompose_grids", {32, 48});
      o.decompose_grids.clear();
      for (double g : grids) o.decompose_grids.push_back(static_cast<int>(g));
      o.decompose_p = s.num("decompose_p", o.decompose_p);
      o.n_hats = s.nums("n_hats", o.n_hats);
      o.decompose_tolerance = s.num("decompose_tolerance", o.decompose_tolerance);
    } else if (run_kind == "ito-suite") {
      auto& o = c.ito;
      o.dts = s.nums("dts", o.dts);
      o.horizon = s.num("horizon", o.horizon);
      o.u0 = s.num("u0", o.u0);
      o.n_paths = s.integer("n_paths", o.n_paths);
      o.seed = static_cast<std::uint64_t>(s.integer("seed", static_cast<int>(o.seed)));
      o.halving_tolerance = s.num("halving_tolerance", o.halving_tolerance);
      if (o.dts.empty()) s.error("dts", "at least one step is required");
      for (double dt : o.dts) {
        if (!(dt > 0.0)) s.error("dts", "steps must be positive");
      }
    }
    s.done();
  }

  {
    Section s = top.child("benchmark");
    if (s.present() && run_kind != "gaussian-benchmark") top.error("benchmark", "only valid for kind 'gaussian-benchmark'");
    c.bench_times = s.nums("times", c.bench_times);
    c.bench_seed = static_cast<std::uint64_t>(s.integer("seed", 3));
    c.bench_drift = s.num("drift_amplitude", -1.0);
    Section w = s.child("weak_residual");
    if (w.present()) {
      const auto levels = w.raw("levels");
      if (!levels || !levels.IsSequence() || levels.size() == 0) w.error("levels", "expected a non-empty list");
      int i = 0;
      for (const auto& e : levels) {
        Section l(ctx, e, join(w.path(), "levels[" + std::to_string(i++) + "]"), w.mark());
        Config::Level lv;
        lv.grid = l.integer("grid");
        lv.box = l.num("box");
        lv.substeps = l.integer("substeps", 1);
        if (lv.grid < 2 || lv.grid % 2) l.error("grid", "must be an even number >= 2");
        if (lv.substeps < 1) l.error("substeps", "must be >= 1");
        l.done();
        c.levels.push_back(lv);
      }
      c.fine_dt = w.num("fine_dt", c.fine_dt);
      c.fine_steps = w.integer("fine_steps", c.fine_steps);
      c.t0 = w.num("t0", c.t0);
      c.bumps = w.integer("bumps", c.bumps);
      c.test_seed = static_cast<std::uint64_t>(w.integer("test_seed", 5));
      c.noise_seed = static_cast<std::uint64_t>(w.integer("seed", 11));
      for (const auto& lv : c.levels) {
        if (c.fine_steps % lv.substeps) w.error("fine_steps", "must be a multiple of every level's substeps");
      }
    }
    w.done();
    s.done();
  }

  {
    Section s = top.child("stability");
    if (s.present() && run_kind != "stability") top.error("stability", "only valid for kind 'stability'");
    if (run_kind == "stability") {
      c.eps = s.nums("eps", {0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625});
      c.mollify_p = s.num("p", 2.0);
      for (double e : c.eps) {
        if (!(e > 0.0)) s.error("eps", "mollification radii must be positive");
      }
    }
    s.done();
  }

  top.done();
  if (run_kind == "gaussian-benchmark" && c.drift.enabled) top.error("coefficients", "not used by kind 'gaussian-benchmark'");
  return c;
}

// ---------------------------------------------------------------------------
// Problem construction

BallSampler make_sampler(const Config& c, const SpectralTriple& tri) {
  const int stride = c.stride > 0 ? c.stride : std::max(1, tri.grid() / 16);
  const double h = tri.spacing();
  const double rmax = c.rmax > 0.0 ? c.rmax : std::min(c.rho0, 0.4 * tri.box());
  const double rmin = std::min(c.rmin_cells * h, rmax);
  auto s = BallSampler::strided(tri, stride, rmin, rmax, c.radii, {origin_node(tri)});
  s.validate(tri);
  return s;
}

AdmissibleField build_split(const Ctx& ctx, const SplitSpec& sp, const SpectralTriple& tri, int comps, bool scalar,
                            const MorreyParams& base, const BallSampler& sampler) {
  MorreyParams mp = base;
  mp.alpha = sp.alpha;
  if (sp.singular.zero() && sp.bounded.zero()) return zero_admissible(tri, comps, mp);
  auto build = [&](const FieldSpec& s) {
    return scalar ? std::vector<Field>{build_scalar(ctx, s, tri)} : build_vector(ctx, s, tri, comps);
  };
  return make_admissible(tri, build(sp.singular), build(sp.bounded), mp, sampler);
}

struct BuiltProblem {
  TriplePtr triple;
  SPDEProblem problem;
  BallSampler sampler;
};

BuiltProblem build_problem(const Ctx& ctx, const Config& c) {
  BuiltProblem out;
  out.triple = SpectralTriple::create(c.triple);
  const auto& tri = *out.triple;
  const int d = tri.dim();
  const int K = c.noise.channels;
  const std::size_t n = tri.size();
  out.sampler = make_sampler(c, tri);

  auto& co = out.problem.coeffs;
  co = heat_coefficients(tri, K, c.a_scale, c.rho0);
  const Field av = build_scalar(ctx, c.a_variation, tri);
  const Field sv = build_scalar(ctx, c.sigma_variation, tri);
  for (int i = 0; i < d; ++i) {
    auto& aii = co.a[static_cast<std::size_t>(i * d + i)];
    for (std::size_t q = 0; q < n; ++q) aii[q] += av[q];
    if (i < K) {
      auto& s = co.sigma[static_cast<std::size_t>(i * K + i)];
      for (std::size_t q = 0; q < n; ++q) s[q] = c.sigma_diagonal + sv[q];
    }
  }

  MorreyParams mp;
  mp.r = c.r;
  mp.rho0 = c.rho0;
  mp.lambda_exp = c.lambda_exp;
  co.b = build_split(ctx, c.b, tri, d, false, mp, out.sampler);
  co.beta = build_split(ctx, c.beta, tri, d, false, mp, out.sampler);
  co.c = build_split(ctx, c.c, tri, 1, true, mp, out.sampler);
  co.nu = build_split(ctx, c.nu, tri, K, false, mp, out.sampler);

  if (c.drift.enabled) {
    auto coords = std::make_shared<std::vector<Field>>();
    for (int a = 0; a < d; ++a) {
      Field x(n);
      for (std::size_t q = 0; q < n; ++q) x[q] = tri.coord(q, a);
      coords->push_back(std::move(x));
    }
    const double kappa = c.drift.amplitude;
    const double reg2 = std::pow(c.drift.regularization * tri.spacing(), 2);
    const double box = tri.box();
    co.dynamic_drift = [coords, kappa, reg2, box, d](const StepContext& ctx2, std::vector<Field>& v) {
      const std::size_t m = coords->front().size();
      for (std::size_t q = 0; q < m; ++q) {
        double z[3] = {0.0, 0.0, 0.0};
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
          double za = (*coords)[static_cast<std::size_t>(a)][q] + ctx2.w[static_cast<std::size_t>(a)];
          za -= box * std::round(za / box);
          z[a] = za;
          r2 += za * za;
        }
        const double den = r2 + reg2;
        for (int a = 0; a < d; ++a) v[static_cast<std::size_t>(a)][q] = den > 0.0 ? -kappa * z[a] / den : 0.0;
      }
    };
    if (d >= 3 && kappa != 0.0) {
      auto rad = radial_vector_field(tri, 1.0);
      for (auto& comp : rad) {
        for (auto& x : comp) x *= std::abs(kappa);
      }
      std::vector<Field> zero(static_cast<std::size_t>(d), Field(n, 0.0));
      co.dynamic_drift_hat = make_admissible(tri, std::move(rad), std::move(zero), mp, out.sampler).hat;
    }
  }

  auto& fo = out.problem.forcing;
  if (!c.f.zero()) fo.f = build_scalar(ctx, c.f, tri);
  if (!c.g.zero()) fo.g = build_scalar(ctx, c.g, tri);
  if (!c.frf.zero()) fo.frf = build_vector(ctx, c.frf, tri, d);
  if (!c.h.zero()) fo.h = build_vector(ctx, c.h, tri, K);
  fo.f_profile = make_profile(c.f_profile);
  fo.g_profile = make_profile(c.g_profile);
  fo.frf_profile = make_profile(c.frf_profile);
  fo.h_profile = make_profile(c.h_profile);
  out.problem.u0 = build_scalar(ctx, c.u0, tri);
  if (c.scale != 1.0) {
    fo.scale(c.scale);
    for (auto& x : out.problem.u0) x *= c.scale;
  }
  if (tri.order() == 2) derive_derivatives(tri, co, out.sampler);
  co.validate(tri);
  fo.validate(tri, K);
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers

ojson num(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

ojson nums(const std::vector<double>& v) {
  ojson a = ojson::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

// Shortest representation that reads back to the same double.
std::string fmt(double x) {
  std::array<char, 32> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), r.ptr);
}

class Writer {
 public:
  explicit Writer(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) fail(ErrorKind::Io, "cannot create output directory '" + dir_.string() + "': " + ec.message());
  }
  void text(const std::string& name, const std::string& body) {
    std::ofstream os(dir_ / name, std::ios::binary);
    if (!os) fail(ErrorKind::Io, "cannot write '" + (dir_ / name).string() + "'");
    os << body;
    if (!os) fail(ErrorKind::Io, "write failed for '" + (dir_ / name).string() + "'");
    files.push_back(name);
  }
  void json(const std::string& name, const ojson& j) { text(name, j.dump(2) + "\n"); }
  void field(const std::string& name, const SpectralTriple& tri, const Field& f) {
    FieldFile file;
    file.dim = tri.dim();
    file.grid = tri.grid();
    file.box = tri.box();
    file.data = {{f}};
    write_field_file((dir_ / name).string(), file);
    files.push_back(name);
  }
  void slice(const std::string& name, const SpectralTriple& tri, const Field& f) {
    write_csv_slice((dir_ / name).string(), tri, f);
    files.push_back(name);
  }
  [[nodiscard]] const fs::path& dir() const { return dir_; }

  std::vector<std::string> files;

 private:
  fs::path dir_;
};

ojson suite_json(const SuiteReport& r) {
  ojson j;
  j["suite"] = r.suite;
  j["passed"] = r.passed();
  ojson checks = ojson::array();
  for (const auto& c : r.checks) {
    ojson e;
    e["name"] = c.name;
    e["value"] = num(c.value);
    e["bound"] = num(c.bound);
    e["passed"] = c.passed;
    if (!c.detail.empty()) e["detail"] = c.detail;
    checks.push_back(e);
  }
  j["checks"] = checks;
  return j;
}

ojson estimate_json(const EstimateReport& r) {
  ojson j;
  j["estimate"] = r.estimate;
  ojson lhs, rhs;
  for (std::size_t i = 0; i < r.lhs_names.size(); ++i) lhs[r.lhs_names[i]] = num(r.lhs_terms[i]);
  for (std::size_t i = 0; i < r.rhs_names.size(); ++i) rhs[r.rhs_names[i]] = num(r.rhs_terms[i]);
  j["lhs_terms"] = lhs;
  j["rhs_terms"] = rhs;
  j["lhs"] = num(r.lhs);
  j["rhs"] = num(r.rhs);
  j["ratio"] = num(r.ratio);
  j["lhs_stderr"] = num(r.lhs_stderr);
  j["rhs_stderr"] = num(r.rhs_stderr);
  j["n_paths"] = r.n_paths;
  j["n_diverged"] = r.n_diverged;
  j["dt"] = num(r.dt);
  j["flags"] = r.flags;
  return j;
}

ojson gate_json(const GateReport& g) {
  ojson j;
  ojson hats;
  for (const auto& [name, v] : g.hats) hats[name] = num(v);
  j["hats"] = hats;
  j["sum"] = num(g.sum);
  j["theta"] = num(g.theta);
  j["passed"] = g.passed;
  return j;
}

ojson assembly_json(const Assembly& as) {
  ojson j;
  j["n0"] = num(as.n0);
  j["c0"] = num(as.c0);
  j["delta_est"] = num(as.coercivity.delta_est);
  j["required_margin"] = num(as.required_margin);
  j["certified"] = as.coercivity.certified;
  j["k_est"] = num(as.coercivity.k_est);
  j["k0_est"] = num(as.coercivity.k0_est);
  j["ellipticity"] = num(as.ellipticity);
  j["symbol_exact"] = as.problem.ops.symbol_exact;
  j["gate"] = gate_json(as.gate);
  return j;
}

using Headline = std::vector<std::pair<std::string, double>>;

struct KindResult {
  int exit_code = 0;
  std::string status = "ok";
  std::string message;
  Headline headline;
};

// ---------------------------------------------------------------------------
// Kinds

KindResult finish_suite(Writer& w, const std::string& kind, const SuiteReport& rep, ojson extra = {}) {
  KindResult k;
  ojson j;
  j["kind"] = kind;
  j["status"] = rep.passed() ? "ok" : "checks_failed";
  j["report"] = suite_json(rep);
  if (!extra.is_null()) j["series"] = extra;
  w.json("report.json", j);

  std::ostringstream csv;
  csv << "name,value,bound,passed\n";
  for (const auto& c : rep.checks) csv << c.name << ',' << fmt(c.value) << ',' << fmt(c.bound) << ',' << c.passed << '\n';
  w.text("checks.csv", csv.str());

  std::size_t passed = 0;
  for (const auto& c : rep.checks) passed += c.passed ? 1 : 0;
  k.headline.emplace_back("checks_passed", static_cast<double>(passed));
  k.headline.emplace_back("checks_total", static_cast<double>(rep.checks.size()));
  for (const auto& c : rep.checks) k.headline.emplace_back(c.name, c.value);
  if (!rep.passed()) {
    k.exit_code = 3;
    k.status = "checks_failed";
    k.message = rep.suite + ": one or more checks failed";
  }
  return k;
}

KindResult run_gaussian(const Config& c, Writer& w) {
  KindResult k;
  const int d = c.triple.dim;
  const double amp = c.bench_drift >= 0.0 ? c.bench_drift : 0.5 * d;
  const auto gb = gaussian_benchmark(d, c.triple.box, c.triple.grid, c.bench_times, c.bench_seed, amp);

  std::vector<double> residuals;
  for (const auto& lv : c.levels) {
    auto tri = SpectralTriple::create({d, lv.grid, lv.box, 1});
    NoiseModel nm;
    nm.channels = d;
    nm.dt = c.fine_dt * lv.substeps;
    nm.steps = c.fine_steps / lv.substeps;
    nm.seed = c.noise_seed;
    nm.substeps = lv.substeps;
    const auto traj = gaussian_trajectory(tri, nm, 0, c.t0);
    const auto prob = gaussian_problem(*tri, amp, c.t0);
    residuals.push_back(weak_residual(traj, prob, default_test_set(*tri, c.bumps, c.test_seed)));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < residuals.size(); ++i) monotone = monotone && residuals[i] < residuals[i - 1];

  ojson j;
  j["kind"] = "gaussian-benchmark";
  j["status"] = "ok";
  j["dim"] = d;
  j["drift_amplitude"] = num(amp);
  j["times"] = nums(gb.times);
  j["l2_sq"] = nums(gb.l2_sq);
  j["l2_expected"] = nums(gb.l2_expected);
  j["l2_rel_error"] = nums(gb.l2_rel_error);
  j["grad_sq"] = nums(gb.grad_sq);
  j["grad_expected"] = nums(gb.grad_expected);
  j["l2_power_fit"] = num(gb.l2_power_fit);
  j["grad_power_fit"] = num(gb.grad_power_fit);
  j["mass_outside"] = num(gb.mass_outside);
  j["sharp_lhs"] = num(gb.sharp_lhs);
  j["sharp_rhs"] = num(gb.sharp_rhs);
  if (!c.levels.empty()) {
    ojson wr;
    ojson lv = ojson::array();
    for (std::size_t i = 0; i < c.levels.size(); ++i) {
      ojson e;
      e["grid"] = c.levels[i].grid;
      e["box"] = num(c.levels[i].box);
      e["substeps"] = c.levels[i].substeps;
      e["residual"] = num(residuals[i]);
      lv.push_back(e);
    }
    wr["levels"] = lv;
    wr["monotone"] = monotone;
    j["weak_residual"] = wr;
  }
  w.json("report.json", j);

  std::ostringstream csv;
  csv << "t,l2_sq,l2_expected,l2_rel_error,grad_sq,grad_expected\n";
  for (std::size_t i = 0; i < gb.times.size(); ++i) {
    csv << fmt(gb.times[i]) << ',' << fmt(gb.l2_sq[i]) << ',' << fmt(gb.l2_expected[i]) << ',' << fmt(gb.l2_rel_error[i])
        << ',' << fmt(gb.grad_sq[i]) << ',' << fmt(gb.grad_expected[i]) << '\n';
  }
  w.text("benchmark.csv", csv.str());

  double max_rel = 0.0;
  for (double e : gb.l2_rel_error) max_rel = std::max(max_rel, e);
  k.headline = {{"l2_power_fit", gb.l2_power_fit},   {"grad_power_fit", gb.grad_power_fit},
                {"l2_max_rel_error", max_rel},       {"mass_outside", gb.mass_outside},
                {"sharp_lhs", gb.sharp_lhs},         {"sharp_rhs", gb.sharp_rhs}};
  for (std::size_t i = 0; i < residuals.size(); ++i) k.headline.emplace_back("weak_residual_" + std::to_string(i), residuals[i]);
  if (!residuals.empty()) k.headline.emplace_back("weak_residual_monotone", monotone ? 1.0 : 0.0);
  return k;
}

Assembly assemble(const BuiltProblem& bp, const AssemblyOptions& o) {
  return bp.triple->order() == 1 ? assemble_L2(bp.triple, bp.problem, o) : assemble_W12(bp.triple, bp.problem, o);
}

void write_path_outputs(const Config& c, Writer& w, const SpectralTriple& tri, const Trajectory& tr,
                        const std::vector<double>& phi) {
  if (c.trajectory_csv) {
    std::ostringstream csv;
    csv << "step,t,h_norm,v_norm,phi\n";
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
      csv << i << ',' << fmt(tr.times[i]) << ',' << fmt(tr.h_norm[i]) << ',' << fmt(tr.v_norm[i]) << ','
          << fmt(i < phi.size() ? phi[i] : 0.0) << '\n';
    }
    w.text("trajectory.csv", csv.str());
  }
  if (c.field_dump && !tr.states.empty()) {
    w.field("u_final.spdf", tri, tr.states.back());
    w.slice("u_final.csv", tri, tr.states.back());
  }
}

KindResult run_estimate(const Config& c, const BuiltProblem& bp, Writer& w) {
  KindResult k;
  const auto& kind = c.kind;
  AssemblyOptions o = c.assembly;
  const Assembly as = assemble(bp, o);

  const auto& co = bp.problem.coeffs;
  std::vector<double> alpha;
  std::string estimate;
  const std::vector<std::string>* lhs_names;
  const std::vector<std::string>* rhs_names;
  const bool order1 = bp.triple->order() == 1;
  if (kind == "energy") {
    alpha = order1 ? l2_alpha(co, c.noise, c.weights) : w12_alpha(co, c.noise, c.weights);
    estimate = order1 ? "l2" : "w12";
    lhs_names = order1 ? &l2_lhs_names() : &w12_lhs_names();
    rhs_names = order1 ? &l2_rhs_names() : &w12_rhs_names();
  } else if (kind == "lp") {
    alpha = lp_alpha(co, c.noise, c.weights);
    estimate = "lp";
    lhs_names = &lp_lhs_names();
    rhs_names = &lp_rhs_names();
  } else {
    alpha = w1p_lambda(co, c.noise, c.weights);
    estimate = "w1p";
    lhs_names = &w1p_lhs_names();
    rhs_names = &w1p_rhs_names();
  }
  const auto weights = WeightProcess::from_alpha(alpha, c.noise.dt);

  EnsembleOptions eo;
  eo.n_paths = c.n_paths;
  eo.scheme = c.scheme;
  eo.scheme.keep_states = true;
  Trajectory first;
  const double p = c.p;
  const auto terms = run_ensemble(as.problem, c.noise, eo, [&](const Trajectory& tr) {
    if (tr.path == eo.first_path) first = tr;
    if (kind == "energy") return order1 ? l2_terms(tr, bp.problem, weights) : w12_terms(tr, bp.problem, weights);
    if (kind == "lp") return lp_terms(tr, bp.problem, weights, p);
    return w1p_terms(tr, bp.problem, weights, p);
  });
  const auto rep = reduce_report(estimate, *lhs_names, *rhs_names, terms, c.noise.dt);

  ojson j;
  j["kind"] = kind;
  j["estimate"] = estimate_json(rep);
  if (kind != "energy") j["p"] = num(p);
  j["assembly"] = assembly_json(as);
  ojson wj;
  wj["lambda"] = num(c.weights.lambda);
  wj["mu"] = num(c.weights.mu);
  wj["delta"] = num(c.weights.delta);
  wj["phi_T"] = num(weights.phi.empty() ? 0.0 : weights.phi.back());
  j["weights"] = wj;

  EstimateReport abstract_rep;
  if (c.abstract) {
    const auto dw = default_weights(as.problem, c.noise, c.abstract_epsilon, c.weights.mu);
    abstract_rep = energy_ensemble(as.problem, c.noise, dw, eo);
    j["abstract_energy"] = estimate_json(abstract_rep);
  }

  const bool diverged = rep.n_diverged > 0 || (c.abstract && abstract_rep.n_diverged > 0);
  if (diverged) {
    k.exit_code = 3;
    k.status = "diverged";
    std::ostringstream os;
    os << rep.n_diverged << " of " << rep.n_paths << " paths exceeded the overflow guard";
    k.message = os.str();
  }
  ojson head;
  head["kind"] = kind;
  head["status"] = k.status;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "kind") head[it.key()] = it.value();
  }
  w.json("report.json", head);

  std::ostringstream csv;
  csv << "term,side,value\n";
  for (std::size_t i = 0; i < rep.lhs_names.size(); ++i) csv << rep.lhs_names[i] << ",lhs," << fmt(rep.lhs_terms[i]) << '\n';
  for (std::size_t i = 0; i < rep.rhs_names.size(); ++i) csv << rep.rhs_names[i] << ",rhs," << fmt(rep.rhs_terms[i]) << '\n';
  w.text("terms.csv", csv.str());
  write_path_outputs(c, w, *bp.triple, first, weights.phi);

  k.headline = {{"ratio", rep.ratio},
                {"lhs", rep.lhs},
                {"rhs", rep.rhs},
                {"n_diverged", static_cast<double>(rep.n_diverged)},
                {"delta_est", as.coercivity.delta_est},
                {"n0", as.n0},
                {"gate_sum", as.gate.sum}};
  if (c.abstract) k.headline.emplace_back("abstract_ratio", abstract_rep.ratio);
  return k;
}

KindResult run_stability(const Config& c, const BuiltProblem& bp, Writer& w) {
  KindResult k;
  AssemblyOptions o = c.assembly;
  const Assembly base = assemble(bp, o);
  o.n0 = base.n0;

  std::vector<EvolutionProblem> seq;
  std::vector<MollifyReport> reports;
  for (double eps : c.eps) {
    MollifyOptions mo;
    mo.p = c.mollify_p;
    mo.sampler = &bp.sampler;
    MollifyReport mr;
    BuiltProblem pe{bp.triple, mollify_problem(*bp.triple, bp.problem, eps, mo, &mr), bp.sampler};
    seq.push_back(assemble(pe, o).problem);
    reports.push_back(std::move(mr));
  }
  EnsembleOptions eo;
  eo.n_paths = c.n_paths;
  eo.scheme = c.scheme;
  const auto tab = stability_experiment(base.problem, seq, c.noise, eo);

  bool hats_monotone = true;
  for (const auto& r : reports) hats_monotone = hats_monotone && r.hats_monotone;

  ojson j;
  j["kind"] = "stability";
  j["status"] = "ok";
  j["eps"] = nums(c.eps);
  j["distance"] = nums(tab.distance);
  j["sup_term"] = nums(tab.sup_term);
  j["v_term"] = nums(tab.v_term);
  j["decreasing"] = tab.decreasing;
  j["max_ratio"] = num(tab.max_ratio);
  j["hats_monotone"] = hats_monotone;
  ojson hats = ojson::array();
  for (const auto& r : reports) {
    ojson e;
    for (const auto& [name, pr] : r.hats) e[name] = nums({pr.first, pr.second});
    hats.push_back(e);
  }
  j["hats"] = hats;
  j["assembly"] = assembly_json(base);
  w.json("report.json", j);

  std::ostringstream csv;
  csv << "n,eps,distance,sup_term,v_term\n";
  for (std::size_t i = 0; i < tab.distance.size(); ++i) {
    csv << i + 1 << ',' << fmt(c.eps[i]) << ',' << fmt(tab.distance[i]) << ',' << fmt(tab.sup_term[i]) << ','
        << fmt(tab.v_term[i]) << '\n';
  }
  w.text("stability.csv", csv.str());

  for (std::size_t i = 0; i < tab.distance.size(); ++i) k.headline.emplace_back("D" + std::to_string(i + 1), tab.distance[i]);
  k.headline.emplace_back("max_ratio", tab.max_ratio);
  k.headline.emplace_back("decreasing", tab.decreasing ? 1.0 : 0.0);
  return k;
}

KindResult gate_refusal(const Config& c, const Ctx& ctx, Writer& w, const std::string& message) {
  KindResult k;
  k.exit_code = 2;
  k.status = "gate_refused";
  k.message = message;
  ojson j;
  j["kind"] = c.kind;
  j["status"] = k.status;
  j["message"] = message;
  try {
    const auto bp = build_problem(ctx, c);
    const auto g = smallness_gate(bp.problem.coeffs, bp.triple->order(), c.assembly.theta);
    j["gate"] = gate_json(g);
    k.headline.emplace_back("gate_sum", g.sum);
    k.headline.emplace_back("theta", g.theta);
  } catch (const Error&) {
  }
  w.json("report.json", j);
  return k;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void set_path(YAML::Node root, const std::vector<std::string>& keys, double value) {
  YAML::Node cur = root;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    YAML::Node next = cur[keys[i]];
    if (!next || next.IsNull()) {
      cur[keys[i]] = YAML::Node(YAML::NodeType::Map);
      next = cur[keys[i]];
    }
    cur.reset(next);
  }
  if (value == std::floor(value) && std::abs(value) < 1e15) {
    cur[keys.back()] = static_cast<long long>(value);
  } else {
    cur[keys.back()] = fmt(value);
  }
}

std::vector<std::string> split_dots(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == '.') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

YAML::Node lookup(const YAML::Node& root, const std::vector<std::string>& keys) {
  YAML::Node cur = root;
  for (const auto& k : keys) {
    if (!cur.IsMap() || !cur[k]) return YAML::Node();
    cur.reset(cur[k]);
  }
  return cur;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

Experiment::Experiment(YAML::Node root, std::string base_dir, std::string origin)
    : root_(std::move(root)), base_dir_(std::move(base_dir)), origin_(std::move(origin)) {}

Experiment::Experiment(const Experiment& other)
    : root_(YAML::Clone(other.root_)),
      base_dir_(other.base_dir_),
      origin_(other.origin_),
      output_override_(other.output_override_) {}

Experiment& Experiment::operator=(const Experiment& other) {
  if (this != &other) {
    root_ = YAML::Clone(other.root_);
    base_dir_ = other.base_dir_;
    origin_ = other.origin_;
    output_override_ = other.output_override_;
  }
  return *this;
}

Experiment Experiment::from_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Config, path + ": cannot read config file");
  std::stringstream ss;
  ss << is.rdbuf();
  const auto dir = fs::path(path).parent_path();
  return from_string(ss.str(), dir.empty() ? "." : dir.string(), path);
}

Experiment Experiment::from_string(const std::string& text, const std::string& base_dir, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    std::ostringstream os;
    os << origin << ':' << e.mark.line + 1 << ':' << e.mark.column + 1 << ": syntax error: " << e.msg;
    fail(ErrorKind::Config, os.str());
  }
  if (!root.IsMap()) fail(ErrorKind::Config, origin + ": the config must be a mapping");
  return Experiment(std::move(root), base_dir, origin);
}

void Experiment::validate() const { (void)parse(Ctx{origin_, base_dir_}, root_); }

std::string Experiment::kind() const {
  const auto n = root_["kind"];
  return n && n.IsScalar() ? n.Scalar() : std::string();
}

void Experiment::set_param(const std::string& name, double value) {
  if (!std::isfinite(value)) fail(ErrorKind::Config, "parameter '" + name + "': value must be finite");
  const std::string k = kind() == "sweep" && root_["sweep"] && root_["sweep"]["kind"] ? root_["sweep"]["kind"].Scalar() : kind();
  const bool suite = k == "ito-suite" || k == "resolvent-suite" || k == "morrey-suite";
  auto drop = [&](const char* section, const char* key) {
    if (root_[section] && root_[section].IsMap()) root_[section].remove(key);
  };
  auto noise_has = [&](const char* key) { return root_["noise"] && root_["noise"].IsMap() && root_["noise"][key]; };

  if (name == "kappa") {
    if (k == "gaussian-benchmark") {
      set_path(root_, {"benchmark", "drift_amplitude"}, value);
    } else if (lookup(root_, {"coefficients", "dynamic_drift"})) {
      set_path(root_, {"coefficients", "dynamic_drift", "amplitude"}, value);
    } else if (lookup(root_, {"coefficients", "b", "singular", "amplitude"})) {
      set_path(root_, {"coefficients", "b", "singular", "amplitude"}, value);
    } else {
      fail(ErrorKind::Config, "parameter 'kappa': the config has no drift amplitude to vary");
    }
  } else if (name == "eps") {
    YAML::Node seq(YAML::NodeType::Sequence);
    seq.push_back(fmt(value));
    root_["stability"]["eps"] = seq;
  } else if (name == "dt") {
    if (k == "ito-suite") {
      YAML::Node seq(YAML::NodeType::Sequence);
      seq.push_back(fmt(value));
      root_["suite"]["dts"] = seq;
    } else {
      set_path(root_, {"noise", "dt"}, value);
      if (noise_has("T")) drop("noise", "steps");
    }
  } else if (name == "T") {
    set_path(root_, {"noise", "T"}, value);
    if (noise_has("dt")) drop("noise", "steps");
  } else if (name == "K") {
    set_path(root_, {"noise", "channels"}, value);
  } else if (name == "n_paths") {
    set_path(root_, {suite ? "suite" : "noise", "n_paths"}, value);
  } else if (name == "seed") {
    set_path(root_, {suite ? "suite" : (k == "gaussian-benchmark" ? "benchmark" : "noise"), "seed"}, value);
  } else if (name == "theta" || name == "delta") {
    set_path(root_, {"admissibility", name}, value);
  } else if (name == "lambda" || name == "p") {
    set_path(root_, {"reports", name}, value);
  } else if (name == "grid") {
    set_path(root_, {"triple", "grid"}, value);
  } else if (name == "scale") {
    set_path(root_, {"forcing", "scale"}, value);
  } else {
    const auto keys = split_dots(name);
    const auto node = lookup(root_, keys);
    if (!node || !node.IsScalar()) fail(ErrorKind::Config, "unknown parameter '" + name + "'");
    set_path(root_, keys, value);
  }
}

void Experiment::set_output(const std::string& dir) { output_override_ = dir; }

std::string Experiment::output_dir() const {
  if (!output_override_.empty()) return output_override_;
  const auto n = root_["output"];
  if (n && n.IsScalar() && !n.Scalar().empty()) return n.Scalar();
  return "spdelab_out";
}

std::string Experiment::canonical() const {
  YAML::Emitter em;
  em << root_;
  return std::string(em.c_str()) + "\n";
}

std::string Experiment::hash() const { return fnv1a_hex(canonical()); }

ExperimentOutcome Experiment::run() const {
  const Ctx ctx{origin_, base_dir_};
  const Config c = parse(ctx, root_);
  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();

  if (c.kind == "sweep") {
    Experiment inner(*this);
    inner.root_["kind"] = c.sweep_kind;
    inner.root_.remove("sweep");
    inner.output_override_.clear();
    const auto sw = run_sweep(inner, c.sweep_param, c.sweep_values, output_dir());
    ExperimentOutcome out;
    out.status = "ok";
    std::map<int, int> counts;
    for (const auto& r : sw.runs) counts[r.exit_code]++;
    for (const auto& [code, n] : counts) out.headline.emplace_back("exit_" + std::to_string(code), n);
    out.files = sw.files;
    return out;
  }

  Writer w(output_dir());
  KindResult k;
  try {
    if (c.kind == "resolvent-suite") {
      k = finish_suite(w, c.kind, resolvent_suite(SpectralTriple::create(c.triple), c.resolvent));
    } else if (c.kind == "morrey-suite") {
      k = finish_suite(w, c.kind, morrey_suite(c.morrey));
    } else if (c.kind == "ito-suite") {
      const auto r = ito_suite(c.ito);
      ojson series;
      series["dts"] = nums(c.ito.dts);
      series["ou_mean_max"] = nums(r.ou_mean_max);
      series["ou_second_moment"] = nums(r.ou_second_moment);
      series["martingale_ms"] = nums(r.martingale_ms);
      k = finish_suite(w, c.kind, r.report, series);
      for (std::size_t i = 0; i < r.ou_mean_max.size(); ++i) k.headline.emplace_back("residual_" + std::to_string(i), r.ou_mean_max[i]);
    } else if (c.kind == "gaussian-benchmark") {
      k = run_gaussian(c, w);
    } else {
      const auto bp = build_problem(ctx, c);
      k = c.kind == "stability" ? run_stability(c, bp, w) : run_estimate(c, bp, w);
    }
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::Gate:
        k = gate_refusal(c, ctx, w, e.what());
        break;
      case ErrorKind::Numeric:
      case ErrorKind::Divergence: {
        k = KindResult{};
        k.exit_code = 3;
        k.status = e.kind() == ErrorKind::Numeric ? "numeric_failure" : "diverged";
        k.message = e.what();
        ojson j;
        j["kind"] = c.kind;
        j["status"] = k.status;
        j["message"] = k.message;
        w.json("report.json", j);
        break;
      }
      default:
        throw;
    }
  }

  ojson head = ojson::object();
  for (const auto& [name, v] : k.headline) head[name] = num(v);
  w.json("headline.json", head);

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  w.text("config.yaml", canonical());
  ojson m;
  m["config_hash"] = hash();
  m["code_version"] = kCodeVersion;
  m["kind"] = c.kind;
  m["seed"] = c.kind == "ito-suite" ? c.ito.seed : (c.kind == "gaussian-benchmark" ? c.bench_seed : c.noise.seed);
  m["exit_code"] = k.exit_code;
  m["status"] = k.status;
  m["wall_clock_seconds"] = wall;
  m["started_utc"] = started;
  m["files"] = w.files;
  w.json("manifest.json", m);

  ExperimentOutcome out;
  out.exit_code = k.exit_code;
  out.status = k.status;
  out.message = k.message;
  out.headline = k.headline;
  out.files = w.files;
  return out;
}

SweepOutcome run_sweep(const Experiment& base, const std::string& param, const std::vector<double>& values,
                       const std::string& out_dir) {
  if (values.empty()) fail(ErrorKind::Config, "sweep: at least one value is required");
  {
    Experiment probe(base);
    probe.set_param(param, values.front());
    probe.validate();
  }
  Writer w(out_dir);
  SweepOutcome sw;
  sw.values = values;
  std::vector<std::string> columns;
  std::ostringstream rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    Experiment e(base);
    e.set_param(param, values[i]);
    const std::string sub = param + "_" + std::to_string(i);
    e.set_output((w.dir() / sub).string());
    auto r = e.run();
    for (const auto& [name, v] : r.headline) {
      if (std::find(columns.begin(), columns.end(), name) == columns.end()) columns.push_back(name);
    }
    for (const auto& f : r.files) sw.files.push_back(sub + "/" + f);
    sw.runs.push_back(std::move(r));
  }
  std::ostringstream csv;
  csv << param << ",exit_code,status";
  for (const auto& col : columns) csv << ',' << col;
  csv << '\n';
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& r = sw.runs[i];
    csv << fmt(values[i]) << ',' << r.exit_code << ',' << r.status;
    for (const auto& col : columns) {
      csv << ',';
      for (const auto& [name, v] : r.headline) {
        if (name == col) {
          csv << fmt(v);
          break;
        }
      }
    }
    csv << '\n';
  }
  w.text("sweep.csv", csv.str());

  ojson m;
  m["config_hash"] = base.hash();
  m["code_version"] = kCodeVersion;
  m["param"] = param;
  m["values"] = nums(values);
  ojson codes = ojson::array();
  for (const auto& r : sw.runs) codes.push_back(r.exit_code);
  m["exit_codes"] = codes;
  m["started_utc"] = utc_now();
  std::vector<std::string> files = sw.files;
  files.push_back("sweep.csv");
  m["files"] = files;
  w.json("manifest.json", m);
  files.push_back("manifest.json");
  sw.files = files;
  return sw;
}

}  // namespace spdelab
