#include "spdelab/spdelab.h"

#include <cstring>
#include <memory>
#include <string>

#include "json.hpp"

#include "core/error.hpp"
#include "core/experiment.hpp"
#include "core/triple.hpp"

struct spdelab_triple {
  spdelab::TriplePtr triple;
};

struct spdelab_experiment {
  spdelab::Experiment experiment;
  std::string summary;
  std::string output;
};

namespace {

thread_local std::string last_error;

spdelab_status code_of(spdelab::ErrorKind kind) {
  switch (kind) {
    case spdelab::ErrorKind::Gate: return SPDELAB_EGATE;
    case spdelab::ErrorKind::Numeric:
    case spdelab::ErrorKind::Divergence: return SPDELAB_ENUMERIC;
    default: return SPDELAB_ECONFIG;
  }
}

template <typename F>
spdelab_status guarded(F&& body) {
  last_error.clear();
  try {
    return body();
  } catch (const spdelab::Error& e) {
    last_error = e.what();
    return code_of(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return SPDELAB_ENUMERIC;
  } catch (const std::exception& e) {
    last_error = e.what();
    return SPDELAB_ECONFIG;
  }
}

spdelab_status null_arg(const char* what) {
  last_error = std::string("null argument: ") + what;
  return SPDELAB_ECONFIG;
}

}  // namespace

extern "C" {

const char* spdelab_version(void) { return spdelab::kCodeVersion; }

const char* spdelab_last_error(void) { return last_error.c_str(); }

spdelab_status spdelab_triple_create(int dim, int grid, double box, int order, spdelab_triple** out) {
  if (!out) return null_arg("out");
  *out = nullptr;
  return guarded([&] {
    auto t = std::make_unique<spdelab_triple>();
    t->triple = spdelab::SpectralTriple::create({dim, grid, box, order});
    *out = t.release();
    return SPDELAB_OK;
  });
}

void spdelab_triple_destroy(spdelab_triple* t) { delete t; }

size_t spdelab_triple_size(const spdelab_triple* t) { return t ? t->triple->size() : 0; }

spdelab_status spdelab_triple_coords(const spdelab_triple* t, double* out) {
  if (!t || !out) return null_arg("triple or out");
  return guarded([&] {
    const auto& tri = *t->triple;
    const int d = tri.dim();
    for (std::size_t q = 0; q < tri.size(); ++q) {
      for (int a = 0; a < d; ++a) out[q * static_cast<std::size_t>(d) + static_cast<std::size_t>(a)] = tri.coord(q, a);
    }
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_triple_resolvent(const spdelab_triple* t, double lambda, const double* f, double* v) {
  if (!t || !f || !v) return null_arg("triple, f or v");
  return guarded([&] {
    const std::size_t n = t->triple->size();
    auto g = spdelab::make_grid_function(t->triple, spdelab::Field(f, f + n));
    const auto r = spdelab::resolvent(t->triple, lambda, g);
    std::memcpy(v, r.values.data(), n * sizeof(double));
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_triple_norms(const spdelab_triple* t, const double* u, double* h_norm, double* v_norm) {
  if (!t || !u) return null_arg("triple or u");
  return guarded([&] {
    const std::size_t n = t->triple->size();
    const auto nr = spdelab::norms(t->triple, spdelab::make_grid_function(t->triple, spdelab::Field(u, u + n)));
    if (h_norm) *h_norm = nr.h_norm;
    if (v_norm) *v_norm = nr.v_norm;
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_experiment_load(const char* path, spdelab_experiment** out) {
  if (!path || !out) return null_arg("path or out");
  *out = nullptr;
  return guarded([&] {
    *out = new spdelab_experiment{spdelab::Experiment::from_file(path), {}, {}};
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_experiment_load_string(const char* text, const char* base_dir, spdelab_experiment** out) {
  if (!text || !out) return null_arg("text or out");
  *out = nullptr;
  return guarded([&] {
    *out = new spdelab_experiment{spdelab::Experiment::from_string(text, base_dir ? base_dir : "."), {}, {}};
    return SPDELAB_OK;
  });
}

void spdelab_experiment_destroy(spdelab_experiment* e) { delete e; }

spdelab_status spdelab_experiment_validate(const spdelab_experiment* e) {
  if (!e) return null_arg("experiment");
  return guarded([&] {
    e->experiment.validate();
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_experiment_set_param(spdelab_experiment* e, const char* name, double value) {
  if (!e || !name) return null_arg("experiment or name");
  return guarded([&] {
    e->experiment.set_param(name, value);
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_experiment_set_output(spdelab_experiment* e, const char* dir) {
  if (!e || !dir) return null_arg("experiment or dir");
  return guarded([&] {
    e->experiment.set_output(dir);
    return SPDELAB_OK;
  });
}

const char* spdelab_experiment_output(spdelab_experiment* e) {
  if (!e) return "";
  e->output = e->experiment.output_dir();
  return e->output.c_str();
}

spdelab_status spdelab_experiment_hash(const spdelab_experiment* e, char* out, size_t capacity) {
  if (!e || !out) return null_arg("experiment or out");
  return guarded([&] {
    const auto h = e->experiment.hash();
    if (capacity < h.size() + 1) {
      last_error = "hash buffer too small";
      return SPDELAB_ECONFIG;
    }
    std::memcpy(out, h.c_str(), h.size() + 1);
    return SPDELAB_OK;
  });
}

spdelab_status spdelab_experiment_run(spdelab_experiment* e) {
  if (!e) return null_arg("experiment");
  e->summary.clear();
  return guarded([&] {
    const auto r = e->experiment.run();
    nlohmann::ordered_json j;
    j["exit_code"] = r.exit_code;
    j["status"] = r.status;
    j["message"] = r.message;
    j["output"] = e->experiment.output_dir();
    nlohmann::ordered_json head = nlohmann::ordered_json::object();
    for (const auto& [name, v] : r.headline) head[name] = v;
    j["headline"] = head;
    j["files"] = r.files;
    e->summary = j.dump(2);
    if (!r.message.empty()) last_error = r.message;
    return static_cast<spdelab_status>(r.exit_code);
  });
}

const char* spdelab_experiment_summary(const spdelab_experiment* e) { return e ? e->summary.c_str() : ""; }

spdelab_status spdelab_sweep(const spdelab_experiment* e, const char* param, const double* values, size_t count,
                             const char* out_dir) {
  if (!e || !param || (!values && count) || !out_dir) return null_arg("experiment, param, values or out_dir");
  return guarded([&] {
    (void)spdelab::run_sweep(e->experiment, param, std::vector<double>(values, values + count), out_dir);
    return SPDELAB_OK;
  });
}

}  // extern "C"
