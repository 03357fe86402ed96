#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "core/error.hpp"
#include "core/experiment.hpp"
#include "core/field_io.hpp"

#include "json.hpp"

using namespace spdelab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  static std::atomic<int> counter{0};
  const fs::path p = fs::temp_directory_path() /
                     ("spdelab_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string config_error(const std::string& text) {
  try {
    Experiment::from_string(text, ".", "cfg").validate();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "config accepted:\n" << text;
  return {};
}

const char* kEnergy = R"(kind: energy
triple: {dim: 1, grid: 16, box: 6.283185307179586}
coefficients:
  sigma: {diagonal: 0.5}
forcing:
  u0: {kind: sine, mode: [1]}
  g: 0.3
noise: {channels: 1, dt: 0.01, steps: 20, seed: 4, n_paths: 3}
)";

}  // namespace

TEST(FieldIo, RoundTrip) {
  const auto dir = scratch("io");
  FieldFile f;
  f.dim = 2;
  f.grid = 4;
  f.box = 3.5;
  f.components = 2;
  f.times = {0.0, 0.25};
  for (int t = 0; t < 2; ++t) {
    std::vector<Field> comps;
    for (int c = 0; c < 2; ++c) {
      Field v(16);
      for (std::size_t q = 0; q < v.size(); ++q) v[q] = 0.1 * static_cast<double>(q) - t + 7.0 * c;
      comps.push_back(v);
    }
    f.data.push_back(comps);
  }
  const auto path = (dir / "f.spdf").string();
  write_field_file(path, f);
  const auto g = read_field_file(path);
  EXPECT_EQ(g.dim, 2);
  EXPECT_EQ(g.grid, 4);
  EXPECT_EQ(g.box, 3.5);
  EXPECT_EQ(g.times, f.times);
  EXPECT_EQ(g.data, f.data);
  check_geometry(g, *SpectralTriple::create({2, 4, 3.5, 1}));
  EXPECT_THROW(check_geometry(g, *SpectralTriple::create({2, 8, 3.5, 1})), Error);
}

TEST(FieldIo, RejectsTruncatedAndForeignFiles) {
  const auto dir = scratch("bad");
  std::ofstream(dir / "junk.spdf") << "not a field";
  EXPECT_THROW(read_field_file((dir / "junk.spdf").string()), Error);
  EXPECT_THROW(read_field_file((dir / "absent.spdf").string()), Error);
  FieldFile f;
  f.grid = 8;
  f.box = 1.0;
  f.data = {{Field(8, 1.0)}};
  write_field_file((dir / "ok.spdf").string(), f);
  const auto bytes = slurp(dir / "ok.spdf");
  std::ofstream(dir / "cut.spdf", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW(read_field_file((dir / "cut.spdf").string()), Error);
}

TEST(Config, DiagnosticsCarryLocationAndField) {
  EXPECT_NE(config_error("kind: energy\ntriple: {dim: 1, grid: 16, box: 6.28, bogus: 1}\n")
                .find("cfg:2:39: field 'triple.bogus': unknown field"),
            std::string::npos);
  EXPECT_NE(config_error("triple: {grid: 16}\n").find("field 'kind': required field is missing"), std::string::npos);
  EXPECT_NE(config_error("kind: energy\nnoise: {dt: 0.1, steps: 3, T: 1}\n").find("dt * steps must equal T"),
            std::string::npos);
  EXPECT_NE(config_error("kind: nope\n").find("unknown experiment kind 'nope'"), std::string::npos);
  EXPECT_NE(config_error("kind: energy\nforcing:\n  u0: {kind: file, path: missing.spdf}\n").find("does not exist"),
            std::string::npos);
  EXPECT_NE(config_error("kind: energy\ntriple: {grid: -4}\n").find("triple"), std::string::npos);
  EXPECT_NE(config_error("kind: energy\nnoise: [1, 2]\n").find("noise"), std::string::npos);
  EXPECT_THROW(Experiment::from_string("kind: [unclosed\n"), Error);
}

TEST(Config, CanonicalFormAndHashIgnoreFormatting) {
  const auto a = Experiment::from_string(kEnergy);
  const auto b = Experiment::from_string(std::string(kEnergy) + "\n# trailing comment\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  auto c = a;
  c.set_param("seed", 5);
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(Experiment::from_string(a.canonical()).hash(), a.hash());
}

TEST(Config, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fnv1a_hex("foobar"), "85944171f73967e8");
}

TEST(Config, SetParamRoutesNamedKnobs) {
  auto e = Experiment::from_string(kEnergy);
  e.set_param("K", 2);
  e.set_param("n_paths", 7);
  e.set_param("theta", 0.05);
  e.set_param("grid", 32);
  e.set_param("dt", 0.02);
  e.set_param("forcing.g", 0.6);
  const auto canon = e.canonical();
  for (const char* needle : {"channels: 2", "n_paths: 7", "theta: 0.05", "grid: 32", "dt: 0.02", "g: 0.6"}) {
    EXPECT_NE(canon.find(needle), std::string::npos) << needle << "\n" << canon;
  }
  EXPECT_THROW(e.set_param("no_such_knob", 1.0), Error);
  EXPECT_THROW(e.set_param("forcing.missing", 1.0), Error);
}

TEST(Run, WritesManifestAndDeclaredFiles) {
  const auto dir = scratch("run");
  auto e = Experiment::from_string(kEnergy);
  e.set_output(dir.string());
  const auto r = e.run();
  EXPECT_EQ(r.exit_code, 0) << r.message;
  for (const auto& f : r.files) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(m["config_hash"], e.hash());
  EXPECT_EQ(m["kind"], "energy");
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_EQ(m["code_version"], kCodeVersion);
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_TRUE(report["estimate"].contains("ratio"));
  EXPECT_EQ(Experiment::from_file((dir / "config.yaml").string()).hash(), e.hash());
}

TEST(Run, RepeatedRunsAreByteIdentical) {
  const auto d1 = scratch("rep1"), d2 = scratch("rep2");
  auto e = Experiment::from_string(kEnergy);
  e.set_output(d1.string());
  (void)e.run();
  e.set_output(d2.string());
  (void)e.run();
  for (const char* f : {"report.json", "terms.csv", "trajectory.csv", "u_final.spdf", "headline.json"}) {
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
}

TEST(Run, GateRefusalExitsTwo) {
  const auto dir = scratch("gate");
  auto e = Experiment::from_string(R"(kind: energy
triple: {dim: 1, grid: 16, box: 6.283185307179586}
coefficients:
  sigma: {diagonal: 1.6}
noise: {channels: 1, dt: 0.01, steps: 5}
)");
  e.set_output(dir.string());
  const auto r = e.run();
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_FALSE(r.message.empty());
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(Sweep, OneRowPerValue) {
  const auto dir = scratch("sweep");
  const auto e = Experiment::from_string(kEnergy);
  const auto s = run_sweep(e, "scale", {0.5, 1.0, 2.0}, dir.string());
  ASSERT_EQ(s.runs.size(), 3u);
  std::istringstream csv(slurp(dir / "sweep.csv"));
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header.rfind("scale,exit_code,status", 0), 0u) << header;
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(fs::exists(dir / ("scale_" + std::to_string(i)) / "manifest.json"));
  // the data enter quadratically on both sides, so the ratio is scale invariant
  auto ratio = [](const ExperimentOutcome& o) {
    for (const auto& [k, v] : o.headline) {
      if (k == "ratio") return v;
    }
    return -1.0;
  };
  EXPECT_NEAR(ratio(s.runs[0]), ratio(s.runs[2]), 1e-9 * ratio(s.runs[1]));
  EXPECT_THROW(run_sweep(e, "bogus", {1.0}, (dir / "x").string()), Error);
}
