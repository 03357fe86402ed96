#include "core/field_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "core/error.hpp"

namespace spdelab {

static_assert(std::endian::native == std::endian::little, "field files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'P', 'D', 'F'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) fail(ErrorKind::Io, "field file '" + path + "' is truncated");
  return v;
}

}  // namespace

std::size_t FieldFile::nodes() const {
  std::size_t n = 1;
  for (int a = 0; a < dim; ++a) n *= static_cast<std::size_t>(grid);
  return n;
}

void FieldFile::validate() const {
  if (dim < 1 || dim > 3) fail(ErrorKind::Shape, "field file: dim must be 1, 2 or 3");
  if (grid < 2) fail(ErrorKind::Shape, "field file: grid must be at least 2");
  if (!(box > 0.0)) fail(ErrorKind::Shape, "field file: box must be positive");
  if (components < 1) fail(ErrorKind::Shape, "field file: components must be positive");
  if (times.empty() || data.size() != times.size()) fail(ErrorKind::Shape, "field file: time count mismatch");
  for (const auto& slice : data) {
    if (slice.size() != static_cast<std::size_t>(components)) fail(ErrorKind::Shape, "field file: component count mismatch");
    for (const auto& f : slice) {
      if (f.size() != nodes()) fail(ErrorKind::Shape, "field file: node count mismatch");
    }
  }
}

void write_field_file(const std::string& path, const FieldFile& file) {
  file.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(file.dim));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(file.grid));
  put<double>(os, file.box);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(file.components));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(file.times.size()));
  for (double t : file.times) put<double>(os, t);
  for (const auto& slice : file.data) {
    for (const auto& f : slice) os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(double)));
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path + "' failed");
}

FieldFile read_field_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open field file '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) fail(ErrorKind::Io, "'" + path + "' is not a field file");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) fail(ErrorKind::Io, "'" + path + "': unsupported version " + std::to_string(version));
  FieldFile f;
  f.dim = static_cast<int>(get<std::uint32_t>(is, path));
  f.grid = static_cast<int>(get<std::uint32_t>(is, path));
  f.box = get<double>(is, path);
  f.components = static_cast<int>(get<std::uint32_t>(is, path));
  const auto nt = get<std::uint32_t>(is, path);
  if (f.dim < 1 || f.dim > 3 || f.grid < 2 || f.components < 1 || nt < 1 || nt > 1000000) {
    fail(ErrorKind::Io, "'" + path + "': corrupt header");
  }
  f.times.resize(nt);
  for (auto& t : f.times) t = get<double>(is, path);
  const std::size_t n = f.nodes();
  f.data.assign(nt, std::vector<Field>(static_cast<std::size_t>(f.components), Field(n)));
  for (auto& slice : f.data) {
    for (auto& c : slice) {
      if (!is.read(reinterpret_cast<char*>(c.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
        fail(ErrorKind::Io, "field file '" + path + "' is truncated");
      }
      for (double x : c) {
        if (!std::isfinite(x)) fail(ErrorKind::Io, "field file '" + path + "' holds non-finite values");
      }
    }
  }
  return f;
}

void check_geometry(const FieldFile& file, const SpectralTriple& triple) {
  if (file.dim != triple.dim() || file.grid != triple.grid() || std::abs(file.box - triple.box()) > 1e-12 * triple.box()) {
    std::ostringstream os;
    os << "field file geometry (d=" << file.dim << ", M=" << file.grid << ", L=" << file.box
       << ") does not match the triple (d=" << triple.dim() << ", M=" << triple.grid() << ", L=" << triple.box() << ")";
    fail(ErrorKind::Shape, os.str());
  }
}

void write_csv_slice(const std::string& path, const SpectralTriple& triple, const Field& f) {
  triple.check_shape(f);
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
  os.precision(17);
  const int d = triple.dim();
  const int m = triple.grid();
  if (d == 1) {
    os << "x,value\n";
    for (std::size_t i = 0; i < f.size(); ++i) os << triple.coord(i, 0) << ',' << f[i] << '\n';
    return;
  }
  os << "x,y,value\n";
  // row-major, axis 0 slowest: node = (i*M + j)*M + k in 3-D; take k at the origin
  const std::size_t mz = static_cast<std::size_t>(m / 2);
  for (std::size_t i = 0; i < static_cast<std::size_t>(m); ++i) {
    for (std::size_t j = 0; j < static_cast<std::size_t>(m); ++j) {
      const std::size_t node = d == 2 ? i * m + j : (i * m + j) * m + mz;
      os << triple.coord(node, 0) << ',' << triple.coord(node, 1) << ',' << f[node] << '\n';
    }
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path + "' failed");
}

}  // namespace spdelab
