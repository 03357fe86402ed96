#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/triple.hpp"

namespace spdelab {

// Flat binary field file: "SPDF", u32 version, u32 dim, u32 grid, f64 box,
// u32 components, u32 times, then f64 times[times], then f64 values laid out
// [time][component][node]. Little-endian.
struct FieldFile {
  int dim = 1;
  int grid = 0;
  double box = 0.0;
  int components = 1;
  std::vector<double> times{0.0};
  std::vector<std::vector<Field>> data;  // [time][component]

  [[nodiscard]] std::size_t nodes() const;
  void validate() const;
};

void write_field_file(const std::string& path, const FieldFile& file);
FieldFile read_field_file(const std::string& path);

// Checks that a file matches a triple's geometry.
void check_geometry(const FieldFile& file, const SpectralTriple& triple);

// CSV slice through the origin node: 1-D gives "x,value" rows, 2-D gives
// "x,y,value" rows over the whole plane, 3-D the z = 0 plane.
void write_csv_slice(const std::string& path, const SpectralTriple& triple, const Field& f);

}  // namespace spdelab
