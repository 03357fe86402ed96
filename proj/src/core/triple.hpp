#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "core/fft.hpp"

namespace spdelab {

using Field = std::vector<double>;
using Spectrum = std::vector<cplx>;

struct TripleSpec {
  int dim = 1;
  int grid = 64;           // M, even
  double box = 6.283185307179586;
  int order = 1;           // 1: (L2, W^1_2), 2: (W^1_2, W^2_2)
};

// Discrete Gelfand pair V ⊂ H on the periodic box [-L/2, L/2)^d.
// Coefficients are scaled so that sum |û|^2 equals the grid L2 norm h^d sum u^2.
class SpectralTriple {
 public:
  static std::shared_ptr<const SpectralTriple> create(const TripleSpec& spec);

  [[nodiscard]] const TripleSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] int dim() const noexcept { return spec_.dim; }
  [[nodiscard]] int grid() const noexcept { return spec_.grid; }
  [[nodiscard]] double box() const noexcept { return spec_.box; }
  [[nodiscard]] int order() const noexcept { return spec_.order; }
  [[nodiscard]] std::size_t size() const noexcept { return size_; }
  [[nodiscard]] double spacing() const noexcept { return spacing_; }
  [[nodiscard]] double cell_volume() const noexcept { return cell_volume_; }

  // Node coordinate along an axis; the origin is a node.
  [[nodiscard]] double coord(std::size_t node, int axis) const;
  [[nodiscard]] std::array<int, 3> index(std::size_t node) const;

  [[nodiscard]] double xi(std::size_t mode, int axis) const;
  [[nodiscard]] bool nyquist(std::size_t mode, int axis) const;
  [[nodiscard]] std::span<const double> xi_squared() const noexcept { return xi2_; }
  [[nodiscard]] std::span<const double> weight_h() const noexcept { return wh_; }
  [[nodiscard]] std::span<const double> weight_v() const noexcept { return wv_; }

  [[nodiscard]] Spectrum forward(std::span<const double> u) const;
  [[nodiscard]] Field inverse(std::span<const cplx> uhat) const;

  // Spectral derivative i·xi_axis (Nyquist column dropped so real fields stay real).
  [[nodiscard]] Spectrum derivative(std::span<const cplx> uhat, int axis) const;
  [[nodiscard]] Field gradient(std::span<const double> u, int axis) const;
  [[nodiscard]] Field laplacian(std::span<const double> u) const;

  [[nodiscard]] double inner_h(std::span<const double> u, std::span<const double> v) const;
  [[nodiscard]] double inner_v(std::span<const double> u, std::span<const double> v) const;
  [[nodiscard]] double inner_l2(std::span<const double> u, std::span<const double> v) const;
  [[nodiscard]] double norm_h(std::span<const double> u) const;
  [[nodiscard]] double norm_v(std::span<const double> u) const;
  [[nodiscard]] double norm_l2(std::span<const double> u) const;
  // Dual norm of the functional u -> (u, y)_H on V.
  [[nodiscard]] double norm_vstar(std::span<const double> y) const;

  void check_shape(std::span<const double> u) const;

 private:
  explicit SpectralTriple(const TripleSpec& spec);

  TripleSpec spec_;
  std::size_t size_ = 0;
  double spacing_ = 0.0;
  double cell_volume_ = 0.0;
  double scale_ = 0.0;
  std::vector<double> axis_xi_;
  std::vector<double> xi2_, wh_, wv_;
  std::unique_ptr<FftPlan> plan_;
};

using TriplePtr = std::shared_ptr<const SpectralTriple>;

struct GridFunction {
  TriplePtr triple;
  Field values;
};

struct Norms {
  double h_norm = 0.0;
  double v_norm = 0.0;
};

// v with v̂ = f̂ w_H / (λ w_H + w_V): the solution of (f,u)_H = λ(v,u)_H + (v,u)_V.
GridFunction resolvent(const TriplePtr& triple, double lambda, const GridFunction& f);
// S_n f = n R_n f.
GridFunction smooth(const TriplePtr& triple, int n, const GridFunction& f);
Norms norms(const TriplePtr& triple, const GridFunction& f);
// g with R_λ g = v, via the inverse symbol.
GridFunction resolvent_preimage(const TriplePtr& triple, double lambda, const GridFunction& v);

GridFunction make_grid_function(const TriplePtr& triple, Field values);

}  // namespace spdelab
