#pragma once

#include <complex>
#include <cstddef>

namespace spdelab {

using cplx = std::complex<double>;

// Unnormalized complex FFT on an M^d periodic grid (row-major, axis 0 slowest).
// Plans are created once; execution is thread-safe on distinct buffers.
class FftPlan {
 public:
  FftPlan(int dim, int grid);
  ~FftPlan();
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;

  void forward(const cplx* in, cplx* out) const;
  void backward(const cplx* in, cplx* out) const;
  [[nodiscard]] std::size_t size() const noexcept { return size_; }

 private:
  void* forward_ = nullptr;
  void* backward_ = nullptr;
  std::size_t size_ = 0;
};

}  // namespace spdelab
