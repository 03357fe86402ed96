#include "core/fft.hpp"

#include <fftw3.h>

#include <mutex>
#include <vector>

#include "core/error.hpp"

namespace spdelab {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

FftPlan::FftPlan(int dim, int grid) {
  if (dim < 1 || grid < 1) fail(ErrorKind::Shape, "fft: invalid grid");
  std::vector<int> n(static_cast<std::size_t>(dim), grid);
  size_ = 1;
  for (int i = 0; i < dim; ++i) size_ *= static_cast<std::size_t>(grid);
  std::vector<cplx> a(size_), b(size_);
  auto* in = reinterpret_cast<fftw_complex*>(a.data());
  auto* out = reinterpret_cast<fftw_complex*>(b.data());
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  std::lock_guard<std::mutex> lock(planner_mutex());
  forward_ = fftw_plan_dft(dim, n.data(), in, out, FFTW_FORWARD, flags);
  backward_ = fftw_plan_dft(dim, n.data(), in, out, FFTW_BACKWARD, flags);
  if (forward_ == nullptr || backward_ == nullptr) fail(ErrorKind::Numeric, "fft: planner failed");
}

FftPlan::~FftPlan() {
  std::lock_guard<std::mutex> lock(planner_mutex());
  if (forward_ != nullptr) fftw_destroy_plan(static_cast<fftw_plan>(forward_));
  if (backward_ != nullptr) fftw_destroy_plan(static_cast<fftw_plan>(backward_));
}

void FftPlan::forward(const cplx* in, cplx* out) const {
  fftw_execute_dft(static_cast<fftw_plan>(forward_),
                   reinterpret_cast<fftw_complex*>(const_cast<cplx*>(in)),
                   reinterpret_cast<fftw_complex*>(out));
}

void FftPlan::backward(const cplx* in, cplx* out) const {
  fftw_execute_dft(static_cast<fftw_plan>(backward_),
                   reinterpret_cast<fftw_complex*>(const_cast<cplx*>(in)),
                   reinterpret_cast<fftw_complex*>(out));
}

}  // namespace spdelab
