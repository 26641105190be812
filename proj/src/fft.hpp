#pragma once

#include <complex>

#include "kdse/tensor.hpp"

namespace kdse::inline KDSE_PRECISION {

/// Cached FFTW plans for real transforms of one size. Plans are created
/// under a global lock; execution is thread-safe.
class RealFft {
 public:
  explicit RealFft(Index n);

  Index size() const { return n_; }
  /// n real samples -> n/2+1 bins.
  void forward(const Real* in, std::complex<Real>* out) const;
  /// n/2+1 bins -> n samples, unnormalized. `scratch` holds n/2+1 values.
  void inverse(const std::complex<Real>* in, Real* out, std::complex<Real>* scratch) const;

 private:
  Index n_;
  void* forward_plan_;
  void* inverse_plan_;
};

}  // namespace kdse::inline KDSE_PRECISION
