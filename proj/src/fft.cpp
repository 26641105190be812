#include "fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace kdse::inline KDSE_PRECISION {

namespace {

#if defined(KDSE_DOUBLE_PRECISION)
using FftwComplex = fftw_complex;
using FftwPlan = fftw_plan;
#define KDSE_FFTW(name) fftw_##name
#else
using FftwComplex = fftwf_complex;
using FftwPlan = fftwf_plan;
#define KDSE_FFTW(name) fftwf_##name
#endif

struct PlanPair {
  FftwPlan forward;
  FftwPlan inverse;
};

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

PlanPair plans_for(Index n) {
  static std::map<Index, PlanPair> cache;
  std::lock_guard lock(planner_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<Real> real(static_cast<std::size_t>(n));
  std::vector<std::complex<Real>> cplx(static_cast<std::size_t>(n / 2 + 1));
  auto* c = reinterpret_cast<FftwComplex*>(cplx.data());
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  PlanPair p{KDSE_FFTW(plan_dft_r2c_1d)(static_cast<int>(n), real.data(), c, flags),
             KDSE_FFTW(plan_dft_c2r_1d)(static_cast<int>(n), c, real.data(), flags)};
  if (!p.forward || !p.inverse) throw std::runtime_error("FFT planning failed for size " + std::to_string(n));
  cache.emplace(n, p);
  return p;
}

}  // namespace

RealFft::RealFft(Index n) : n_(n) {
  if (n < 2) throw std::invalid_argument("FFT size must be at least 2");
  const PlanPair p = plans_for(n);
  forward_plan_ = p.forward;
  inverse_plan_ = p.inverse;
}

void RealFft::forward(const Real* in, std::complex<Real>* out) const {
  KDSE_FFTW(execute_dft_r2c)(static_cast<FftwPlan>(forward_plan_), const_cast<Real*>(in),
                             reinterpret_cast<FftwComplex*>(out));
}

void RealFft::inverse(const std::complex<Real>* in, Real* out, std::complex<Real>* scratch) const {
  std::copy(in, in + n_ / 2 + 1, scratch);
  KDSE_FFTW(execute_dft_c2r)(static_cast<FftwPlan>(inverse_plan_),
                             reinterpret_cast<FftwComplex*>(scratch), out);
}

}  // namespace kdse::inline KDSE_PRECISION
