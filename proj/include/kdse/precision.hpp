#pragma once

// Everything numeric lives in kdse::f32 (default) or kdse::f64 (built with
// KDSE_DOUBLE_PRECISION). Both variants can be linked into one binary; the
// double build backs the finite-difference gradient checks.

#if defined(KDSE_DOUBLE_PRECISION)
#define KDSE_PRECISION f64
#else
#define KDSE_PRECISION f32
#endif

namespace kdse::inline KDSE_PRECISION {

#if defined(KDSE_DOUBLE_PRECISION)
using Real = double;
#else
using Real = float;
#endif

}  // namespace kdse::inline KDSE_PRECISION
