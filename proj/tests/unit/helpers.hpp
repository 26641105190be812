#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "kdse/ops.hpp"
#include "kdse/rng.hpp"

namespace testutil::inline KDSE_PRECISION {

using namespace kdse;

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  Tensor t(shape);
  for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

inline Tensor normal_tensor(const Shape& shape, std::uint64_t seed, double stddev = 1) {
  Rng rng(seed);
  Tensor t(shape);
  for (auto& v : t.values()) v = static_cast<Real>(stddev * rng.normal());
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline double max_abs(const Tensor& a) {
  double m = 0;
  for (Real v : a.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

inline bool all_finite(const Tensor& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](Real v) { return std::isfinite(v); });
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(std::rand()) + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil::inline KDSE_PRECISION
