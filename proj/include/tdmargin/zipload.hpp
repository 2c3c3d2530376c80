#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "tdmargin/error.hpp"

namespace tdmargin {

/// Constant impedance / constant current / constant power shares of a load.
struct ZipFractions {
  double z = 0.0;
  double i = 0.0;
  double p = 1.0;

  [[nodiscard]] double sum() const { return z + i + p; }
  friend bool operator==(const ZipFractions&, const ZipFractions&) = default;
};

/// Voltage dependent load. p0/q0 are per-unit on the system base and refer to
/// the consumption at v == v0 and lambda == 1.
struct ZipLoad {
  double p0 = 0.0;
  double q0 = 0.0;
  double v0 = 1.0;
  ZipFractions p_frac{};
  ZipFractions q_frac{};

  friend bool operator==(const ZipLoad&, const ZipLoad&) = default;
};

struct PQ {
  double p = 0.0;
  double q = 0.0;

  friend bool operator==(const PQ&, const PQ&) = default;
};

inline constexpr double kZipFractionTolerance = 1e-12;

/// Throws InputError naming `label` if the load breaks its invariants.
inline void check_zip(const ZipLoad& load, std::string_view label) {
  auto fail = [&](const std::string& what) {
    throw InputError("load '" + std::string(label) + "': " + what);
  };
  if (!(load.v0 > 0.0)) fail("nominal voltage v0 must be positive");
  if (std::abs(load.p_frac.sum() - 1.0) > kZipFractionTolerance)
    fail("active ZIP fractions sum to " + std::to_string(load.p_frac.sum()) + ", expected 1");
  if (std::abs(load.q_frac.sum() - 1.0) > kZipFractionTolerance)
    fail("reactive ZIP fractions sum to " + std::to_string(load.q_frac.sum()) + ", expected 1");
}

namespace detail {
inline double zip_shape(const ZipFractions& f, double ratio) {
  return f.z * ratio * ratio + f.i * ratio + f.p;
}
inline double zip_shape_dv(const ZipFractions& f, double ratio, double v0) {
  return (2.0 * f.z * ratio + f.i) / v0;
}
}  // namespace detail

/// Load consumption at voltage magnitude `v` with the base scaled by `lambda`.
inline PQ eval_zip(const ZipLoad& load, double v, double lambda = 1.0) {
  const double ratio = v / load.v0;
  return {lambda * load.p0 * detail::zip_shape(load.p_frac, ratio),
          lambda * load.q0 * detail::zip_shape(load.q_frac, ratio)};
}

/// d(eval_zip)/dv.
inline PQ eval_zip_dv(const ZipLoad& load, double v, double lambda = 1.0) {
  const double ratio = v / load.v0;
  return {lambda * load.p0 * detail::zip_shape_dv(load.p_frac, ratio, load.v0),
          lambda * load.q0 * detail::zip_shape_dv(load.q_frac, ratio, load.v0)};
}

/// Same load with its base powers multiplied by `lambda`.
inline ZipLoad scaled(ZipLoad load, double lambda) {
  load.p0 *= lambda;
  load.q0 *= lambda;
  return load;
}

}  // namespace tdmargin
