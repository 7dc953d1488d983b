/**
 * @file tensor.hpp
 * @brief Small-strain symmetric tensor algebra for plane-strain and 3D states.
 *
 * Plane-strain kinematics keep the out-of-plane normal component in the
 * stored state so that 3D traces, deviators and von Mises norms are exact,
 * which isochoric J2 plasticity requires.
 */

#ifndef DUCTILE_TENSOR_HPP
#define DUCTILE_TENSOR_HPP

#include <array>
#include <cmath>
#include <cstddef>

#include <Eigen/Core>

namespace ductile {

/// Symmetric second-order tensor, components ordered xx, yy, zz, xy, yz, zx.
/// Shear components are tensor components (not engineering shear).
class SymTensor {
 public:
  SymTensor() : c_{0, 0, 0, 0, 0, 0} {}
  SymTensor(double xx, double yy, double zz, double xy, double yz, double zx)
      : c_{xx, yy, zz, xy, yz, zx} {}

  static SymTensor zero() { return SymTensor(); }
  static SymTensor identity() { return {1, 1, 1, 0, 0, 0}; }
  static SymTensor diag(double a, double b, double c) { return {a, b, c, 0, 0, 0}; }

  double xx() const { return c_[0]; }
  double yy() const { return c_[1]; }
  double zz() const { return c_[2]; }
  double xy() const { return c_[3]; }
  double yz() const { return c_[4]; }
  double zx() const { return c_[5]; }

  double& operator[](std::size_t i) { return c_[i]; }
  double operator[](std::size_t i) const { return c_[i]; }

  double trace() const { return c_[0] + c_[1] + c_[2]; }

  /// Deviatoric part, using the 3D trace.
  SymTensor dev() const {
    const double m = trace() / 3.0;
    return {c_[0] - m, c_[1] - m, c_[2] - m, c_[3], c_[4], c_[5]};
  }

  /// Double contraction A : B.
  double ddot(const SymTensor& o) const {
    return c_[0] * o.c_[0] + c_[1] * o.c_[1] + c_[2] * o.c_[2] +
           2.0 * (c_[3] * o.c_[3] + c_[4] * o.c_[4] + c_[5] * o.c_[5]);
  }

  double norm() const { return std::sqrt(ddot(*this)); }

  SymTensor operator+(const SymTensor& o) const {
    return {c_[0] + o.c_[0], c_[1] + o.c_[1], c_[2] + o.c_[2],
            c_[3] + o.c_[3], c_[4] + o.c_[4], c_[5] + o.c_[5]};
  }
  SymTensor operator-(const SymTensor& o) const {
    return {c_[0] - o.c_[0], c_[1] - o.c_[1], c_[2] - o.c_[2],
            c_[3] - o.c_[3], c_[4] - o.c_[4], c_[5] - o.c_[5]};
  }
  SymTensor operator*(double s) const {
    return {c_[0] * s, c_[1] * s, c_[2] * s, c_[3] * s, c_[4] * s, c_[5] * s};
  }
  SymTensor& operator+=(const SymTensor& o) {
    for (std::size_t i = 0; i < 6; ++i) c_[i] += o.c_[i];
    return *this;
  }
  SymTensor& operator-=(const SymTensor& o) {
    for (std::size_t i = 0; i < 6; ++i) c_[i] -= o.c_[i];
    return *this;
  }

 private:
  std::array<double, 6> c_;
};

inline SymTensor operator*(double s, const SymTensor& t) { return t * s; }

/// Strain from a 2D displacement gradient: plane strain, eps_zz = 0.
inline SymTensor strain_from_gradient(const Eigen::Matrix2d& grad_u) {
  return {grad_u(0, 0), grad_u(1, 1), 0.0,
          0.5 * (grad_u(0, 1) + grad_u(1, 0)), 0.0, 0.0};
}

/// Strain from a 3D displacement gradient.
inline SymTensor strain_from_gradient(const Eigen::Matrix3d& grad_u) {
  return {grad_u(0, 0), grad_u(1, 1), grad_u(2, 2),
          0.5 * (grad_u(0, 1) + grad_u(1, 0)),
          0.5 * (grad_u(1, 2) + grad_u(2, 1)),
          0.5 * (grad_u(2, 0) + grad_u(0, 2))};
}

struct VolDevSplit {
  SymTensor vol;
  SymTensor dev;
};

/// e = vol + dev with vol = (tr e / 3) I. The trace is always the 3D trace.
inline VolDevSplit vol_dev_split(const SymTensor& e) {
  const double m = e.trace() / 3.0;
  SymTensor vol = SymTensor::diag(m, m, m);
  return {vol, e - vol};
}

struct Invariants {
  double I1;  // tr(e)
  double I2;  // tr(e^2)
};

inline Invariants invariants(const SymTensor& e) {
  return {e.trace(), e.ddot(e)};
}

/// Rank-one fiber projector M = a (x) a with a = (cos phi, sin phi).
struct StructuralTensor {
  SymTensor M;
  double angle_deg;
};

namespace detail {
// cos/sin that are exact at multiples of 90 degrees, so that axis-aligned
// fiber tests are exact rather than accurate to ~1e-16.
inline void cos_sin_deg(double deg, double& c, double& s) {
  double r = std::fmod(deg, 360.0);
  if (r < 0) r += 360.0;
  if (r == 0.0) { c = 1; s = 0; return; }
  if (r == 90.0) { c = 0; s = 1; return; }
  if (r == 180.0) { c = -1; s = 0; return; }
  if (r == 270.0) { c = 0; s = -1; return; }
  const double rad = deg * (M_PI / 180.0);
  c = std::cos(rad);
  s = std::sin(rad);
}
}  // namespace detail

inline StructuralTensor structural_tensor(double phi_deg) {
  double c, s;
  detail::cos_sin_deg(phi_deg, c, s);
  StructuralTensor t;
  t.M = {c * c, s * s, 0.0, c * s, 0.0, 0.0};
  t.angle_deg = phi_deg;
  return t;
}

/// I4 = tr(e . M) = a . e . a; equals e : M for symmetric e, M.
inline double pseudo_invariant(const SymTensor& e, const StructuralTensor& M) {
  return e.ddot(M.M);
}

}  // namespace ductile

#endif  // DUCTILE_TENSOR_HPP
