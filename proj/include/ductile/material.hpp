/**
 * @file material.hpp
 * @brief Pointwise constitutive laws for three unified ductile phase-field
 *        fracture models: split elastic energy, degradation, von Mises
 *        return mapping with model-dependent degraded yield, plastic energy,
 *        crack driving history and crack surface density.
 *
 * Model selection:
 *   M1 - elastic degradation (1-d)^(2 alpha/alpha_crit), undegraded yield,
 *        quadratic crack geometry omega = d^2 (c_f = 2), driving force
 *        proportional to the tensile elastic energy.
 *   M2 - quadratic degradation of stiffness and yield, linear omega = d
 *        (c_f = 8/3), threshold energy psi_c, optional viscous fracture
 *        regularization eta_f.
 *   M3 - as M2 with threshold w0/2 and a gradient-plasticity term l_p
 *        (handled weakly in the FEM module).
 */

#ifndef DUCTILE_MATERIAL_HPP
#define DUCTILE_MATERIAL_HPP

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "ductile/tensor.hpp"

namespace ductile {

enum class ModelId { M1, M2, M3 };

inline ModelId model_from_string(const std::string& s) {
  if (s == "M1") return ModelId::M1;
  if (s == "M2") return ModelId::M2;
  if (s == "M3") return ModelId::M3;
  throw std::runtime_error("unknown model '" + s + "' (expected M1|M2|M3)");
}

inline const char* to_string(ModelId m) {
  switch (m) {
    case ModelId::M1: return "M1";
    case ModelId::M2: return "M2";
    default: return "M3";
  }
}

struct MaterialParams {
  double mu = 25000.0;       // shear modulus, MPa
  double K = 80000.0;        // bulk modulus, MPa
  double H = 220.0;          // isotropic hardening modulus, MPa
  double sigma_Y = 350.0;    // initial yield stress, MPa
  double alpha_crit = 0.12;  // critical hardening variable (M1)
  double G_c = 12.0;         // fracture toughness, MPa mm (M1)
  double psi_c = 30.0;       // threshold energy density, MPa (M2)
  double w0 = 25.0;          // specific fracture energy, MPa (M3)
  double l_f = 0.25;         // fracture length scale, mm
  double l_p = 0.0;          // plastic length scale, mm (M3)
  double zeta = 1.0;         // post-critical slope control
  double chi_a = 0.0;        // anisotropy weight
  double phi_deg = 0.0;      // fiber angle, degrees
  double kappa = 1e-8;       // residual stiffness
  double eta_f = 0.0;        // fracture viscosity (M2)

  double young() const { return 9.0 * K * mu / (3.0 * K + mu); }
  double l_d() const { return std::sqrt(2.0) * l_f; }
  // eta_d = eta_f / (2 psi_c) is the rescaled viscosity of the M2 d-equation.
  double eta_d() const { return eta_f / (2.0 * psi_c); }

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw std::runtime_error(std::string("invalid material parameter: ") + what);
    };
    req(mu > 0, "mu > 0");
    req(K > 0, "K > 0");
    req(H >= 0, "H >= 0");
    req(sigma_Y > 0, "sigma_Y > 0");
    req(alpha_crit > 0, "alpha_crit > 0");
    req(G_c > 0, "G_c > 0");
    req(psi_c > 0, "psi_c > 0");
    req(w0 > 0, "w0 > 0");
    req(l_f > 0, "l_f > 0");
    req(l_p >= 0, "l_p >= 0");
    req(kappa > 0 && kappa <= 1e-4, "kappa in (0, 1e-4]");
    req(zeta >= 0, "zeta >= 0");
    req(chi_a >= 0, "chi_a >= 0");
    req(eta_f >= 0, "eta_f >= 0");
  }
};

struct MaterialPointState {
  SymTensor eps_p;      // plastic strain (deviatoric)
  double alpha = 0.0;   // hardening variable
  double history = 0.0; // crack driving history H
  double d_prev = 0.0;  // damage at the last committed step
};

// ============================================================================
// Degradation functions (Table-1 column of the selected model)
// ============================================================================

struct Degradation {
  double g_e;      // elastic degradation, with +kappa floor
  double dg_e_dd;  // d(g_e)/dd of the un-stabilized part
  double g_p;      // plastic (yield) degradation, with +kappa floor for M2/M3
};

inline Degradation degradation(double d, double alpha, ModelId model,
                               const MaterialParams& p) {
  Degradation g;
  const double omd = 1.0 - d;
  if (model == ModelId::M1) {
    const double expo = 2.0 * alpha / p.alpha_crit;
    if (expo == 0.0) {
      g.g_e = 1.0 + p.kappa;
      g.dg_e_dd = 0.0;
    } else {
      g.g_e = std::pow(omd, expo) + p.kappa;
      // pow(omd, expo-1) blows up at d = 1 for expo < 1; the floor keeps the
      // Newton linearization finite there.
      const double base = (expo < 1.0) ? std::max(omd, 1e-14) : omd;
      g.dg_e_dd = -expo * std::pow(base, expo - 1.0);
    }
    g.g_p = 1.0;
  } else {
    g.g_e = omd * omd + p.kappa;
    g.dg_e_dd = -2.0 * omd;
    g.g_p = omd * omd + p.kappa;
  }
  return g;
}

// ============================================================================
// Elastic energy split and stress
// ============================================================================

struct EnergySplit {
  double psi_plus;   // damageable part
  double psi_minus;  // protected part
};

/// psi+ = H+[I1] (K/2) I1^2 + mu dev:dev + (chi_a/2) <I4>+^2
/// psi- = (1 - H+[I1]) (K/2) I1^2 + (chi_a/2) <I4>-^2
inline EnergySplit elastic_energy_split(const SymTensor& eps_e,
                                        const StructuralTensor& M,
                                        const MaterialParams& p) {
  const double I1 = eps_e.trace();
  const SymTensor dev = eps_e.dev();
  const double psi_vol = 0.5 * p.K * I1 * I1;
  const double psi_dev = p.mu * dev.ddot(dev);
  const double I4 = pseudo_invariant(eps_e, M);
  const double I4p = std::max(I4, 0.0);
  const double I4m = std::min(I4, 0.0);
  EnergySplit s;
  if (I1 > 0) {
    s.psi_plus = psi_vol + psi_dev + 0.5 * p.chi_a * I4p * I4p;
    s.psi_minus = 0.5 * p.chi_a * I4m * I4m;
  } else {
    s.psi_plus = psi_dev + 0.5 * p.chi_a * I4p * I4p;
    s.psi_minus = psi_vol + 0.5 * p.chi_a * I4m * I4m;
  }
  return s;
}

namespace detail {

/// sigma = g_e sigma~+ + sigma~- at a given elastic strain; g_e evaluated at
/// (d, alpha) so M1's alpha-dependent degradation is honored.
inline SymTensor stress_at(const SymTensor& eps_e, double d, double alpha,
                           const StructuralTensor& M, ModelId model,
                           const MaterialParams& p) {
  const Degradation g = degradation(d, alpha, model, p);
  const double I1 = eps_e.trace();
  const SymTensor dev = eps_e.dev();
  const double I4 = pseudo_invariant(eps_e, M);

  SymTensor sig_plus = SymTensor::zero();
  SymTensor sig_minus = SymTensor::zero();
  if (I1 > 0) {
    sig_plus += SymTensor::diag(p.K * I1, p.K * I1, p.K * I1);
  } else {
    sig_minus += SymTensor::diag(p.K * I1, p.K * I1, p.K * I1);
  }
  sig_plus += 2.0 * p.mu * dev;
  if (I4 > 0) {
    sig_plus += (p.chi_a * I4) * M.M;
  } else {
    sig_minus += (p.chi_a * I4) * M.M;
  }
  return g.g_e * sig_plus + sig_minus;
}

}  // namespace detail

/// Cauchy stress at eps_e = eps - state.eps_p.
inline SymTensor stress(const SymTensor& eps, const MaterialPointState& state,
                        double d, const StructuralTensor& M, ModelId model,
                        const MaterialParams& p) {
  return detail::stress_at(eps - state.eps_p, d, state.alpha, M, model, p);
}

/// Degraded elastic energy W_elas = g_e psi+ + psi-.
inline double elastic_energy(const SymTensor& eps_e, double d, double alpha,
                             const StructuralTensor& M, ModelId model,
                             const MaterialParams& p) {
  const Degradation g = degradation(d, alpha, model, p);
  const EnergySplit s = elastic_energy_split(eps_e, M, p);
  return g.g_e * s.psi_plus + s.psi_minus;
}

// ============================================================================
// Plasticity
// ============================================================================

/// psi_p = sigma_Y alpha + (H/2) alpha^2 + (sigma_Y/2) l_p^2 |grad alpha|^2
inline double plastic_energy(double alpha, const Eigen::Vector2d& grad_alpha,
                             const MaterialParams& p) {
  return p.sigma_Y * alpha + 0.5 * p.H * alpha * alpha +
         0.5 * p.sigma_Y * p.l_p * p.l_p * grad_alpha.squaredNorm();
}

/// beta = sqrt(3/2) |trial_dev| - threshold, threshold = g_p (sigma_Y + H alpha).
/// The M3 nonlocal gradient term is excluded (it lives in the assembled
/// alpha-equation of the FEM module).
inline double yield_function(const SymTensor& trial_dev, double d, double alpha,
                             ModelId model, const MaterialParams& p) {
  const Degradation g = degradation(d, alpha, model, p);
  return std::sqrt(1.5) * trial_dev.norm() - g.g_p * (p.sigma_Y + p.H * alpha);
}

struct ReturnMapResult {
  MaterialPointState state;
  SymTensor sigma;
  double dgamma = 0.0;
  bool plastic = false;
};

/// Radial return mapping. The plastic corrector runs along the frozen trial
/// direction n = F_trial/|F_trial| with |delta eps_p| = sqrt(3/2) dgamma and
/// alpha = alpha_n + dgamma. For linear hardening with alpha-independent
/// degradation the closed form dgamma = beta_trial/(3 mu_eff + H_eff) is
/// exact; M1 with d > 0 (alpha-dependent g_e) and chi_a > 0 (anisotropic
/// deviator) fall back to a safeguarded Newton/bisection on the consistency
/// residual, evaluated through the full stress function.
inline ReturnMapResult return_map(const SymTensor& eps,
                                  const MaterialPointState& state_n, double d,
                                  const StructuralTensor& M, ModelId model,
                                  const MaterialParams& p) {
  ReturnMapResult r;
  r.state = state_n;

  const SymTensor eps_e_tr = eps - state_n.eps_p;
  const SymTensor sig_tr = detail::stress_at(eps_e_tr, d, state_n.alpha, M, model, p);
  if (!std::isfinite(sig_tr.norm())) {
    throw std::runtime_error("return_map: non-finite trial stress");
  }
  const SymTensor F_tr = sig_tr.dev();
  const double thr_n = [&] {
    const Degradation g = degradation(d, state_n.alpha, model, p);
    return g.g_p * (p.sigma_Y + p.H * state_n.alpha);
  }();
  const double q_tr = std::sqrt(1.5) * F_tr.norm();
  const double beta_tr = q_tr - thr_n;

  if (beta_tr <= 0.0) {
    r.sigma = sig_tr;
    return r;
  }

  const SymTensor n_hat = F_tr * (1.0 / F_tr.norm());

  auto consistency = [&](double dg) {
    const SymTensor eps_e = eps_e_tr - std::sqrt(1.5) * dg * n_hat;
    const double a = state_n.alpha + dg;
    const SymTensor sig = detail::stress_at(eps_e, d, a, M, model, p);
    const Degradation g = degradation(d, a, model, p);
    return std::sqrt(1.5) * sig.dev().norm() - g.g_p * (p.sigma_Y + p.H * a);
  };

  const Degradation g_n = degradation(d, state_n.alpha, model, p);
  const double denom0 = 3.0 * g_n.g_e * p.mu + g_n.g_p * p.H;
  if (denom0 <= 0.0) {
    throw std::runtime_error("return_map: degenerate hardening (3 mu_eff + H_eff <= 0)");
  }
  double dg = beta_tr / denom0;

  const bool closed_form_exact =
      p.chi_a == 0.0 && (model != ModelId::M1 || d == 0.0);
  if (!closed_form_exact) {
    // Safeguarded Newton on the consistency residual; bisection keeps the
    // iterate inside an expanding bracket [lo, hi] with phi(lo) > 0 > phi(hi).
    const double tol = 1e-10 * p.sigma_Y;
    double lo = 0.0, hi = dg;
    double phi_hi = consistency(hi);
    int expand = 0;
    while (phi_hi > 0.0 && expand++ < 200) {
      lo = hi;
      hi *= 2.0;
      phi_hi = consistency(hi);
    }
    if (phi_hi > 0.0) {
      throw std::runtime_error("return_map: failed to bracket consistency root");
    }
    dg = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      const double phi = consistency(dg);
      if (std::abs(phi) <= tol) break;
      if (phi > 0.0) lo = dg; else hi = dg;
      const double h = 1e-8 * (1.0 + dg);
      const double dphi = (consistency(dg + h) - phi) / h;
      double next = (dphi < 0.0) ? dg - phi / dphi : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      dg = next;
    }
  }

  r.plastic = true;
  r.dgamma = dg;
  r.state.eps_p = state_n.eps_p + std::sqrt(1.5) * dg * n_hat;
  r.state.alpha = state_n.alpha + dg;
  r.sigma = detail::stress_at(eps - r.state.eps_p, d, r.state.alpha, M, model, p);
  return r;
}

/// M3 FEM path: radial update for an externally solved alpha. eps_p moves
/// along the trial direction by sqrt(3/2)(alpha - alpha_n); no local
/// consistency solve (the alpha-equation enforces it weakly).
inline ReturnMapResult plastic_update_given_alpha(const SymTensor& eps,
                                                  const MaterialPointState& state_n,
                                                  double alpha_new, double d,
                                                  const StructuralTensor& M,
                                                  ModelId model,
                                                  const MaterialParams& p) {
  ReturnMapResult r;
  r.state = state_n;
  const SymTensor eps_e_tr = eps - state_n.eps_p;
  const SymTensor F_tr =
      detail::stress_at(eps_e_tr, d, state_n.alpha, M, model, p).dev();
  const double da = std::max(alpha_new - state_n.alpha, 0.0);
  const double nrm = F_tr.norm();
  if (da > 0.0 && nrm > 1e-14 * p.mu) {
    const SymTensor n_hat = F_tr * (1.0 / nrm);
    r.state.eps_p = state_n.eps_p + std::sqrt(1.5) * da * n_hat;
    r.state.alpha = state_n.alpha + da;
    r.dgamma = da;
    r.plastic = true;
  }
  r.sigma = detail::stress_at(eps - r.state.eps_p, d, r.state.alpha, M, model, p);
  return r;
}

// ============================================================================
// Crack driving force and crack surface density
// ============================================================================

/// History update H := max(H, <D~>+) with the model's dimensionless driving
/// force D~. For M1 zeta is fixed to 1 (post-critical tuning is disabled).
inline double crack_driving_update(const SymTensor& eps_e, double alpha,
                                   const Eigen::Vector2d& grad_alpha, double d,
                                   const StructuralTensor& M, ModelId model,
                                   const MaterialParams& p,
                                   const MaterialPointState& state) {
  (void)d;
  const EnergySplit s = elastic_energy_split(eps_e, M, p);
  double Dtilde = 0.0;
  switch (model) {
    case ModelId::M1:
      Dtilde = (2.0 * p.l_f / p.G_c) * s.psi_plus;
      break;
    case ModelId::M2:
      Dtilde = p.zeta *
               ((s.psi_plus + plastic_energy(alpha, grad_alpha, p)) / p.psi_c - 1.0);
      break;
    case ModelId::M3:
      Dtilde = p.zeta * ((s.psi_plus + plastic_energy(alpha, grad_alpha, p)) /
                             (0.5 * p.w0) - 1.0);
      break;
  }
  return std::max(state.history, std::max(Dtilde, 0.0));
}

/// gamma_l = (1/c_f)(omega(d)/l_f + l_f |grad d|^2)
///           + chi_a (l_f/c_f) grad d . M . grad d
inline double crack_surface_density(double d, const Eigen::Vector2d& grad_d,
                                    const StructuralTensor& M, ModelId model,
                                    const MaterialParams& p) {
  const double c_f = (model == ModelId::M1) ? 2.0 : 8.0 / 3.0;
  const double omega = (model == ModelId::M1) ? d * d : d;
  const double gMg = M.M.xx() * grad_d[0] * grad_d[0] +
                     2.0 * M.M.xy() * grad_d[0] * grad_d[1] +
                     M.M.yy() * grad_d[1] * grad_d[1];
  return (omega / p.l_f + p.l_f * grad_d.squaredNorm()) / c_f +
         p.chi_a * (p.l_f / c_f) * gMg;
}

}  // namespace ductile

#endif  // DUCTILE_MATERIAL_HPP
