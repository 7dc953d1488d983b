#pragma once

/**
 * @file inference.hpp
 * @brief Likelihood evaluation and the three MCMC kernels (random-walk
 *        Metropolis-Hastings, delayed-rejection adaptive Metropolis, and the
 *        ensemble-Kalman-proposal sampler) over a black-box forward model.
 *
 * All kernels draw from deterministic per-seed streams (see rng.hpp), keep
 * samples inside the uniform prior box by construction or rejection, and
 * treat evaluator failures as -inf log-posterior.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ductile/rng.hpp"

namespace ductile::inference {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ----------------------------------------------------------------------------
// Domain types
// ----------------------------------------------------------------------------

/// Per-parameter uniform bounds, with an optional initial point.
struct PriorBox {
  std::vector<std::string> names;  // optional column labels, may be empty
  Eigen::VectorXd lo, hi;
  Eigen::VectorXd init;  // size 0 when unset

  int dim() const { return static_cast<int>(lo.size()); }

  bool contains(const Eigen::VectorXd& x) const {
    if (x.size() != lo.size()) return false;
    for (int i = 0; i < x.size(); ++i) {
      if (!(x[i] >= lo[i] && x[i] <= hi[i])) return false;
    }
    return true;
  }

  Eigen::VectorXd width() const { return hi - lo; }

  Eigen::VectorXd initial_point() const {
    if (init.size() == lo.size() && init.size() > 0) return init;
    return 0.5 * (lo + hi);
  }

  void validate() const {
    if (lo.size() == 0 || lo.size() != hi.size())
      throw std::runtime_error("prior box: empty or mismatched bounds");
    for (int i = 0; i < lo.size(); ++i) {
      if (!(lo[i] < hi[i]))
        throw std::runtime_error("prior box: min must be < max in coordinate " +
                                 std::to_string(i));
    }
    if (init.size() > 0 && !contains(init))
      throw std::runtime_error("prior box: initial point outside bounds");
  }
};

/// Observed response vector with its (fixed, known) noise variance.
struct Observation {
  Eigen::VectorXd m;
  double sigma2 = 1e-3;

  void validate() const {
    if (m.size() == 0) throw std::runtime_error("observation: empty response");
    if (!(sigma2 > 0.0))
      throw std::runtime_error("observation: sigma2 must be positive");
    if (!m.allFinite())
      throw std::runtime_error("observation: non-finite entries");
  }
};

/// Raw forward-model output: a response vector (possibly shorter than the
/// observation when the specimen fully fails early) plus the failure flag.
struct ForwardResponse {
  Eigen::VectorXd values;
  bool fully_failed = false;
};

struct Chain {
  Eigen::MatrixXd samples;    // N x k
  Eigen::VectorXd log_post;   // N
  std::vector<int> accepted;  // 1 where the sample moved, else 0
  std::vector<int> stage;     // proposal stage that produced the sample:
                              // 1 first stage, 2 delayed second stage,
                              // 0 repeat after rejection
  std::uint64_t seed = 0;
  int failed_evals = 0;  // evaluator exceptions treated as -inf

  int length() const { return static_cast<int>(samples.rows()); }

  double acceptance_rate() const {
    if (samples.rows() <= 1) return 0.0;
    double acc = 0;
    for (std::size_t i = 1; i < accepted.size(); ++i) acc += accepted[i];
    return acc / static_cast<double>(samples.rows() - 1);
  }
};

using LogPostFn = std::function<double(const Eigen::VectorXd&)>;
using ForwardFn = std::function<ForwardResponse(const Eigen::VectorXd&)>;

// ----------------------------------------------------------------------------
// Likelihood
// ----------------------------------------------------------------------------

/// Align a simulated response with the observation length: truncate long
/// vectors, pad short ones (early full failure) with the terminal value so the
/// sum of squares keeps penalizing the missing tail.
inline Eigen::VectorXd pad_response(const Eigen::VectorXd& sim, int n) {
  Eigen::VectorXd out(n);
  if (sim.size() == 0) {
    out.setZero();
    return out;
  }
  const int keep = std::min<int>(n, static_cast<int>(sim.size()));
  out.head(keep) = sim.head(keep);
  for (int i = keep; i < n; ++i) out[i] = sim[sim.size() - 1];
  return out;
}

/// Gaussian log-likelihood -(n/2)log(2 pi s2) - SS/(2 s2). Non-finite entries
/// return -inf so the candidate is rejected.
inline double log_likelihood(const Observation& obs,
                             const Eigen::VectorXd& sim) {
  if (sim.size() != obs.m.size())
    throw std::runtime_error("log_likelihood: length mismatch (pad first)");
  if (!sim.allFinite()) return kNegInf;
  const double n = static_cast<double>(obs.m.size());
  const double ss = (obs.m - sim).squaredNorm();
  constexpr double two_pi = 6.283185307179586476925286766559;
  return -0.5 * n * std::log(two_pi * obs.sigma2) - ss / (2.0 * obs.sigma2);
}

// ----------------------------------------------------------------------------
// Reflected random-walk proposal
// ----------------------------------------------------------------------------

/// Fold a real value into [lo, hi] by repeated reflection at the bounds.
/// In-range values pass through untouched (no roundoff).
inline double fold(double x, double lo, double hi) {
  if (x >= lo && x <= hi) return x;
  const double w = hi - lo;
  double t = std::fmod(x - lo, 2.0 * w);
  if (t < 0) t += 2.0 * w;
  return lo + (t <= w ? t : 2.0 * w - t);
}

/// Gaussian step with per-coordinate scales, reflected into the prior box.
inline Eigen::VectorXd propose_reflected(const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& scale,
                                         const PriorBox& prior,
                                         rng::Rng& rng) {
  Eigen::VectorXd y(x.size());
  for (int i = 0; i < x.size(); ++i) {
    y[i] = fold(x[i] + scale[i] * rng.normal(), prior.lo[i], prior.hi[i]);
  }
  return y;
}

namespace detail {

/// Reflection images of a point in [lo, hi]: the point itself, one fold at
/// each bound, and one full-period shift each way.  Steps needing more images
/// have negligible density for any sane proposal scale.
inline void reflection_images(double y, double lo, double hi, double out[5]) {
  const double w = hi - lo;
  out[0] = y;
  out[1] = 2.0 * lo - y;
  out[2] = 2.0 * hi - y;
  out[3] = y - 2.0 * w;
  out[4] = y + 2.0 * w;
}

/// Log-density of the reflected (folded) Gaussian kernel with diagonal
/// scales, via the method-of-images sum.
inline double reflected_log_density_diag(const Eigen::VectorXd& from,
                                         const Eigen::VectorXd& to,
                                         const Eigen::VectorXd& scale,
                                         const PriorBox& prior) {
  double lg = 0.0;
  for (int i = 0; i < from.size(); ++i) {
    double imgs[5];
    reflection_images(to[i], prior.lo[i], prior.hi[i], imgs);
    double acc = 0.0;
    for (double img : imgs) {
      const double z = (img - from[i]) / scale[i];
      acc += std::exp(-0.5 * z * z);
    }
    lg += std::log(acc / scale[i]);  // common sqrt(2*pi) factors cancel in ratios
  }
  return lg;
}

/// Log-density of the reflected full-covariance Gaussian kernel.  Sums the
/// single-fold image combinations (3^k terms); adequate because multi-fold
/// images are exponentially suppressed.
inline double reflected_log_density_full(const Eigen::VectorXd& from,
                                         const Eigen::VectorXd& to,
                                         const Eigen::LLT<Eigen::MatrixXd>& llt,
                                         const PriorBox& prior) {
  const int k = static_cast<int>(from.size());
  std::vector<std::array<double, 3>> imgs(k);
  for (int i = 0; i < k; ++i) {
    imgs[i] = {to[i], 2.0 * prior.lo[i] - to[i], 2.0 * prior.hi[i] - to[i]};
  }
  double acc = 0.0;
  std::vector<int> idx(k, 0);
  Eigen::VectorXd pt(k);
  while (true) {
    for (int i = 0; i < k; ++i) pt[i] = imgs[i][idx[i]];
    const Eigen::VectorXd diff = pt - from;
    acc += std::exp(-0.5 * diff.dot(llt.solve(diff)));
    int c = 0;
    while (c < k && ++idx[c] == 3) idx[c++] = 0;
    if (c == k) break;
  }
  double log_det = 0.0;
  for (int i = 0; i < k; ++i) log_det += std::log(llt.matrixL()(i, i));
  return std::log(acc) - log_det;  // sqrt(2*pi)^k factors cancel in ratios
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Metropolis-Hastings
// ----------------------------------------------------------------------------

namespace detail {

inline double safe_eval(const LogPostFn& f, const Eigen::VectorXd& x,
                        int& failures) {
  try {
    const double v = f(x);
    return std::isnan(v) ? kNegInf : v;
  } catch (const std::exception&) {
    ++failures;
    return kNegInf;
  }
}

}  // namespace detail

/// Random-walk Metropolis-Hastings with a boundary-reflected Gaussian
/// proposal.  `scale` holds per-coordinate step standard deviations.
inline Chain mh_chain(const LogPostFn& log_post, const PriorBox& prior,
                      const Eigen::VectorXd& scale, int N, std::uint64_t seed,
                      Eigen::VectorXd init = Eigen::VectorXd()) {
  prior.validate();
  if (N < 1) throw std::runtime_error("mh_chain: N must be >= 1");
  if (scale.size() != prior.lo.size())
    throw std::runtime_error("mh_chain: scale dimension mismatch");
  const int k = prior.dim();
  if (init.size() == 0) init = prior.initial_point();
  if (!prior.contains(init))
    throw std::runtime_error("mh_chain: initial point outside prior box");

  rng::Rng rng(seed);
  Chain chain;
  chain.seed = seed;
  chain.samples.resize(N, k);
  chain.log_post.resize(N);
  chain.accepted.assign(N, 0);
  chain.stage.assign(N, 0);

  Eigen::VectorXd x = init;
  double lp = detail::safe_eval(log_post, x, chain.failed_evals);
  chain.samples.row(0) = x.transpose();
  chain.log_post[0] = lp;
  chain.accepted[0] = 1;
  chain.stage[0] = 1;

  for (int j = 1; j < N; ++j) {
    const Eigen::VectorXd cand = propose_reflected(x, scale, prior, rng);
    const double lp_cand = detail::safe_eval(log_post, cand, chain.failed_evals);
    // Proposal correction: the folded kernel is symmetric analytically, but
    // the correction is evaluated from the image-sum densities regardless.
    const double log_beta =
        detail::reflected_log_density_diag(cand, x, scale, prior) -
        detail::reflected_log_density_diag(x, cand, scale, prior);
    const double log_lambda = lp_cand - lp + log_beta;
    if (std::log(1.0 - rng.uniform() + 1e-300) < log_lambda) {
      x = cand;
      lp = lp_cand;
      chain.accepted[j] = 1;
      chain.stage[j] = 1;
    }
    chain.samples.row(j) = x.transpose();
    chain.log_post[j] = lp;
  }
  return chain;
}

// ----------------------------------------------------------------------------
// DRAM: delayed-rejection adaptive Metropolis
// ----------------------------------------------------------------------------

struct DramOptions {
  double gamma2 = 0.2;      // second-stage scale shrink factor
  int adapt_interval = 100; // recompute the proposal covariance this often
  Eigen::VectorXd scale0;   // initial per-coordinate step std; default width/20
};

inline Chain dram_chain(const LogPostFn& log_post, const PriorBox& prior,
                        int N, std::uint64_t seed,
                        const DramOptions& opt = {},
                        Eigen::VectorXd init = Eigen::VectorXd()) {
  prior.validate();
  if (N < 1) throw std::runtime_error("dram_chain: N must be >= 1");
  if (!(opt.gamma2 > 0.0 && opt.gamma2 <= 1.0))
    throw std::runtime_error("dram_chain: gamma2 must be in (0, 1]");
  if (opt.adapt_interval < 1)
    throw std::runtime_error("dram_chain: adapt interval must be >= 1");
  const int k = prior.dim();
  if (init.size() == 0) init = prior.initial_point();
  if (!prior.contains(init))
    throw std::runtime_error("dram_chain: initial point outside prior box");

  const double sp = 2.38 * 2.38 / static_cast<double>(k);
  const Eigen::VectorXd w = prior.width();
  const Eigen::VectorXd ridge = 1e-10 * w.cwiseProduct(w);

  Eigen::VectorXd scale0 = opt.scale0;
  if (scale0.size() == 0) scale0 = w / 20.0;
  if (scale0.size() != k)
    throw std::runtime_error("dram_chain: scale0 dimension mismatch");

  Eigen::MatrixXd V = scale0.cwiseProduct(scale0).asDiagonal();
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("dram_chain: initial covariance not SPD");

  rng::Rng rng(seed);
  Chain chain;
  chain.seed = seed;
  chain.samples.resize(N, k);
  chain.log_post.resize(N);
  chain.accepted.assign(N, 0);
  chain.stage.assign(N, 0);

  Eigen::VectorXd x = init;
  double lp = detail::safe_eval(log_post, x, chain.failed_evals);
  chain.samples.row(0) = x.transpose();
  chain.log_post[0] = lp;
  chain.accepted[0] = 1;
  chain.stage[0] = 1;

  // Running mean / scatter for the sample covariance (Welford).
  Eigen::VectorXd mean = x;
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(k, k);
  long count = 1;

  const auto draw = [&](const Eigen::VectorXd& c, double shrink,
                        const Eigen::LLT<Eigen::MatrixXd>& chol) {
    Eigen::VectorXd z(k);
    for (int i = 0; i < k; ++i) z[i] = rng.normal();
    const Eigen::VectorXd step = chol.matrixL() * z;
    Eigen::VectorXd y = c + shrink * step;
    for (int i = 0; i < k; ++i) y[i] = fold(y[i], prior.lo[i], prior.hi[i]);
    return y;
  };

  // min(0, .) of the first-stage log acceptance ratio from a to b.
  const auto log_lambda1 = [&](const Eigen::VectorXd& a, double lpa,
                               const Eigen::VectorXd& b, double lpb) {
    if (lpb == kNegInf) return kNegInf;
    const double log_beta =
        detail::reflected_log_density_full(b, a, llt, prior) -
        detail::reflected_log_density_full(a, b, llt, prior);
    return std::min(0.0, lpb - lpa + log_beta);
  };

  for (int j = 1; j < N; ++j) {
    const Eigen::VectorXd c1 = draw(x, 1.0, llt);
    const double lp1 = detail::safe_eval(log_post, c1, chain.failed_evals);
    const double ll1 = log_lambda1(x, lp, c1, lp1);

    bool moved = false;
    if (std::log(1.0 - rng.uniform() + 1e-300) < ll1) {
      x = c1;
      lp = lp1;
      chain.accepted[j] = 1;
      chain.stage[j] = 1;
      moved = true;
    } else {
      // Delayed second stage with the narrowed kernel.
      const Eigen::VectorXd c2 = draw(x, opt.gamma2, llt);
      const double lp2 = detail::safe_eval(log_post, c2, chain.failed_evals);
      if (lp2 > kNegInf) {
        // lambda2 = min(1, pi(c2) q1(c2->c1) (1 - lambda1(c2->c1)) /
        //               (pi(x)  q1(x ->c1) (1 - lambda1(x ->c1))))
        const double ll_c2_c1 = log_lambda1(c2, lp2, c1, lp1);
        const double ll_x_c1 = ll1;
        const double log_q_num =
            detail::reflected_log_density_full(c2, c1, llt, prior);
        const double log_q_den =
            detail::reflected_log_density_full(x, c1, llt, prior);
        const double one_m_num = 1.0 - std::exp(ll_c2_c1);
        const double one_m_den = 1.0 - std::exp(ll_x_c1);
        if (one_m_num > 0.0 && one_m_den > 0.0) {
          const double log_lambda2 = lp2 - lp + log_q_num - log_q_den +
                                     std::log(one_m_num) - std::log(one_m_den);
          if (std::log(1.0 - rng.uniform() + 1e-300) < log_lambda2) {
            x = c2;
            lp = lp2;
            chain.accepted[j] = 1;
            chain.stage[j] = 2;
            moved = true;
          }
        }
      }
    }
    (void)moved;
    chain.samples.row(j) = x.transpose();
    chain.log_post[j] = lp;

    // Covariance bookkeeping and periodic adaptation.
    ++count;
    const Eigen::VectorXd delta = x - mean;
    mean += delta / static_cast<double>(count);
    scatter += delta * (x - mean).transpose();
    if (j % opt.adapt_interval == 0 && count > 2) {
      Eigen::MatrixXd cov = scatter / static_cast<double>(count - 1);
      Eigen::MatrixXd Vnew = sp * cov;
      Vnew.diagonal() += ridge;
      Eigen::LLT<Eigen::MatrixXd> trial(Vnew);
      if (trial.info() == Eigen::Success) {
        V = Vnew;
        llt = trial;
      }
      // else: keep the previous valid covariance
    }
  }
  return chain;
}

// ----------------------------------------------------------------------------
// EnKF-MCMC: ensemble-Kalman-proposal sampler
// ----------------------------------------------------------------------------

/// MCMC whose proposal jumps along the ensemble-estimated Kalman gain,
/// chi* = chi + K (m - f(chi) + s), s ~ N(0, sigma2 I), accepted with the
/// plain likelihood ratio.  The ensemble is the initial point plus uniform
/// prior draws, evaluated once; the gain is fixed for the whole chain.  (A
/// window of accepted states collapses once the chain reaches the misfit
/// minimum: the burn-in descent is contractive, so the gain and with it the
/// proposal shrink to zero and the chain freezes.  A prior-scale gain keeps
/// the jump K s at the posterior scale, where the first-order condition
/// already cancels the fittable part of the drift K y.)
///
/// With ensemble_seed != 0 the prior draws come from that separate stream
/// instead of the chain stream.  Chains run in parallel should pass a common
/// value: the sampled gain is low rank, so chains with private ensembles
/// explore slightly rotated subspaces and their means disagree by the gain
/// sampling error rather than by Monte Carlo error, which between-chain
/// diagnostics would flag forever.
inline Chain enkf_chain(const PriorBox& prior, const ForwardFn& forward,
                        const Observation& obs, int ensemble_size, int N,
                        std::uint64_t seed,
                        Eigen::VectorXd init = Eigen::VectorXd(),
                        std::uint64_t ensemble_seed = 0) {
  prior.validate();
  obs.validate();
  if (N < 1) throw std::runtime_error("enkf_chain: N must be >= 1");
  if (ensemble_size < 2)
    throw std::runtime_error("enkf_chain: ensemble size must be >= 2");
  const int k = prior.dim();
  const int n = static_cast<int>(obs.m.size());
  if (init.size() == 0) init = prior.initial_point();
  if (!prior.contains(init))
    throw std::runtime_error("enkf_chain: initial point outside prior box");

  rng::Rng rng(seed);
  Chain chain;
  chain.seed = seed;
  chain.samples.resize(N, k);
  chain.log_post.resize(N);
  chain.accepted.assign(N, 0);
  chain.stage.assign(N, 0);

  const auto eval = [&](const Eigen::VectorXd& chi,
                        Eigen::VectorXd& padded) -> double {
    try {
      const ForwardResponse r = forward(chi);
      padded = pad_response(r.values, n);
      return log_likelihood(obs, padded);
    } catch (const std::exception&) {
      ++chain.failed_evals;
      padded = Eigen::VectorXd::Zero(n);
      return kNegInf;
    }
  };

  Eigen::VectorXd x = init;
  Eigen::VectorXd fx;
  double lp = eval(x, fx);
  chain.samples.row(0) = x.transpose();
  chain.log_post[0] = lp;
  chain.accepted[0] = 1;
  chain.stage[0] = 1;

  // Fixed ensemble: the chain start plus uniform prior draws.
  rng::Rng ens_own(ensemble_seed);
  rng::Rng& ens_rng = ensemble_seed == 0 ? rng : ens_own;
  std::vector<Eigen::VectorXd> ens_chi(1, x), ens_f(1, fx);
  ens_chi.reserve(ensemble_size);
  ens_f.reserve(ensemble_size);
  for (int e = 1; e < ensemble_size; ++e) {
    Eigen::VectorXd chi(k);
    for (int i = 0; i < k; ++i) chi[i] = ens_rng.uniform(prior.lo[i], prior.hi[i]);
    Eigen::VectorXd f;
    eval(chi, f);
    ens_chi.push_back(chi);
    ens_f.push_back(f);
  }

  const int ne = ensemble_size;
  Eigen::VectorXd chi_bar = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd f_bar = Eigen::VectorXd::Zero(n);
  for (int e = 0; e < ne; ++e) {
    chi_bar += ens_chi[e];
    f_bar += ens_f[e];
  }
  chi_bar /= ne;
  f_bar /= ne;
  Eigen::MatrixXd c_chi_m = Eigen::MatrixXd::Zero(k, n);
  Eigen::MatrixXd c_mm = Eigen::MatrixXd::Zero(n, n);
  for (int e = 0; e < ne; ++e) {
    const Eigen::VectorXd a = ens_chi[e] - chi_bar;
    const Eigen::VectorXd b = ens_f[e] - f_bar;
    c_chi_m += a * b.transpose();
    c_mm += b * b.transpose();
  }
  c_chi_m /= (ne - 1);
  c_mm /= (ne - 1);
  c_mm.diagonal().array() += obs.sigma2;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(c_mm);
  if (ldlt.info() != Eigen::Success) {
    c_mm.diagonal().array() += 1e-6 * c_mm.trace() / n;
    ldlt.compute(c_mm);
  }
  const Eigen::MatrixXd K = ldlt.solve(c_chi_m.transpose()).transpose();

  for (int j = 1; j < N; ++j) {
    Eigen::VectorXd s(n);
    const double sig = std::sqrt(obs.sigma2);
    for (int i = 0; i < n; ++i) s[i] = sig * rng.normal();
    const Eigen::VectorXd y = obs.m - fx;
    const Eigen::VectorXd cand = x + K * (y + s);

    double lp_cand = kNegInf;
    Eigen::VectorXd f_cand;
    if (prior.contains(cand)) {
      lp_cand = eval(cand, f_cand);
    }
    if (std::log(1.0 - rng.uniform() + 1e-300) < lp_cand - lp) {
      x = cand;
      lp = lp_cand;
      fx = f_cand;
      chain.accepted[j] = 1;
      chain.stage[j] = 1;
    }
    chain.samples.row(j) = x.transpose();
    chain.log_post[j] = lp;
  }
  return chain;
}

}  // namespace ductile::inference
