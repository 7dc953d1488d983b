#pragma once

/**
 * @file diagnostics.hpp
 * @brief Chain quality metrics: lag autocorrelation, multi-chain potential
 *        scale reduction factor, and posterior summaries.
 *
 * The scale reduction factor is reported in two variants that differ in the
 * final correction term: the form with -(N-1)/m, and the standard
 * Gelman-Rubin form with -(N-1)/(mN).  The standard variant is what
 * convergence gates should use; the first diverges negatively as N grows.
 */

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace ductile::diagnostics {

/// Fraction of each chain discarded before summaries and rhat.
inline constexpr double kDefaultBurnIn = 0.2;

// ----------------------------------------------------------------------------
// Autocorrelation
// ----------------------------------------------------------------------------

/// Lag-tau autocorrelation: sum_{j<=N-tau} (x_j - xbar)(x_{j+tau} - xbar)
/// over sum_j (x_j - xbar)^2.  Throws on constant chains (zero variance).
inline double acf(const Eigen::VectorXd& x, int tau) {
  const int n = static_cast<int>(x.size());
  if (tau < 0 || tau >= n)
    throw std::runtime_error("acf: need 0 <= tau < chain length");
  const double mean = x.mean();
  const Eigen::ArrayXd c = x.array() - mean;
  const double denom = c.square().sum();
  if (denom <= 0.0)
    throw std::runtime_error("acf: chain has zero variance");
  double num = 0.0;
  for (int j = 0; j + tau < n; ++j) num += c[j] * c[j + tau];
  return num / denom;
}

// ----------------------------------------------------------------------------
// Potential scale reduction factor
// ----------------------------------------------------------------------------

struct RhatEntry {
  double b_over_n = 0.0;   // between-chain variance of the chain means
  double w = 0.0;          // mean within-chain variance
  double s2 = 0.0;         // pooled target variance (1 - 1/N) W + B/N
  double rhat_paper = 0.0; // ((m+1)/m)(S^2/W) - (N-1)/m
  double rhat_std = 0.0;   // ((m+1)/m)(S^2/W) - (N-1)/(mN)
};

struct RhatReport {
  std::vector<RhatEntry> params;
  int m = 0;  // number of chains
  int n = 0;  // common chain length

  /// Largest standard-variant value across parameters (gate criterion).
  double worst_standard() const {
    double v = 0.0;
    for (const auto& e : params) v = std::max(v, e.rhat_std);
    return v;
  }
};

/// Scale reduction factor for one scalar parameter traced by m chains.
inline RhatEntry rhat_scalar(const std::vector<Eigen::VectorXd>& chains) {
  const int m = static_cast<int>(chains.size());
  if (m < 2) throw std::runtime_error("rhat: need at least 2 chains");
  const int n = static_cast<int>(chains[0].size());
  if (n < 2) throw std::runtime_error("rhat: need chain length >= 2");
  for (const auto& c : chains) {
    if (c.size() != n)
      throw std::runtime_error("rhat: chains must share a common length");
  }

  Eigen::VectorXd means(m);
  double w = 0.0;
  for (int i = 0; i < m; ++i) {
    means[i] = chains[i].mean();
    w += (chains[i].array() - means[i]).square().sum() / (n - 1);
  }
  w /= m;
  if (w <= 0.0)
    throw std::runtime_error("rhat: zero within-chain variance");

  const double grand = means.mean();
  const double b_over_n = (means.array() - grand).square().sum() / (m - 1);

  RhatEntry e;
  e.b_over_n = b_over_n;
  e.w = w;
  e.s2 = (1.0 - 1.0 / n) * w + b_over_n;
  const double base = (static_cast<double>(m + 1) / m) * (e.s2 / w);
  e.rhat_paper = base - static_cast<double>(n - 1) / m;
  e.rhat_std = base - static_cast<double>(n - 1) / (static_cast<double>(m) * n);
  return e;
}

/// Per-parameter report over m chains stored as N x k sample matrices.
inline RhatReport rhat(const std::vector<Eigen::MatrixXd>& chains) {
  if (chains.size() < 2) throw std::runtime_error("rhat: need at least 2 chains");
  const int k = static_cast<int>(chains[0].cols());
  RhatReport rep;
  rep.m = static_cast<int>(chains.size());
  rep.n = static_cast<int>(chains[0].rows());
  for (int p = 0; p < k; ++p) {
    std::vector<Eigen::VectorXd> cols;
    cols.reserve(chains.size());
    for (const auto& c : chains) {
      if (c.cols() != k)
        throw std::runtime_error("rhat: chains must share the parameter count");
      cols.push_back(c.col(p));
    }
    rep.params.push_back(rhat_scalar(cols));
  }
  return rep;
}

// ----------------------------------------------------------------------------
// Posterior summary
// ----------------------------------------------------------------------------

struct HistBin {
  double left = 0.0, right = 0.0;
  long count = 0;
};

struct PosteriorSummary {
  double mean = 0.0, variance = 0.0, min = 0.0, max = 0.0;
  int used = 0;     // post-burn-in sample count
  int dropped = 0;  // burn-in samples discarded
  std::vector<HistBin> hist;
};

/// Statistics over the post-burn-in tail of a scalar chain.
inline PosteriorSummary posterior_summary(const Eigen::VectorXd& x,
                                          double burn_in = kDefaultBurnIn,
                                          int bins = 20) {
  const int n = static_cast<int>(x.size());
  if (!(burn_in >= 0.0 && burn_in <= 1.0))
    throw std::runtime_error("posterior_summary: burn-in fraction out of range");
  if (bins < 1) throw std::runtime_error("posterior_summary: bins must be >= 1");
  const int drop = static_cast<int>(std::floor(burn_in * n));
  const int used = n - drop;
  if (used < 2)
    throw std::runtime_error("posterior_summary: post-burn-in window too short");

  PosteriorSummary s;
  s.used = used;
  s.dropped = drop;
  const Eigen::VectorXd tail = x.tail(used);
  s.mean = tail.mean();
  s.variance = (tail.array() - s.mean).square().sum() / (used - 1);
  s.min = tail.minCoeff();
  s.max = tail.maxCoeff();

  s.hist.resize(bins);
  const double width = (s.max - s.min) / bins;
  for (int b = 0; b < bins; ++b) {
    s.hist[b].left = s.min + b * width;
    s.hist[b].right = (b + 1 == bins) ? s.max : s.min + (b + 1) * width;
  }
  for (int j = 0; j < used; ++j) {
    int b = (width > 0.0)
                ? std::min(bins - 1,
                           static_cast<int>((tail[j] - s.min) / width))
                : 0;
    ++s.hist[b].count;
  }
  return s;
}

}  // namespace ductile::diagnostics
