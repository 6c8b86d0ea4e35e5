#pragma once

// Independent oracles used by the unit and acceptance suites. Everything here
// deliberately re-derives results from first principles (literal formulas,
// naive loops, long double accumulation) and must stay decoupled from the
// library implementations it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <vector>

#include "srctrace/embedding.hpp"
#include "srctrace/eval.hpp"
#include "srctrace/losses.hpp"
#include "srctrace/matrix.hpp"
#include "srctrace/rng.hpp"

namespace oracles {

using srctrace::BalancedBatch;
using srctrace::CosineParams;
using srctrace::EmbeddingSet;
using srctrace::HeadParams;
using srctrace::MarginConfig;
using srctrace::Matrix;

// ----- finite differences -------------------------------------------------

// Central finite differences of eval() w.r.t. each component of params.
inline std::vector<double> fd_gradient(std::span<double> params,
                                       const std::function<double()>& eval,
                                       double h = 1e-4) {
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = eval();
    params[i] = saved - h;
    const double down = eval();
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Relative error < tol with an absolute floor for near-zero components.
inline bool grad_close(double analytic, double fd, double tol = 1e-4, double floor = 1e-7) {
  const double diff = std::abs(analytic - fd);
  return diff <= std::max(tol * std::max(std::abs(analytic), std::abs(fd)), floor);
}

inline bool grads_close(std::span<const double> analytic, std::span<const double> fd,
                        double tol = 1e-4, double floor = 1e-7) {
  if (analytic.size() != fd.size()) return false;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    if (!grad_close(analytic[i], fd[i], tol, floor)) return false;
  return true;
}

// ----- scalar loss evaluations (long double, literal formulas) ------------

inline long double softmax_loss_scalar(const Matrix& x, std::span<const std::int32_t> y,
                                       const HeadParams& head) {
  const std::size_t batch = x.rows(), dim = x.cols(), n_out = head.weights.cols();
  long double total = 0.0L;
  for (std::size_t i = 0; i < batch; ++i) {
    long double denom = 0.0L;
    for (std::size_t j = 0; j < n_out; ++j) {
      long double z = head.bias[j];
      for (std::size_t c = 0; c < dim; ++c)
        z += static_cast<long double>(head.weights(c, j)) * x(i, c);
      denom += std::exp(z);
    }
    long double zy = head.bias[static_cast<std::size_t>(y[i])];
    for (std::size_t c = 0; c < dim; ++c)
      zy += static_cast<long double>(head.weights(c, static_cast<std::size_t>(y[i]))) * x(i, c);
    total += -std::log(std::exp(zy) / denom);
  }
  return total / static_cast<long double>(batch);
}

inline long double cosine_scalar(std::span<const double> a, std::span<const double> b) {
  long double num = 0.0L, na = 0.0L, nb = 0.0L;
  for (std::size_t c = 0; c < a.size(); ++c) {
    num += static_cast<long double>(a[c]) * b[c];
    na += static_cast<long double>(a[c]) * a[c];
    nb += static_cast<long double>(b[c]) * b[c];
  }
  return num / (std::sqrt(na) * std::sqrt(nb));
}

inline long double weight_column_cosine_scalar(std::span<const double> x, const Matrix& w,
                                               std::size_t col) {
  long double num = 0.0L, nx = 0.0L, nw = 0.0L;
  for (std::size_t c = 0; c < x.size(); ++c) {
    num += static_cast<long double>(x[c]) * w(c, col);
    nx += static_cast<long double>(x[c]) * x[c];
    nw += static_cast<long double>(w(c, col)) * w(c, col);
  }
  return num / (std::sqrt(nx) * std::sqrt(nw));
}

inline long double am_softmax_loss_scalar(const Matrix& x, std::span<const std::int32_t> y,
                                          const HeadParams& head, const MarginConfig& cfg) {
  const std::size_t batch = x.rows(), n_out = head.weights.cols();
  long double total = 0.0L;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t target = static_cast<std::size_t>(y[i]);
    long double denom = 0.0L, numer = 0.0L;
    for (std::size_t j = 0; j < n_out; ++j) {
      const long double cos_ji = weight_column_cosine_scalar(x.row(i), head.weights, j);
      const long double margin = (j == target) ? cfg.margin : 0.0L;
      const long double e = std::exp(cfg.scale * (cos_ji - margin));
      denom += e;
      if (j == target) numer = e;
    }
    total += -std::log(numer / denom);
  }
  return total / static_cast<long double>(batch);
}

inline long double aam_softmax_loss_scalar(const Matrix& x, std::span<const std::int32_t> y,
                                           const HeadParams& head, const MarginConfig& cfg) {
  const std::size_t batch = x.rows(), n_out = head.weights.cols();
  long double total = 0.0L;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t target = static_cast<std::size_t>(y[i]);
    long double denom = 0.0L, numer = 0.0L;
    for (std::size_t j = 0; j < n_out; ++j) {
      long double cos_ji = weight_column_cosine_scalar(x.row(i), head.weights, j);
      long double logit;
      if (j == target) {
        const long double clamped =
            std::min<long double>(std::max<long double>(cos_ji, -1.0L + 1e-7L), 1.0L - 1e-7L);
        logit = cfg.scale * std::cos(std::acos(clamped) + static_cast<long double>(cfg.margin));
      } else {
        logit = cfg.scale * cos_ji;
      }
      const long double e = std::exp(logit);
      denom += e;
      if (j == target) numer = e;
    }
    total += -std::log(numer / denom);
  }
  return total / static_cast<long double>(batch);
}

inline long double ge2e_loss_scalar(const BalancedBatch& batch, const CosineParams& params) {
  const std::size_t n = batch.n_classes, m = batch.per_class, dim = batch.embeddings.cols();
  const Matrix& x = batch.embeddings;
  // literal centroids
  auto full_centroid = [&](std::size_t j) {
    std::vector<double> c(dim, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t d = 0; d < dim; ++d) c[d] += x(j * m + i, d);
    for (double& v : c) v /= static_cast<double>(m);
    return c;
  };
  auto excl_centroid = [&](std::size_t j, std::size_t skip) {
    std::vector<double> c(dim, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      if (i == skip) continue;
      for (std::size_t d = 0; d < dim; ++d) c[d] += x(j * m + i, d);
    }
    for (double& v : c) v /= static_cast<double>(m - 1);
    return c;
  };

  long double total = 0.0L;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      long double denom = 0.0L, numer = 0.0L;
      for (std::size_t k = 0; k < n; ++k) {
        const std::vector<double> cent = (k == j) ? excl_centroid(j, i) : full_centroid(k);
        const long double cos = cosine_scalar(x.row(j * m + i), cent);
        const long double s = params.scale * cos + params.offset;
        const long double e = std::exp(s);
        denom += e;
        if (k == j) numer = e;
      }
      total += -std::log(numer / denom);
    }
  }
  return total / static_cast<long double>(n);
}

inline long double angular_proto_loss_scalar(const BalancedBatch& batch,
                                             const CosineParams& params) {
  const std::size_t n = batch.n_classes, m = batch.per_class, dim = batch.embeddings.cols();
  const Matrix& x = batch.embeddings;
  auto support_centroid = [&](std::size_t k) {
    std::vector<double> c(dim, 0.0);
    for (std::size_t i = 0; i + 1 < m; ++i)
      for (std::size_t d = 0; d < dim; ++d) c[d] += x(k * m + i, d);
    for (double& v : c) v /= static_cast<double>(m - 1);
    return c;
  };
  long double total = 0.0L;
  for (std::size_t j = 0; j < n; ++j) {
    long double denom = 0.0L, numer = 0.0L;
    for (std::size_t k = 0; k < n; ++k) {
      const std::vector<double> cent = support_centroid(k);
      const long double cos = cosine_scalar(x.row(j * m + m - 1), cent);
      const long double e = std::exp(params.scale * cos + params.offset);
      denom += e;
      if (k == j) numer = e;
    }
    total += -std::log(numer / denom);
  }
  return total / static_cast<long double>(n);
}

// ----- pair scoring --------------------------------------------------------

// Naive O(n^2) double loop; per-pair normalization uses the same arithmetic
// sequence as the blocked implementation so equality is exact.
inline srctrace::TrialScores score_pairs_naive(const EmbeddingSet& set) {
  srctrace::TrialScores out;
  for (std::size_t i = 0; i < set.count(); ++i) {
    const std::vector<double> a = set.row_f64(i);
    const double na = srctrace::l2_norm(a);
    for (std::size_t j = i + 1; j < set.count(); ++j) {
      const std::vector<double> b = set.row_f64(j);
      const double nb = srctrace::l2_norm(b);
      double s = 0.0;
      for (std::size_t c = 0; c < set.dim(); ++c) s += (a[c] / na) * (b[c] / nb);
      (set.labels()[i] == set.labels()[j] ? out.target : out.nontarget).push_back(s);
    }
  }
  return out;
}

// ----- EER ------------------------------------------------------------------

struct EerSweepResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Brute-force threshold sweep: every distinct score is tried as a threshold
// with full recounting, then the crossing segment is interpolated.
inline EerSweepResult eer_brute_force(const std::vector<double>& targets,
                                      const std::vector<double>& nontargets) {
  std::set<double> distinct(targets.begin(), targets.end());
  distinct.insert(nontargets.begin(), nontargets.end());
  std::vector<double> thresholds(distinct.begin(), distinct.end());
  thresholds.push_back(thresholds.back() + 1.0);

  const double n_t = static_cast<double>(targets.size());
  const double n_n = static_cast<double>(nontargets.size());
  double prev_frr = 0.0, prev_t = 0.0, prev_d = 0.0;
  bool have_prev = false;
  for (const double t : thresholds) {
    std::size_t below_t = 0, at_or_above_n = 0;
    for (double s : targets)
      if (s < t) ++below_t;
    for (double s : nontargets)
      if (s >= t) ++at_or_above_n;
    const double frr = below_t / n_t;
    const double far = at_or_above_n / n_n;
    const double d = frr - far;
    if (have_prev && prev_d < 0.0 && d >= 0.0) {
      const double alpha = prev_d / (prev_d - d);
      return {prev_frr + alpha * (frr - prev_frr), prev_t + alpha * (t - prev_t)};
    }
    prev_frr = frr;
    prev_t = t;
    prev_d = d;
    have_prev = true;
  }
  return {1.0, thresholds.back()};
}

// ----- PCA ------------------------------------------------------------------

// Top-2 covariance eigenvalues by power iteration with deflation.
inline std::array<double, 2> top2_eigenvalues_power(const Matrix& cov) {
  const std::size_t dim = cov.rows();
  Matrix work = cov;
  std::array<double, 2> out{0.0, 0.0};
  for (int comp = 0; comp < 2 && comp < static_cast<int>(dim); ++comp) {
    std::vector<double> v(dim);
    for (std::size_t c = 0; c < dim; ++c) v[c] = 1.0 + 0.01 * static_cast<double>(c + 1);
    double lambda = 0.0;
    for (int iter = 0; iter < 100000; ++iter) {
      std::vector<double> next(dim, 0.0);
      for (std::size_t p = 0; p < dim; ++p)
        for (std::size_t q = 0; q < dim; ++q) next[p] += work(p, q) * v[q];
      double norm = 0.0;
      for (double x : next) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-300) break;
      for (double& x : next) x /= norm;
      double new_lambda = 0.0;
      for (std::size_t p = 0; p < dim; ++p)
        for (std::size_t q = 0; q < dim; ++q) new_lambda += next[p] * work(p, q) * next[q];
      v = std::move(next);
      if (std::abs(new_lambda - lambda) <= 1e-15 * std::max(1.0, std::abs(new_lambda)) &&
          iter > 10) {
        lambda = new_lambda;
        break;
      }
      lambda = new_lambda;
    }
    out[comp] = lambda;
    for (std::size_t p = 0; p < dim; ++p)
      for (std::size_t q = 0; q < dim; ++q) work(p, q) -= lambda * v[p] * v[q];
  }
  return out;
}

// ----- random instances ------------------------------------------------------

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = srctrace::uniform_in(rng, lo, hi);
  return m;
}

inline std::vector<std::int32_t> random_labels(std::mt19937_64& rng, std::size_t count,
                                               std::size_t n_classes) {
  std::vector<std::int32_t> y(count);
  for (auto& v : y)
    v = static_cast<std::int32_t>(srctrace::uniform_below(rng, n_classes));
  return y;
}

}  // namespace oracles
