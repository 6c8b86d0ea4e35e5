#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "srctrace/errors.hpp"
#include "srctrace/matrix.hpp"

namespace srctrace {

// Classification head: logits = W^T x + b. The margin losses consume the
// columns of W L2-normalized and ignore b.
struct HeadParams {
  Matrix weights;            // (dim x num_classes)
  std::vector<double> bias;  // (num_classes)
};

struct MarginConfig {
  double margin = 0.3;  // m, subtracted from the target cosine (AM) or added to the angle (AAM)
  double scale = 30.0;  // s, logit sharpening factor

  void validate() const {
    if (!(scale > 1.0)) throw InvalidSpecError("MarginConfig: scale must be > 1");
    if (!(margin >= 0.0 && margin < 1.5707963267948966))
      throw InvalidSpecError("MarginConfig: margin must be in [0, pi/2)");
  }
};

// Learnable affine on cosine similarities used by GE2E and Angular
// Prototypical. scale must stay positive; the trainer re-clamps after
// each update.
struct CosineParams {
  double scale = 10.0;
  double offset = -5.0;
};

// Mini-batch with rows grouped contiguously by class: row j*per_class + i is
// utterance i of class j.
struct BalancedBatch {
  Matrix embeddings;
  std::size_t n_classes = 0;
  std::size_t per_class = 0;
};

// Scalar loss plus analytic gradients. grad_weights/grad_bias are filled by
// the classification losses, grad_scale/grad_offset by the metric losses;
// the other pair stays empty/zero.
struct LossOutput {
  double loss = 0.0;
  Matrix grad_embeddings;
  Matrix grad_weights;
  std::vector<double> grad_bias;
  double grad_scale = 0.0;
  double grad_offset = 0.0;
};

namespace detail {

inline void check_head_shapes(const Matrix& x, std::span<const std::int32_t> y,
                              const HeadParams& head, const char* who) {
  if (x.rows() == 0) throw ShapeMismatchError(std::string(who) + ": empty batch");
  if (head.weights.rows() != x.cols())
    throw ShapeMismatchError(std::string(who) + ": weight rows != embedding dim");
  if (head.bias.size() != head.weights.cols())
    throw ShapeMismatchError(std::string(who) + ": bias length != class count");
  if (y.size() != x.rows())
    throw ShapeMismatchError(std::string(who) + ": label count != batch size");
  for (std::int32_t label : y)
    if (label < 0 || static_cast<std::size_t>(label) >= head.weights.cols())
      throw ShapeMismatchError(std::string(who) + ": label outside head width");
  if (!all_finite(x) || !all_finite(head.weights) || !all_finite(head.bias))
    throw NonFiniteError(std::string(who) + ": non-finite input");
}

// Stable log-sum-exp; also fills probs with softmax(logits).
inline double log_sum_exp(std::span<const double> logits, std::span<double> probs) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    probs[j] = std::exp(logits[j] - mx);
    sum += probs[j];
  }
  const double lse = mx + std::log(sum);
  for (std::size_t j = 0; j < logits.size(); ++j) probs[j] /= sum;
  return lse;
}

struct NormalizedRows {
  Matrix unit;                // row-normalized copy
  std::vector<double> norms;  // original row norms
};

inline NormalizedRows normalize_rows(const Matrix& x, const char* who) {
  NormalizedRows out{Matrix(x.rows(), x.cols()), std::vector<double>(x.rows())};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double n = l2_norm(x.row(i));
    if (n < 1e-30) throw ZeroNormError(std::string(who) + ": zero-norm embedding row");
    out.norms[i] = n;
    for (std::size_t c = 0; c < x.cols(); ++c) out.unit(i, c) = x(i, c) / n;
  }
  return out;
}

inline NormalizedRows normalize_cols(const Matrix& w, const char* who) {
  NormalizedRows out{Matrix(w.rows(), w.cols()), std::vector<double>(w.cols())};
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < w.rows(); ++c) s += w(c, j) * w(c, j);
    const double n = std::sqrt(s);
    if (n < 1e-30) throw ZeroNormError(std::string(who) + ": zero-norm weight column");
    out.norms[j] = n;
    for (std::size_t c = 0; c < w.rows(); ++c) out.unit(c, j) = w(c, j) / n;
  }
  return out;
}

inline void check_balanced(const BalancedBatch& batch, const CosineParams& params,
                           const char* who) {
  if (batch.per_class < 2)
    throw DegenerateBatchError(std::string(who) + ": per-class count must be >= 2");
  if (batch.n_classes < 1) throw DegenerateBatchError(std::string(who) + ": no classes");
  if (batch.embeddings.rows() != batch.n_classes * batch.per_class)
    throw ShapeMismatchError(std::string(who) + ": row count != n_classes * per_class");
  if (!(params.scale > 0.0))
    throw InvalidScaleError(std::string(who) + ": cosine scale must be > 0");
  if (!all_finite(batch.embeddings)) throw NonFiniteError(std::string(who) + ": non-finite input");
}

// d cos(u,v)/du accumulated into gu with upstream factor g (and likewise for
// v). cosuv must be the cosine of the same (u, v).
inline void accumulate_cosine_grad(double g, std::span<const double> u, double unorm,
                                   std::span<const double> v, double vnorm, double cosuv,
                                   std::span<double> gu, std::span<double> gv) {
  const double inv_uv = 1.0 / (unorm * vnorm);
  const double cu = cosuv / (unorm * unorm);
  const double cv = cosuv / (vnorm * vnorm);
  for (std::size_t c = 0; c < u.size(); ++c) {
    gu[c] += g * (v[c] * inv_uv - cu * u[c]);
    gv[c] += g * (u[c] * inv_uv - cv * v[c]);
  }
}

}  // namespace detail

// Plain softmax cross-entropy over W^T x + b, stabilized with log-sum-exp.
inline LossOutput softmax_loss(const Matrix& x, std::span<const std::int32_t> y,
                               const HeadParams& head) {
  detail::check_head_shapes(x, y, head, "softmax_loss");
  const std::size_t batch = x.rows(), dim = x.cols(), n_out = head.weights.cols();

  LossOutput out;
  out.grad_embeddings = Matrix(batch, dim);
  out.grad_weights = Matrix(dim, n_out);
  out.grad_bias.assign(n_out, 0.0);

  std::vector<double> logits(n_out), probs(n_out);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < n_out; ++j) {
      double z = head.bias[j];
      for (std::size_t c = 0; c < dim; ++c) z += head.weights(c, j) * x(i, c);
      logits[j] = z;
    }
    const double lse = detail::log_sum_exp(logits, probs);
    loss += lse - logits[static_cast<std::size_t>(y[i])];
    for (std::size_t j = 0; j < n_out; ++j) {
      const double g =
          (probs[j] - (j == static_cast<std::size_t>(y[i]) ? 1.0 : 0.0)) / batch;
      out.grad_bias[j] += g;
      for (std::size_t c = 0; c < dim; ++c) {
        out.grad_weights(c, j) += x(i, c) * g;
        out.grad_embeddings(i, c) += head.weights(c, j) * g;
      }
    }
  }
  out.loss = loss / batch;
  return out;
}

namespace detail {

// Shared body of the AM/AAM losses. The two differ only in the target-class
// logit and its derivative w.r.t. the target cosine.
enum class MarginKind { kAdditiveCosine, kAdditiveAngular };

inline LossOutput margin_softmax_loss(const Matrix& x, std::span<const std::int32_t> y,
                                      const HeadParams& head, const MarginConfig& cfg,
                                      MarginKind kind, const char* who) {
  cfg.validate();
  check_head_shapes(x, y, head, who);
  const std::size_t batch = x.rows(), dim = x.cols(), n_out = head.weights.cols();
  const NormalizedRows xn = normalize_rows(x, who);
  const NormalizedRows wn = normalize_cols(head.weights, who);
  const double s = cfg.scale, m = cfg.margin;
  const double cos_m = std::cos(m), sin_m = std::sin(m);

  LossOutput out;
  out.grad_embeddings = Matrix(batch, dim);
  out.grad_weights = Matrix(dim, n_out);
  out.grad_bias.assign(n_out, 0.0);  // margin losses ignore the head bias

  std::vector<double> cosv(n_out), logits(n_out), probs(n_out), dlogit_dcos(n_out);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t target = static_cast<std::size_t>(y[i]);
    for (std::size_t j = 0; j < n_out; ++j) {
      double cs = 0.0;
      for (std::size_t c = 0; c < dim; ++c) cs += xn.unit(i, c) * wn.unit(c, j);
      cosv[j] = cs;
      logits[j] = s * cs;
      dlogit_dcos[j] = s;
    }
    if (kind == MarginKind::kAdditiveCosine) {
      logits[target] = s * (cosv[target] - m);
    } else {
      // Margin on the angle: cos(arccos(c) + m) with c clamped away from +-1
      // where the arccos derivative diverges; the clamp region propagates a
      // zero gradient.
      const double c_raw = cosv[target];
      const double c_clamped = std::clamp(c_raw, -1.0 + 1e-7, 1.0 - 1e-7);
      const double sin_theta = std::sqrt(1.0 - c_clamped * c_clamped);
      logits[target] = s * (c_clamped * cos_m - sin_theta * sin_m);
      dlogit_dcos[target] =
          (c_raw == c_clamped) ? s * (cos_m + c_clamped * sin_m / sin_theta) : 0.0;
    }
    const double lse = log_sum_exp(logits, probs);
    loss += lse - logits[target];
    for (std::size_t j = 0; j < n_out; ++j) {
      const double glogit = (probs[j] - (j == target ? 1.0 : 0.0)) / batch;
      const double gcos = glogit * dlogit_dcos[j];
      if (gcos == 0.0) continue;
      const double inv_xnorm = 1.0 / xn.norms[i];
      const double inv_wnorm = 1.0 / wn.norms[j];
      for (std::size_t c = 0; c < dim; ++c) {
        out.grad_embeddings(i, c) += gcos * (wn.unit(c, j) - cosv[j] * xn.unit(i, c)) * inv_xnorm;
        out.grad_weights(c, j) += gcos * (xn.unit(i, c) - cosv[j] * wn.unit(c, j)) * inv_wnorm;
      }
    }
  }
  out.loss = loss / batch;
  return out;
}

}  // namespace detail

// Margin subtracted from the target-class cosine before scaling.
inline LossOutput am_softmax_loss(const Matrix& x, std::span<const std::int32_t> y,
                                  const HeadParams& head, const MarginConfig& cfg) {
  return detail::margin_softmax_loss(x, y, head, cfg, detail::MarginKind::kAdditiveCosine,
                                     "am_softmax_loss");
}

// Margin added to the target-class angle.
inline LossOutput aam_softmax_loss(const Matrix& x, std::span<const std::int32_t> y,
                                   const HeadParams& head, const MarginConfig& cfg) {
  return detail::margin_softmax_loss(x, y, head, cfg, detail::MarginKind::kAdditiveAngular,
                                     "aam_softmax_loss");
}

// Full and query-excluded class centroids of a balanced batch.
struct Ge2eCentroids {
  Matrix full;       // (n_classes x dim), mean over all per_class rows
  Matrix exclusive;  // (n_classes*per_class x dim), row j*M+i excludes utterance i
};

inline Ge2eCentroids ge2e_centroids(const BalancedBatch& batch) {
  if (batch.per_class < 2)
    throw DegenerateBatchError("ge2e_centroids: per-class count must be >= 2");
  if (batch.embeddings.rows() != batch.n_classes * batch.per_class)
    throw ShapeMismatchError("ge2e_centroids: row count != n_classes * per_class");
  const std::size_t n = batch.n_classes, m = batch.per_class, dim = batch.embeddings.cols();
  Ge2eCentroids out{Matrix(n, dim), Matrix(n * m, dim)};
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> sum(dim, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = batch.embeddings.row(j * m + i);
      for (std::size_t c = 0; c < dim; ++c) sum[c] += row[c];
    }
    for (std::size_t c = 0; c < dim; ++c) out.full(j, c) = sum[c] / m;
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = batch.embeddings.row(j * m + i);
      for (std::size_t c = 0; c < dim; ++c)
        out.exclusive(j * m + i, c) = (sum[c] - row[c]) / (m - 1);
    }
  }
  return out;
}

// Generalized end-to-end loss: every utterance scores against all class
// centroids, its own class centroid excluding itself. Loss carries the
// printed 1/N prefactor over all N*M query terms.
inline LossOutput ge2e_loss(const BalancedBatch& batch, const CosineParams& params) {
  detail::check_balanced(batch, params, "ge2e_loss");
  const std::size_t n = batch.n_classes, m = batch.per_class, dim = batch.embeddings.cols();
  const Matrix& x = batch.embeddings;
  const double w = params.scale, b = params.offset;

  const Ge2eCentroids cents = ge2e_centroids(batch);
  std::vector<double> row_norms(n * m), full_norms(n);
  for (std::size_t r = 0; r < n * m; ++r) {
    row_norms[r] = l2_norm(x.row(r));
    if (row_norms[r] < 1e-30) throw ZeroNormError("ge2e_loss: zero-norm embedding row");
  }
  for (std::size_t k = 0; k < n; ++k) {
    full_norms[k] = l2_norm(cents.full.row(k));
    if (full_norms[k] < 1e-30) throw ZeroNormError("ge2e_loss: zero-norm centroid");
  }

  LossOutput out;
  out.grad_embeddings = Matrix(n * m, dim);
  Matrix grad_full(n, dim);  // dL/dc_k, scattered to member rows at the end

  std::vector<double> cosv(n), logits(n), probs(n);
  std::vector<double> gq(dim), gc(dim);
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t r = j * m + i;
      const auto u = x.row(r);
      const auto excl = cents.exclusive.row(r);
      const double excl_norm = l2_norm(excl);
      if (excl_norm < 1e-30) throw ZeroNormError("ge2e_loss: zero-norm exclusive centroid");
      for (std::size_t k = 0; k < n; ++k) {
        const auto v = (k == j) ? excl : cents.full.row(k);
        const double vnorm = (k == j) ? excl_norm : full_norms[k];
        cosv[k] = dot(u, v) / (row_norms[r] * vnorm);
        logits[k] = w * cosv[k] + b;
      }
      const double lse = detail::log_sum_exp(logits, probs);
      loss += lse - logits[j];
      for (std::size_t k = 0; k < n; ++k) {
        const double glogit = (probs[k] - (k == j ? 1.0 : 0.0)) / n;
        out.grad_scale += glogit * cosv[k];
        out.grad_offset += glogit;
        const double gcos = glogit * w;
        if (gcos == 0.0) continue;
        const auto v = (k == j) ? excl : cents.full.row(k);
        const double vnorm = (k == j) ? excl_norm : full_norms[k];
        std::fill(gq.begin(), gq.end(), 0.0);
        std::fill(gc.begin(), gc.end(), 0.0);
        detail::accumulate_cosine_grad(gcos, u, row_norms[r], v, vnorm, cosv[k], gq, gc);
        axpy(1.0, gq, out.grad_embeddings.row(r));
        if (k == j) {
          // exclusive centroid averages the other m-1 rows of class j
          for (std::size_t t = 0; t < m; ++t) {
            if (t == i) continue;
            axpy(1.0 / (m - 1), gc, out.grad_embeddings.row(j * m + t));
          }
        } else {
          axpy(1.0, gc, grad_full.row(k));
        }
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t t = 0; t < m; ++t)
      axpy(1.0 / m, grad_full.row(k), out.grad_embeddings.row(k * m + t));
  out.loss = loss / n;
  return out;
}

// Angular prototypical loss: the last utterance of each class is the query,
// the mean of the other per_class-1 utterances is the class prototype.
inline LossOutput angular_proto_loss(const BalancedBatch& batch, const CosineParams& params) {
  detail::check_balanced(batch, params, "angular_proto_loss");
  const std::size_t n = batch.n_classes, m = batch.per_class, dim = batch.embeddings.cols();
  const Matrix& x = batch.embeddings;
  const double w = params.scale, b = params.offset;

  Matrix support(n, dim);
  std::vector<double> support_norms(n), query_norms(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i + 1 < m; ++i) {
      const auto row = x.row(k * m + i);
      for (std::size_t c = 0; c < dim; ++c) support(k, c) += row[c] / (m - 1);
    }
    support_norms[k] = l2_norm(support.row(k));
    if (support_norms[k] < 1e-30) throw ZeroNormError("angular_proto_loss: zero-norm prototype");
    query_norms[k] = l2_norm(x.row(k * m + m - 1));
    if (query_norms[k] < 1e-30) throw ZeroNormError("angular_proto_loss: zero-norm query");
  }

  LossOutput out;
  out.grad_embeddings = Matrix(n * m, dim);

  std::vector<double> cosv(n), logits(n), probs(n), gq(dim), gc(dim);
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t qrow = j * m + m - 1;
    const auto q = x.row(qrow);
    for (std::size_t k = 0; k < n; ++k) {
      cosv[k] = dot(q, support.row(k)) / (query_norms[j] * support_norms[k]);
      logits[k] = w * cosv[k] + b;
    }
    const double lse = detail::log_sum_exp(logits, probs);
    loss += lse - logits[j];
    for (std::size_t k = 0; k < n; ++k) {
      const double glogit = (probs[k] - (k == j ? 1.0 : 0.0)) / n;
      out.grad_scale += glogit * cosv[k];
      out.grad_offset += glogit;
      const double gcos = glogit * w;
      if (gcos == 0.0) continue;
      std::fill(gq.begin(), gq.end(), 0.0);
      std::fill(gc.begin(), gc.end(), 0.0);
      detail::accumulate_cosine_grad(gcos, q, query_norms[j], support.row(k), support_norms[k],
                                     cosv[k], gq, gc);
      axpy(1.0, gq, out.grad_embeddings.row(qrow));
      for (std::size_t i = 0; i + 1 < m; ++i)
        axpy(1.0 / (m - 1), gc, out.grad_embeddings.row(k * m + i));
    }
  }
  out.loss = loss / n;
  return out;
}

}  // namespace srctrace
