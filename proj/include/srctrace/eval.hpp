#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "srctrace/embedding.hpp"
#include "srctrace/errors.hpp"
#include "srctrace/losses.hpp"
#include "srctrace/matrix.hpp"
#include "srctrace/rng.hpp"

namespace srctrace {

// Cosine scores of same-source (target) and different-source (nontarget)
// trial pairs.
struct TrialScores {
  std::vector<double> target;
  std::vector<double> nontarget;
};

struct PairScoringOptions {
  std::size_t block_rows = 1024;  // rows per tile; keeps the working set in cache
  std::size_t threads = 1;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
  std::size_t n_target = 0;
  std::size_t n_nontarget = 0;
};

namespace detail {

inline Matrix normalized_matrix(const EmbeddingSet& set, const char* who) {
  Matrix unit(set.count(), set.dim());
  for (std::size_t i = 0; i < set.count(); ++i) {
    const std::vector<double> r = set.row_f64(i);
    const double n = l2_norm(r);
    if (n < kZeroNormThreshold)
      throw ZeroNormError(std::string(who) + ": zero-norm row " + std::to_string(i));
    for (std::size_t c = 0; c < set.dim(); ++c) unit(i, c) = r[c] / n;
  }
  return unit;
}

// Runs fn(pair_index, a0, a1, b0, b1) over all ordered block pairs (a <= b).
// Work is strided across threads by pair index; fn must write only state
// owned by that pair index (or thread) so results merge deterministically.
template <typename Fn>
void run_block_pairs(std::size_t count, std::size_t block, std::size_t threads, Fn&& fn) {
  if (block == 0) block = 1;
  const std::size_t n_blocks = (count + block - 1) / block;
  std::vector<std::array<std::size_t, 4>> pairs;
  for (std::size_t a = 0; a < n_blocks; ++a)
    for (std::size_t b = a; b < n_blocks; ++b)
      pairs.push_back({a * block, std::min((a + 1) * block, count), b * block,
                       std::min((b + 1) * block, count)});

  if (threads <= 1 || pairs.size() <= 1) {
    for (std::size_t p = 0; p < pairs.size(); ++p)
      fn(p, pairs[p][0], pairs[p][1], pairs[p][2], pairs[p][3]);
    return;
  }
  const std::size_t n_workers = std::min(threads, pairs.size());
  std::vector<std::exception_ptr> errors(n_workers);
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < n_workers; ++t) {
    workers.emplace_back([&, t]() {
      try {
        for (std::size_t p = t; p < pairs.size(); p += n_workers)
          fn(p, pairs[p][0], pairs[p][1], pairs[p][2], pairs[p][3]);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Cosine score of every unordered pair (i, j), i < j, bucketed into target
// (same label) and nontarget trials. Blocked so peak extra memory stays
// O(block_rows^2); the multiset of scores is independent of block size and
// thread count.
inline TrialScores score_all_pairs(const EmbeddingSet& set,
                                   const PairScoringOptions& opts = {}) {
  if (set.count() < 2) throw DegenerateSetError("score_all_pairs: need at least 2 rows");
  const Matrix unit = detail::normalized_matrix(set, "score_all_pairs");
  const auto& labels = set.labels();

  struct Local {
    std::vector<double> target, nontarget;
  };
  const std::size_t block = opts.block_rows ? opts.block_rows : 1024;
  const std::size_t n_blocks = (set.count() + block - 1) / block;
  std::vector<Local> locals(n_blocks * (n_blocks + 1) / 2);

  detail::run_block_pairs(
      set.count(), block, opts.threads,
      [&](std::size_t p, std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
        Local& local = locals[p];
        for (std::size_t i = a0; i < a1; ++i) {
          const std::size_t jstart = std::max(b0, i + 1);
          for (std::size_t j = jstart; j < b1; ++j) {
            const double s = dot(unit.row(i), unit.row(j));
            (labels[i] == labels[j] ? local.target : local.nontarget).push_back(s);
          }
        }
      });

  TrialScores out;
  for (const Local& local : locals) {
    out.target.insert(out.target.end(), local.target.begin(), local.target.end());
    out.nontarget.insert(out.nontarget.end(), local.nontarget.begin(), local.nontarget.end());
  }
  return out;
}

// Exact EER. FRR(t) = fraction of targets strictly below t, FAR(t) =
// fraction of nontargets at or above t (ties accept). D(t) = FRR - FAR is
// non-decreasing and starts at -1, so the first threshold with D >= 0 marks
// the sign change; the EER is read off by linear interpolation between the
// two adjacent operating points.
inline EerResult compute_eer_exact(const TrialScores& scores) {
  if (scores.target.empty() || scores.nontarget.empty())
    throw DegenerateSetError("compute_eer_exact: need both target and nontarget scores");
  std::vector<double> ts = scores.target;
  std::vector<double> ns = scores.nontarget;
  std::sort(ts.begin(), ts.end());
  std::sort(ns.begin(), ns.end());
  const double n_t = static_cast<double>(ts.size());
  const double n_n = static_cast<double>(ns.size());

  std::vector<double> thresholds;
  thresholds.reserve(ts.size() + ns.size() + 1);
  thresholds.insert(thresholds.end(), ts.begin(), ts.end());
  thresholds.insert(thresholds.end(), ns.begin(), ns.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  // Sentinel above the maximum: FRR jumps to 1, FAR drops to 0, so a sign
  // change always exists even for fully overlapping score sets.
  thresholds.push_back(thresholds.back() + 1.0);

  std::size_t bt = 0, bn = 0;
  double prev_frr = 0.0, prev_t = 0.0, prev_d = 0.0;
  bool have_prev = false;
  for (const double t : thresholds) {
    while (bt < ts.size() && ts[bt] < t) ++bt;
    while (bn < ns.size() && ns[bn] < t) ++bn;
    const double frr = bt / n_t;
    const double far = (n_n - bn) / n_n;
    const double d = frr - far;
    if (have_prev && prev_d < 0.0 && d >= 0.0) {
      const double alpha = prev_d / (prev_d - d);
      EerResult res;
      res.eer = prev_frr + alpha * (frr - prev_frr);
      res.threshold = prev_t + alpha * (t - prev_t);
      res.n_target = ts.size();
      res.n_nontarget = ns.size();
      return res;
    }
    prev_frr = frr;
    prev_t = t;
    prev_d = d;
    have_prev = true;
  }
  throw DegenerateSetError("compute_eer_exact: no operating point found");
}

// Two fixed-width count histograms over [-1, 1]. Operating points at bin
// boundaries are exact (a score on a boundary lands in the upper bin), so
// the interpolated EER is within one bin of the exact sweep. Merging adds
// integer counts and is therefore order-independent.
class ScoreHistogram {
 public:
  explicit ScoreHistogram(std::size_t bins) : bins_(bins), target_(bins, 0), nontarget_(bins, 0) {
    if (bins < 1000) throw InvalidSpecError("ScoreHistogram: need at least 1000 bins");
  }

  void add(double score, bool is_target) {
    const double s = std::clamp(score, -1.0, 1.0);
    std::size_t b = static_cast<std::size_t>((s + 1.0) * 0.5 * static_cast<double>(bins_));
    if (b >= bins_) b = bins_ - 1;
    auto& h = is_target ? target_ : nontarget_;
    ++h[b];
  }

  void merge(const ScoreHistogram& other) {
    if (other.bins_ != bins_) throw ShapeMismatchError("ScoreHistogram: bin count mismatch");
    for (std::size_t b = 0; b < bins_; ++b) {
      target_[b] += other.target_[b];
      nontarget_[b] += other.nontarget_[b];
    }
  }

  std::size_t bins() const { return bins_; }
  const std::vector<std::uint64_t>& target() const { return target_; }
  const std::vector<std::uint64_t>& nontarget() const { return nontarget_; }

 private:
  std::size_t bins_;
  std::vector<std::uint64_t> target_;
  std::vector<std::uint64_t> nontarget_;
};

inline EerResult eer_from_histogram(const ScoreHistogram& h) {
  std::uint64_t n_t = 0, n_n = 0;
  for (std::uint64_t c : h.target()) n_t += c;
  for (std::uint64_t c : h.nontarget()) n_n += c;
  if (n_t == 0 || n_n == 0)
    throw DegenerateSetError("eer_from_histogram: need both target and nontarget scores");

  const double width = 2.0 / static_cast<double>(h.bins());
  std::uint64_t cum_t = 0, cum_n = 0;
  double prev_frr = 0.0, prev_t = -1.0, prev_d = -1.0;  // boundary k = 0
  for (std::size_t k = 1; k <= h.bins(); ++k) {
    cum_t += h.target()[k - 1];
    cum_n += h.nontarget()[k - 1];
    const double frr = static_cast<double>(cum_t) / static_cast<double>(n_t);
    const double far =
        static_cast<double>(n_n - cum_n) / static_cast<double>(n_n);
    const double t = -1.0 + static_cast<double>(k) * width;
    const double d = frr - far;
    if (prev_d < 0.0 && d >= 0.0) {
      const double alpha = prev_d / (prev_d - d);
      EerResult res;
      res.eer = prev_frr + alpha * (frr - prev_frr);
      res.threshold = prev_t + alpha * (t - prev_t);
      res.n_target = n_t;
      res.n_nontarget = n_n;
      return res;
    }
    prev_frr = frr;
    prev_t = t;
    prev_d = d;
  }
  // All mass in the top bin on both sides; call it even.
  return {0.5, 1.0, n_t, n_n};
}

inline double compute_eer_histogram(const TrialScores& scores, std::size_t bins) {
  ScoreHistogram h(bins);
  for (double s : scores.target) h.add(s, true);
  for (double s : scores.nontarget) h.add(s, false);
  return eer_from_histogram(h).eer;
}

// Histogram EER straight from an embedding set; scores stream into
// per-worker histograms, so no O(count^2) score list is materialized.
inline EerResult histogram_eer_all_pairs(const EmbeddingSet& set, std::size_t bins,
                                         const PairScoringOptions& opts = {}) {
  if (set.count() < 2) throw DegenerateSetError("histogram_eer_all_pairs: need at least 2 rows");
  const Matrix unit = detail::normalized_matrix(set, "histogram_eer_all_pairs");
  const auto& labels = set.labels();

  const std::size_t block = opts.block_rows ? opts.block_rows : 1024;
  const std::size_t n_blocks = (set.count() + block - 1) / block;
  const std::size_t n_pairs = n_blocks * (n_blocks + 1) / 2;
  // One histogram per worker; run_block_pairs strides pair indices across
  // workers, so p % hists.size() is stable per worker.
  const std::size_t n_workers =
      (opts.threads <= 1 || n_pairs <= 1) ? 1 : std::min(opts.threads, n_pairs);
  std::vector<ScoreHistogram> hists(n_workers, ScoreHistogram(bins));

  detail::run_block_pairs(
      set.count(), block, opts.threads,
      [&](std::size_t p, std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
        ScoreHistogram& h = hists[p % hists.size()];
        for (std::size_t i = a0; i < a1; ++i) {
          const std::size_t jstart = std::max(b0, i + 1);
          for (std::size_t j = jstart; j < b1; ++j)
            h.add(dot(unit.row(i), unit.row(j)), labels[i] == labels[j]);
        }
      });
  for (std::size_t t = 1; t < hists.size(); ++t) hists[0].merge(hists[t]);
  return eer_from_histogram(hists[0]);
}

// Caps every class at `cap` rows, chosen uniformly without replacement;
// surviving rows keep their original order.
inline EmbeddingSet undersample(const EmbeddingSet& set, std::size_t cap, std::uint64_t seed) {
  if (cap < 1) throw InvalidSpecError("undersample: cap must be >= 1");
  std::vector<std::vector<std::size_t>> per_class(set.num_classes());
  for (std::size_t i = 0; i < set.count(); ++i) per_class[set.labels()[i]].push_back(i);

  auto rng = make_rng(seed, /*stream=*/0x756e64);  // "und"
  std::vector<char> keep(set.count(), 1);
  for (auto& positions : per_class) {
    if (positions.size() <= cap) continue;
    std::vector<std::size_t> pool = positions;
    shuffle_in_place(pool, rng);
    for (std::size_t i = cap; i < pool.size(); ++i) keep[pool[i]] = 0;
  }

  std::vector<float> data;
  std::vector<std::int32_t> labels;
  for (std::size_t i = 0; i < set.count(); ++i) {
    if (!keep[i]) continue;
    const auto row = set.row(i);
    data.insert(data.end(), row.begin(), row.end());
    labels.push_back(set.labels()[i]);
  }
  const std::size_t count = labels.size();
  return EmbeddingSet(count, set.dim(), std::move(data), std::move(labels), set.class_names());
}

struct ProbeConfig {
  std::size_t epochs = 50;
  double lr = 0.1;
  double train_fraction = 0.8;
  std::size_t per_class_cap = 300;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  HeadParams head;
  Matrix confusion;  // rows = true class, columns = predicted, held-out counts
  double accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_heldout = 0;
};

// Trains a single affine classification head on frozen embeddings with plain
// SGD (momentum 0) and reports the held-out confusion matrix. The split is
// stratified per class at train_fraction.
inline ProbeResult linear_probe(const EmbeddingSet& set, const ProbeConfig& cfg) {
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0))
    throw InvalidSpecError("linear_probe: train_fraction must be in (0, 1)");
  if (set.num_classes() < 2) throw TooFewSamplesError("linear_probe: need at least 2 classes");

  std::vector<std::vector<std::size_t>> per_class(set.num_classes());
  for (std::size_t i = 0; i < set.count(); ++i) per_class[set.labels()[i]].push_back(i);
  for (std::size_t cls = 0; cls < per_class.size(); ++cls)
    if (per_class[cls].size() < 2)
      throw TooFewSamplesError("linear_probe: class " + std::to_string(cls) +
                               " has fewer than 2 samples");

  auto rng = make_rng(cfg.seed, /*stream=*/0x70726f62);  // "prob"
  std::vector<std::size_t> train_idx, held_idx;
  for (auto& positions : per_class) {
    std::vector<std::size_t> pool = positions;
    shuffle_in_place(pool, rng);
    std::size_t n_train = static_cast<std::size_t>(
        std::floor(cfg.train_fraction * static_cast<double>(pool.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, pool.size() - 1);
    train_idx.insert(train_idx.end(), pool.begin(), pool.begin() + n_train);
    held_idx.insert(held_idx.end(), pool.begin() + n_train, pool.end());
  }

  const std::size_t dim = set.dim(), n_out = set.num_classes();
  HeadParams head{Matrix(dim, n_out), std::vector<double>(n_out, 0.0)};

  // Mini-batch SGD over shuffled train indices, cross-entropy objective.
  const std::size_t batch_size = std::min<std::size_t>(128, train_idx.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(train_idx, rng);
    for (std::size_t start = 0; start < train_idx.size(); start += batch_size) {
      const std::size_t end = std::min(start + batch_size, train_idx.size());
      Matrix xb(end - start, dim);
      std::vector<std::int32_t> yb(end - start);
      for (std::size_t r = start; r < end; ++r) {
        const auto row = set.row(train_idx[r]);
        for (std::size_t c = 0; c < dim; ++c) xb(r - start, c) = row[c];
        yb[r - start] = set.labels()[train_idx[r]];
      }
      const LossOutput out = softmax_loss(xb, yb, head);
      for (std::size_t i = 0; i < head.weights.size(); ++i)
        head.weights.data()[i] -= cfg.lr * out.grad_weights.data()[i];
      for (std::size_t j = 0; j < n_out; ++j) head.bias[j] -= cfg.lr * out.grad_bias[j];
    }
  }

  ProbeResult res;
  res.n_train = train_idx.size();
  res.n_heldout = held_idx.size();
  res.confusion = Matrix(n_out, n_out);
  std::size_t correct = 0;
  std::vector<double> logits(n_out);
  for (std::size_t idx : held_idx) {
    const auto row = set.row(idx);
    for (std::size_t j = 0; j < n_out; ++j) {
      double z = head.bias[j];
      for (std::size_t c = 0; c < dim; ++c) z += head.weights(c, j) * row[c];
      logits[j] = z;
    }
    const std::size_t pred =
        std::max_element(logits.begin(), logits.end()) - logits.begin();
    const std::size_t truth = static_cast<std::size_t>(set.labels()[idx]);
    res.confusion(truth, pred) += 1.0;
    if (pred == truth) ++correct;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(held_idx.size());
  res.head = std::move(head);
  return res;
}

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
// eigenvalues descending with matching eigenvector columns.
inline void jacobi_eigen_symmetric(Matrix a, std::vector<double>& eigvals, Matrix& eigvecs) {
  const std::size_t n = a.rows();
  eigvecs = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) eigvecs(i, i) = 1.0;

  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a(i, i)));
  scale = std::max(scale, 1e-300);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30 * scale * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t =
            (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = eigvecs(k, p), vkq = eigvecs(k, q);
          eigvecs(k, p) = c * vkp - s * vkq;
          eigvecs(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  eigvals.resize(n);
  for (std::size_t i = 0; i < n; ++i) eigvals[i] = a(i, i);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return eigvals[x] > eigvals[y]; });
  std::vector<double> sorted_vals(n);
  Matrix sorted_vecs(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    sorted_vals[i] = eigvals[order[i]];
    for (std::size_t k = 0; k < n; ++k) sorted_vecs(k, i) = eigvecs(k, order[i]);
  }
  eigvals = std::move(sorted_vals);
  eigvecs = std::move(sorted_vecs);
}

}  // namespace detail

struct Pca2d {
  Matrix projection;                           // (count x 2)
  std::array<double, 2> explained_variance{};  // top-2 covariance eigenvalues
  std::array<std::vector<double>, 2> components;
};

// PCA onto the top-2 principal directions of the sample covariance. Each
// component's sign is fixed by making its largest-magnitude coordinate
// positive, so the output is reproducible across eigensolvers.
inline Pca2d pca_2d(const EmbeddingSet& set) {
  if (set.count() < 2) throw DegenerateSetError("pca_2d: need at least 2 rows");
  const std::size_t count = set.count(), dim = set.dim();
  Matrix centered(count, dim);
  std::vector<double> mean(dim, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto row = set.row(i);
    for (std::size_t c = 0; c < dim; ++c) mean[c] += row[c];
  }
  for (std::size_t c = 0; c < dim; ++c) mean[c] /= static_cast<double>(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto row = set.row(i);
    for (std::size_t c = 0; c < dim; ++c) centered(i, c) = row[c] - mean[c];
  }

  Matrix cov(dim, dim);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t p = 0; p < dim; ++p) {
      const double v = centered(i, p);
      if (v == 0.0) continue;
      for (std::size_t q = 0; q < dim; ++q) cov(p, q) += v * centered(i, q);
    }
  double total_var = 0.0;
  for (std::size_t p = 0; p < dim; ++p) {
    for (std::size_t q = 0; q < dim; ++q) cov(p, q) /= static_cast<double>(count - 1);
    total_var += cov(p, p);
  }
  if (total_var < 1e-30) throw DegenerateSetError("pca_2d: zero-variance set (rank 0)");

  std::vector<double> eigvals;
  Matrix eigvecs;
  detail::jacobi_eigen_symmetric(cov, eigvals, eigvecs);

  Pca2d out;
  out.projection = Matrix(count, 2);
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> v(dim);
    const std::size_t col = dim > 1 ? k : 0;
    for (std::size_t c = 0; c < dim; ++c) v[c] = dim > 1 ? eigvecs(c, col) : eigvecs(c, 0);
    if (dim == 1 && k == 1) std::fill(v.begin(), v.end(), 0.0);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < dim; ++c)
      if (std::abs(v[c]) > std::abs(v[arg])) arg = c;
    if (v[arg] < 0.0)
      for (double& x : v) x = -x;
    out.components[k] = v;
    out.explained_variance[k] = (dim > 1 || k == 0) ? eigvals[col] : 0.0;
    for (std::size_t i = 0; i < count; ++i) out.projection(i, k) = dot(centered.row(i), v);
  }
  return out;
}

inline Matrix project_2d(const EmbeddingSet& set) { return pca_2d(set).projection; }

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

}  // namespace detail

inline void write_confusion_csv(const Matrix& confusion,
                                const std::vector<std::string>& class_names,
                                std::ostream& out) {
  out << "true\\predicted";
  for (const auto& name : class_names) out << ',' << detail::csv_escape(name);
  out << '\n';
  for (std::size_t r = 0; r < confusion.rows(); ++r) {
    out << detail::csv_escape(class_names[r]);
    for (std::size_t c = 0; c < confusion.cols(); ++c)
      out << ',' << static_cast<std::uint64_t>(confusion(r, c));
    out << '\n';
  }
}

inline void write_projection_csv(const Matrix& projection, const EmbeddingSet& set,
                                 std::ostream& out) {
  out << "x,y,label\n";
  out.precision(17);
  for (std::size_t i = 0; i < projection.rows(); ++i)
    out << projection(i, 0) << ',' << projection(i, 1) << ','
        << detail::csv_escape(set.class_name(i)) << '\n';
}

inline nlohmann::ordered_json eer_report_json(const EerResult& r) {
  return {{"eer", r.eer},
          {"threshold", r.threshold},
          {"n_target", r.n_target},
          {"n_nontarget", r.n_nontarget}};
}

// Condition bucket of a manifest entry, e.g. "seen_model+unseen_language".
inline std::string condition_key(const ManifestEntry& e) {
  std::string key;
  if (e.model_seen) key += *e.model_seen ? "seen_model" : "unseen_model";
  if (e.language_seen) {
    if (!key.empty()) key += '+';
    key += *e.language_seen ? "seen_language" : "unseen_language";
  }
  return key.empty() ? "unconditioned" : key;
}

// Gathers the rows whose condition key matches and scores all pairs within
// each bucket. Buckets whose trials are degenerate are skipped.
inline std::map<std::string, EerResult> eer_by_condition(
    const EmbeddingSet& set, const std::vector<std::string>& conditions, bool exact,
    std::size_t bins, const PairScoringOptions& opts = {}) {
  if (conditions.size() != set.count())
    throw ShapeMismatchError("eer_by_condition: condition count != row count");
  std::map<std::string, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < set.count(); ++i) buckets[conditions[i]].push_back(i);

  std::map<std::string, EerResult> out;
  for (const auto& [key, rows] : buckets) {
    if (rows.size() < 2) continue;
    std::vector<float> data;
    std::vector<std::int32_t> labels;
    for (std::size_t i : rows) {
      const auto row = set.row(i);
      data.insert(data.end(), row.begin(), row.end());
      labels.push_back(set.labels()[i]);
    }
    EmbeddingSet sub(rows.size(), set.dim(), std::move(data), std::move(labels),
                     set.class_names());
    try {
      out[key] = exact ? compute_eer_exact(score_all_pairs(sub, opts))
                       : histogram_eer_all_pairs(sub, bins, opts);
    } catch (const DegenerateSetError&) {
      // bucket with no target or no nontarget pairs; nothing to report
    }
  }
  return out;
}

}  // namespace srctrace
