#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "srctrace/batching.hpp"
#include "srctrace/embedding.hpp"
#include "srctrace/errors.hpp"
#include "srctrace/eval.hpp"
#include "srctrace/losses.hpp"
#include "srctrace/network.hpp"

namespace srctrace {

enum class LossKind { kSoftmax, kAmSoftmax, kAamSoftmax, kGe2e, kAngularProto };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kSoftmax: return "softmax";
    case LossKind::kAmSoftmax: return "amsoftmax";
    case LossKind::kAamSoftmax: return "aamsoftmax";
    case LossKind::kGe2e: return "ge2e";
    default: return "angularproto";
  }
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "softmax") return LossKind::kSoftmax;
  if (s == "amsoftmax") return LossKind::kAmSoftmax;
  if (s == "aamsoftmax") return LossKind::kAamSoftmax;
  if (s == "ge2e") return LossKind::kGe2e;
  if (s == "angularproto") return LossKind::kAngularProto;
  throw InvalidSpecError("unknown loss \"" + s + "\"");
}

inline bool is_metric_loss(LossKind k) {
  return k == LossKind::kGe2e || k == LossKind::kAngularProto;
}

struct TrainConfig {
  std::size_t epochs = 100;
  double peak_lr = 1e-4;
  std::size_t warmup_epochs = 10;
  double momentum = 0.9;
  std::size_t eval_interval = 25;  // epochs between dev evaluations
  LossKind loss = LossKind::kGe2e;
  MarginConfig margin;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
};

// Linear warm-up to peak_lr over warmup_epochs, then cosine annealing to 0.
inline double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) throw OutOfRangeError("lr_at_epoch: epoch out of range");
  if (!(cfg.warmup_epochs < cfg.epochs))
    throw InvalidSpecError("lr_at_epoch: warmup_epochs must be < epochs");
  if (epoch < cfg.warmup_epochs)
    return cfg.peak_lr * static_cast<double>(epoch + 1) /
           static_cast<double>(cfg.warmup_epochs);
  const double progress = static_cast<double>(epoch - cfg.warmup_epochs) /
                          static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// One SGD + momentum update: v <- momentum*v + g; p <- p - lr*v.
// velocity is zero-initialized on first use.
inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr,
                     double momentum, std::vector<double>& velocity) {
  if (params.size() != grads.size())
    throw ShapeMismatchError("sgd_step: parameter/gradient size mismatch");
  if (velocity.empty()) velocity.assign(params.size(), 0.0);
  if (velocity.size() != params.size())
    throw ShapeMismatchError("sgd_step: velocity size mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) throw NonFiniteError("sgd_step: non-finite gradient");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  std::optional<double> dev_eer;
};

// History line format: {"epoch":..., "mean_loss":..., "lr":..., "dev_eer":...}
inline void write_history(const std::vector<EpochStats>& history, std::ostream& out) {
  for (const auto& e : history) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["mean_loss"] = e.mean_loss;
    j["lr"] = e.lr;
    if (e.dev_eer) j["dev_eer"] = *e.dev_eer;
    out << j.dump() << '\n';
  }
}

struct TrainResult {
  MlpModel model;  // best dev-EER checkpoint (final weights if never evaluated)
  MlpModel final_model;
  std::vector<EpochStats> history;
  double best_dev_eer = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  HeadParams head;      // classification losses
  CosineParams cosine;  // metric losses
};

namespace detail {

inline Matrix gather_rows(const EmbeddingSet& set, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), set.dim());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto row = set.row(indices[r]);
    for (std::size_t c = 0; c < set.dim(); ++c) out(r, c) = row[c];
  }
  return out;
}

struct SgdSlots {
  std::vector<std::vector<double>> model_w, model_b;
  std::vector<double> head_w, head_b;
  std::vector<double> cosine;  // [w, b]
};

}  // namespace detail

// Full training loop: sampler -> forward -> loss -> backward -> SGD step,
// with dev EER tracked every eval_interval epochs (and at the final epoch)
// to pick the best checkpoint.
inline TrainResult train(MlpModel model, const EmbeddingSet& dataset, const EmbeddingSet& dev_set,
                         const TrainConfig& cfg) {
  if (is_metric_loss(cfg.loss) && cfg.sampler.mode != SamplerMode::kBalanced)
    throw ConfigConflictError("train: " + to_string(cfg.loss) + " requires the balanced sampler");
  if (dataset.dim() != model.input_dim() || dev_set.dim() != model.input_dim())
    throw ShapeMismatchError("train: dataset width does not match model input");

  TrainResult result;
  result.cosine = CosineParams{};  // w=10, b=-5
  const std::size_t n_classes = dataset.num_classes();
  if (!is_metric_loss(cfg.loss)) {
    // classification head, same init family as the backbone
    result.head.weights = Matrix(model.output_dim, n_classes);
    auto rng = make_rng(cfg.seed, /*stream=*/0x68656164);  // "head"
    const double bound = std::sqrt(2.0 / static_cast<double>(model.output_dim));
    for (double& v : result.head.weights.data()) v = uniform_in(rng, -bound, bound);
    result.head.bias.assign(n_classes, 0.0);
  }

  detail::SgdSlots vel;
  vel.model_w.resize(model.layers.size());
  vel.model_b.resize(model.layers.size());

  const PairScoringOptions score_opts{};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;

    auto step_model = [&](const ForwardCache& cache, const Matrix& grad_embeddings) {
      const ModelGrads grads = backward(model, cache, grad_embeddings);
      for (std::size_t k = 0; k < model.layers.size(); ++k) {
        sgd_step(std::span<double>(model.layers[k].weight.data()),
                 std::span<const double>(grads.layers[k].weight.data()), lr, cfg.momentum,
                 vel.model_w[k]);
        sgd_step(std::span<double>(model.layers[k].bias),
                 std::span<const double>(grads.layers[k].bias), lr, cfg.momentum,
                 vel.model_b[k]);
      }
      ++model.revision;
    };

    if (cfg.sampler.mode == SamplerMode::kBalanced) {
      const auto batches = balanced_batches(dataset.labels(), cfg.sampler, epoch);
      for (const auto& layout : batches) {
        const Matrix features = detail::gather_rows(dataset, layout.indices);
        ForwardResult fwd = forward(model, features);
        LossOutput out;
        if (is_metric_loss(cfg.loss)) {
          BalancedBatch batch{std::move(fwd.embeddings), layout.classes.size(),
                              cfg.sampler.per_class};
          out = cfg.loss == LossKind::kGe2e ? ge2e_loss(batch, result.cosine)
                                            : angular_proto_loss(batch, result.cosine);
        } else {
          std::vector<std::int32_t> y;
          y.reserve(layout.indices.size());
          for (std::size_t idx : layout.indices) y.push_back(dataset.labels()[idx]);
          out = cfg.loss == LossKind::kSoftmax
                    ? softmax_loss(fwd.embeddings, y, result.head)
                    : (cfg.loss == LossKind::kAmSoftmax
                           ? am_softmax_loss(fwd.embeddings, y, result.head, cfg.margin)
                           : aam_softmax_loss(fwd.embeddings, y, result.head, cfg.margin));
        }
        if (!std::isfinite(out.loss))
          throw NonFiniteError("train: non-finite loss at epoch " + std::to_string(epoch));
        loss_sum += out.loss;
        ++n_batches;
        step_model(fwd.cache, out.grad_embeddings);
        if (is_metric_loss(cfg.loss)) {
          double params[2] = {result.cosine.scale, result.cosine.offset};
          const double grads[2] = {out.grad_scale, out.grad_offset};
          sgd_step(params, grads, lr, cfg.momentum, vel.cosine);
          result.cosine.scale = std::max(params[0], 1e-6);  // keep w > 0
          result.cosine.offset = params[1];
        } else {
          sgd_step(std::span<double>(result.head.weights.data()),
                   std::span<const double>(out.grad_weights.data()), lr, cfg.momentum,
                   vel.head_w);
          sgd_step(std::span<double>(result.head.bias),
                   std::span<const double>(out.grad_bias), lr, cfg.momentum, vel.head_b);
        }
      }
    } else {
      const auto batches = random_batches(dataset.labels(), cfg.sampler, epoch);
      for (const auto& indices : batches) {
        const Matrix features = detail::gather_rows(dataset, indices);
        ForwardResult fwd = forward(model, features);
        std::vector<std::int32_t> y;
        y.reserve(indices.size());
        for (std::size_t idx : indices) y.push_back(dataset.labels()[idx]);
        LossOutput out;
        switch (cfg.loss) {
          case LossKind::kSoftmax: out = softmax_loss(fwd.embeddings, y, result.head); break;
          case LossKind::kAmSoftmax:
            out = am_softmax_loss(fwd.embeddings, y, result.head, cfg.margin);
            break;
          default:
            out = aam_softmax_loss(fwd.embeddings, y, result.head, cfg.margin);
        }
        if (!std::isfinite(out.loss))
          throw NonFiniteError("train: non-finite loss at epoch " + std::to_string(epoch));
        loss_sum += out.loss;
        ++n_batches;
        step_model(fwd.cache, out.grad_embeddings);
        sgd_step(std::span<double>(result.head.weights.data()),
                 std::span<const double>(out.grad_weights.data()), lr, cfg.momentum, vel.head_w);
        sgd_step(std::span<double>(result.head.bias), std::span<const double>(out.grad_bias),
                 lr, cfg.momentum, vel.head_b);
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
    stats.lr = lr;
    const bool eval_now = cfg.eval_interval > 0 && ((epoch + 1) % cfg.eval_interval == 0 ||
                                                    epoch + 1 == cfg.epochs);
    if (eval_now) {
      const ForwardResult dev_fwd = forward(model, dev_set.to_matrix());
      const EmbeddingSet dev_emb(dev_fwd.embeddings, dev_set.labels(), dev_set.class_names());
      const EerResult eer = compute_eer_exact(score_all_pairs(dev_emb, score_opts));
      stats.dev_eer = eer.eer;
      // strictly-better comparison keeps the earliest best epoch on ties
      if (eer.eer < result.best_dev_eer) {
        result.best_dev_eer = eer.eer;
        result.best_epoch = epoch;
        result.model = model;
      }
    }
    result.history.push_back(std::move(stats));
  }

  result.final_model = model;
  if (result.model.layers.empty()) result.model = model;  // never evaluated
  return result;
}

}  // namespace srctrace
