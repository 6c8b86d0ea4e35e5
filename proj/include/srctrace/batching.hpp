#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "srctrace/errors.hpp"
#include "srctrace/rng.hpp"

namespace srctrace {

enum class SamplerMode { kRandom, kBalanced };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::kBalanced;
  std::size_t batch_size = 128;         // random mode
  std::size_t n_classes_per_batch = 4;  // balanced mode: N
  std::size_t per_class = 3;            // balanced mode: kappa
  std::uint64_t seed = 0;
  bool drop_last = true;
};

// One seeded shuffle of all indices, chunked. (seed, epoch) fully determines
// the sequence.
inline std::vector<std::vector<std::size_t>> random_batches(
    std::span<const std::int32_t> labels, const SamplerConfig& cfg, std::uint64_t epoch = 0) {
  if (cfg.mode != SamplerMode::kRandom)
    throw InvalidSpecError("random_batches: sampler mode is not random");
  if (cfg.batch_size < 1) throw InvalidSpecError("random_batches: batch_size must be >= 1");
  if (labels.empty()) throw EmptyDatasetError("random_batches: empty dataset");

  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto rng = make_rng(cfg.seed, epoch);
  shuffle_in_place(order, rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(start + cfg.batch_size, order.size());
    if (cfg.drop_last && end - start < cfg.batch_size) break;
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

// Index layout of one balanced batch: n_classes_per_batch distinct classes,
// per_class indices each, grouped contiguously by class.
struct BalancedIndexBatch {
  std::vector<std::int32_t> classes;
  std::vector<std::size_t> indices;
};

// Class-balanced episodic batches. Classes cycle: a shuffled class list is
// consumed N at a time and reshuffled when exhausted, so every class appears
// once before any repeats. Classes smaller than per_class are topped up with
// replacement.
inline std::vector<BalancedIndexBatch> balanced_batches(
    std::span<const std::int32_t> labels, const SamplerConfig& cfg, std::uint64_t epoch = 0) {
  if (cfg.mode != SamplerMode::kBalanced)
    throw InvalidSpecError("balanced_batches: sampler mode is not balanced");
  if (cfg.n_classes_per_batch < 1 || cfg.per_class < 1)
    throw InvalidSpecError("balanced_batches: N and per-class count must be >= 1");
  if (labels.empty()) throw EmptyDatasetError("balanced_batches: empty dataset");

  // Class id -> sample positions, in ascending class id for determinism.
  std::map<std::int32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < cfg.n_classes_per_batch)
    throw TooFewClassesError("balanced_batches: dataset has " +
                             std::to_string(by_class.size()) + " classes, need " +
                             std::to_string(cfg.n_classes_per_batch));

  std::vector<std::int32_t> class_ids;
  class_ids.reserve(by_class.size());
  for (const auto& [cls, _] : by_class) class_ids.push_back(cls);

  auto rng = make_rng(cfg.seed, epoch);
  const std::size_t rows_per_batch = cfg.n_classes_per_batch * cfg.per_class;
  const std::size_t n_batches = std::max<std::size_t>(1, labels.size() / rows_per_batch);

  // Remaining class entries of the current coverage cycle; every class enters
  // each cycle exactly once and leaves only by being consumed, so no class
  // repeats before the whole list has been used up.
  std::vector<std::int32_t> cycle = class_ids;
  shuffle_in_place(cycle, rng);

  std::vector<BalancedIndexBatch> batches;
  batches.reserve(n_batches);
  for (std::size_t bi = 0; bi < n_batches; ++bi) {
    BalancedIndexBatch batch;
    while (batch.classes.size() < cfg.n_classes_per_batch) {
      if (cycle.empty()) {
        cycle = class_ids;
        shuffle_in_place(cycle, rng);
      }
      // A batch straddling a cycle boundary may see classes it already holds;
      // take the first entry that keeps the batch distinct and leave the
      // duplicates queued for later batches of the new cycle.
      auto it = std::find_if(cycle.begin(), cycle.end(), [&](std::int32_t c) {
        return std::find(batch.classes.begin(), batch.classes.end(), c) == batch.classes.end();
      });
      if (it == cycle.end()) {
        // cannot happen while n_classes_per_batch <= number of classes
        throw TooFewClassesError("balanced_batches: exhausted class cycle");
      }
      batch.classes.push_back(*it);
      cycle.erase(it);
    }
    for (std::int32_t cls : batch.classes) {
      std::vector<std::size_t> pool = by_class[cls];
      shuffle_in_place(pool, rng);
      for (std::size_t i = 0; i < cfg.per_class; ++i) {
        if (i < pool.size())
          batch.indices.push_back(pool[i]);
        else
          batch.indices.push_back(pool[uniform_below(rng, pool.size())]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace srctrace
