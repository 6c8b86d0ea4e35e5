#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "srctrace/embedding.hpp"
#include "srctrace/errors.hpp"
#include "srctrace/matrix.hpp"
#include "srctrace/rng.hpp"

namespace srctrace {

// Synthetic source-tracing dataset: one Gaussian blob per generator system,
// centroids on a sphere scaled so the mean inter-centroid distance equals
// class_separation. The sphere spans a signal subspace of at most
// kSignalDims coordinates; the remaining coordinates carry class-independent
// nuisance noise at kNuisanceRatio times the cluster spread, so raw cosine
// scoring starts near chance on wide features until a model learns to
// project the nuisance away. unseen_classes extra systems appear only in
// dev.
struct SynthSpec {
  std::size_t n_classes = 24;
  std::size_t dim = 32;
  std::size_t samples_per_class = 40;
  double cluster_spread = 0.5;    // sigma of the isotropic within-class noise
  double class_separation = 2.5;  // mean pairwise centroid distance
  std::size_t unseen_classes = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw InvalidSpecError("SynthSpec: n_classes must be >= 2");
    if (dim < 1) throw InvalidSpecError("SynthSpec: dim must be >= 1");
    if (samples_per_class < 1)
      throw InvalidSpecError("SynthSpec: samples_per_class must be >= 1");
    if (!(cluster_spread >= 0.0)) throw InvalidSpecError("SynthSpec: sigma must be >= 0");
    if (!(class_separation >= 0.0))
      throw InvalidSpecError("SynthSpec: class_separation must be >= 0");
  }
};

struct SynthDataset {
  EmbeddingSet train;
  EmbeddingSet dev;
  std::vector<ManifestEntry> manifest;
};

namespace detail {

inline std::string synth_class_name(std::size_t j) {
  std::string n = std::to_string(j);
  while (n.size() < 3) n.insert(n.begin(), '0');
  return "sys" + n;
}

}  // namespace detail

// Coordinates carrying class structure; the rest are nuisance.
inline constexpr std::size_t kSignalDims = 8;
// Nuisance noise scale as a multiple of cluster_spread. Zero spread still
// collapses every sample onto its centroid.
inline constexpr double kNuisanceRatio = 5.0;

inline SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t total_classes = spec.n_classes + spec.unseen_classes;
  const std::size_t signal_dims = std::min(spec.dim, kSignalDims);
  auto rng = make_rng(spec.seed, /*stream=*/0x73796e);  // "syn"

  // Unit-sphere centroids inside the signal subspace, then one global rescale
  // to pin the mean pairwise distance exactly at class_separation.
  Matrix centroids(total_classes, spec.dim);
  for (std::size_t j = 0; j < total_classes; ++j) {
    double norm = 0.0;
    do {
      for (std::size_t c = 0; c < signal_dims; ++c) centroids(j, c) = gaussian(rng);
      norm = l2_norm(centroids.row(j));
    } while (norm < kZeroNormThreshold);
    for (std::size_t c = 0; c < signal_dims; ++c) centroids(j, c) /= norm;
  }
  double mean_dist = 0.0;
  std::size_t n_pairs = 0;
  for (std::size_t a = 0; a < total_classes; ++a)
    for (std::size_t b = a + 1; b < total_classes; ++b) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < spec.dim; ++c) {
        const double d = centroids(a, c) - centroids(b, c);
        d2 += d * d;
      }
      mean_dist += std::sqrt(d2);
      ++n_pairs;
    }
  mean_dist /= static_cast<double>(n_pairs);
  const double radius_scale = mean_dist > 0.0 ? spec.class_separation / mean_dist : 0.0;
  for (double& v : centroids.data()) v *= radius_scale;

  std::vector<std::string> all_names;
  for (std::size_t j = 0; j < total_classes; ++j)
    all_names.push_back(detail::synth_class_name(j));
  std::vector<std::string> train_names(all_names.begin(), all_names.begin() + spec.n_classes);

  SynthDataset out;
  const double nuisance_spread = kNuisanceRatio * spec.cluster_spread;
  auto draw_split = [&](std::size_t classes, Split split, const char* id_prefix,
                        const std::vector<std::string>& names) {
    Matrix data(classes * spec.samples_per_class, spec.dim);
    std::vector<std::int32_t> labels(classes * spec.samples_per_class);
    std::size_t row = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      for (std::size_t i = 0; i < spec.samples_per_class; ++i, ++row) {
        for (std::size_t c = 0; c < spec.dim; ++c)
          data(row, c) = centroids(j, c) +
                         (c < signal_dims ? spec.cluster_spread : nuisance_spread) *
                             gaussian(rng);
        labels[row] = static_cast<std::int32_t>(j);
        ManifestEntry e;
        std::string idx = std::to_string(row);
        while (idx.size() < 6) idx.insert(idx.begin(), '0');
        e.sample_id = std::string(id_prefix) + "-" + idx;
        e.label = names[j];
        e.model_seen = j < spec.n_classes;
        e.split = split;
        out.manifest.push_back(std::move(e));
      }
    }
    return EmbeddingSet(data, std::move(labels), names);
  };

  out.train = draw_split(spec.n_classes, Split::kTrain, "train", train_names);
  out.dev = draw_split(total_classes, Split::kDev, "dev", all_names);
  return out;
}

}  // namespace srctrace
