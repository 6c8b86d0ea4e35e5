#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "srctrace/embedding.hpp"
#include "srctrace/errors.hpp"
#include "srctrace/matrix.hpp"
#include "srctrace/rng.hpp"

namespace srctrace {

enum class Activation { kRelu, kTanh };

inline std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw InvalidSpecError("unknown activation \"" + s + "\"");
}

// Small feed-forward embedding extractor: affine + activation per hidden
// layer, affine only at the output, optional L2 normalization of the output
// rows. Stands in for the heavyweight audio backbones; the losses are
// backbone-agnostic.
struct MlpModel {
  struct Layer {
    Matrix weight;             // (in x out); y = x W + b on row batches
    std::vector<double> bias;  // (out)
  };
  std::vector<Layer> layers;
  Activation activation = Activation::kRelu;
  std::size_t output_dim = 0;
  bool normalize_output = false;
  // Bumped whenever parameters change; forward caches record it so a stale
  // cache cannot silently feed backward.
  std::uint64_t revision = 0;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.rows(); }
};

// He-style init: uniform in +-sqrt(2/fan_in), zero biases. widths lists every
// layer width including input, so {8, 8} is a single 8x8 layer.
inline MlpModel init_model(std::span<const std::size_t> widths, std::uint64_t seed,
                           Activation activation = Activation::kRelu,
                           bool normalize_output = false) {
  if (widths.size() < 2) throw InvalidSpecError("init_model: need at least one layer");
  for (std::size_t w : widths)
    if (w == 0) throw InvalidSpecError("init_model: zero layer width");

  MlpModel model;
  model.activation = activation;
  model.normalize_output = normalize_output;
  model.output_dim = widths.back();
  auto rng = make_rng(seed, /*stream=*/0x6d6c70);  // "mlp"
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    MlpModel::Layer layer;
    layer.weight = Matrix(widths[k], widths[k + 1]);
    const double bound = std::sqrt(2.0 / static_cast<double>(widths[k]));
    for (double& v : layer.weight.data()) v = uniform_in(rng, -bound, bound);
    layer.bias.assign(widths[k + 1], 0.0);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

// Everything backward needs: the input of every layer, the pre-normalization
// output and its row norms.
struct ForwardCache {
  std::vector<Matrix> layer_inputs;  // layer_inputs[k] feeds layers[k]
  Matrix prenorm;                    // output before L2 normalization
  std::vector<double> norms;         // row norms of prenorm (normalize_output only)
  std::uint64_t model_revision = 0;
};

struct ForwardResult {
  Matrix embeddings;
  ForwardCache cache;
};

inline ForwardResult forward(const MlpModel& model, const Matrix& inputs) {
  if (model.layers.empty()) throw InvalidSpecError("forward: model has no layers");
  if (inputs.cols() != model.input_dim())
    throw ShapeMismatchError("forward: input width " + std::to_string(inputs.cols()) +
                             " != first layer width " + std::to_string(model.input_dim()));
  ForwardResult res;
  res.cache.model_revision = model.revision;
  Matrix a = inputs;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& layer = model.layers[k];
    res.cache.layer_inputs.push_back(a);
    Matrix z = matmul(a, layer.weight);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += layer.bias[j];
    if (k + 1 < model.layers.size()) {
      if (model.activation == Activation::kRelu) {
        for (double& v : z.data()) v = v > 0.0 ? v : 0.0;
      } else {
        for (double& v : z.data()) v = std::tanh(v);
      }
    }
    a = std::move(z);
  }
  res.cache.prenorm = a;
  if (model.normalize_output) {
    res.cache.norms.resize(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const double n = l2_norm(a.row(i));
      if (n < kZeroNormThreshold) throw ZeroNormError("forward: zero-norm output row");
      res.cache.norms[i] = n;
      for (std::size_t c = 0; c < a.cols(); ++c) a(i, c) /= n;
    }
  }
  res.embeddings = std::move(a);
  return res;
}

struct ModelGrads {
  std::vector<MlpModel::Layer> layers;  // same shapes as the model
};

// Reverse-mode gradients for all weights and biases given dLoss/dEmbeddings.
inline ModelGrads backward(const MlpModel& model, const ForwardCache& cache,
                           const Matrix& grad_embeddings) {
  if (cache.model_revision != model.revision)
    throw StaleCacheError("backward: cache from model revision " +
                          std::to_string(cache.model_revision) + ", model is at " +
                          std::to_string(model.revision));
  if (cache.layer_inputs.size() != model.layers.size())
    throw StaleCacheError("backward: cache layer count mismatch");
  if (!grad_embeddings.same_shape(cache.prenorm))
    throw ShapeMismatchError("backward: upstream gradient shape mismatch");

  Matrix g = grad_embeddings;
  if (model.normalize_output) {
    // d(x/||x||) Jacobian: (g - (g . xhat) xhat) / ||x||
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double n = cache.norms[i];
      const auto pre = cache.prenorm.row(i);
      double gdotx = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) gdotx += g(i, c) * pre[c] / n;
      for (std::size_t c = 0; c < g.cols(); ++c)
        g(i, c) = (g(i, c) - gdotx * pre[c] / n) / n;
    }
  }

  ModelGrads grads;
  grads.layers.resize(model.layers.size());
  for (std::size_t k = model.layers.size(); k-- > 0;) {
    const Matrix& in = cache.layer_inputs[k];
    grads.layers[k].weight = matmul_at_b(in, g);
    grads.layers[k].bias.assign(model.layers[k].bias.size(), 0.0);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) grads.layers[k].bias[j] += g(i, j);
    if (k == 0) break;
    Matrix gin = matmul_a_bt(g, model.layers[k].weight);
    // through the activation of layer k-1; its output is cached as our input
    if (model.activation == Activation::kRelu) {
      for (std::size_t i = 0; i < gin.size(); ++i)
        if (in.data()[i] <= 0.0) gin.data()[i] = 0.0;
    } else {
      for (std::size_t i = 0; i < gin.size(); ++i)
        gin.data()[i] *= 1.0 - in.data()[i] * in.data()[i];
    }
    g = std::move(gin);
  }
  return grads;
}

// Checkpoint layout: u32 LE header length, JSON header (tensor names/shapes
// plus any run configuration), then one embedding-format block per tensor in
// header order. Biases are stored as 1 x n tensors.
inline void save_checkpoint(const MlpModel& model, const std::string& path,
                            const nlohmann::ordered_json& run_config = {}) {
  nlohmann::ordered_json header;
  header["format"] = "srctrace-checkpoint";
  header["activation"] = to_string(model.activation);
  header["normalize_output"] = model.normalize_output;
  header["output_dim"] = model.output_dim;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::vector<Matrix> mats;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& layer = model.layers[k];
    tensors.push_back({{"name", "layers." + std::to_string(k) + ".weight"},
                       {"rows", layer.weight.rows()},
                       {"cols", layer.weight.cols()}});
    mats.push_back(layer.weight);
    Matrix b(1, layer.bias.size());
    for (std::size_t j = 0; j < layer.bias.size(); ++j) b(0, j) = layer.bias[j];
    tensors.push_back({{"name", "layers." + std::to_string(k) + ".bias"},
                       {"rows", 1},
                       {"cols", layer.bias.size()}});
    mats.push_back(std::move(b));
  }
  header["tensors"] = std::move(tensors);
  if (!run_config.is_null() && !run_config.empty()) header["run_config"] = run_config;

  const std::string header_str = header.dump();
  std::string blob;
  detail::put_u32_le(blob, static_cast<std::uint32_t>(header_str.size()));
  blob += header_str;
  for (const Matrix& mat : mats) {
    std::vector<float> f32(mat.size());
    for (std::size_t i = 0; i < mat.size(); ++i) f32[i] = static_cast<float>(mat.data()[i]);
    EmbeddingSet tensor(mat.rows(), mat.cols(), std::move(f32),
                        std::vector<std::int32_t>(mat.rows(), 0), {"tensor"});
    blob += encode_embeddings(tensor);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw IoError("save_checkpoint: short write to " + path);
}

inline MlpModel load_checkpoint(const std::string& path,
                                nlohmann::ordered_json* run_config = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (blob.size() < 4) throw ParseError("load_checkpoint: truncated file " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t header_len = detail::get_u32_le(p);
  if (blob.size() < 4ull + header_len) throw ParseError("load_checkpoint: truncated header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(blob.substr(4, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("load_checkpoint: bad header: ") + e.what());
  }
  MlpModel model;
  model.activation = activation_from_string(header.at("activation").get<std::string>());
  model.normalize_output = header.at("normalize_output").get<bool>();
  model.output_dim = header.at("output_dim").get<std::size_t>();
  if (run_config) *run_config = header.value("run_config", nlohmann::ordered_json{});

  std::size_t offset = 4 + header_len;
  std::vector<Matrix> tensors;
  for (const auto& t : header.at("tensors")) {
    const std::size_t rows = t.at("rows").get<std::size_t>();
    const std::size_t cols = t.at("cols").get<std::size_t>();
    const std::size_t block = 13 + 4 * rows * cols;
    if (blob.size() < offset + block) throw ParseError("load_checkpoint: truncated tensor block");
    Matrix m(rows, cols);
    const unsigned char* q = p + offset;
    if (std::memcmp(q, kEmbeddingMagic, 4) != 0)
      throw ParseError("load_checkpoint: bad tensor magic");
    const std::uint32_t tr = detail::get_u32_le(q + 5), tc = detail::get_u32_le(q + 9);
    if (tr != rows || tc != cols) throw ParseError("load_checkpoint: tensor shape mismatch");
    for (std::size_t i = 0; i < rows * cols; ++i)
      m.data()[i] = static_cast<double>(detail::get_f32_le(q + 13 + 4 * i));
    tensors.push_back(std::move(m));
    offset += block;
  }
  if (tensors.size() % 2 != 0) throw ParseError("load_checkpoint: odd tensor count");
  for (std::size_t k = 0; k < tensors.size(); k += 2) {
    MlpModel::Layer layer;
    layer.weight = std::move(tensors[k]);
    layer.bias.resize(tensors[k + 1].cols());
    for (std::size_t j = 0; j < layer.bias.size(); ++j) layer.bias[j] = tensors[k + 1](0, j);
    model.layers.push_back(std::move(layer));
  }
  if (model.layers.empty()) throw ParseError("load_checkpoint: no layers");
  return model;
}

}  // namespace srctrace
