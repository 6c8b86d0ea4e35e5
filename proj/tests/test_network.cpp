#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "srctrace/losses.hpp"
#include "srctrace/network.hpp"
#include "srctrace/rng.hpp"

using namespace srctrace;

namespace {

// Naive per-element forward re-derivation, separate loop structure from the
// library path.
Matrix forward_oracle(const MlpModel& model, const Matrix& inputs) {
  Matrix a = inputs;
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& layer = model.layers[k];
    Matrix z(a.rows(), layer.weight.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < layer.weight.cols(); ++j) {
        double s = layer.bias[j];
        for (std::size_t c = 0; c < a.cols(); ++c) s += a(i, c) * layer.weight(c, j);
        z(i, j) = s;
      }
    if (k + 1 < model.layers.size()) {
      for (double& v : z.data())
        v = model.activation == Activation::kRelu ? (v > 0.0 ? v : 0.0) : std::tanh(v);
    }
    a = std::move(z);
  }
  if (model.normalize_output) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double n = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) n += a(i, c) * a(i, c);
      n = std::sqrt(n);
      for (std::size_t c = 0; c < a.cols(); ++c) a(i, c) /= n;
    }
  }
  return a;
}

std::vector<double> flatten_grads(const ModelGrads& grads) {
  std::vector<double> flat;
  for (const auto& layer : grads.layers) {
    flat.insert(flat.end(), layer.weight.data().begin(), layer.weight.data().end());
    flat.insert(flat.end(), layer.bias.begin(), layer.bias.end());
  }
  return flat;
}

}  // namespace

TEST(InitModel, ShapesAndZeroBias) {
  const std::size_t widths[] = {8, 8};
  const MlpModel model = init_model(widths, 1);
  ASSERT_EQ(model.layers.size(), 1u);
  EXPECT_EQ(model.layers[0].weight.rows(), 8u);
  EXPECT_EQ(model.layers[0].weight.cols(), 8u);
  for (double b : model.layers[0].bias) EXPECT_EQ(b, 0.0);
  EXPECT_EQ(model.output_dim, 8u);
}

TEST(InitModel, SameSeedBitIdentical) {
  const std::size_t widths[] = {6, 12, 4};
  const MlpModel a = init_model(widths, 99, Activation::kTanh, true);
  const MlpModel b = init_model(widths, 99, Activation::kTanh, true);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    EXPECT_TRUE(a.layers[k].weight == b.layers[k].weight);
    EXPECT_EQ(a.layers[k].bias, b.layers[k].bias);
  }
  const MlpModel c = init_model(widths, 100);
  EXPECT_FALSE(a.layers[0].weight == c.layers[0].weight);
}

TEST(InitModel, WeightsWithinHeBound) {
  const std::size_t widths[] = {32, 16};
  const MlpModel model = init_model(widths, 3);
  const double bound = std::sqrt(2.0 / 32.0);
  for (double w : model.layers[0].weight.data()) {
    EXPECT_LE(w, bound);
    EXPECT_GE(w, -bound);
  }
}

TEST(InitModel, EmptySpecRejected) {
  EXPECT_THROW(init_model(std::vector<std::size_t>{}, 0), InvalidSpecError);
  EXPECT_THROW(init_model(std::vector<std::size_t>{8}, 0), InvalidSpecError);
  EXPECT_THROW(init_model(std::vector<std::size_t>{8, 0}, 0), InvalidSpecError);
}

TEST(Forward, IdentityLayerPassesThrough) {
  MlpModel model;
  model.layers.push_back({Matrix(3, 3), std::vector<double>(3, 0.0)});
  for (std::size_t i = 0; i < 3; ++i) model.layers[0].weight(i, i) = 1.0;
  model.output_dim = 3;
  const Matrix x = Matrix::from_rows({{1.0, -2.0, 0.5}, {0.0, 3.0, -1.0}});
  const ForwardResult res = forward(model, x);
  EXPECT_TRUE(res.embeddings == x);
}

TEST(Forward, ZeroWeightsGiveZeroThenZeroNorm) {
  MlpModel model;
  model.layers.push_back({Matrix(3, 2), std::vector<double>(2, 0.0)});
  model.output_dim = 2;
  const Matrix x = Matrix::from_rows({{1.0, 2.0, 3.0}});
  const ForwardResult res = forward(model, x);
  EXPECT_EQ(res.embeddings(0, 0), 0.0);
  EXPECT_EQ(res.embeddings(0, 1), 0.0);
  model.normalize_output = true;
  EXPECT_THROW(forward(model, x), ZeroNormError);
}

TEST(Forward, MatchesNaiveOracle) {
  auto rng = make_rng(31);
  for (const bool normalize : {false, true}) {
    for (const auto act : {Activation::kRelu, Activation::kTanh}) {
      const std::size_t widths[] = {5, 7, 4};
      MlpModel model = init_model(widths, rng(), act, normalize);
      const Matrix x = oracles::random_matrix(rng, 6, 5, -2.0, 2.0);
      const Matrix got = forward(model, x).embeddings;
      const Matrix want = forward_oracle(model, x);
      ASSERT_TRUE(got.same_shape(want));
      for (std::size_t i = 0; i < got.size(); ++i)
        EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
    }
  }
}

TEST(Forward, DeterministicAcrossCalls) {
  const std::size_t widths[] = {4, 8, 3};
  const MlpModel model = init_model(widths, 5, Activation::kRelu, true);
  auto rng = make_rng(32);
  const Matrix x = oracles::random_matrix(rng, 5, 4, -1.0, 1.0);
  const Matrix a = forward(model, x).embeddings;
  const Matrix b = forward(model, x).embeddings;
  EXPECT_TRUE(a == b);
}

TEST(Forward, ShapeMismatchRejected) {
  const std::size_t widths[] = {4, 3};
  const MlpModel model = init_model(widths, 0);
  EXPECT_THROW(forward(model, Matrix(2, 5)), ShapeMismatchError);
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  const std::size_t widths[] = {4, 6, 3};
  const MlpModel model = init_model(widths, 8, Activation::kTanh, false);
  auto rng = make_rng(33);
  const Matrix x = oracles::random_matrix(rng, 3, 4, -1.0, 1.0);
  const ForwardResult res = forward(model, x);
  const ModelGrads grads = backward(model, res.cache, Matrix(3, 3));
  for (const auto& layer : grads.layers) {
    for (double g : layer.weight.data()) EXPECT_EQ(g, 0.0);
    for (double g : layer.bias) EXPECT_EQ(g, 0.0);
  }
}

TEST(Backward, LinearModelClosedForm) {
  // no activation in a 1-layer model; loss = sum of outputs gives
  // dL/dW = column-replicated sums of inputs, dL/db = batch size
  MlpModel model;
  model.layers.push_back({Matrix(3, 2), std::vector<double>(2, 0.0)});
  auto rng = make_rng(34);
  model.layers[0].weight = oracles::random_matrix(rng, 3, 2, -1.0, 1.0);
  model.output_dim = 2;
  const Matrix x = oracles::random_matrix(rng, 4, 3, -1.0, 1.0);
  const ForwardResult res = forward(model, x);
  const ModelGrads grads = backward(model, res.cache, Matrix(4, 2, 1.0));
  for (std::size_t c = 0; c < 3; ++c) {
    double col_sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) col_sum += x(i, c);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(grads.layers[0].weight(c, j), col_sum, 1e-12);
  }
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(grads.layers[0].bias[j], 4.0, 1e-12);
}

TEST(Backward, MatchesFiniteDifferencesSeed3) {
  const std::size_t widths[] = {4, 5, 3};
  MlpModel model = init_model(widths, 3, Activation::kTanh, false);
  auto rng = make_rng(3);
  const Matrix x = oracles::random_matrix(rng, 4, 4, -1.0, 1.0);
  // scalar objective: weighted sum of embeddings, fixed weights
  Matrix upstream(4, 3);
  for (std::size_t i = 0; i < upstream.size(); ++i)
    upstream.data()[i] = 0.1 * static_cast<double>(i + 1);
  auto objective = [&] {
    const Matrix e = forward(model, x).embeddings;
    double s = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) s += upstream.data()[i] * e.data()[i];
    return s;
  };
  const ForwardResult res = forward(model, x);
  const ModelGrads grads = backward(model, res.cache, upstream);
  const std::vector<double> analytic = flatten_grads(grads);
  std::vector<double> fd;
  for (auto& layer : model.layers) {
    const auto fdw = oracles::fd_gradient(layer.weight.data(), objective);
    fd.insert(fd.end(), fdw.begin(), fdw.end());
    const auto fdb = oracles::fd_gradient(layer.bias, objective);
    fd.insert(fd.end(), fdb.begin(), fdb.end());
  }
  EXPECT_TRUE(oracles::grads_close(analytic, fd));
}

TEST(Backward, NormalizationJacobianMatchesFiniteDifferences) {
  const std::size_t widths[] = {4, 6, 3};
  MlpModel model = init_model(widths, 12, Activation::kTanh, true);
  auto rng = make_rng(35);
  const Matrix x = oracles::random_matrix(rng, 3, 4, -1.0, 1.0);
  Matrix upstream = oracles::random_matrix(rng, 3, 3, -1.0, 1.0);
  auto objective = [&] {
    const Matrix e = forward(model, x).embeddings;
    double s = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) s += upstream.data()[i] * e.data()[i];
    return s;
  };
  const ForwardResult res = forward(model, x);
  const ModelGrads grads = backward(model, res.cache, upstream);
  const std::vector<double> analytic = flatten_grads(grads);
  std::vector<double> fd;
  for (auto& layer : model.layers) {
    const auto fdw = oracles::fd_gradient(layer.weight.data(), objective);
    fd.insert(fd.end(), fdw.begin(), fdw.end());
    const auto fdb = oracles::fd_gradient(layer.bias, objective);
    fd.insert(fd.end(), fdb.begin(), fdb.end());
  }
  EXPECT_TRUE(oracles::grads_close(analytic, fd));
}

// composite network -> loss gradient checks, one per objective
TEST(Backward, EndToEndThroughEveryLoss) {
  const std::size_t n = 3, m = 2, dim = 4, c = 3;
  const std::size_t widths[] = {dim, 6, c};
  auto rng = make_rng(36);
  const Matrix features = oracles::random_matrix(rng, n * m, dim, -1.0, 1.0);
  std::vector<std::int32_t> labels(n * m);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) labels[j * m + i] = static_cast<std::int32_t>(j);
  HeadParams head{oracles::random_matrix(rng, c, n, -1.0, 1.0), {0.1, -0.2, 0.3}};
  const MarginConfig margin{0.3, 30.0};
  const CosineParams cosine{10.0, -5.0};

  for (int which = 0; which < 5; ++which) {
    MlpModel model = init_model(widths, 40 + which, Activation::kTanh, which >= 3);
    auto loss_of = [&](const Matrix& emb) -> LossOutput {
      switch (which) {
        case 0: return softmax_loss(emb, labels, head);
        case 1: return am_softmax_loss(emb, labels, head, margin);
        case 2: return aam_softmax_loss(emb, labels, head, margin);
        case 3: return ge2e_loss(BalancedBatch{emb, n, m}, cosine);
        default: return angular_proto_loss(BalancedBatch{emb, n, m}, cosine);
      }
    };
    auto objective = [&] { return loss_of(forward(model, features).embeddings).loss; };
    const ForwardResult res = forward(model, features);
    const LossOutput lo = loss_of(res.embeddings);
    const ModelGrads grads = backward(model, res.cache, lo.grad_embeddings);
    const std::vector<double> analytic = flatten_grads(grads);
    // h = 1e-5 here: the s=30 margin losses through tanh layers carry enough
    // curvature that 1e-4 truncation error alone would exceed the tolerance
    std::vector<double> fd;
    for (auto& layer : model.layers) {
      const auto fdw = oracles::fd_gradient(layer.weight.data(), objective, 1e-5);
      fd.insert(fd.end(), fdw.begin(), fdw.end());
      const auto fdb = oracles::fd_gradient(layer.bias, objective, 1e-5);
      fd.insert(fd.end(), fdb.begin(), fdb.end());
    }
    EXPECT_TRUE(oracles::grads_close(analytic, fd)) << "loss kind " << which;
  }
}

TEST(Backward, StaleCacheRejected) {
  const std::size_t widths[] = {3, 2};
  MlpModel model = init_model(widths, 1);
  const Matrix x = Matrix::from_rows({{1.0, 2.0, 3.0}});
  const ForwardResult res = forward(model, x);
  ++model.revision;  // parameters notionally updated
  EXPECT_THROW(backward(model, res.cache, Matrix(1, 2)), StaleCacheError);
}

TEST(Checkpoint, RoundTripsThroughF32) {
  namespace fs = std::filesystem;
  const std::size_t widths[] = {5, 9, 4};
  const MlpModel model = init_model(widths, 77, Activation::kTanh, true);
  const auto path = (fs::temp_directory_path() / "srctrace_ckpt_test.ckpt").string();
  nlohmann::ordered_json extra{{"margin", {{"m", 0.3}, {"s", 30.0}}}};
  save_checkpoint(model, path, extra);
  nlohmann::ordered_json extra_back;
  const MlpModel back = load_checkpoint(path, &extra_back);
  EXPECT_EQ(back.activation, Activation::kTanh);
  EXPECT_TRUE(back.normalize_output);
  EXPECT_EQ(back.output_dim, 4u);
  ASSERT_EQ(back.layers.size(), model.layers.size());
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    ASSERT_TRUE(back.layers[k].weight.same_shape(model.layers[k].weight));
    for (std::size_t i = 0; i < model.layers[k].weight.size(); ++i) {
      // storage truncates to f32; the reread value is the f32 image
      const float f32 = static_cast<float>(model.layers[k].weight.data()[i]);
      EXPECT_EQ(back.layers[k].weight.data()[i], static_cast<double>(f32));
    }
  }
  EXPECT_EQ(extra_back.at("margin").at("m").get<double>(), 0.3);
  // a second save of the loaded model is byte-identical (f32 fixed point)
  const auto path2 = (fs::temp_directory_path() / "srctrace_ckpt_test2.ckpt").string();
  save_checkpoint(back, path2, extra);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
}
