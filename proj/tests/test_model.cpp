#include <doctest.h>

#include "polarize/nn.hpp"
#include "test_util.hpp"

using namespace polarize;

namespace {

const DatasetMeta kMeta{10, 3, 16, 16};
const std::vector<int64_t> kTinyChannels{4, 4, 8, 8};
const DatasetMeta kTinyMeta{3, 2, 8, 8};

// scalar objective for gradient checking: sum of softmax-CE over a fixed batch
double batch_ce(CnnModel& model, const Tensor& x, const std::vector<int64_t>& y) {
  Tensor z = model.forward(x, Mode::kTrain);
  double total = 0;
  for (int64_t i = 0; i < z.n; ++i) {
    auto zi = z.sample(i);
    double m = zi[0];
    for (double v : zi) m = std::max(m, v);
    double sum = 0;
    for (double v : zi) sum += std::exp(v - m);
    total += m + std::log(sum) - zi[static_cast<size_t>(y[static_cast<size_t>(i)])];
  }
  return total;
}

}  // namespace

TEST_CASE("build_cnn boundary and shape contracts") {
  CnnModel m = build_cnn(kMeta);
  CHECK(m.boundaries.size() == 5);  // block1..block4 + head
  CHECK(m.boundaries[0].name == "block1");
  CHECK(m.boundaries[3].name == "block4");
  CHECK(m.boundaries[4].name == "head");
  CHECK(m.boundaries[0].channels == 32);
  CHECK(m.boundaries[3].channels == 128);
  CHECK(m.num_units() == 5);

  Tensor x = test::random_tensor(5, 3, 16, 16, 1);
  Tensor z = m.forward(x, Mode::kInfer);
  CHECK(z.n == 5);
  CHECK(z.sample_size() == 10);
}

TEST_CASE("build_cnn determinism and invalid input shape") {
  CnnModel a = build_cnn(kMeta, {32, 64, 128, 128}, 9);
  CnnModel b = build_cnn(kMeta, {32, 64, 128, 128}, 9);
  CHECK(state_checksum(a) == state_checksum(b));
  CnnModel c = build_cnn(kMeta, {32, 64, 128, 128}, 10);
  CHECK(state_checksum(a) != state_checksum(c));

  CHECK_THROWS_AS(build_cnn(DatasetMeta{10, 3, 7, 7}), std::invalid_argument);
}

TEST_CASE("predict argmax and tie-breaking") {
  Tensor logits(3, 3, 1, 1);
  double vals[9] = {2.0, 5.0, 1.0,   // -> 1
                    3.0, 3.0, 1.0,   // tie -> 0
                    -1.0, -5.0, -1.0};  // tie -> 0
  std::copy(vals, vals + 9, logits.v.begin());
  auto preds = predict_classes(logits);
  CHECK(preds == std::vector<int64_t>{1, 0, 0});

  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 3);
  Tensor x = test::random_tensor(7, 2, 8, 8, 2);
  auto [z, p] = predict(m, x);
  CHECK(p.size() == 7);
  CHECK(z.n == 7);
}

TEST_CASE("layer backward passes match finite differences") {
  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 5);
  Tensor x = test::random_tensor(3, 2, 8, 8, 6);
  std::vector<int64_t> y{0, 2, 1};

  // analytic gradients
  std::vector<LayerCache> caches;
  Tensor z = m.forward(x, Mode::kTrain, &caches);
  Tensor dz(z.n, z.c, 1, 1);
  for (int64_t i = 0; i < z.n; ++i) {
    auto zi = z.sample(i);
    double mx = zi[0];
    for (double v : zi) mx = std::max(mx, v);
    double sum = 0;
    for (double v : zi) sum += std::exp(v - mx);
    auto d = dz.sample(i);
    for (size_t k = 0; k < zi.size(); ++k)
      d[k] = std::exp(zi[k] - mx) / sum -
             (static_cast<int64_t>(k) == y[static_cast<size_t>(i)] ? 1.0 : 0.0);
  }
  m.zero_grad();
  Tensor g = dz;
  for (int l = static_cast<int>(m.layers.size()) - 1; l >= 0; --l)
    g = m.layers[static_cast<size_t>(l)]->backward(caches[static_cast<size_t>(l)], g,
                                                   true, true);

  std::vector<ParamView> params;
  m.collect_params(params);
  std::mt19937_64 pick(3);
  const double h = 1e-6;
  int checked = 0;
  for (auto& p : params) {
    if (!p.grad) continue;  // running stats
    std::uniform_int_distribution<int64_t> at(0, p.size - 1);
    for (int rep = 0; rep < 3; ++rep) {
      const int64_t j = at(pick);
      const double keep = p.value[j];
      p.value[j] = keep + h;
      const double up = batch_ce(m, x, y);
      p.value[j] = keep - h;
      const double dn = batch_ce(m, x, y);
      p.value[j] = keep;
      const double fd = (up - dn) / (2 * h);
      const double an = p.grad[j];
      CHECK(std::abs(fd - an) <= 1e-5 * std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }
  CHECK(checked >= 30);
}

TEST_CASE("input gradients match finite differences") {
  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 8);
  Tensor x = test::random_tensor(2, 2, 8, 8, 9);
  std::vector<int64_t> y{1, 0};

  std::vector<LayerCache> caches;
  Tensor z = m.forward(x, Mode::kInfer, &caches);
  Tensor dz(z.n, z.c, 1, 1);
  for (int64_t i = 0; i < z.n; ++i) {
    auto zi = z.sample(i);
    double mx = zi[0];
    for (double v : zi) mx = std::max(mx, v);
    double sum = 0;
    for (double v : zi) sum += std::exp(v - mx);
    auto d = dz.sample(i);
    for (size_t k = 0; k < zi.size(); ++k)
      d[k] = std::exp(zi[k] - mx) / sum -
             (static_cast<int64_t>(k) == y[static_cast<size_t>(i)] ? 1.0 : 0.0);
  }
  Tensor g = dz;
  for (int l = static_cast<int>(m.layers.size()) - 1; l >= 0; --l)
    g = m.layers[static_cast<size_t>(l)]->backward(caches[static_cast<size_t>(l)], g,
                                                   true, false);
  CHECK(g.same_shape(x));

  auto ce_infer = [&](const Tensor& xx) {
    Tensor zz = const_cast<CnnModel&>(m).forward(xx, Mode::kInfer);
    double total = 0;
    for (int64_t i = 0; i < zz.n; ++i) {
      auto zi = zz.sample(i);
      double mx = zi[0];
      for (double v : zi) mx = std::max(mx, v);
      double sum = 0;
      for (double v : zi) sum += std::exp(v - mx);
      total += mx + std::log(sum) - zi[static_cast<size_t>(y[static_cast<size_t>(i)])];
    }
    return total;
  };

  std::mt19937_64 pick(4);
  std::uniform_int_distribution<size_t> at(0, x.v.size() - 1);
  const double h = 1e-6;
  for (int rep = 0; rep < 12; ++rep) {
    const size_t j = at(pick);
    Tensor xp = x, xm = x;
    xp.v[j] += h;
    xm.v[j] -= h;
    const double fd = (ce_infer(xp) - ce_infer(xm)) / (2 * h);
    // max-pool argmax switches make the objective piecewise; skip kink points
    if (std::abs(fd - g.v[j]) > 1e-5 * std::max(1.0, std::abs(fd))) {
      const double fd2 = (ce_infer(xp) - ce_infer(x)) / h;
      CHECK(std::abs(fd2 - g.v[j]) <= 1e-2 * std::max(1.0, std::abs(fd2)));
    }
  }
}

TEST_CASE("train_model epochs=0 is a no-op and params change after one epoch") {
  Dataset ds = test::random_dataset(kTinyMeta, 24, 31);
  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 12);
  const uint64_t before = state_checksum(m);

  TrainHyper h0;
  h0.epochs = 0;
  auto log0 = train_model(m, ds, h0);
  CHECK(log0.empty());
  CHECK(state_checksum(m) == before);

  TrainHyper h1;
  h1.epochs = 1;
  h1.batch_size = 8;
  auto log1 = train_model(m, ds, h1);
  CHECK(log1.size() == 1);
  CHECK(state_checksum(m) != before);
  CHECK(std::isfinite(log1[0].loss));
}

TEST_CASE("train_model reports divergence with the epoch index") {
  Dataset ds = test::random_dataset(kTinyMeta, 16, 37);
  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 13);
  TrainHyper h;
  h.epochs = 3;
  h.batch_size = 8;
  h.lr = 1e200;  // guaranteed overflow within a couple of steps
  try {
    train_model(m, ds, h);
    FAIL("expected TrainingFailure");
  } catch (const TrainingFailure& e) {
    CHECK(e.epoch >= 0);
    CHECK(e.epoch < 3);
  }
}

TEST_CASE("training is deterministic given the seed") {
  Dataset ds = test::random_dataset(kTinyMeta, 32, 41);
  TrainHyper h;
  h.epochs = 2;
  h.batch_size = 16;
  h.seed = 5;

  CnnModel a = build_cnn(kTinyMeta, kTinyChannels, 14);
  CnnModel b = build_cnn(kTinyMeta, kTinyChannels, 14);
  auto la = train_model(a, ds, h);
  auto lb = train_model(b, ds, h);
  CHECK(state_checksum(a) == state_checksum(b));
  CHECK(la[1].loss == lb[1].loss);
}

TEST_CASE("checkpoint round trip preserves behavior") {
  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 15);
  Dataset ds = test::random_dataset(kTinyMeta, 16, 43);
  TrainHyper h;
  h.epochs = 1;
  h.batch_size = 8;
  train_model(m, ds, h);

  const auto dir = std::filesystem::temp_directory_path() / "polarize_ckpt_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", m, 1, {{"acc", 0.5}});
  CnnModel back = load_checkpoint(dir / "model.ckpt");
  CHECK(state_checksum(back) == state_checksum(m));

  Tensor x = test::random_tensor(4, 2, 8, 8, 44);
  CHECK(max_abs_diff(m.forward(x, Mode::kInfer), back.forward(x, Mode::kInfer)) == 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("clone copies parameters exactly") {
  CnnModel m = build_cnn(kTinyMeta, kTinyChannels, 16);
  CnnModel c = m.clone();
  CHECK(state_checksum(c) == state_checksum(m));
}
