#include "polarize/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "polarize/evalkit.hpp"

namespace polarize {

namespace {

using Eigen::VectorXd;

using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// ---------------------------------------------------------------------------
// conv 3x3 (stride 1, pad (k-1)/2) via im2col + one GEMM per batch
// ---------------------------------------------------------------------------

void im2col(const Tensor& x, int64_t ksize, RowMat& cols) {
  const int64_t B = x.n, C = x.c, H = x.h, W = x.w, HW = H * W;
  const int64_t pad = (ksize - 1) / 2;
  cols.setZero();
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ci = 0; ci < C; ++ci)
      for (int64_t kh = 0; kh < ksize; ++kh)
        for (int64_t kw = 0; kw < ksize; ++kw) {
          const int64_t r = (ci * ksize + kh) * ksize + kw;
          const int64_t oh = kh - pad, ow = kw - pad;
          const int64_t wlo = std::max<int64_t>(0, -ow), whi = std::min(W, W - ow);
          if (whi <= wlo) continue;
          for (int64_t h = std::max<int64_t>(0, -oh); h < std::min(H, H - oh); ++h) {
            const double* src = x.data() + ((b * C + ci) * H + h + oh) * W + (wlo + ow);
            double* dst = cols.data() + r * (B * HW) + b * HW + h * W + wlo;
            std::memcpy(dst, src, static_cast<size_t>(whi - wlo) * sizeof(double));
          }
        }
}

void col2im_add(const RowMat& cols, int64_t ksize, Tensor& dx) {
  const int64_t B = dx.n, C = dx.c, H = dx.h, W = dx.w, HW = H * W;
  const int64_t pad = (ksize - 1) / 2;
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ci = 0; ci < C; ++ci)
      for (int64_t kh = 0; kh < ksize; ++kh)
        for (int64_t kw = 0; kw < ksize; ++kw) {
          const int64_t r = (ci * ksize + kh) * ksize + kw;
          const int64_t oh = kh - pad, ow = kw - pad;
          const int64_t wlo = std::max<int64_t>(0, -ow), whi = std::min(W, W - ow);
          if (whi <= wlo) continue;
          for (int64_t h = std::max<int64_t>(0, -oh); h < std::min(H, H - oh); ++h) {
            const double* src = cols.data() + r * (B * HW) + b * HW + h * W + wlo;
            double* dst = dx.data() + ((b * C + ci) * H + h + oh) * W + (wlo + ow);
            for (int64_t i = 0; i < whi - wlo; ++i) dst[i] += src[i];
          }
        }
}

class Conv2d final : public Layer {
 public:
  Conv2d(int64_t in_ch, int64_t out_ch, std::string name, std::mt19937_64& rng,
         int64_t ksize)
      : name_(std::move(name)), in_(in_ch), out_(out_ch), k_(ksize) {
    weight_.resize(out_, in_ * k_ * k_);
    bias_ = VectorXd::Zero(out_);
    const double sigma = std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_));
    std::normal_distribution<double> g(0.0, sigma);
    for (int64_t i = 0; i < weight_.size(); ++i) weight_.data()[i] = g(rng);
    wgrad_ = RowMat::Zero(out_, in_ * k_ * k_);
    bgrad_ = VectorXd::Zero(out_);
  }

  std::string name() const override { return name_; }

  Tensor forward(const Tensor& x, Mode, LayerCache* cache) override {
    PZ_REQUIRE(x.c == in_, name_ + ": channel mismatch");
    const int64_t B = x.n, HW = x.spatial();
    RowMat cols(in_ * k_ * k_, B * HW);
    im2col(x, k_, cols);
    RowMat y = weight_ * cols;  // (out, B*HW)
    Tensor out(B, out_, x.h, x.w);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < out_; ++c)
      for (int64_t b = 0; b < B; ++b) {
        const double* src = y.data() + c * (B * HW) + b * HW;
        double* dst = out.data() + (b * out_ + c) * HW;
        const double bc = bias_[c];
        for (int64_t p = 0; p < HW; ++p) dst[p] = src[p] + bc;
      }
    if (cache) cache->input = x;
    return out;
  }

  Tensor backward(const LayerCache& cache, const Tensor& gout, bool want_input_grad,
                  bool accum_param_grads) override {
    const Tensor& x = cache.input;
    const int64_t B = x.n, HW = x.spatial();
    RowMat dy(out_, B * HW);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < out_; ++c)
      for (int64_t b = 0; b < B; ++b)
        std::memcpy(dy.data() + c * (B * HW) + b * HW,
                    gout.data() + (b * out_ + c) * HW,
                    static_cast<size_t>(HW) * sizeof(double));
    if (accum_param_grads) {
      RowMat cols(in_ * k_ * k_, B * HW);
      im2col(x, k_, cols);
      wgrad_.noalias() += dy * cols.transpose();
      bgrad_ += dy.rowwise().sum();
    }
    Tensor dx;
    if (want_input_grad) {
      RowMat dcols = weight_.transpose() * dy;
      dx = Tensor(B, in_, x.h, x.w);
      col2im_add(dcols, k_, dx);
    }
    return dx;
  }

  void collect_params(std::vector<ParamView>& out) override {
    out.push_back({name_ + ".weight", weight_.data(), wgrad_.data(), weight_.size()});
    out.push_back({name_ + ".bias", bias_.data(), bgrad_.data(), bias_.size()});
  }
  void zero_grad() override {
    wgrad_.setZero();
    bgrad_.setZero();
  }
  std::array<int64_t, 3> output_shape(std::array<int64_t, 3> chw) const override {
    return {out_, chw[1], chw[2]};
  }

 private:
  std::string name_;
  int64_t in_, out_, k_;
  RowMat weight_, wgrad_;
  VectorXd bias_, bgrad_;
};

// ---------------------------------------------------------------------------
// batch normalization over (B, H, W) per channel
// ---------------------------------------------------------------------------

class BatchNorm2d final : public Layer {
 public:
  BatchNorm2d(int64_t channels, std::string name, double eps, double momentum)
      : name_(std::move(name)), c_(channels), eps_(eps), momentum_(momentum) {
    gamma_ = VectorXd::Ones(c_);
    beta_ = VectorXd::Zero(c_);
    running_mean_ = VectorXd::Zero(c_);
    running_var_ = VectorXd::Ones(c_);
    ggrad_ = VectorXd::Zero(c_);
    bgrad_ = VectorXd::Zero(c_);
  }

  std::string name() const override { return name_; }

  Tensor forward(const Tensor& x, Mode mode, LayerCache* cache) override {
    PZ_REQUIRE(x.c == c_, name_ + ": channel mismatch");
    const int64_t B = x.n, HW = x.spatial(), N = B * HW;
    Tensor out(B, c_, x.h, x.w);
    VectorXd mean(c_), inv_std(c_);
    if (mode == Mode::kTrain) {
      PZ_REQUIRE(N > 1, name_ + ": degenerate batch (B*H*W must exceed 1 in train mode)");
      VectorXd var(c_);
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < c_; ++c) {
        double s = 0;
        for (int64_t b = 0; b < B; ++b) {
          const double* p = x.data() + (b * c_ + c) * HW;
          for (int64_t i = 0; i < HW; ++i) s += p[i];
        }
        const double mu = s / static_cast<double>(N);
        double sq = 0;
        for (int64_t b = 0; b < B; ++b) {
          const double* p = x.data() + (b * c_ + c) * HW;
          for (int64_t i = 0; i < HW; ++i) sq += (p[i] - mu) * (p[i] - mu);
        }
        mean[c] = mu;
        var[c] = sq / static_cast<double>(N);
        running_mean_[c] = (1 - momentum_) * running_mean_[c] + momentum_ * mu;
        running_var_[c] = (1 - momentum_) * running_var_[c] +
                          momentum_ * (sq / static_cast<double>(N - 1));
      }
      inv_std = (var.array() + eps_).rsqrt();
    } else {
      mean = running_mean_;
      inv_std = (running_var_.array() + eps_).rsqrt();
    }
    Tensor xhat(B, c_, x.h, x.w);
#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < c_; ++c) {
        const double* p = x.data() + (b * c_ + c) * HW;
        double* ph = xhat.data() + (b * c_ + c) * HW;
        double* po = out.data() + (b * c_ + c) * HW;
        const double mu = mean[c], is = inv_std[c], g = gamma_[c], be = beta_[c];
        for (int64_t i = 0; i < HW; ++i) {
          ph[i] = (p[i] - mu) * is;
          po[i] = g * ph[i] + be;
        }
      }
    if (cache) {
      cache->mode = mode;
      cache->normalized = std::move(xhat);
      cache->inv_std = inv_std;
    }
    return out;
  }

  Tensor backward(const LayerCache& cache, const Tensor& gout, bool want_input_grad,
                  bool accum_param_grads) override {
    const Tensor& xhat = cache.normalized;
    const int64_t B = gout.n, HW = gout.spatial(), N = B * HW;
    VectorXd dbeta = VectorXd::Zero(c_), dgamma = VectorXd::Zero(c_);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < c_; ++c)
      for (int64_t b = 0; b < B; ++b) {
        const double* pg = gout.data() + (b * c_ + c) * HW;
        const double* ph = xhat.data() + (b * c_ + c) * HW;
        double sb = 0, sg = 0;
        for (int64_t i = 0; i < HW; ++i) {
          sb += pg[i];
          sg += pg[i] * ph[i];
        }
        dbeta[c] += sb;
        dgamma[c] += sg;
      }
    if (accum_param_grads) {
      ggrad_ += dgamma;
      bgrad_ += dbeta;
    }
    Tensor dx;
    if (want_input_grad) {
      dx = Tensor(B, c_, gout.h, gout.w);
      if (cache.mode == Mode::kTrain) {
#pragma omp parallel for schedule(static)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < c_; ++c) {
            const double* pg = gout.data() + (b * c_ + c) * HW;
            const double* ph = xhat.data() + (b * c_ + c) * HW;
            double* pd = dx.data() + (b * c_ + c) * HW;
            const double scale = gamma_[c] * cache.inv_std[c] / static_cast<double>(N);
            for (int64_t i = 0; i < HW; ++i)
              pd[i] = scale * (static_cast<double>(N) * pg[i] - dbeta[c] - ph[i] * dgamma[c]);
          }
      } else {
#pragma omp parallel for schedule(static)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < c_; ++c) {
            const double* pg = gout.data() + (b * c_ + c) * HW;
            double* pd = dx.data() + (b * c_ + c) * HW;
            const double scale = gamma_[c] * cache.inv_std[c];
            for (int64_t i = 0; i < HW; ++i) pd[i] = scale * pg[i];
          }
      }
    }
    return dx;
  }

  void collect_params(std::vector<ParamView>& out) override {
    out.push_back({name_ + ".gamma", gamma_.data(), ggrad_.data(), c_});
    out.push_back({name_ + ".beta", beta_.data(), bgrad_.data(), c_});
    out.push_back({name_ + ".running_mean", running_mean_.data(), nullptr, c_});
    out.push_back({name_ + ".running_var", running_var_.data(), nullptr, c_});
  }
  void zero_grad() override {
    ggrad_.setZero();
    bgrad_.setZero();
  }
  std::array<int64_t, 3> output_shape(std::array<int64_t, 3> chw) const override {
    return chw;
  }

 private:
  std::string name_;
  int64_t c_;
  double eps_, momentum_;
  VectorXd gamma_, beta_, running_mean_, running_var_, ggrad_, bgrad_;
};

class ReLU final : public Layer {
 public:
  explicit ReLU(std::string name) : name_(std::move(name)) {}
  std::string name() const override { return name_; }

  Tensor forward(const Tensor& x, Mode, LayerCache* cache) override {
    Tensor out = x;
    for (double& v : out.v) v = v > 0 ? v : 0;
    if (cache) cache->input = x;
    return out;
  }
  Tensor backward(const LayerCache& cache, const Tensor& gout, bool want_input_grad,
                  bool) override {
    Tensor dx;
    if (want_input_grad) {
      dx = gout;
      for (size_t i = 0; i < dx.v.size(); ++i)
        if (cache.input.v[i] <= 0) dx.v[i] = 0;
    }
    return dx;
  }
  std::array<int64_t, 3> output_shape(std::array<int64_t, 3> chw) const override {
    return chw;
  }

 private:
  std::string name_;
};

class MaxPool2 final : public Layer {
 public:
  explicit MaxPool2(std::string name) : name_(std::move(name)) {}
  std::string name() const override { return name_; }

  Tensor forward(const Tensor& x, Mode, LayerCache* cache) override {
    PZ_REQUIRE(x.h % 2 == 0 && x.w % 2 == 0, name_ + ": spatial dims must be even");
    const int64_t B = x.n, C = x.c, H = x.h, W = x.w, OH = H / 2, OW = W / 2;
    Tensor out(B, C, OH, OW);
    std::vector<int32_t> arg(static_cast<size_t>(out.size()));
#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* p = x.data() + (b * C + c) * H * W;
        double* po = out.data() + (b * C + c) * OH * OW;
        int32_t* pa = arg.data() + (b * C + c) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow) {
            int64_t best = (2 * oh) * W + 2 * ow;
            double bv = p[best];
            const int64_t cand[3] = {(2 * oh) * W + 2 * ow + 1, (2 * oh + 1) * W + 2 * ow,
                                     (2 * oh + 1) * W + 2 * ow + 1};
            for (int64_t k : cand)
              if (p[k] > bv) {
                bv = p[k];
                best = k;
              }
            po[oh * OW + ow] = bv;
            pa[oh * OW + ow] = static_cast<int32_t>(best);
          }
      }
    if (cache) {
      cache->argmax = std::move(arg);
      cache->input = x;  // only the shape is needed
    }
    return out;
  }

  Tensor backward(const LayerCache& cache, const Tensor& gout, bool want_input_grad,
                  bool) override {
    Tensor dx;
    if (!want_input_grad) return dx;
    const Tensor& x = cache.input;
    dx = Tensor(x.n, x.c, x.h, x.w);
    const int64_t planes = x.n * x.c, OHW = gout.spatial(), HW = x.spatial();
    for (int64_t pl = 0; pl < planes; ++pl) {
      const double* pg = gout.data() + pl * OHW;
      const int32_t* pa = cache.argmax.data() + pl * OHW;
      double* pd = dx.data() + pl * HW;
      for (int64_t i = 0; i < OHW; ++i) pd[pa[i]] += pg[i];
    }
    return dx;
  }
  std::array<int64_t, 3> output_shape(std::array<int64_t, 3> chw) const override {
    return {chw[0], chw[1] / 2, chw[2] / 2};
  }

 private:
  std::string name_;
};

class Linear final : public Layer {
 public:
  Linear(int64_t in_features, int64_t out_features, std::string name,
         std::mt19937_64& rng)
      : name_(std::move(name)), in_(in_features), out_(out_features) {
    weight_.resize(out_, in_);
    const double sigma = std::sqrt(2.0 / static_cast<double>(in_));
    std::normal_distribution<double> g(0.0, sigma);
    for (int64_t i = 0; i < weight_.size(); ++i) weight_.data()[i] = g(rng);
    bias_ = VectorXd::Zero(out_);
    wgrad_ = RowMat::Zero(out_, in_);
    bgrad_ = VectorXd::Zero(out_);
  }

  std::string name() const override { return name_; }

  Tensor forward(const Tensor& x, Mode, LayerCache* cache) override {
    PZ_REQUIRE(x.sample_size() == in_, name_ + ": feature size mismatch");
    const int64_t B = x.n;
    ConstMap xm(x.data(), B, in_);
    Tensor out(B, out_, 1, 1);
    MutMap ym(out.data(), B, out_);
    ym.noalias() = xm * weight_.transpose();
    ym.rowwise() += bias_.transpose();
    if (cache) cache->input = x;
    return out;
  }

  Tensor backward(const LayerCache& cache, const Tensor& gout, bool want_input_grad,
                  bool accum_param_grads) override {
    const Tensor& x = cache.input;
    const int64_t B = x.n;
    ConstMap dym(gout.data(), B, out_);
    if (accum_param_grads) {
      ConstMap xm(x.data(), B, in_);
      wgrad_.noalias() += dym.transpose() * xm;
      bgrad_ += dym.colwise().sum();
    }
    Tensor dx;
    if (want_input_grad) {
      dx = Tensor(x.n, x.c, x.h, x.w);
      MutMap dxm(dx.data(), B, in_);
      dxm.noalias() = dym * weight_;
    }
    return dx;
  }

  void collect_params(std::vector<ParamView>& out) override {
    out.push_back({name_ + ".weight", weight_.data(), wgrad_.data(), weight_.size()});
    out.push_back({name_ + ".bias", bias_.data(), bgrad_.data(), bias_.size()});
  }
  void zero_grad() override {
    wgrad_.setZero();
    bgrad_.setZero();
  }
  std::array<int64_t, 3> output_shape(std::array<int64_t, 3>) const override {
    return {out_, 1, 1};
  }

 private:
  std::string name_;
  int64_t in_, out_;
  RowMat weight_, wgrad_;
  VectorXd bias_, bgrad_;
};

}  // namespace

std::unique_ptr<Layer> make_conv2d(int64_t in_ch, int64_t out_ch, std::string name,
                                   std::mt19937_64& rng, int64_t ksize) {
  return std::make_unique<Conv2d>(in_ch, out_ch, std::move(name), rng, ksize);
}
std::unique_ptr<Layer> make_batchnorm2d(int64_t channels, std::string name, double eps,
                                        double momentum) {
  return std::make_unique<BatchNorm2d>(channels, std::move(name), eps, momentum);
}
std::unique_ptr<Layer> make_relu(std::string name) {
  return std::make_unique<ReLU>(std::move(name));
}
std::unique_ptr<Layer> make_maxpool2(std::string name) {
  return std::make_unique<MaxPool2>(std::move(name));
}
std::unique_ptr<Layer> make_linear(int64_t in_features, int64_t out_features,
                                   std::string name, std::mt19937_64& rng) {
  return std::make_unique<Linear>(in_features, out_features, std::move(name), rng);
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

Tensor CnnModel::forward(const Tensor& x, Mode mode, std::vector<LayerCache>* caches,
                         int first, int last) {
  if (last < 0) last = static_cast<int>(layers.size());
  PZ_REQUIRE(first >= 0 && first <= last && last <= static_cast<int>(layers.size()),
             "layer range out of bounds");
  if (caches) caches->resize(layers.size());
  Tensor cur = x;
  for (int l = first; l < last; ++l)
    cur = layers[static_cast<size_t>(l)]->forward(cur, mode,
                                                  caches ? &(*caches)[static_cast<size_t>(l)] : nullptr);
  return cur;
}

void CnnModel::collect_params(std::vector<ParamView>& out) {
  for (auto& l : layers) l->collect_params(out);
}

void CnnModel::zero_grad() {
  for (auto& l : layers) l->zero_grad();
}

CnnModel CnnModel::clone() const {
  CnnModel copy = build_cnn(meta, block_channels, init_seed);
  std::vector<ParamView> src, dst;
  const_cast<CnnModel*>(this)->collect_params(src);
  copy.collect_params(dst);
  PZ_REQUIRE(src.size() == dst.size(), "clone: parameter sets differ");
  for (size_t i = 0; i < src.size(); ++i) {
    PZ_REQUIRE(src[i].name == dst[i].name && src[i].size == dst[i].size,
               "clone: parameter layout differs");
    std::copy(src[i].value, src[i].value + src[i].size, dst[i].value);
  }
  return copy;
}

int64_t argmax_class(std::span<const double> logits) {
  PZ_REQUIRE(!logits.empty(), "empty logit vector");
  int64_t best = 0;
  for (size_t k = 1; k < logits.size(); ++k)
    if (logits[k] > logits[static_cast<size_t>(best)]) best = static_cast<int64_t>(k);
  return best;
}

std::vector<int64_t> predict_classes(const Tensor& logits) {
  std::vector<int64_t> out(static_cast<size_t>(logits.n));
  for (int64_t i = 0; i < logits.n; ++i) out[static_cast<size_t>(i)] = argmax_class(logits.sample(i));
  return out;
}

std::pair<Tensor, std::vector<int64_t>> predict(CnnModel& model, const Tensor& batch) {
  Tensor logits = model.forward(batch, Mode::kInfer);
  return {logits, predict_classes(logits)};
}

CnnModel build_cnn(const DatasetMeta& meta, const std::vector<int64_t>& channels,
                   uint64_t seed) {
  validate_meta(meta);
  PZ_REQUIRE(meta.height >= 8 && meta.width >= 8,
             "unsupported input shape: need at least 8x8 images");
  PZ_REQUIRE(!channels.empty() && channels.size() <= 8, "need 1..8 conv blocks");
  for (int64_t c : channels) PZ_REQUIRE(c >= 1, "block channels must be positive");

  CnnModel m;
  m.meta = meta;
  m.block_channels = channels;
  m.init_seed = seed;
  auto rng = make_rng(seed, /*stream=*/7);

  int64_t in_ch = meta.channels, h = meta.height, w = meta.width;
  for (size_t bi = 0; bi < channels.size(); ++bi) {
    const std::string bname = "block" + std::to_string(bi + 1);
    const int64_t out_ch = channels[bi];
    m.layers.push_back(make_conv2d(in_ch, out_ch, bname + ".conv", rng));
    m.layers.push_back(make_batchnorm2d(out_ch, bname + ".bn"));
    m.layers.push_back(make_relu(bname + ".relu"));
    if (h % 2 == 0 && w % 2 == 0 && h >= 4 && w >= 4) {
      m.layers.push_back(make_maxpool2(bname + ".pool"));
      h /= 2;
      w /= 2;
    }
    in_ch = out_ch;
    m.boundaries.push_back(
        {bname, static_cast<int>(m.layers.size()), out_ch, h, w});
  }
  m.layers.push_back(make_linear(in_ch * h * w, meta.num_classes, "head.fc", rng));
  m.boundaries.push_back(
      {"head", static_cast<int>(m.layers.size()), meta.num_classes, 1, 1});
  return m;
}

uint64_t state_checksum(const CnnModel& model) {
  std::vector<ParamView> params;
  const_cast<CnnModel&>(model).collect_params(params);
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a64(p.name.data(), p.name.size(), h);
    h = fnv1a64(p.value, static_cast<size_t>(p.size) * sizeof(double), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

void SgdOptimizer::step(std::vector<ParamView>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i)
      velocity_[i].assign(static_cast<size_t>(params[i].size), 0.0);
  }
  PZ_REQUIRE(velocity_.size() == params.size(), "optimizer bound to a different model");
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.grad) continue;
    auto& vel = velocity_[i];
    for (int64_t j = 0; j < p.size; ++j) {
      const double g = p.grad[j] + weight_decay_ * p.value[j];
      vel[static_cast<size_t>(j)] = momentum_ * vel[static_cast<size_t>(j)] + g;
      p.value[j] -= lr_ * vel[static_cast<size_t>(j)];
    }
  }
}

namespace {

std::pair<Tensor, std::vector<int64_t>> gather_batch(const Dataset& ds,
                                                     std::span<const int64_t> idx) {
  Tensor x(static_cast<int64_t>(idx.size()), ds.images.c, ds.images.h, ds.images.w);
  std::vector<int64_t> y(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    auto src = ds.images.sample(idx[i]);
    std::copy(src.begin(), src.end(), x.sample(static_cast<int64_t>(i)).begin());
    y[i] = ds.labels[static_cast<size_t>(idx[i])];
  }
  return {std::move(x), std::move(y)};
}

// mean cross-entropy over the batch; writes dL/dlogits if requested
double cross_entropy_mean(const Tensor& logits, std::span<const int64_t> labels,
                          Tensor* dlogits) {
  const int64_t B = logits.n, K = logits.sample_size();
  double total = 0;
  if (dlogits) *dlogits = Tensor(B, logits.c, logits.h, logits.w);
  for (int64_t i = 0; i < B; ++i) {
    auto z = logits.sample(i);
    const int64_t y = labels[static_cast<size_t>(i)];
    double m = z[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, z[static_cast<size_t>(k)]);
    double sum = 0;
    for (int64_t k = 0; k < K; ++k) sum += std::exp(z[static_cast<size_t>(k)] - m);
    const double lse = m + std::log(sum);
    total += lse - z[static_cast<size_t>(y)];
    if (dlogits) {
      auto d = dlogits->sample(i);
      for (int64_t k = 0; k < K; ++k)
        d[static_cast<size_t>(k)] =
            (std::exp(z[static_cast<size_t>(k)] - lse) - (k == y ? 1.0 : 0.0)) /
            static_cast<double>(B);
    }
  }
  return total / static_cast<double>(B);
}

}  // namespace

std::vector<EpochStats> train_model(CnnModel& model, const Dataset& data,
                                    const TrainHyper& hyper,
                                    const TrainEvalHooks* hooks) {
  validate_dataset(data);
  PZ_REQUIRE(data.meta == model.meta, "dataset meta does not match model");
  PZ_REQUIRE(hyper.epochs >= 0, "epochs must be >= 0");
  PZ_REQUIRE(hyper.batch_size >= 1, "batch size must be >= 1");
  PZ_REQUIRE(hyper.lr > 0, "learning rate must be positive");

  std::vector<ParamView> params;
  model.collect_params(params);
  SgdOptimizer opt(hyper.lr, hyper.momentum, hyper.weight_decay);

  std::vector<int64_t> order(static_cast<size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(hyper.seed, /*stream=*/3);

  std::vector<EpochStats> log;
  std::vector<LayerCache> caches;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int64_t seen = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(hyper.batch_size)) {
      const size_t cnt = std::min<size_t>(hyper.batch_size, order.size() - off);
      auto [x, y] = gather_batch(data, {order.data() + off, cnt});
      Tensor logits = model.forward(x, Mode::kTrain, &caches);
      Tensor dlogits;
      const double loss = cross_entropy_mean(logits, y, &dlogits);
      if (!std::isfinite(loss))
        throw TrainingFailure("training diverged (non-finite loss) at epoch " +
                                  std::to_string(epoch),
                              epoch);
      loss_sum += loss * static_cast<double>(cnt);
      seen += static_cast<int64_t>(cnt);
      model.zero_grad();
      Tensor g = dlogits;
      for (int l = static_cast<int>(model.layers.size()) - 1; l >= 0; --l)
        g = model.layers[static_cast<size_t>(l)]->backward(caches[static_cast<size_t>(l)], g,
                                                           /*want_input_grad=*/l > 0,
                                                           /*accum_param_grads=*/true);
      opt.step(params);
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(seen);
    if (hooks && hooks->clean_test) {
      auto pf = [&model](const Tensor& b) {
        return predict_classes(model.forward(b, Mode::kInfer));
      };
      const Dataset* test = hooks->clean_test;
      Dataset head;
      if (hooks->max_eval > 0 && hooks->max_eval < test->size()) {
        head.meta = test->meta;
        head.images = test->images.slice(0, hooks->max_eval);
        head.labels.assign(test->labels.begin(), test->labels.begin() + hooks->max_eval);
        test = &head;
      }
      st.acc = accuracy(pf, *test);
      if (hooks->trigger && hooks->plan)
        st.asr = attack_success_rate(pf, *test, *hooks->trigger, *hooks->plan);
    }
    log.push_back(st);
  }
  return log;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'P', 'Z', 'C', 'K', 'P', 'T', '0', '1'};

std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p.replace_extension(".json");
  return p;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& ckpt_file, CnnModel& model, int epoch,
                     const std::map<std::string, double>& metrics) {
  std::vector<ParamView> params;
  model.collect_params(params);
  std::ofstream f(ckpt_file, std::ios::binary);
  PZ_REQUIRE(f.good(), "cannot open checkpoint for writing: " + ckpt_file.string());
  f.write(kCkptMagic, sizeof(kCkptMagic));
  const uint64_t count = params.size();
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& p : params) {
    const uint32_t len = static_cast<uint32_t>(p.name.size());
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(p.name.data(), len);
    const uint64_t sz = static_cast<uint64_t>(p.size);
    f.write(reinterpret_cast<const char*>(&sz), sizeof(sz));
    f.write(reinterpret_cast<const char*>(p.value),
            static_cast<std::streamsize>(sz * sizeof(double)));
  }

  nlohmann::json j{{"arch", "cnn"},
                   {"channels", model.block_channels},
                   {"meta",
                    {{"num_classes", model.meta.num_classes},
                     {"channels", model.meta.channels},
                     {"height", model.meta.height},
                     {"width", model.meta.width}}},
                   {"seed", model.init_seed},
                   {"epoch", epoch},
                   {"metrics", metrics}};
  std::ofstream sf(sidecar_path(ckpt_file));
  sf << j.dump(2) << "\n";
}

CnnModel load_checkpoint(const std::filesystem::path& ckpt_file) {
  std::ifstream sf(sidecar_path(ckpt_file));
  PZ_REQUIRE(sf.good(), "checkpoint sidecar missing: " + sidecar_path(ckpt_file).string());
  nlohmann::json j = nlohmann::json::parse(sf);
  DatasetMeta meta{j.at("meta").at("num_classes").get<int64_t>(),
                   j.at("meta").at("channels").get<int64_t>(),
                   j.at("meta").at("height").get<int64_t>(),
                   j.at("meta").at("width").get<int64_t>()};
  CnnModel model = build_cnn(meta, j.at("channels").get<std::vector<int64_t>>(),
                             j.at("seed").get<uint64_t>());

  std::ifstream f(ckpt_file, std::ios::binary);
  PZ_REQUIRE(f.good(), "cannot open checkpoint: " + ckpt_file.string());
  char magic[8];
  f.read(magic, 8);
  PZ_REQUIRE(std::memcmp(magic, kCkptMagic, 8) == 0, "bad checkpoint magic");
  uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), sizeof(count));

  std::vector<ParamView> params;
  model.collect_params(params);
  std::map<std::string, ParamView*> by_name;
  for (auto& p : params) by_name[p.name] = &p;
  PZ_REQUIRE(count == params.size(), "checkpoint parameter count mismatch");
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    f.read(name.data(), len);
    uint64_t sz = 0;
    f.read(reinterpret_cast<char*>(&sz), sizeof(sz));
    auto it = by_name.find(name);
    PZ_REQUIRE(it != by_name.end(), "unknown parameter in checkpoint: " + name);
    PZ_REQUIRE(static_cast<int64_t>(sz) == it->second->size,
               "parameter size mismatch: " + name);
    f.read(reinterpret_cast<char*>(it->second->value),
           static_cast<std::streamsize>(sz * sizeof(double)));
  }
  PZ_REQUIRE(f.good(), "truncated checkpoint");
  return model;
}

}  // namespace polarize
