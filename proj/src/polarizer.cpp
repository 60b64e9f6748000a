#include "polarize/polarizer.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace polarize {

using Eigen::VectorXd;

void PolarizerParams::zero_grad() {
  weight_grad.setZero();
  gamma_grad.setZero();
  beta_grad.setZero();
}

void PolarizerParams::collect_params(std::vector<ParamView>& out) {
  out.push_back({"polarizer.weight", weight.data(), weight_grad.data(), weight.size()});
  out.push_back({"polarizer.gamma", bn_gamma.data(), gamma_grad.data(), channels});
  out.push_back({"polarizer.beta", bn_beta.data(), beta_grad.data(), channels});
  out.push_back({"polarizer.running_mean", running_mean.data(), nullptr, channels});
  out.push_back({"polarizer.running_var", running_var.data(), nullptr, channels});
}

PolarizerParams identity_polarizer(int64_t channels, double eps, double momentum) {
  PZ_REQUIRE(channels >= 1, "channels must be >= 1");
  PZ_REQUIRE(eps > 0, "eps must be positive");
  PZ_REQUIRE(momentum > 0 && momentum <= 1, "momentum must be in (0,1]");
  PolarizerParams p;
  p.channels = channels;
  p.eps = eps;
  p.momentum = momentum;
  p.weight = RowMat::Identity(channels, channels);
  // gamma = sqrt(1+eps) cancels the 1/sqrt(1+eps) of unit running variance,
  // making the block exactly identity in inference mode.
  p.bn_gamma = VectorXd::Constant(channels, std::sqrt(1.0 + eps));
  p.bn_beta = VectorXd::Zero(channels);
  p.running_mean = VectorXd::Zero(channels);
  p.running_var = VectorXd::Ones(channels);
  p.weight_grad = RowMat::Zero(channels, channels);
  p.gamma_grad = VectorXd::Zero(channels);
  p.beta_grad = VectorXd::Zero(channels);
  return p;
}

Tensor polarizer_apply(PolarizerParams& params, const Tensor& x, Mode mode,
                       PolarizerCache* cache) {
  PZ_REQUIRE(x.c == params.channels, "feature channel count does not match polarizer");
  const int64_t B = x.n, C = x.c, HW = x.spatial(), N = B * HW;

  Tensor mixed(B, C, x.h, x.w);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b) {
    Eigen::Map<const RowMat> xb(x.data() + b * x.sample_size(), C, HW);
    Eigen::Map<RowMat> mb(mixed.data() + b * x.sample_size(), C, HW);
    mb.noalias() = params.weight * xb;
  }

  VectorXd mean(C), inv_std(C);
  if (mode == Mode::kTrain) {
    PZ_REQUIRE(N > 1, "degenerate batch: B*H*W must exceed 1 in train mode");
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (int64_t b = 0; b < B; ++b) {
        const double* p = mixed.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(N);
      double sq = 0;
      for (int64_t b = 0; b < B; ++b) {
        const double* p = mixed.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(sq / static_cast<double>(N) + params.eps);
      params.running_mean[c] =
          (1 - params.momentum) * params.running_mean[c] + params.momentum * mu;
      params.running_var[c] = (1 - params.momentum) * params.running_var[c] +
                              params.momentum * (sq / static_cast<double>(N - 1));
    }
  } else {
    mean = params.running_mean;
    inv_std = (params.running_var.array() + params.eps).rsqrt();
  }

  Tensor out(B, C, x.h, x.w);
  Tensor xhat(B, C, x.h, x.w);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* pm = mixed.data() + (b * C + c) * HW;
      double* ph = xhat.data() + (b * C + c) * HW;
      double* po = out.data() + (b * C + c) * HW;
      const double mu = mean[c], is = inv_std[c];
      const double g = params.bn_gamma[c], be = params.bn_beta[c];
      for (int64_t i = 0; i < HW; ++i) {
        ph[i] = (pm[i] - mu) * is;
        po[i] = g * ph[i] + be;
      }
    }

  if (cache) {
    cache->mode = mode;
    cache->input = x;
    cache->normalized = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return out;
}

Tensor polarizer_backward(PolarizerParams& params, const PolarizerCache& cache,
                          const Tensor& grad_out, bool want_input_grad,
                          bool accum_param_grads) {
  const Tensor& xhat = cache.normalized;
  const int64_t B = grad_out.n, C = grad_out.c, HW = grad_out.spatial(), N = B * HW;
  PZ_REQUIRE(C == params.channels, "gradient channel count does not match polarizer");

  VectorXd dbeta = VectorXd::Zero(C), dgamma = VectorXd::Zero(C);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* pg = grad_out.data() + (b * C + c) * HW;
      const double* ph = xhat.data() + (b * C + c) * HW;
      double sb = 0, sg = 0;
      for (int64_t i = 0; i < HW; ++i) {
        sb += pg[i];
        sg += pg[i] * ph[i];
      }
      dbeta[c] += sb;
      dgamma[c] += sg;
    }
  if (accum_param_grads) {
    params.gamma_grad += dgamma;
    params.beta_grad += dbeta;
  }

  // gradient w.r.t. the mixed (pre-BN) activations
  Tensor dmixed(B, C, grad_out.h, grad_out.w);
  if (cache.mode == Mode::kTrain) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* pg = grad_out.data() + (b * C + c) * HW;
        const double* ph = xhat.data() + (b * C + c) * HW;
        double* pd = dmixed.data() + (b * C + c) * HW;
        const double scale = params.bn_gamma[c] * cache.inv_std[c] / static_cast<double>(N);
        for (int64_t i = 0; i < HW; ++i)
          pd[i] = scale * (static_cast<double>(N) * pg[i] - dbeta[c] - ph[i] * dgamma[c]);
      }
  } else {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* pg = grad_out.data() + (b * C + c) * HW;
        double* pd = dmixed.data() + (b * C + c) * HW;
        const double scale = params.bn_gamma[c] * cache.inv_std[c];
        for (int64_t i = 0; i < HW; ++i) pd[i] = scale * pg[i];
      }
  }

  Tensor dx;
  if (want_input_grad) dx = Tensor(B, C, grad_out.h, grad_out.w);
  for (int64_t b = 0; b < B; ++b) {
    Eigen::Map<const RowMat> dm(dmixed.data() + b * dmixed.sample_size(), C, HW);
    if (accum_param_grads) {
      Eigen::Map<const RowMat> xb(cache.input.data() + b * cache.input.sample_size(), C, HW);
      params.weight_grad.noalias() += dm * xb.transpose();
    }
    if (want_input_grad) {
      Eigen::Map<RowMat> dxb(dx.data() + b * dx.sample_size(), C, HW);
      dxb.noalias() = params.weight.transpose() * dm;
    }
  }
  return dx;
}

uint64_t polarizer_checksum(const PolarizerParams& params) {
  std::vector<ParamView> views;
  const_cast<PolarizerParams&>(params).collect_params(views);
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : views)
    h = fnv1a64(p.value, static_cast<size_t>(p.size) * sizeof(double), h);
  return h;
}

void save_polarizer(const std::filesystem::path& file, const PolarizerParams& params,
                    int insertion_index, const std::string& boundary_name) {
  std::ofstream f(file, std::ios::binary);
  PZ_REQUIRE(f.good(), "cannot open polarizer checkpoint for writing");
  auto dump = [&f](const double* p, int64_t n) {
    f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  };
  dump(params.weight.data(), params.weight.size());
  dump(params.bn_gamma.data(), params.channels);
  dump(params.bn_beta.data(), params.channels);
  dump(params.running_mean.data(), params.channels);
  dump(params.running_var.data(), params.channels);

  nlohmann::json j{{"channels", params.channels}, {"eps", params.eps},
                   {"momentum", params.momentum}, {"insertion_index", insertion_index},
                   {"boundary", boundary_name}};
  auto manifest = file;
  manifest.replace_extension(".json");
  std::ofstream mf(manifest);
  mf << j.dump(2) << "\n";
}

std::pair<PolarizerParams, int> load_polarizer(const std::filesystem::path& file) {
  auto manifest = file;
  manifest.replace_extension(".json");
  std::ifstream mf(manifest);
  PZ_REQUIRE(mf.good(), "polarizer manifest missing: " + manifest.string());
  nlohmann::json j = nlohmann::json::parse(mf);
  PolarizerParams p = identity_polarizer(j.at("channels").get<int64_t>(),
                                         j.at("eps").get<double>(),
                                         j.at("momentum").get<double>());
  std::ifstream f(file, std::ios::binary);
  PZ_REQUIRE(f.good(), "cannot open polarizer checkpoint: " + file.string());
  auto slurp = [&f](double* q, int64_t n) {
    f.read(reinterpret_cast<char*>(q), static_cast<std::streamsize>(n * sizeof(double)));
  };
  slurp(p.weight.data(), p.weight.size());
  slurp(p.bn_gamma.data(), p.channels);
  slurp(p.bn_beta.data(), p.channels);
  slurp(p.running_mean.data(), p.channels);
  slurp(p.running_var.data(), p.channels);
  PZ_REQUIRE(f.good(), "truncated polarizer checkpoint");
  return {std::move(p), j.at("insertion_index").get<int>()};
}

}  // namespace polarize
