#pragma once

#include <filesystem>

#include <Eigen/Core>

#include "polarize/nn.hpp"
#include "polarize/tensor.hpp"

namespace polarize {

/// The trainable purification layer: a 1x1 channel-mixing convolution
/// (square weight, no bias) followed by batch normalization. Identity at
/// init so inserting it leaves the host network's behavior unchanged.
struct PolarizerParams {
  int64_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  RowMat weight;                 // (C, C)
  Eigen::VectorXd bn_gamma, bn_beta;
  Eigen::VectorXd running_mean, running_var;

  RowMat weight_grad;
  Eigen::VectorXd gamma_grad, beta_grad;

  void zero_grad();
  void collect_params(std::vector<ParamView>& out);
};

/// weight = I, running stats (0, 1), beta = 0, gamma = sqrt(1+eps): the
/// Conv-BN composite is an exact identity in inference mode.
PolarizerParams identity_polarizer(int64_t channels, double eps = 1e-5,
                                   double momentum = 0.1);

struct PolarizerCache {
  Mode mode = Mode::kInfer;
  Tensor input;
  Tensor normalized;
  Eigen::VectorXd inv_std;
};

/// BN(weight ⊗ x): channel mix at every spatial location, then batch norm.
/// Train mode normalizes with batch statistics and updates the running
/// statistics; infer mode uses the running statistics and mutates nothing.
Tensor polarizer_apply(PolarizerParams& params, const Tensor& x, Mode mode,
                       PolarizerCache* cache = nullptr);

/// Backprop through the Conv-BN pair; accumulates parameter grads when
/// `accum_param_grads`, returns dL/dx when `want_input_grad`.
Tensor polarizer_backward(PolarizerParams& params, const PolarizerCache& cache,
                          const Tensor& grad_out, bool want_input_grad,
                          bool accum_param_grads);

uint64_t polarizer_checksum(const PolarizerParams& params);

/// Serialized parameters + JSON manifest carrying {channels, eps, momentum,
/// insertion_index, boundary}.
void save_polarizer(const std::filesystem::path& file, const PolarizerParams& params,
                    int insertion_index, const std::string& boundary_name);
std::pair<PolarizerParams, int> load_polarizer(const std::filesystem::path& file);

}  // namespace polarize
