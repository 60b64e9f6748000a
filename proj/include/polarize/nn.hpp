#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "polarize/dataset.hpp"
#include "polarize/poison.hpp"
#include "polarize/tensor.hpp"

namespace polarize {

enum class Mode { kTrain, kInfer };

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named view of one parameter (or non-trainable buffer, grad == nullptr).
struct ParamView {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;  // nullptr for buffers (e.g. BN running stats)
  int64_t size = 0;
};

/// Per-call storage for whatever a layer's backward pass needs.
struct LayerCache {
  Mode mode = Mode::kInfer;
  Tensor input;
  Tensor normalized;            // BN x-hat
  Eigen::VectorXd inv_std;      // BN
  std::vector<int32_t> argmax;  // max-pool selections
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string name() const = 0;
  /// In train mode BN layers update running statistics. `cache` must be
  /// non-null if backward will be called for this pass.
  virtual Tensor forward(const Tensor& x, Mode mode, LayerCache* cache) = 0;
  /// Accumulates parameter gradients when `accum_param_grads` and the layer
  /// has any; returns dL/dx when `want_input_grad` (else an empty tensor).
  virtual Tensor backward(const LayerCache& cache, const Tensor& grad_out,
                          bool want_input_grad, bool accum_param_grads) = 0;
  virtual void collect_params(std::vector<ParamView>& out) { (void)out; }
  virtual void zero_grad() {}
  virtual std::array<int64_t, 3> output_shape(std::array<int64_t, 3> chw) const = 0;
};

std::unique_ptr<Layer> make_conv2d(int64_t in_ch, int64_t out_ch, std::string name,
                                   std::mt19937_64& rng, int64_t ksize = 3);
std::unique_ptr<Layer> make_batchnorm2d(int64_t channels, std::string name,
                                        double eps = 1e-5, double momentum = 0.1);
std::unique_ptr<Layer> make_relu(std::string name);
std::unique_ptr<Layer> make_maxpool2(std::string name);
std::unique_ptr<Layer> make_linear(int64_t in_features, int64_t out_features,
                                   std::string name, std::mt19937_64& rng);

/// A legal polarizer insertion point between two top-level units.
struct Boundary {
  std::string name;    // "block1".."block4"
  int layer_end = 0;   // flat index one past the boundary's last layer
  int64_t channels = 0, height = 0, width = 0;
};

/// Small layered CNN: four conv blocks (conv-BN-ReLU[-pool]) plus a linear
/// head. Boundaries after each block are the polarizer insertion points.
class CnnModel {
 public:
  DatasetMeta meta;
  std::vector<std::unique_ptr<Layer>> layers;
  std::vector<Boundary> boundaries;  // size 4
  std::vector<int64_t> block_channels;
  uint64_t init_seed = 0;

  /// Number of top-level units (blocks + head, each with a named boundary);
  /// insertion index k is valid in [1, num_units()-1].
  int num_units() const { return static_cast<int>(boundaries.size()); }

  /// Runs layers [first, last) (flat indices; last == -1 means all).
  Tensor forward(const Tensor& x, Mode mode, std::vector<LayerCache>* caches = nullptr,
                 int first = 0, int last = -1);
  /// Logits (B, K, 1, 1) in inference mode.
  Tensor logits(const Tensor& x) { return forward(x, Mode::kInfer); }

  void collect_params(std::vector<ParamView>& out);
  void zero_grad();

  CnnModel clone() const;
};

/// Argmax with ties broken toward the smallest class index.
int64_t argmax_class(std::span<const double> logits);
std::vector<int64_t> predict_classes(const Tensor& logits);
/// (logits, predicted classes) for a batch, inference mode.
std::pair<Tensor, std::vector<int64_t>> predict(CnnModel& model, const Tensor& batch);

/// Channel widths default to {32, 64, 128, 128}; each block halves spatial
/// dims while they are >= 4 and even. Input must be at least 8x8.
CnnModel build_cnn(const DatasetMeta& meta,
                   const std::vector<int64_t>& channels = {32, 64, 128, 128},
                   uint64_t seed = 0);

/// FNV-1a over every parameter and buffer; the freeze-contract checksum.
uint64_t state_checksum(const CnnModel& model);

struct TrainHyper {
  int epochs = 30;
  int batch_size = 128;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t seed = 0;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double acc = std::numeric_limits<double>::quiet_NaN();
  double asr = std::numeric_limits<double>::quiet_NaN();
};

/// Optional held-out evaluation run after each epoch (ACC on `clean_test`,
/// ASR via trigger+plan). `max_eval` limits the evaluated prefix (-1 = all).
struct TrainEvalHooks {
  const Dataset* clean_test = nullptr;
  const TriggerSpec* trigger = nullptr;
  const PoisonPlan* plan = nullptr;
  int64_t max_eval = -1;
};

/// Plain SGD-with-momentum cross-entropy training (used for both the
/// backdoored model and its clean twin). Throws TrainingFailure if the loss
/// becomes non-finite.
std::vector<EpochStats> train_model(CnnModel& model, const Dataset& data,
                                    const TrainHyper& hyper,
                                    const TrainEvalHooks* hooks = nullptr);

/// SGD with momentum (and optional weight decay) over a set of ParamViews.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}
  void step(std::vector<ParamView>& params);

 private:
  double lr_, momentum_, weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

/// Checkpoint: binary weights (name/size/f64 payload per entry) plus a JSON
/// sidecar {arch, channels, meta, seed, epoch, metrics}.
void save_checkpoint(const std::filesystem::path& ckpt_file, CnnModel& model, int epoch,
                     const std::map<std::string, double>& metrics);
CnnModel load_checkpoint(const std::filesystem::path& ckpt_file);

}  // namespace polarize
