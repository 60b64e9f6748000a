#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "polarize/tensor.hpp"

namespace polarize {

struct DatasetMeta {
  int64_t num_classes = 0;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;

  int64_t sample_size() const { return channels * height * width; }
  bool operator==(const DatasetMeta&) const = default;
};

void validate_meta(const DatasetMeta& meta);

/// Labelled image set. `images` has shape (N, C, H, W), values in [0,1].
struct Dataset {
  DatasetMeta meta;
  Tensor images;
  std::vector<int64_t> labels;

  int64_t size() const { return images.n; }
};

void validate_dataset(const Dataset& ds);

/// On-disk layout: <dir>/images.bin (N*C*H*W float32 little-endian),
/// <dir>/labels.bin (N int64 little-endian), <dir>/meta.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

/// Deterministic 10-pattern shape dataset (stripes, checkerboard, disk, ring,
/// cross, ...) with per-image color, phase and noise jitter. Labels are
/// balanced round-robin. Supports 2 <= num_classes <= 10 and images >= 12x12.
Dataset make_synthetic_dataset(const DatasetMeta& meta, int64_t count, uint64_t seed);

}  // namespace polarize
