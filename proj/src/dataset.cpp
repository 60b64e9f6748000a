#include "polarize/dataset.hpp"

#include <bit>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace polarize {

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts unsupported");

void validate_meta(const DatasetMeta& meta) {
  PZ_REQUIRE(meta.num_classes >= 2, "meta.num_classes must be >= 2");
  PZ_REQUIRE(meta.channels >= 1 && meta.height >= 1 && meta.width >= 1,
             "meta dims must be positive");
}

void validate_dataset(const Dataset& ds) {
  validate_meta(ds.meta);
  PZ_REQUIRE(ds.images.c == ds.meta.channels && ds.images.h == ds.meta.height &&
                 ds.images.w == ds.meta.width,
             "image tensor shape does not match meta");
  PZ_REQUIRE(static_cast<int64_t>(ds.labels.size()) == ds.images.n,
             "label count does not match image count");
  for (int64_t y : ds.labels)
    PZ_REQUIRE(y >= 0 && y < ds.meta.num_classes, "label out of range");
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  validate_dataset(ds);
  std::filesystem::create_directories(dir);

  {
    std::ofstream f(dir / "images.bin", std::ios::binary);
    PZ_REQUIRE(f.good(), "cannot open images.bin for writing");
    std::vector<float> buf(ds.images.v.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(ds.images.v[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  {
    std::ofstream f(dir / "labels.bin", std::ios::binary);
    PZ_REQUIRE(f.good(), "cannot open labels.bin for writing");
    f.write(reinterpret_cast<const char*>(ds.labels.data()),
            static_cast<std::streamsize>(ds.labels.size() * sizeof(int64_t)));
  }
  {
    nlohmann::json j{{"num_classes", ds.meta.num_classes},
                     {"channels", ds.meta.channels},
                     {"height", ds.meta.height},
                     {"width", ds.meta.width}};
    std::ofstream f(dir / "meta.json");
    f << j.dump(2) << "\n";
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  PZ_REQUIRE(std::filesystem::exists(dir / "meta.json"),
             "no dataset at " + dir.string() + " (meta.json missing)");
  Dataset ds;
  {
    std::ifstream f(dir / "meta.json");
    nlohmann::json j = nlohmann::json::parse(f);
    ds.meta.num_classes = j.at("num_classes").get<int64_t>();
    ds.meta.channels = j.at("channels").get<int64_t>();
    ds.meta.height = j.at("height").get<int64_t>();
    ds.meta.width = j.at("width").get<int64_t>();
  }
  validate_meta(ds.meta);

  const auto img_bytes = std::filesystem::file_size(dir / "images.bin");
  const int64_t per = ds.meta.sample_size() * static_cast<int64_t>(sizeof(float));
  PZ_REQUIRE(per > 0 && img_bytes % static_cast<uint64_t>(per) == 0,
             "images.bin size is not a multiple of the sample size");
  const int64_t n = static_cast<int64_t>(img_bytes) / per;

  ds.images = Tensor(n, ds.meta.channels, ds.meta.height, ds.meta.width);
  {
    std::ifstream f(dir / "images.bin", std::ios::binary);
    std::vector<float> buf(static_cast<size_t>(n) * ds.meta.sample_size());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    PZ_REQUIRE(f.gcount() == static_cast<std::streamsize>(buf.size() * sizeof(float)),
               "short read on images.bin");
    for (size_t i = 0; i < buf.size(); ++i) ds.images.v[i] = buf[i];
  }
  {
    const auto lbl_bytes = std::filesystem::file_size(dir / "labels.bin");
    PZ_REQUIRE(lbl_bytes == static_cast<uint64_t>(n) * sizeof(int64_t),
               "labels.bin count does not match images.bin");
    ds.labels.resize(static_cast<size_t>(n));
    std::ifstream f(dir / "labels.bin", std::ios::binary);
    f.read(reinterpret_cast<char*>(ds.labels.data()),
           static_cast<std::streamsize>(ds.labels.size() * sizeof(int64_t)));
  }
  validate_dataset(ds);
  return ds;
}

namespace {

// One binary pattern per class on the (H, W) grid, jittered by (dy, dx).
bool pattern_on(int64_t cls, int64_t h, int64_t w, int64_t H, int64_t W, int dy, int dx) {
  const double ch = (H - 1) / 2.0 + dy, cw = (W - 1) / 2.0 + dx;
  const double rh = std::hypot(h - ch, w - cw);
  const double rmax = std::min(H, W) / 2.0;
  switch (cls) {
    case 0: return ((h + dy) / 2) % 2 == 0;                        // horizontal stripes
    case 1: return ((w + dx) / 2) % 2 == 0;                        // vertical stripes
    case 2: return (((h + w + dy) / 2) % 2) == 0;                  // diagonal stripes
    case 3: return (((h + dy) / 3 + (w + dx) / 3) % 2) == 0;       // checkerboard
    case 4: return rh < 0.45 * rmax;                               // disk
    case 5: return rh > 0.5 * rmax && rh < 0.85 * rmax;            // ring
    case 6: return std::abs(h - ch) < 1.5 || std::abs(w - cw) < 1.5;  // plus
    case 7:                                                        // corner blocks
      return (h < H / 3 || h >= H - H / 3) && (w < W / 3 || w >= W - W / 3);
    case 8:                                                        // centered square
      return std::abs(h - ch) < H / 4.0 && std::abs(w - cw) < W / 4.0;
    case 9:                                                        // X cross
      return std::abs((h - ch) - (w - cw)) < 1.5 || std::abs((h - ch) + (w - cw)) < 1.5;
    default: return false;
  }
}

}  // namespace

Dataset make_synthetic_dataset(const DatasetMeta& meta, int64_t count, uint64_t seed) {
  validate_meta(meta);
  PZ_REQUIRE(meta.num_classes <= 10, "synthetic generator supports at most 10 classes");
  PZ_REQUIRE(meta.height >= 12 && meta.width >= 12,
             "synthetic generator needs images of at least 12x12");
  PZ_REQUIRE(count >= 0, "count must be non-negative");

  Dataset ds;
  ds.meta = meta;
  ds.images = Tensor(count, meta.channels, meta.height, meta.width);
  ds.labels.resize(static_cast<size_t>(count));

  const int64_t H = meta.height, W = meta.width, C = meta.channels;
  for (int64_t i = 0; i < count; ++i) {
    auto rng = make_rng(seed, static_cast<uint64_t>(i));
    std::uniform_real_distribution<double> ufg(0.52, 0.95), ubg(0.05, 0.48);
    std::uniform_int_distribution<int> jitter(-3, 3);
    std::normal_distribution<double> noise(0.0, 0.14);

    const int64_t cls = i % meta.num_classes;
    ds.labels[static_cast<size_t>(i)] = cls;
    const int dy = jitter(rng), dx = jitter(rng);
    std::vector<double> fg(C), bg(C);
    for (int64_t ch = 0; ch < C; ++ch) {
      fg[ch] = ufg(rng);
      bg[ch] = ubg(rng);
    }
    for (int64_t ch = 0; ch < C; ++ch)
      for (int64_t hh = 0; hh < H; ++hh)
        for (int64_t ww = 0; ww < W; ++ww) {
          const bool on = pattern_on(cls, hh, ww, H, W, dy, dx);
          double x = (on ? fg[ch] : bg[ch]) + noise(rng);
          ds.images.at(i, ch, hh, ww) = std::clamp(x, 0.0, 1.0);
        }
  }
  return ds;
}

}  // namespace polarize
