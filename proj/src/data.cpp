#include "decorr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "decorr/rng.hpp"

namespace decorr {

namespace {

// Standardize raw [n,c,h,w] pixel data in place; returns the stats used.
NormStats standardize(std::vector<double>& data, std::size_t n, std::size_t c,
                      std::size_t hw, const NormStats* given) {
  NormStats stats;
  if (given) {
    if (given->mean.size() != c || given->stddev.size() != c) {
      throw DataError("normalization stats channel count mismatch");
    }
    stats = *given;
  } else {
    stats.mean.assign(c, 0.0);
    stats.stddev.assign(c, 0.0);
    const double count = static_cast<double>(n * hw);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = &data[(i * c + ch) * hw];
        for (std::size_t p = 0; p < hw; ++p) stats.mean[ch] += plane[p];
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) stats.mean[ch] /= count;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = &data[(i * c + ch) * hw];
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = plane[p] - stats.mean[ch];
          stats.stddev[ch] += d * d;
        }
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      stats.stddev[ch] = std::sqrt(stats.stddev[ch] / count);
      if (stats.stddev[ch] < 1e-12) stats.stddev[ch] = 1.0;  // constant channel
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* plane = &data[(i * c + ch) * hw];
      const double m = stats.mean[ch], inv = 1.0 / stats.stddev[ch];
      for (std::size_t p = 0; p < hw; ++p) plane[p] = (plane[p] - m) * inv;
    }
  }
  return stats;
}

Dataset finish_dataset(std::vector<double> data, std::vector<int> labels,
                       std::size_t c, std::size_t h, std::size_t w,
                       int class_count, const NormStats* stats) {
  const std::size_t n = labels.size();
  Dataset ds;
  ds.stats = standardize(data, n, c, h * w, stats);
  ds.images = Tensor::from_data({n, c, h, w}, std::move(data));
  ds.labels = std::move(labels);
  ds.class_count = class_count;
  return ds;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path,
                 const NormStats* stats, std::size_t limit) {
  const auto img = read_file(images_path);
  const auto lbl = read_file(labels_path);
  if (img.size() < 16) throw DataError(images_path.string() + ": truncated IDX header");
  if (lbl.size() < 8) throw DataError(labels_path.string() + ": truncated IDX header");
  if (be32(img.data()) != 0x00000803u) {
    throw DataError(images_path.string() + ": bad IDX image magic");
  }
  if (be32(lbl.data()) != 0x00000801u) {
    throw DataError(labels_path.string() + ": bad IDX label magic");
  }
  const std::size_t n_img = be32(img.data() + 4);
  const std::size_t h = be32(img.data() + 8);
  const std::size_t w = be32(img.data() + 12);
  const std::size_t n_lbl = be32(lbl.data() + 4);
  if (n_img != n_lbl) {
    throw DataError("IDX image count " + std::to_string(n_img) +
                    " != label count " + std::to_string(n_lbl));
  }
  if (img.size() != 16 + n_img * h * w) {
    throw DataError(images_path.string() + ": truncated IDX pixel data");
  }
  if (lbl.size() != 8 + n_lbl) {
    throw DataError(labels_path.string() + ": truncated IDX label data");
  }
  std::size_t n = n_img;
  if (limit > 0 && limit < n) n = limit;
  if (n == 0) throw DataError(images_path.string() + ": empty IDX dataset");

  std::vector<double> data(n * h * w);
  for (std::size_t i = 0; i < n * h * w; ++i) {
    data[i] = static_cast<double>(img[16 + i]) / 255.0;
  }
  std::vector<int> labels(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lbl[8 + i];
    max_label = std::max(max_label, labels[i]);
  }
  return finish_dataset(std::move(data), std::move(labels), 1, h, w,
                        max_label + 1, stats);
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& batch_files,
                     const NormStats* stats, std::size_t limit) {
  constexpr std::size_t kRecord = 3073;  // 1 label byte + 3*1024 pixels
  constexpr std::size_t kDim = 32;
  if (batch_files.empty()) throw DataError("no CIFAR-10 batch files given");
  std::vector<double> data;
  std::vector<int> labels;
  for (const auto& path : batch_files) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw DataError(path.string() + ": size is not a multiple of 3073 bytes");
    }
    const std::size_t records = bytes.size() / kRecord;
    for (std::size_t r = 0; r < records; ++r) {
      if (limit > 0 && labels.size() >= limit) break;
      const unsigned char* rec = bytes.data() + r * kRecord;
      if (rec[0] > 9) {
        throw DataError(path.string() + ": label byte " + std::to_string(rec[0]) +
                        " out of range");
      }
      labels.push_back(rec[0]);
      for (std::size_t p = 0; p < 3 * kDim * kDim; ++p) {
        data.push_back(static_cast<double>(rec[1 + p]) / 255.0);
      }
    }
  }
  return finish_dataset(std::move(data), std::move(labels), 3, kDim, kDim, 10,
                        stats);
}

Dataset synthetic_dataset(int classes, int per_class, std::uint64_t seed,
                          int stream, const NormStats* stats) {
  if (classes < 2) throw ValueError("synthetic_dataset: classes must be >= 2");
  if (per_class < 1) throw ValueError("synthetic_dataset: per_class must be >= 1");
  constexpr std::size_t kC = 3, kH = 16, kW = 16;
  constexpr double kSigma = 2.5;
  constexpr double kNoise = 0.45;

  // Class structure depends on the seed only, never on the stream: blob
  // centers come from a shuffled 4x4 grid and channel emphasis cycles
  // through three patterns, so up to 48 classes stay distinct.
  Rng structure_rng(Rng::mix(seed, 0x4D45414E5350ull));
  std::vector<std::size_t> slots(16);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  for (std::size_t i = slots.size(); i > 1; --i) {
    std::swap(slots[i - 1], slots[structure_rng.integer(i)]);
  }
  const double emphasis[3][3] = {
      {1.4, 0.7, 0.7}, {0.7, 1.4, 0.7}, {0.7, 0.7, 1.4}};

  struct ClassShape {
    double cy, cx;
    double amp[3];
  };
  std::vector<ClassShape> shapes(classes);
  for (int c = 0; c < classes; ++c) {
    const std::size_t slot = slots[c % 16];
    const auto& emph = emphasis[(c / 16) % 3];
    shapes[c].cy = 3.0 + 3.0 * static_cast<double>(slot / 4);
    shapes[c].cx = 3.0 + 3.0 * static_cast<double>(slot % 4);
    for (int ch = 0; ch < 3; ++ch) {
      shapes[c].amp[ch] = emph[ch] * structure_rng.uniform(0.9, 1.1);
    }
  }

  const std::size_t n = static_cast<std::size_t>(classes) * per_class;
  std::vector<double> data(n * kC * kH * kW);
  std::vector<int> labels(n);
  for (int c = 0; c < classes; ++c) {
    for (int s = 0; s < per_class; ++s) {
      const std::size_t idx = static_cast<std::size_t>(c) * per_class + s;
      labels[idx] = c;
      Rng rng(Rng::mix(seed, (static_cast<std::uint64_t>(stream) << 32) | idx,
                       0xB10B5ull));
      double* img = &data[idx * kC * kH * kW];
      for (std::size_t ch = 0; ch < kC; ++ch) {
        for (std::size_t y = 0; y < kH; ++y) {
          for (std::size_t x = 0; x < kW; ++x) {
            const double dy = static_cast<double>(y) - shapes[c].cy;
            const double dx = static_cast<double>(x) - shapes[c].cx;
            const double bump =
                shapes[c].amp[ch] *
                std::exp(-(dy * dy + dx * dx) / (2.0 * kSigma * kSigma));
            img[(ch * kH + y) * kW + x] = bump + kNoise * rng.normal();
          }
        }
      }
    }
  }
  return finish_dataset(std::move(data), std::move(labels), kC, kH, kW,
                        classes, stats);
}

BatchStream::BatchStream(const Dataset& dataset, std::size_t batch_size,
                         std::uint64_t shuffle_seed, std::size_t epoch,
                         AugmentationPolicy policy, bool drop_last,
                         bool shuffled)
    : dataset_(&dataset),
      batch_size_(batch_size),
      shuffle_seed_(shuffle_seed),
      epoch_(epoch),
      policy_(policy),
      drop_last_(drop_last) {
  const std::size_t n = dataset.size();
  if (batch_size < 1) throw ValueError("batch_size must be >= 1");
  if (batch_size > n) {
    throw ValueError("batch_size " + std::to_string(batch_size) +
                     " exceeds dataset size " + std::to_string(n));
  }
  if (policy_.enabled) {
    const std::size_t crop_h = policy_.crop_to[0] ? policy_.crop_to[0]
                                                  : dataset.height();
    const std::size_t crop_w = policy_.crop_to[1] ? policy_.crop_to[1]
                                                  : dataset.width();
    if (crop_h > dataset.height() + 2 * policy_.pad_pixels ||
        crop_w > dataset.width() + 2 * policy_.pad_pixels) {
      throw ValueError("crop size exceeds the padded image extent");
    }
  }
  order_.resize(n);
  for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  if (shuffled) {
    Rng rng(Rng::mix(shuffle_seed_, epoch_, 0x5A5A5Aull));
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order_[i - 1], order_[rng.integer(i)]);
    }
  }
}

std::size_t BatchStream::batch_count() const {
  const std::size_t n = order_.size();
  return drop_last_ ? n / batch_size_ : (n + batch_size_ - 1) / batch_size_;
}

namespace {

// Reflect (mirror without edge repeat) an out-of-range coordinate into
// [0, extent); single-pixel extents clamp.
std::size_t reflect_index(long t, long extent) {
  if (extent == 1) return 0;
  while (t < 0 || t >= extent) {
    if (t < 0) t = -t;
    if (t >= extent) t = 2 * extent - 2 - t;
  }
  return static_cast<std::size_t>(t);
}

}  // namespace

std::optional<Batch> BatchStream::next() {
  const std::size_t n = order_.size();
  if (cursor_ >= n) return std::nullopt;
  std::size_t take = std::min(batch_size_, n - cursor_);
  if (drop_last_ && take < batch_size_) return std::nullopt;

  const std::size_t c = dataset_->channels();
  const std::size_t h = dataset_->height();
  const std::size_t w = dataset_->width();
  const std::size_t crop_h =
      policy_.enabled && policy_.crop_to[0] ? policy_.crop_to[0] : h;
  const std::size_t crop_w =
      policy_.enabled && policy_.crop_to[1] ? policy_.crop_to[1] : w;
  const std::size_t out_h = policy_.enabled ? crop_h : h;
  const std::size_t out_w = policy_.enabled ? crop_w : w;

  std::vector<double> out(take * c * out_h * out_w);
  std::vector<int> labels(take);
  const auto src = dataset_->images.values();

  for (std::size_t b = 0; b < take; ++b) {
    const std::size_t idx = order_[cursor_ + b];
    labels[b] = dataset_->labels[idx];
    const double* img = &src[idx * c * h * w];
    double* dst = &out[b * c * out_h * out_w];
    if (!policy_.enabled) {
      std::copy(img, img + c * h * w, dst);
      continue;
    }
    Rng rng(Rng::mix(shuffle_seed_, epoch_, 0xA6000000000ull + idx));
    const std::size_t pad = policy_.pad_pixels;
    const std::size_t oy = rng.integer(h + 2 * pad - crop_h + 1);
    const std::size_t ox = rng.integer(w + 2 * pad - crop_w + 1);
    const bool flip = rng.bernoulli(policy_.hflip_probability);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = img + ch * h * w;
      double* dplane = dst + ch * out_h * out_w;
      for (std::size_t y = 0; y < crop_h; ++y) {
        const long sy = static_cast<long>(oy + y) - static_cast<long>(pad);
        for (std::size_t x = 0; x < crop_w; ++x) {
          const std::size_t xe = flip ? crop_w - 1 - x : x;
          const long sx = static_cast<long>(ox + xe) - static_cast<long>(pad);
          double v;
          if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 &&
              sx < static_cast<long>(w)) {
            v = plane[sy * w + sx];
          } else if (policy_.zero_fill) {
            v = 0.0;
          } else {
            v = plane[reflect_index(sy, static_cast<long>(h)) * w +
                      reflect_index(sx, static_cast<long>(w))];
          }
          dplane[y * out_w + x] = v;
        }
      }
    }
  }
  cursor_ += take;
  return Batch{Tensor::from_data({take, c, out_h, out_w}, std::move(out)),
               std::move(labels)};
}

}  // namespace decorr
