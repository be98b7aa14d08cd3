#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "decorr/tensor.hpp"

namespace decorr {

// Per-channel standardization statistics, always taken from the training
// split and applied unchanged to evaluation data.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Dataset {
  Tensor images;  // [n,c,h,w], standardized
  std::vector<int> labels;
  int class_count = 0;
  NormStats stats;

  std::size_t size() const { return images.shape()[0]; }
  std::size_t channels() const { return images.shape()[1]; }
  std::size_t height() const { return images.shape()[2]; }
  std::size_t width() const { return images.shape()[3]; }
};

// MNIST-style IDX pair (big-endian magic 0x803 for images, 0x801 for
// labels). Pixels are scaled to [0,1] and then standardized; when `stats`
// is null the statistics come from this data, otherwise they are applied.
// `limit` > 0 keeps only the first `limit` examples.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path,
                 const NormStats* stats = nullptr, std::size_t limit = 0);

// CIFAR-10 binary batches: 3073-byte records of one label byte followed by
// 32x32 R, G, B planes.
Dataset load_cifar10(const std::vector<std::filesystem::path>& batch_files,
                     const NormStats* stats = nullptr, std::size_t limit = 0);

// Class-conditional Gaussian-blob images, 3x16x16, linearly separable by
// construction and deterministic in (seed, stream). Streams share the class
// structure but draw independent samples, which is how the train/test
// splits are produced.
Dataset synthetic_dataset(int classes, int per_class, std::uint64_t seed,
                          int stream = 0, const NormStats* stats = nullptr);

struct AugmentationPolicy {
  bool enabled = false;
  std::size_t pad_pixels = 4;
  std::array<std::size_t, 2> crop_to = {0, 0};  // {0,0} means original size
  double hflip_probability = 0.5;
  bool zero_fill = false;  // reflection padding otherwise
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

// Deterministic batch iterator. Each (shuffle_seed, epoch) pair fixes the
// permutation and every sample's augmentation draws, so epochs replay
// bit-identically. Training drops the final short batch; evaluation keeps
// it and iterates in dataset order.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, std::size_t batch_size,
              std::uint64_t shuffle_seed, std::size_t epoch,
              AugmentationPolicy policy, bool drop_last, bool shuffled = true);

  std::optional<Batch> next();
  std::size_t batch_count() const;

 private:
  const Dataset* dataset_;
  std::size_t batch_size_;
  std::uint64_t shuffle_seed_;
  std::size_t epoch_;
  AugmentationPolicy policy_;
  bool drop_last_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace decorr
