#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "decorr/losses.hpp"
#include "decorr/tensor.hpp"

namespace decorr {

struct ConvBlock {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool bias = false;
};

struct BatchNormBlock {
  double momentum = 0.1;
  double eps = 1e-5;
};

struct ReluBlock {};

struct MaxPoolBlock {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

using Block = std::variant<ConvBlock, BatchNormBlock, ReluBlock, MaxPoolBlock>;

struct StageSpec {
  std::vector<Block> blocks;
  std::size_t output_channels = 0;
  bool downsample = false;
};

struct ClassifierSpec {
  std::size_t hidden = 64;
  std::size_t classes = 10;
};

struct ModelSpec {
  std::vector<StageSpec> stages;
  ClassifierSpec classifier;
  std::array<std::size_t, 3> input_shape = {3, 32, 32};  // c,h,w

  void validate() const;  // structural checks; spatial checks happen at build
};

// Stable 64-bit digest of the full structural description; stored in
// checkpoints to reject loads into a mismatched architecture.
std::uint64_t spec_digest(const ModelSpec& spec);

struct ForwardResult {
  Tensor logits;
  std::vector<StageActivations> taps;  // ascending stage order
};

enum class Mode { train, eval };

struct Parameter {
  std::string name;
  Tensor value;
  bool weight_decay = false;  // conv/linear weights only
};

struct RunningBuffer {
  std::string name;
  Tensor value;
};

// A built staged CNN: per-stage blocks followed by global average pooling
// and a two-layer classifier head. Parameters are owned here and mutated
// only through values_mut (the optimizer) or checkpoint loads.
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t digest() const { return digest_; }

  ForwardResult forward(const Tensor& input, const std::set<int>& tap_stages,
                        Mode mode);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<RunningBuffer>& buffers() { return buffers_; }
  const std::vector<RunningBuffer>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;

  void zero_grad();

 private:
  struct ConvState {
    ConvBlock spec;
    std::size_t weight_idx = 0;
    std::size_t bias_idx = 0;  // valid only when spec.bias
  };
  struct BatchNormState {
    BatchNormBlock spec;
    std::size_t gamma_idx = 0, beta_idx = 0;
    std::size_t mean_idx = 0, var_idx = 0;
  };
  struct PoolState {
    MaxPoolBlock spec;
  };
  struct BlockState {
    enum class Kind { conv, batch_norm, relu, max_pool } kind;
    ConvState conv;
    BatchNormState bn;
    PoolState pool;
  };

  ModelSpec spec_;
  std::uint64_t digest_ = 0;
  std::vector<std::vector<BlockState>> stage_blocks_;
  std::vector<Parameter> params_;
  std::vector<RunningBuffer> buffers_;
  std::size_t fc1_w_ = 0, fc1_b_ = 0, fc2_w_ = 0, fc2_b_ = 0;
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

// Named architecture catalog ("mini3", "mini5") instantiated for a given
// input shape and class count. Unknown names raise ValueError.
std::vector<std::string> builtin_spec_names();
ModelSpec builtin_spec(const std::string& name,
                       std::array<std::size_t, 3> input_shape,
                       std::size_t classes);

// Checkpoint container: magic "MFDCKPT1", u64 LE spec digest, then for each
// parameter and running buffer: u32 LE name length, name bytes, u32 LE rank,
// rank x u64 LE extents, and the values as little-endian IEEE 64-bit,
// until end of file.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
void load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace decorr
