#include "decorr/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "decorr/ops.hpp"
#include "decorr/rng.hpp"

namespace decorr {

void ModelSpec::validate() const {
  if (stages.size() < 2) throw ValueError("model needs at least 2 stages");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& stage = stages[s];
    if (stage.output_channels < 2) {
      throw ValueError("stage " + std::to_string(s) +
                       ": at least 2 output channels required");
    }
    if (stage.blocks.empty()) {
      throw ValueError("stage " + std::to_string(s) + ": empty block list");
    }
    bool has_conv = false;
    for (const auto& block : stage.blocks) {
      if (const auto* conv = std::get_if<ConvBlock>(&block)) {
        has_conv = true;
        if (conv->out_channels < 1 || conv->kernel < 1 || conv->stride < 1) {
          throw ValueError("stage " + std::to_string(s) + ": bad conv block");
        }
      }
    }
    if (!has_conv) {
      throw ValueError("stage " + std::to_string(s) + ": needs a conv block");
    }
    // The last conv decides the stage's channel count.
    std::size_t last_conv_channels = 0;
    for (const auto& block : stage.blocks) {
      if (const auto* conv = std::get_if<ConvBlock>(&block)) {
        last_conv_channels = conv->out_channels;
      }
    }
    if (last_conv_channels != stage.output_channels) {
      throw ValueError("stage " + std::to_string(s) +
                       ": output_channels does not match its last conv");
    }
  }
  if (classifier.hidden < 1) throw ValueError("classifier hidden width must be >= 1");
  if (classifier.classes < 2) throw ValueError("classifier needs >= 2 classes");
  if (input_shape[0] < 1 || input_shape[1] < 1 || input_shape[2] < 1) {
    throw ValueError("input shape extents must be positive");
  }
}

namespace {

void digest_append(std::ostringstream& os, const Block& block) {
  if (const auto* conv = std::get_if<ConvBlock>(&block)) {
    os << "conv(" << conv->out_channels << ',' << conv->kernel << ','
       << conv->stride << ',' << conv->padding << ',' << conv->bias << ')';
  } else if (const auto* bn = std::get_if<BatchNormBlock>(&block)) {
    os << "bn(" << bn->momentum << ',' << bn->eps << ')';
  } else if (std::holds_alternative<ReluBlock>(block)) {
    os << "relu";
  } else if (const auto* pool = std::get_if<MaxPoolBlock>(&block)) {
    os << "pool(" << pool->kernel << ',' << pool->stride << ')';
  }
}

}  // namespace

std::uint64_t spec_digest(const ModelSpec& spec) {
  std::ostringstream os;
  os << "in:" << spec.input_shape[0] << 'x' << spec.input_shape[1] << 'x'
     << spec.input_shape[2] << '|';
  for (const auto& stage : spec.stages) {
    for (const auto& block : stage.blocks) {
      digest_append(os, block);
      os << ',';
    }
    os << "out" << stage.output_channels << ",down" << stage.downsample << '|';
  }
  os << "fc:" << spec.classifier.hidden << ':' << spec.classifier.classes;
  const std::string s = os.str();
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a 64
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

namespace {

std::vector<double> kaiming_uniform(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  digest_ = spec_digest(spec_);
  Rng rng(seed);

  std::size_t channels = spec_.input_shape[0];
  std::size_t h = spec_.input_shape[1];
  std::size_t w = spec_.input_shape[2];

  auto add_param = [&](const std::string& name, Shape shape,
                       std::vector<double> values, bool decay) {
    params_.push_back({name, Tensor::from_data(std::move(shape),
                                               std::move(values), true),
                       decay});
    return params_.size() - 1;
  };
  auto add_buffer = [&](const std::string& name, Shape shape, double fill) {
    buffers_.push_back({name, Tensor::full(std::move(shape), fill)});
    return buffers_.size() - 1;
  };

  for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
    const auto& stage = spec_.stages[s];
    std::vector<BlockState> states;
    std::size_t conv_no = 0;
    for (const auto& block : stage.blocks) {
      const std::string prefix = "stage" + std::to_string(s) + ".";
      if (const auto* conv = std::get_if<ConvBlock>(&block)) {
        BlockState st{BlockState::Kind::conv, {}, {}, {}};
        st.conv.spec = *conv;
        const std::size_t fan_in = channels * conv->kernel * conv->kernel;
        const std::string base = prefix + "conv" + std::to_string(conv_no++);
        st.conv.weight_idx = add_param(
            base + ".weight",
            {conv->out_channels, channels, conv->kernel, conv->kernel},
            kaiming_uniform(conv->out_channels * fan_in, fan_in, rng), true);
        if (conv->bias) {
          st.conv.bias_idx = add_param(
              base + ".bias", {conv->out_channels},
              std::vector<double>(conv->out_channels, 0.0), false);
        }
        channels = conv->out_channels;
        const std::size_t hp = h + 2 * conv->padding;
        const std::size_t wp = w + 2 * conv->padding;
        if (conv->kernel > hp || conv->kernel > wp) {
          throw ValueError("stage " + std::to_string(s) +
                           ": kernel exceeds padded input");
        }
        h = (hp - conv->kernel) / conv->stride + 1;
        w = (wp - conv->kernel) / conv->stride + 1;
        states.push_back(std::move(st));
      } else if (const auto* bn = std::get_if<BatchNormBlock>(&block)) {
        BlockState st{BlockState::Kind::batch_norm, {}, {}, {}};
        st.bn.spec = *bn;
        const std::string base = prefix + "bn" + std::to_string(states.size());
        st.bn.gamma_idx = add_param(base + ".gamma", {channels},
                                    std::vector<double>(channels, 1.0), false);
        st.bn.beta_idx = add_param(base + ".beta", {channels},
                                   std::vector<double>(channels, 0.0), false);
        st.bn.mean_idx = add_buffer(base + ".running_mean", {channels}, 0.0);
        st.bn.var_idx = add_buffer(base + ".running_var", {channels}, 1.0);
        states.push_back(std::move(st));
      } else if (std::holds_alternative<ReluBlock>(block)) {
        states.push_back({BlockState::Kind::relu, {}, {}, {}});
      } else if (const auto* pool = std::get_if<MaxPoolBlock>(&block)) {
        BlockState st{BlockState::Kind::max_pool, {}, {}, {}};
        st.pool.spec = *pool;
        if (pool->kernel > h || pool->kernel > w) {
          throw ValueError("stage " + std::to_string(s) +
                           ": pool kernel exceeds input extent");
        }
        h = (h - pool->kernel) / pool->stride + 1;
        w = (w - pool->kernel) / pool->stride + 1;
        states.push_back(std::move(st));
      }
      if (h < 1 || w < 1) {
        throw ValueError("stage " + std::to_string(s) +
                         ": spatial extent collapsed to zero");
      }
    }
    stage_blocks_.push_back(std::move(states));
  }

  const std::size_t features = channels;
  const std::size_t hidden = spec_.classifier.hidden;
  const std::size_t classes = spec_.classifier.classes;
  fc1_w_ = add_param("classifier.fc1.weight", {features, hidden},
                     kaiming_uniform(features * hidden, features, rng), true);
  fc1_b_ = add_param("classifier.fc1.bias", {1, hidden},
                     std::vector<double>(hidden, 0.0), false);
  fc2_w_ = add_param("classifier.fc2.weight", {hidden, classes},
                     kaiming_uniform(hidden * classes, hidden, rng), true);
  fc2_b_ = add_param("classifier.fc2.bias", {1, classes},
                     std::vector<double>(classes, 0.0), false);
}

ForwardResult Model::forward(const Tensor& input,
                             const std::set<int>& tap_stages, Mode mode) {
  if (!input.defined() || input.rank() != 4) {
    throw ShapeError("forward: expects input [b,c,h,w]");
  }
  if (input.shape()[1] != spec_.input_shape[0] ||
      input.shape()[2] != spec_.input_shape[1] ||
      input.shape()[3] != spec_.input_shape[2]) {
    throw ShapeError("forward: input " + shape_str(input.shape()) +
                     " does not match the model's input shape");
  }
  for (int s : tap_stages) {
    if (s < 0 || static_cast<std::size_t>(s) >= spec_.stages.size()) {
      throw ValueError("forward: unknown stage index " + std::to_string(s));
    }
  }

  ForwardResult result;
  Tensor x = input;
  for (std::size_t s = 0; s < stage_blocks_.size(); ++s) {
    for (const auto& st : stage_blocks_[s]) {
      switch (st.kind) {
        case BlockState::Kind::conv: {
          x = conv2d(x, params_[st.conv.weight_idx].value, st.conv.spec.stride,
                     st.conv.spec.padding);
          if (st.conv.spec.bias) {
            const std::size_t co = st.conv.spec.out_channels;
            x = add(x, reshape(params_[st.conv.bias_idx].value, {1, co, 1, 1}));
          }
          break;
        }
        case BlockState::Kind::batch_norm:
          x = batch_norm2d(x, params_[st.bn.gamma_idx].value,
                           params_[st.bn.beta_idx].value,
                           buffers_[st.bn.mean_idx].value,
                           buffers_[st.bn.var_idx].value, mode == Mode::train,
                           st.bn.spec.momentum, st.bn.spec.eps);
          break;
        case BlockState::Kind::relu:
          x = relu(x);
          break;
        case BlockState::Kind::max_pool:
          x = max_pool2d(x, st.pool.spec.kernel, st.pool.spec.stride);
          break;
      }
    }
    if (tap_stages.count(static_cast<int>(s))) {
      result.taps.push_back({x, static_cast<int>(s)});
    }
  }

  Tensor pooled = mean(x, {2, 3}, false);  // global average pool -> [b,d]
  Tensor hidden = relu(add(matmul(pooled, params_[fc1_w_].value),
                           params_[fc1_b_].value));
  result.logits = add(matmul(hidden, params_[fc2_w_].value),
                      params_[fc2_b_].value);
  return result;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  return Model(spec, seed);
}

std::vector<std::string> builtin_spec_names() { return {"mini3", "mini5"}; }

ModelSpec builtin_spec(const std::string& name,
                       std::array<std::size_t, 3> input_shape,
                       std::size_t classes) {
  auto stage = [](std::size_t out, std::size_t stride) {
    StageSpec s;
    s.blocks = {ConvBlock{out, 3, stride, 1, false}, BatchNormBlock{},
                ReluBlock{}};
    s.output_channels = out;
    s.downsample = stride > 1;
    return s;
  };

  ModelSpec spec;
  spec.input_shape = input_shape;
  spec.classifier.classes = classes;
  if (name == "mini3") {
    spec.stages = {stage(8, 1), stage(16, 2), stage(32, 2)};
    spec.classifier.hidden = 64;
  } else if (name == "mini5") {
    spec.stages = {stage(8, 1), stage(16, 2), stage(32, 2), stage(64, 2),
                   stage(64, 2)};
    spec.classifier.hidden = 128;
  } else {
    throw ValueError("unknown model spec '" + name + "'");
  }
  return spec;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  bool at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw IoError("checkpoint truncated");
    }
    return s;
  }

 private:
  unsigned char byte() {
    const int c = in_.get();
    if (c == std::char_traits<char>::eof()) throw IoError("checkpoint truncated");
    return static_cast<unsigned char>(c);
  }
  std::istream& in_;
};

constexpr char kCheckpointMagic[9] = "MFDCKPT1";

void append_entry(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(out, e);
  for (double v : t.values()) put_f64(out, v);
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::string blob;
  blob.append(kCheckpointMagic, 8);
  put_u64(blob, model.digest());
  for (const auto& p : model.parameters()) append_entry(blob, p.name, p.value);
  for (const auto& b : model.buffers()) append_entry(blob, b.name, b.value);

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(Model& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader reader(in);
  if (reader.bytes(8) != std::string(kCheckpointMagic, 8)) {
    throw IoError("bad checkpoint magic in " + path.string());
  }
  const std::uint64_t digest = reader.u64();
  if (digest != model.digest()) {
    throw ConfigError("checkpoint " + path.string() +
                      " was written for a different model spec");
  }

  std::map<std::string, Tensor*> targets;
  for (auto& p : model.parameters()) targets[p.name] = &p.value;
  for (auto& b : model.buffers()) targets[b.name] = &b.value;

  std::set<std::string> seen;
  while (!reader.at_eof()) {
    const std::uint32_t name_len = reader.u32();
    const std::string name = reader.bytes(name_len);
    const std::uint32_t rank = reader.u32();
    Shape shape(rank);
    for (auto& e : shape) e = reader.u64();
    const std::size_t numel = shape_numel(shape);
    std::vector<double> values(numel);
    for (auto& v : values) v = reader.f64();

    auto it = targets.find(name);
    if (it == targets.end()) {
      throw IoError("checkpoint entry '" + name + "' not present in the model");
    }
    if (!seen.insert(name).second) {
      throw IoError("duplicate checkpoint entry '" + name + "'");
    }
    if (it->second->shape() != shape) {
      throw IoError("checkpoint entry '" + name + "' has shape " +
                    shape_str(shape) + ", model expects " +
                    shape_str(it->second->shape()));
    }
    auto dst = it->second->values_mut();
    for (std::size_t i = 0; i < numel; ++i) dst[i] = detail::quantize(values[i]);
  }
  if (seen.size() != targets.size()) {
    throw IoError("checkpoint is missing " +
                  std::to_string(targets.size() - seen.size()) +
                  " model entries");
  }
}

}  // namespace decorr
