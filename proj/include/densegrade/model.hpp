#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "densegrade/ops.hpp"
#include "densegrade/rng.hpp"
#include "densegrade/tensor.hpp"

namespace densegrade {

// Architecture hyperparameters. The realized layout is
//   stem (7x7/2 conv -> BN -> ReLU -> 3x3/2 max pool)
//   -> [dense block -> transition] x (B-1) -> dense block
//   -> BN -> ReLU -> global average pool -> linear head.
struct DenseNetConfig {
  int growth_rate = 32;
  std::vector<int> block_layout = {6, 12, 48, 32};
  bool bottleneck = true;
  double compression = 0.5;  // channel fraction kept at transitions
  int stem_channels = 64;
  int num_classes = 18;
  int input_channels = 3;
  int input_height = 256;
  int input_width = 256;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  static DenseNetConfig preset(std::string_view name) {
    DenseNetConfig cfg;
    if (name == "densenet201") {
      cfg.growth_rate = 32;
      cfg.block_layout = {6, 12, 48, 32};
      cfg.stem_channels = 64;
    } else if (name == "tiny") {
      cfg.growth_rate = 8;
      cfg.block_layout = {2, 2};
      cfg.stem_channels = 16;
    } else {
      throw std::invalid_argument("unknown model preset '" + std::string(name) + "'");
    }
    return cfg;
  }

  void validate() const {
    if (block_layout.empty()) throw std::invalid_argument("DenseNetConfig: empty block layout");
    for (int l : block_layout)
      if (l < 0) throw std::invalid_argument("DenseNetConfig: negative dense-layer count");
    if (growth_rate <= 0) throw std::invalid_argument("DenseNetConfig: growth rate must be > 0");
    if (compression <= 0.0 || compression > 1.0)
      throw std::invalid_argument("DenseNetConfig: compression must be in (0, 1]");
    if (stem_channels <= 0 || num_classes <= 0 || input_channels <= 0)
      throw std::invalid_argument("DenseNetConfig: channel/class counts must be positive");
    // every transition must keep at least one channel
    int width = stem_channels;
    for (std::size_t b = 0; b < block_layout.size(); ++b) {
      width += block_layout[b] * growth_rate;
      if (b + 1 < block_layout.size()) {
        width = static_cast<int>(width * compression);
        if (width < 1)
          throw std::invalid_argument("DenseNetConfig: compression collapses a transition to 0 channels");
      }
    }
  }

  // channel width entering the classification head
  int final_feature_width() const {
    int width = stem_channels;
    for (std::size_t b = 0; b < block_layout.size(); ++b) {
      width += block_layout[b] * growth_rate;
      if (b + 1 < block_layout.size()) width = static_cast<int>(width * compression);
    }
    return width;
  }

  bool operator==(const DenseNetConfig&) const = default;
};

// ---------------------------------------------------------------------------
// parameter bundles
// ---------------------------------------------------------------------------

template <typename S>
struct BatchNormParams {
  TensorT<S> gamma, beta;
  TensorT<S> running_mean, running_var;

  static BatchNormParams make(std::size_t channels) {
    BatchNormParams bn;
    bn.gamma = TensorT<S>::full({channels}, S(1), true);
    bn.beta = TensorT<S>::zeros({channels}, true);
    bn.running_mean = TensorT<S>::zeros({channels});
    bn.running_var = TensorT<S>::full({channels}, S(1));
    return bn;
  }
};

namespace detail {
template <typename S>
TensorT<S> he_normal_kernel(Shape shape, std::size_t fan_in, RngStream& rng) {
  const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  return TensorT<S>::randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
}
}  // namespace detail

template <typename S>
struct DenseLayerParams {
  bool bottleneck = true;
  BatchNormParams<S> bn1;  // present only with bottleneck
  TensorT<S> conv1;        // 1x1, widens nothing: in -> 4k
  BatchNormParams<S> bn2;
  TensorT<S> conv2;  // 3x3 -> k, pad 1
  std::string name;

  static DenseLayerParams make(std::size_t in_channels, int growth_rate, bool bottleneck,
                               RngStream& rng, std::string name) {
    DenseLayerParams layer;
    layer.bottleneck = bottleneck;
    layer.name = std::move(name);
    const std::size_t k = static_cast<std::size_t>(growth_rate);
    std::size_t mid = in_channels;
    if (bottleneck) {
      const std::size_t width = 4 * k;
      layer.bn1 = BatchNormParams<S>::make(in_channels);
      layer.conv1 = detail::he_normal_kernel<S>({width, in_channels, 1, 1}, in_channels, rng);
      mid = width;
    }
    layer.bn2 = BatchNormParams<S>::make(mid);
    layer.conv2 = detail::he_normal_kernel<S>({k, mid, 3, 3}, mid * 9, rng);
    return layer;
  }
};

template <typename S>
struct TransitionParams {
  BatchNormParams<S> bn;
  TensorT<S> conv;  // 1x1 -> floor(compression * C)
  std::string name;

  static TransitionParams make(std::size_t in_channels, std::size_t out_channels, RngStream& rng,
                               std::string name) {
    TransitionParams t;
    t.name = std::move(name);
    t.bn = BatchNormParams<S>::make(in_channels);
    t.conv = detail::he_normal_kernel<S>({out_channels, in_channels, 1, 1}, in_channels, rng);
    return t;
  }
};

// Hook for Grad-CAM style inspection: names a conv output to keep.
template <typename S>
struct CaptureRequest {
  std::string layer;
  TensorT<S> captured;
  bool found() const { return captured.defined(); }
};

namespace detail {
template <typename S>
void maybe_capture(CaptureRequest<S>* capture, const std::string& name, const TensorT<S>& t) {
  if (capture && capture->layer == name) capture->captured = t;
}
}  // namespace detail

// BN -> ReLU -> (1x1 conv -> BN -> ReLU ->) 3x3 conv; spatial size preserved.
template <typename S>
TensorT<S> dense_layer_forward(DenseLayerParams<S>& layer, const TensorT<S>& x, bool training,
                               double momentum, double epsilon,
                               CaptureRequest<S>* capture = nullptr) {
  TensorT<S> y = x;
  if (layer.bottleneck) {
    y = batch_norm(y, layer.bn1.gamma, layer.bn1.beta, layer.bn1.running_mean,
                   layer.bn1.running_var, training, momentum, epsilon);
    y = relu(y);
    y = conv2d(y, layer.conv1);
    detail::maybe_capture(capture, layer.name + ".conv1", y);
  }
  y = batch_norm(y, layer.bn2.gamma, layer.bn2.beta, layer.bn2.running_mean,
                 layer.bn2.running_var, training, momentum, epsilon);
  y = relu(y);
  y = conv2d(y, layer.conv2, Stride2D{1, 1}, Pad2D{1, 1});
  detail::maybe_capture(capture, layer.name + ".conv2", y);
  return y;
}

// Each layer consumes the concatenation of the block input and all previous
// layer outputs; the block output concatenates all of them.
template <typename S>
TensorT<S> dense_block_forward(std::vector<DenseLayerParams<S>>& layers, const TensorT<S>& input,
                               bool training, double momentum, double epsilon,
                               CaptureRequest<S>* capture = nullptr) {
  TensorT<S> state = input;
  for (auto& layer : layers) {
    TensorT<S> fresh = dense_layer_forward(layer, state, training, momentum, epsilon, capture);
    state = concat_channels<S>({state, fresh});
  }
  return state;
}

// BN -> ReLU -> 1x1 conv -> 2x2 average pool (stride 2); halves H and W.
template <typename S>
TensorT<S> transition_forward(TransitionParams<S>& t, const TensorT<S>& x, bool training,
                              double momentum, double epsilon,
                              CaptureRequest<S>* capture = nullptr) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw std::invalid_argument("transition: odd spatial size " + shape_to_string(x.shape()));
  TensorT<S> y = batch_norm(x, t.bn.gamma, t.bn.beta, t.bn.running_mean, t.bn.running_var,
                            training, momentum, epsilon);
  y = relu(y);
  y = conv2d(y, t.conv);
  detail::maybe_capture(capture, t.name + ".conv", y);
  return avg_pool2d(y);
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

// Optimizer / trainer payload optionally stored in the same checkpoint file.
template <typename S>
struct CheckpointExtras {
  std::uint64_t adam_step = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::uint64_t completed_epochs = 0;
  double current_lr = 0.0;
  double best_metric = 0.0;
  std::uint64_t best_epoch = 0;
  std::vector<std::pair<std::string, std::vector<S>>> moments;  // "<param>.m" / "<param>.v"
};

template <typename S>
class ModelT {
 public:
  using NamedTensor = std::pair<std::string, TensorT<S>>;

  ModelT() = default;

  static ModelT build(const DenseNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelT m;
    m.cfg_ = cfg;
    RngStream rng = keyed_stream(seed, 0x6d6f64656cull);  // init stream

    std::size_t width = static_cast<std::size_t>(cfg.stem_channels);
    m.stem_conv_ = detail::he_normal_kernel<S>(
        {width, static_cast<std::size_t>(cfg.input_channels), 7, 7},
        static_cast<std::size_t>(cfg.input_channels) * 49, rng);
    m.stem_bn_ = BatchNormParams<S>::make(width);
    m.register_conv("stem.conv", m.stem_conv_);
    m.register_bn("stem.bn", m.stem_bn_);

    for (std::size_t b = 0; b < cfg.block_layout.size(); ++b) {
      std::vector<DenseLayerParams<S>> block;
      for (int l = 0; l < cfg.block_layout[b]; ++l) {
        std::string name =
            "block" + std::to_string(b + 1) + ".layer" + std::to_string(l + 1);
        auto layer = DenseLayerParams<S>::make(width, cfg.growth_rate, cfg.bottleneck, rng, name);
        if (layer.bottleneck) {
          m.register_bn(name + ".bn1", layer.bn1);
          m.register_conv(name + ".conv1", layer.conv1);
        }
        m.register_bn(name + ".bn2", layer.bn2);
        m.register_conv(name + ".conv2", layer.conv2);
        block.push_back(std::move(layer));
        width += static_cast<std::size_t>(cfg.growth_rate);
      }
      m.blocks_.push_back(std::move(block));
      if (b + 1 < cfg.block_layout.size()) {
        const auto out_width = static_cast<std::size_t>(
            static_cast<double>(width) * cfg.compression);
        std::string name = "trans" + std::to_string(b + 1);
        auto trans = TransitionParams<S>::make(width, out_width, rng, name);
        m.register_bn(name + ".bn", trans.bn);
        m.register_conv(name + ".conv", trans.conv);
        m.transitions_.push_back(std::move(trans));
        width = out_width;
      }
    }

    m.head_bn_ = BatchNormParams<S>::make(width);
    m.register_bn("head.bn", m.head_bn_);
    m.head_weight_ = detail::he_normal_kernel<S>(
        {width, static_cast<std::size_t>(cfg.num_classes)}, width, rng);
    m.head_bias_ = TensorT<S>::zeros({static_cast<std::size_t>(cfg.num_classes)}, true);
    m.params_.emplace_back("head.weight", m.head_weight_);
    m.params_.emplace_back("head.bias", m.head_bias_);
    return m;
  }

  // images: N x C x H x W -> logits N x num_classes
  TensorT<S> forward(const TensorT<S>& images, bool training,
                     CaptureRequest<S>* capture = nullptr) {
    if (images.shape().size() != 4 ||
        images.dim(1) != static_cast<std::size_t>(cfg_.input_channels))
      throw std::invalid_argument("forward: expected N x " +
                                  std::to_string(cfg_.input_channels) +
                                  " x H x W input, got " + shape_to_string(images.shape()));
    const double mom = cfg_.bn_momentum, eps = cfg_.bn_epsilon;
    TensorT<S> x = conv2d(images, stem_conv_, Stride2D{2, 2}, Pad2D{3, 3});
    detail::maybe_capture(capture, std::string("stem.conv"), x);
    x = batch_norm(x, stem_bn_.gamma, stem_bn_.beta, stem_bn_.running_mean, stem_bn_.running_var,
                   training, mom, eps);
    x = relu(x);
    x = max_pool2d(x, Stride2D{3, 3}, Stride2D{2, 2}, Pad2D{1, 1});

    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      x = dense_block_forward(blocks_[b], x, training, mom, eps, capture);
      if (b < transitions_.size())
        x = transition_forward(transitions_[b], x, training, mom, eps, capture);
    }

    x = batch_norm(x, head_bn_.gamma, head_bn_.beta, head_bn_.running_mean, head_bn_.running_var,
                   training, mom, eps);
    x = relu(x);
    x = global_avg_pool(x);
    return linear(x, head_weight_, head_bias_);
  }

  const DenseNetConfig& config() const { return cfg_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<NamedTensor>& buffers() { return buffers_; }

  std::size_t count_trainable_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  int final_feature_width() const { return cfg_.final_feature_width(); }

  // the 3x3 conv of the final dense layer in the last block
  std::string default_cam_layer() const {
    return "block" + std::to_string(cfg_.block_layout.size()) + ".layer" +
           std::to_string(cfg_.block_layout.back()) + ".conv2";
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void save_checkpoint(const std::filesystem::path& path,
                       const CheckpointExtras<S>* extras = nullptr) const;
  static ModelT load_checkpoint(const std::filesystem::path& path,
                                CheckpointExtras<S>* extras_out = nullptr);
  // Builds from `expected`, then restores tensors; name-set mismatches throw.
  static ModelT load_checkpoint_as(const std::filesystem::path& path,
                                   const DenseNetConfig& expected,
                                   CheckpointExtras<S>* extras_out = nullptr);

 private:
  void register_conv(const std::string& name, const TensorT<S>& kernel) {
    params_.emplace_back(name + ".kernel", kernel);
  }
  void register_bn(const std::string& name, const BatchNormParams<S>& bn) {
    params_.emplace_back(name + ".gamma", bn.gamma);
    params_.emplace_back(name + ".beta", bn.beta);
    buffers_.emplace_back(name + ".running_mean", bn.running_mean);
    buffers_.emplace_back(name + ".running_var", bn.running_var);
  }

  DenseNetConfig cfg_;
  TensorT<S> stem_conv_;
  BatchNormParams<S> stem_bn_;
  std::vector<std::vector<DenseLayerParams<S>>> blocks_;
  std::vector<TransitionParams<S>> transitions_;
  BatchNormParams<S> head_bn_;
  TensorT<S> head_weight_, head_bias_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

using Model = ModelT<float>;

// ---------------------------------------------------------------------------
// checkpoint format: "DGRD", u32 version, config, tensor records, optimizer
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kCheckpointMagic[4] = {'D', 'G', 'R', 'D'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
constexpr std::uint8_t dtype_tag() {
  return sizeof(S) == 4 ? 0 : 1;
}

class BinWriter {
 public:
  explicit BinWriter(const std::filesystem::path& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("checkpoint write failed");
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }

 private:
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw std::runtime_error("truncated checkpoint file");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1ull << 20)) throw std::runtime_error("corrupt checkpoint: unreasonable string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
};

inline void write_config(BinWriter& w, const DenseNetConfig& cfg) {
  w.u32(static_cast<std::uint32_t>(cfg.growth_rate));
  w.u32(static_cast<std::uint32_t>(cfg.block_layout.size()));
  for (int l : cfg.block_layout) w.u32(static_cast<std::uint32_t>(l));
  w.u8(cfg.bottleneck ? 1 : 0);
  w.f64(cfg.compression);
  w.u32(static_cast<std::uint32_t>(cfg.stem_channels));
  w.u32(static_cast<std::uint32_t>(cfg.num_classes));
  w.u32(static_cast<std::uint32_t>(cfg.input_channels));
  w.u32(static_cast<std::uint32_t>(cfg.input_height));
  w.u32(static_cast<std::uint32_t>(cfg.input_width));
  w.f64(cfg.bn_momentum);
  w.f64(cfg.bn_epsilon);
}

inline DenseNetConfig read_config(BinReader& r) {
  DenseNetConfig cfg;
  cfg.growth_rate = static_cast<int>(r.u32());
  const std::uint32_t n = r.u32();
  if (n > 1024) throw std::runtime_error("corrupt checkpoint: unreasonable block count");
  cfg.block_layout.resize(n);
  for (auto& l : cfg.block_layout) l = static_cast<int>(r.u32());
  cfg.bottleneck = r.u8() != 0;
  cfg.compression = r.f64();
  cfg.stem_channels = static_cast<int>(r.u32());
  cfg.num_classes = static_cast<int>(r.u32());
  cfg.input_channels = static_cast<int>(r.u32());
  cfg.input_height = static_cast<int>(r.u32());
  cfg.input_width = static_cast<int>(r.u32());
  cfg.bn_momentum = r.f64();
  cfg.bn_epsilon = r.f64();
  return cfg;
}

template <typename S>
void write_tensor_record(BinWriter& w, const std::string& name, const Shape& shape,
                         const std::vector<S>& data) {
  w.str(name);
  w.u8(dtype_tag<S>());
  w.u64(shape.size());
  for (std::size_t d : shape) w.u64(d);
  w.bytes(data.data(), data.size() * sizeof(S));
}

template <typename S>
std::pair<std::string, std::pair<Shape, std::vector<S>>> read_tensor_record(BinReader& r) {
  std::string name = r.str();
  const std::uint8_t tag = r.u8();
  if (tag != dtype_tag<S>())
    throw std::runtime_error("checkpoint dtype mismatch for '" + name + "' (tag " +
                             std::to_string(tag) + ")");
  const std::uint64_t rank = r.u64();
  if (rank > 8) throw std::runtime_error("corrupt checkpoint: tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t numel = 1;
  for (auto& d : shape) {
    d = r.u64();
    numel *= d;
  }
  std::vector<S> data(numel);
  r.bytes(data.data(), numel * sizeof(S));
  return {std::move(name), {std::move(shape), std::move(data)}};
}

}  // namespace detail

template <typename S>
void ModelT<S>::save_checkpoint(const std::filesystem::path& path,
                                const CheckpointExtras<S>* extras) const {
  detail::BinWriter w(path);
  w.bytes(detail::kCheckpointMagic, 4);
  w.u32(detail::kCheckpointVersion);
  detail::write_config(w, cfg_);
  w.u64(params_.size() + buffers_.size());
  for (const auto& [name, t] : params_) detail::write_tensor_record(w, name, t.shape(), t.values());
  for (const auto& [name, t] : buffers_)
    detail::write_tensor_record(w, name, t.shape(), t.values());
  if (extras) {
    w.u8(1);
    w.u64(extras->adam_step);
    w.f64(extras->beta1);
    w.f64(extras->beta2);
    w.f64(extras->epsilon);
    w.u64(extras->completed_epochs);
    w.f64(extras->current_lr);
    w.f64(extras->best_metric);
    w.u64(extras->best_epoch);
    w.u64(extras->moments.size());
    for (const auto& [name, data] : extras->moments)
      detail::write_tensor_record(w, name, Shape{data.size()}, data);
  } else {
    w.u8(0);
  }
}

template <typename S>
ModelT<S> ModelT<S>::load_checkpoint(const std::filesystem::path& path,
                                     CheckpointExtras<S>* extras_out) {
  detail::BinReader probe(path);
  char magic[4];
  probe.bytes(magic, 4);
  if (std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint (bad magic bytes)");
  const std::uint32_t version = probe.u32();
  if (version != detail::kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  DenseNetConfig cfg = detail::read_config(probe);
  return load_checkpoint_as(path, cfg, extras_out);
}

template <typename S>
ModelT<S> ModelT<S>::load_checkpoint_as(const std::filesystem::path& path,
                                        const DenseNetConfig& expected,
                                        CheckpointExtras<S>* extras_out) {
  detail::BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint (bad magic bytes)");
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  detail::read_config(r);  // the caller-supplied config is authoritative here

  ModelT m = build(expected, /*seed=*/0);
  std::map<std::string, TensorT<S>> by_name;
  for (auto& [name, t] : m.params_) by_name.emplace(name, t);
  for (auto& [name, t] : m.buffers_) by_name.emplace(name, t);

  const std::uint64_t count = r.u64();
  std::map<std::string, std::pair<Shape, std::vector<S>>> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto [name, payload] = detail::read_tensor_record<S>(r);
    records.emplace(std::move(name), std::move(payload));
  }
  // validate the name sets in both directions before touching shapes
  for (const auto& [name, payload] : records)
    if (!by_name.count(name))
      throw std::runtime_error("checkpoint/config name-set mismatch: file has '" + name +
                               "' which the configured model does not");
  for (const auto& [name, t] : by_name)
    if (!records.count(name))
      throw std::runtime_error("checkpoint/config name-set mismatch: model tensor '" + name +
                               "' missing from file");
  for (auto& [name, payload] : records) {
    auto& target = by_name.at(name);
    if (payload.first != target.shape())
      throw std::runtime_error("checkpoint shape mismatch for '" + name + "': file " +
                               shape_to_string(payload.first) + " vs model " +
                               shape_to_string(target.shape()));
    target.values() = std::move(payload.second);
  }

  const std::uint8_t has_extras = r.u8();
  if (has_extras && extras_out) {
    extras_out->adam_step = r.u64();
    extras_out->beta1 = r.f64();
    extras_out->beta2 = r.f64();
    extras_out->epsilon = r.f64();
    extras_out->completed_epochs = r.u64();
    extras_out->current_lr = r.f64();
    extras_out->best_metric = r.f64();
    extras_out->best_epoch = r.u64();
    const std::uint64_t n = r.u64();
    extras_out->moments.clear();
    for (std::uint64_t i = 0; i < n; ++i) {
      auto [name, payload] = detail::read_tensor_record<S>(r);
      extras_out->moments.emplace_back(std::move(name), std::move(payload.second));
    }
  } else if (extras_out) {
    *extras_out = CheckpointExtras<S>{};
  }
  return m;
}

}  // namespace densegrade
