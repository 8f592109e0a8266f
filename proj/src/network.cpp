#include "klgrade/network.hpp"

#include <cmath>

#include "klgrade/error.hpp"
#include "klgrade/ops.hpp"
#include "klgrade/rng.hpp"

namespace klg {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::global_avg_pool: return "global-avg-pool";
    case LayerKind::dense_block: return "dense-block";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (auto k : {LayerKind::conv2d, LayerKind::dense, LayerKind::relu,
                 LayerKind::global_avg_pool, LayerKind::dense_block, LayerKind::flatten}) {
    if (to_string(k) == name) return k;
  }
  throw ValueError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride) {
  return conv_padded(in, out, kernel, stride, stride == 1 ? (kernel - 1) / 2 : 0);
}

LayerSpec LayerSpec::conv_padded(std::size_t in, std::size_t out, std::size_t kernel,
                                 std::size_t stride, std::size_t pad) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_channels = in;
  s.out_channels = out;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::global_avg_pool() {
  LayerSpec s;
  s.kind = LayerKind::global_avg_pool;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

LayerSpec LayerSpec::dense_block(std::size_t in, std::size_t growth, std::size_t layers,
                                 std::size_t kernel) {
  LayerSpec s;
  s.kind = LayerKind::dense_block;
  s.in_channels = in;
  s.growth = growth;
  s.layers = layers;
  s.kernel = kernel;
  s.pad = (kernel - 1) / 2;
  return s;
}

std::size_t LayerSpec::output_channels() const {
  switch (kind) {
    case LayerKind::conv2d:
    case LayerKind::dense: return out_channels;
    case LayerKind::dense_block: return in_channels + layers * growth;
    default: return 0;
  }
}

std::vector<Shape> layer_parameter_shapes(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::conv2d:
      return {{s.out_channels, s.in_channels, s.kernel, s.kernel}, {s.out_channels}};
    case LayerKind::dense:
      return {{s.out_channels, s.in_channels}, {s.out_channels}};
    case LayerKind::dense_block: {
      std::vector<Shape> shapes;
      for (std::size_t i = 0; i < s.layers; ++i) {
        shapes.push_back({s.growth, s.in_channels + i * s.growth, s.kernel, s.kernel});
        shapes.push_back({s.growth});
      }
      return shapes;
    }
    default:
      return {};
  }
}

Network::Network(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  output_shape();  // validates the chain
  for (const auto& spec : layers_)
    for (auto& shape : layer_parameter_shapes(spec)) params_.push_back(Tensor::zeros(shape, true));
}

void Network::initialize(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0, 0x1417));
  for (auto& p : params_) {
    const auto& shape = p.shape();
    auto data = p.data();
    if (shape.size() == 1) {
      std::fill(data.begin(), data.end(), 0.0);
      continue;
    }
    const std::size_t receptive = shape.size() == 4 ? shape[2] * shape[3] : 1;
    const double fan_in = static_cast<double>(shape[1] * receptive);
    const double fan_out = static_cast<double>(shape[0] * receptive);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : data) v = rng.uniform(-limit, limit);
  }
}

std::vector<std::size_t> Network::param_offsets() const {
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& spec : layers_) {
    offsets.push_back(at);
    at += layer_parameter_shapes(spec).size();
  }
  return offsets;
}

namespace {

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + to_string(spec.kind) + ")";
}

}  // namespace

Shape Network::output_shape() const {
  Shape shape = input_shape_;
  if (shape.empty()) throw ShapeError("network input shape is empty");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& s = layers_[i];
    auto fail = [&](const std::string& why) {
      throw ShapeError(layer_label(i, s) + ": " + why + ", input " + shape_string(shape));
    };
    switch (s.kind) {
      case LayerKind::conv2d: {
        if (shape.size() != 3 || shape[0] != s.in_channels) fail("expects [" + std::to_string(s.in_channels) + ",H,W]");
        if (s.kernel == 0 || s.stride == 0 || s.out_channels == 0) fail("zero kernel/stride/channels");
        if (shape[1] + 2 * s.pad < s.kernel || shape[2] + 2 * s.pad < s.kernel) fail("kernel exceeds input");
        shape = {s.out_channels, (shape[1] + 2 * s.pad - s.kernel) / s.stride + 1,
                 (shape[2] + 2 * s.pad - s.kernel) / s.stride + 1};
        break;
      }
      case LayerKind::dense:
        if (shape.size() != 1 || shape[0] != s.in_channels) fail("expects [" + std::to_string(s.in_channels) + "]");
        if (s.out_channels == 0) fail("zero output width");
        shape = {s.out_channels};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::global_avg_pool:
        if (shape.size() != 3) fail("expects [C,H,W]");
        shape = {shape[0]};
        break;
      case LayerKind::dense_block:
        if (shape.size() != 3 || shape[0] != s.in_channels) fail("expects [" + std::to_string(s.in_channels) + ",H,W]");
        if (s.growth == 0 || s.layers == 0 || s.kernel % 2 == 0) fail("needs growth, layers and an odd kernel");
        shape[0] = s.output_channels();
        break;
      case LayerKind::flatten:
        shape = {shape_size(shape)};
        break;
    }
  }
  return shape;
}

Tensor Network::forward(const Tensor& x) const {
  if (!x.defined() || x.rank() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), x.shape().begin() + 1)) {
    throw ShapeError("network input: expected [N]" + shape_string(input_shape_) + ", got " +
                     (x.defined() ? shape_string(x.shape()) : "undefined"));
  }
  const auto offsets = param_offsets();
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& s = layers_[i];
    const Tensor* p = params_.data() + offsets[i];
    try {
      switch (s.kind) {
        case LayerKind::conv2d:
          h = ops::conv2d(h, p[0], p[1], {s.stride, s.pad});
          break;
        case LayerKind::dense:
          h = ops::linear(h, p[0], p[1]);
          break;
        case LayerKind::relu:
          h = ops::relu(h);
          break;
        case LayerKind::global_avg_pool:
          h = ops::global_avg_pool(h);
          break;
        case LayerKind::flatten:
          h = ops::flatten(h);
          break;
        case LayerKind::dense_block: {
          std::vector<Tensor> features{h};
          for (std::size_t l = 0; l < s.layers; ++l) {
            Tensor in = features.size() == 1 ? features[0] : ops::concat_channels(features);
            features.push_back(
                ops::conv2d(ops::relu(in), p[2 * l], p[2 * l + 1], {1, s.pad}));
          }
          h = ops::concat_channels(features);
          break;
        }
      }
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(i, s) + ": " + e.what());
    }
  }
  return h;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

void Network::zero_grad() {
  for (auto& p : params_) std::fill(p.grad().begin(), p.grad().end(), 0.0);
}

Network Network::clone() const {
  Network copy;
  copy.input_shape_ = input_shape_;
  copy.layers_ = layers_;
  for (const auto& p : params_) copy.params_.push_back(p.clone());
  return copy;
}

std::uint64_t Network::architecture_hash() const {
  std::uint64_t h = 0xC0FFEEull;
  auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ v); };
  for (auto d : input_shape_) mix(d);
  for (const auto& s : layers_) {
    mix(static_cast<std::uint64_t>(s.kind));
    for (auto v : {s.in_channels, s.out_channels, s.kernel, s.stride, s.pad, s.growth, s.layers})
      mix(v);
  }
  return h;
}

}  // namespace klg
