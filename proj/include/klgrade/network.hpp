#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "klgrade/tensor.hpp"

namespace klg {

enum class LayerKind { conv2d, dense, relu, global_avg_pool, dense_block, flatten };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

// One layer of a sequential network. Only the fields relevant to `kind` are
// read; the rest stay zero.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;   // conv2d, dense_block; dense: input width
  std::size_t out_channels = 0;  // conv2d; dense: output width
  std::size_t kernel = 0;        // conv2d, dense_block (kernel of each layer)
  std::size_t stride = 1;        // conv2d
  std::size_t pad = 0;           // conv2d
  std::size_t growth = 0;        // dense_block
  std::size_t layers = 0;        // dense_block

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel,
                        std::size_t stride = 1);
  // Explicit padding; conv() uses "same" padding (kernel-1)/2 when stride is 1
  // and zero padding otherwise.
  static LayerSpec conv_padded(std::size_t in, std::size_t out, std::size_t kernel,
                               std::size_t stride, std::size_t pad);
  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec relu();
  static LayerSpec global_avg_pool();
  static LayerSpec flatten();
  // Each inner layer is relu -> conv(kernel, growth) over the concatenation of
  // the block input and every earlier inner layer's output.
  static LayerSpec dense_block(std::size_t in, std::size_t growth, std::size_t layers,
                               std::size_t kernel = 3);

  // Channels (or width) of the block output for dense_block / conv2d / dense.
  std::size_t output_channels() const;

  bool operator==(const LayerSpec&) const = default;
};

// Sequential network over a fixed per-sample input shape (without batch axis).
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<LayerSpec> layers);

  // Glorot-uniform weights, zero biases, drawn from one seeded stream.
  void initialize(std::uint64_t seed);

  Tensor forward(const Tensor& x) const;
  // Shape of the output for a batch of one; throws on an invalid layer chain.
  Shape output_shape() const;

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  // Parameters in a fixed order: per layer, weights then bias.
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  // Deep copy of every parameter so the copy trains independently.
  Network clone() const;
  // Stable hash of input shape + layer specs (not weights).
  std::uint64_t architecture_hash() const;

 private:
  // Parameter tensors owned by layer i start at offsets_[i].
  std::vector<std::size_t> param_offsets() const;

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Tensor> params_;
};

// Parameter shapes a layer owns, in order.
std::vector<Shape> layer_parameter_shapes(const LayerSpec& spec);

}  // namespace klg
