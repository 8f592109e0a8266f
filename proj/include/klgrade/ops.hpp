#pragma once

// Differentiable operations over Tensor. Image tensors are NCHW; matrices
// are [rows x cols]. Every op checks its shape contract and throws ShapeError.

#include <span>
#include <vector>

#include "klgrade/tensor.hpp"

namespace klg::ops {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x [N,C,H,W], weight [O,C,K,K], bias [O] -> [N,O,Ho,Wo].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dParams params);
// x [N,I], weight [O,I], bias [O] -> [N,O].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);
// Concatenate [N,Ci,H,W] tensors along channels.
Tensor concat_channels(std::span<const Tensor> parts);
// [N,...] -> [N, prod(...)].
Tensor flatten(const Tensor& x);
// [N,M] -> [N,count] taking columns [begin, begin+count).
Tensor columns(const Tensor& x, std::size_t begin, std::size_t count);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// Mean over the batch of -log softmax(logits)[label]. logits [N,K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Mean of squared differences. pred [N,1] or [N].
Tensor mse(const Tensor& pred, std::span<const double> targets);
// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

// Row-wise softmax of a [N,K] tensor (untracked).
std::vector<double> softmax_rows(const Tensor& logits);

}  // namespace klg::ops
