#pragma once

// Value-level kernels shared by the autodiff tape and the graph-free
// inference path. Images are single examples laid out as channels x height x
// width.

#include <cstddef>
#include <vector>

#include "nptm/tensor.hpp"

namespace nptm::ops {

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const Conv2dGeometry& g);

// input: c x h x w, weight: o x c x kh x kw, bias: o
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Conv2dGeometry& g);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         const Conv2dGeometry& g);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_shape,
                          const Conv2dGeometry& g);
Tensor conv2d_grad_bias(const Tensor& grad_out);

// Non-overlapping max pooling (window == stride == k). `argmax` receives the
// flat input index chosen for each output element.
Tensor max_pool2d(const Tensor& input, std::size_t k, std::vector<std::size_t>* argmax = nullptr);

Tensor relu(const Tensor& x);

// a: m x k, b: k x n
Tensor matmul(const Tensor& a, const Tensor& b);
// y = W x + b for a vector x
Tensor affine(const Tensor& weight, const Tensor& x, const Tensor& bias);

Tensor log_softmax(const Tensor& logits);

// Per-pixel division of the channel vector by its L2 norm. Pixels whose norm
// is at or below `eps` map to zero.
inline constexpr double kChannelNormEps = 1e-10;
Tensor channel_normalize(const Tensor& activation, double eps = kChannelNormEps);
Tensor channel_normalize_grad(const Tensor& grad_out, const Tensor& input, const Tensor& output,
                              double eps = kChannelNormEps);

}  // namespace nptm::ops
