#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "rayfusion/tensor.hpp"

namespace rayfusion::ops {

// Elementwise; operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);

// y is broadcast over the leading axes of x; y.shape must equal the trailing
// axes of x.
Tensor add_trailing(const Tensor& x, const Tensor& y);

Tensor leaky_relu(const Tensor& x, double slope = 0.01);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_lastdim(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& inputs, std::size_t axis);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// [M x K] . [K x N]
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched [B x M x K] . [B x K x N]
Tensor bmm(const Tensor& a, const Tensor& b);
// Batched [B x M x K] . [B x N x K]^T
Tensor bmm_nt(const Tensor& a, const Tensor& b);

// Numerically stable (max-subtracted) softmax over the last axis.
Tensor softmax_lastdim(const Tensor& x);

struct Conv3dOptions {
  std::array<std::size_t, 3> stride{1, 1, 1};
};

// x: [Cin x D x H x W], kernel: [Cout x Cin x kd x kh x kw] with odd extents,
// bias: [Cout]. Zero padding (k-1)/2 on every axis.
Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              Conv3dOptions options = {});

// Adjoint of a strided conv3d: x: [Cin x D x H x W], kernel: [Cin x Cout x k..],
// output extent (n-1)*s - 2p + k + output_padding per axis.
Tensor conv_transpose3d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                        std::array<std::size_t, 3> stride,
                        std::array<std::size_t, 3> output_padding);

// x: [Cin x H x W], kernel: [Cout x Cin x k x k]; routed through conv3d.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride = 1);

// Mean over non-overlapping factor x factor windows of the last two axes.
Tensor avg_pool2d(const Tensor& x, std::size_t factor);

// out(..., h, w) = x(..., h + dy, w + dx), zero where the source is outside.
Tensor shift2d(const Tensor& x, int dy, int dx);

}  // namespace rayfusion::ops
