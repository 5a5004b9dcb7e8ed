#pragma once

// Raw forward and backward kernels. These operate on concrete tensors and know
// nothing about the tape; ops.hpp wraps them into differentiable primitives.

#include "dsg/tensor.hpp"

namespace dsg::kernels {

/// C[M,N] += A[M,K] * B[K,N], row-major with leading dimensions. Each output
/// element accumulates its K products sequentially in index order, so the
/// result is independent of blocking.
template <typename T>
void gemm_acc(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc);

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
};

/// Zero-padded cross-correlation. input [N,Cin,H,W], kernel [Cout,Cin,kh,kw],
/// bias [Cout]. Output spatial size is (H + 2p - kh) / s + 1 (floor).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, ConvGeometry g);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, ConvGeometry g, bool need_input);

/// Bilinear resize with align_corners = false:
///   src = (dst + 0.5) * in / out - 0.5, clamped below at 0,
///   i0 = floor(src), i1 = min(i0 + 1, in - 1), frac = src - i0,
///   out = lerp(lerp(v00, v01, fx), lerp(v10, v11, fx), fy).
/// Same-size resize is a copy.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, int out_h, int out_w);

template <typename T>
BasicTensor<T> bilinear_resize_backward(const BasicTensor<T>& grad_out, int in_h, int in_w);

/// Numerically stable softmax along one axis (max subtracted first).
template <typename T>
BasicTensor<T> softmax_axis(const BasicTensor<T>& input, int axis);

template <typename T>
BasicTensor<T> softmax_axis_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out,
                                     int axis);

/// 2x2 average pool with stride 2; H and W must be even.
template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> avg_pool2_backward(const BasicTensor<T>& grad_out);

/// Batched matmul: out[b] = op(a[b]) * op(b[b]) where op transposes when the
/// flag is set. Rank-3 operands.
template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b, bool trans_a, bool trans_b);

/// Swap the last two axes of a rank-3 tensor.
template <typename T>
BasicTensor<T> transpose12(const BasicTensor<T>& x);

}  // namespace dsg::kernels
