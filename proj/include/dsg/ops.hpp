#pragma once

// Differentiable primitives. Each records its forward value on the tape along
// with the vector-Jacobian product needed by Tape::backward.

#include <optional>
#include <vector>

#include "dsg/kernels.hpp"
#include "dsg/tape.hpp"

namespace dsg::ops {

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, int stride, int padding);

template <typename T>
Var bilinear_resize(Tape<T>& tape, Var input, int out_h, int out_w);

template <typename T>
Var softmax_axis(Tape<T>& tape, Var input, int axis);

template <typename T>
Var relu(Tape<T>& tape, Var x);

template <typename T>
Var sigmoid(Tape<T>& tape, Var x);

/// Natural log; inputs must be positive.
template <typename T>
Var log(Tape<T>& tape, Var x);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b);

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor);

/// Concatenate rank-4 tensors along the channel axis.
template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& parts);

template <typename T>
Var avg_pool2(Tape<T>& tape, Var x);

/// y[n,c,...] = x[n,c,...] * gain[c] + shift[c].
template <typename T>
Var channel_affine(Tape<T>& tape, Var x, Var gain, Var shift);

/// Broadcast a single-channel [N,1,H,W] tensor to [N,C,H,W].
template <typename T>
Var expand_channels(Tape<T>& tape, Var x, int channels);

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape);

template <typename T>
Var transpose12(Tape<T>& tape, Var x);

template <typename T>
Var bmm(Tape<T>& tape, Var a, Var b, bool trans_a, bool trans_b);

/// Scalar Σ x, shape [1].
template <typename T>
Var sum(Tape<T>& tape, Var x);

/// Scalar Σ weights ⊙ x with constant weights, shape [1].
template <typename T>
Var dot_const(Tape<T>& tape, Var x, const BasicTensor<T>& weights);

/// Mean over non-ignored pixels of -log softmax(logits)[label]. logits
/// [N,C,H,W], labels [N,H,W]. Returns shape [1]; zero when every pixel is
/// ignored. Throws on label ids outside [0, C) that are not the ignore id.
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, const LabelMap& labels,
                  std::optional<int> ignore_id = std::nullopt);

}  // namespace dsg::ops
