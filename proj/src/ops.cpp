#include "dsg/ops.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace dsg::ops {

namespace {

template <typename T>
void same_shape(const Tape<T>& tape, Var a, Var b, const char* op) {
  if (tape.shape(a) != tape.shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(tape.shape(a)) + " vs " +
                     shape_str(tape.shape(b)));
  }
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, int stride, int padding) {
  const kernels::ConvGeometry g{stride, padding};
  auto out = kernels::conv2d(tape.value(input), tape.value(kernel), tape.value(bias), g);
  return tape.record(std::move(out), {input, kernel, bias},
                     [&tape, input, kernel, g](const BasicTensor<T>& gy) {
                       auto gr = kernels::conv2d_backward(tape.value(input), tape.value(kernel), gy,
                                                          g, tape.requires_grad(input));
                       return std::vector<BasicTensor<T>>{std::move(gr.input), std::move(gr.kernel),
                                                          std::move(gr.bias)};
                     });
}

template <typename T>
Var bilinear_resize(Tape<T>& tape, Var input, int out_h, int out_w) {
  const int in_h = tape.value(input).dim(2), in_w = tape.value(input).dim(3);
  auto out = kernels::bilinear_resize(tape.value(input), out_h, out_w);
  return tape.record(std::move(out), {input}, [in_h, in_w](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{kernels::bilinear_resize_backward(gy, in_h, in_w)};
  });
}

template <typename T>
Var softmax_axis(Tape<T>& tape, Var input, int axis) {
  auto out = kernels::softmax_axis(tape.value(input), axis);
  const int self = static_cast<int>(tape.size());
  return tape.record(std::move(out), {input}, [&tape, self, axis](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{kernels::softmax_axis_backward(tape.value(Var{self}), gy, axis)};
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return tape.record(std::move(out), {x}, [&tape, x](const BasicTensor<T>& gy) {
    const auto& xv = tape.value(x);
    BasicTensor<T> g(xv.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = xv[i] > T(0) ? gy[i] : T(0);
    return std::vector<BasicTensor<T>>{std::move(g)};
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = xv[i];
    // Branch keeps exp() from overflowing for large |v|.
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const int self = static_cast<int>(tape.size());
  return tape.record(std::move(out), {x}, [&tape, self](const BasicTensor<T>& gy) {
    const auto& y = tape.value(Var{self});
    BasicTensor<T> g(y.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gy[i] * y[i] * (T(1) - y[i]);
    return std::vector<BasicTensor<T>>{std::move(g)};
  });
}

template <typename T>
Var log(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!(xv[i] > T(0))) throw std::domain_error("log: non-positive input at index " + std::to_string(i));
    out[i] = std::log(xv[i]);
  }
  return tape.record(std::move(out), {x}, [&tape, x](const BasicTensor<T>& gy) {
    const auto& xv = tape.value(x);
    BasicTensor<T> g(xv.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gy[i] / xv[i];
    return std::vector<BasicTensor<T>>{std::move(g)};
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  same_shape(tape, a, b, "add");
  BasicTensor<T> out = tape.value(a);
  out += tape.value(b);
  return tape.record(std::move(out), {a, b}, [](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{gy, gy};
  });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  same_shape(tape, a, b, "sub");
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
  return tape.record(std::move(out), {a, b}, [](const BasicTensor<T>& gy) {
    BasicTensor<T> neg(gy.shape());
    for (std::size_t i = 0; i < neg.numel(); ++i) neg[i] = -gy[i];
    return std::vector<BasicTensor<T>>{gy, std::move(neg)};
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  same_shape(tape, a, b, "mul");
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return tape.record(std::move(out), {a, b}, [&tape, a, b](const BasicTensor<T>& gy) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    BasicTensor<T> ga(av.shape()), gb(bv.shape());
    for (std::size_t i = 0; i < gy.numel(); ++i) {
      ga[i] = gy[i] * bv[i];
      gb[i] = gy[i] * av[i];
    }
    return std::vector<BasicTensor<T>>{std::move(ga), std::move(gb)};
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * factor;
  return tape.record(std::move(out), {x}, [factor](const BasicTensor<T>& gy) {
    BasicTensor<T> g(gy.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gy[i] * factor;
    return std::vector<BasicTensor<T>>{std::move(g)};
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = tape.shape(parts[0]);
  require_rank(s0, 4, "concat_channels");
  int channels = 0;
  std::vector<int> widths;
  for (Var p : parts) {
    const Shape& s = tape.shape(p);
    require_rank(s, 4, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(s0));
    }
    widths.push_back(s[1]);
    channels += s[1];
  }
  const int N = s0[0];
  const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
  BasicTensor<T> out({N, channels, s0[2], s0[3]});
  for (int n = 0; n < N; ++n) {
    T* dst = out.ptr() + static_cast<std::size_t>(n) * channels * plane;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t len = widths[i] * plane;
      const T* src = tape.value(parts[i]).ptr() + n * len;
      std::copy(src, src + len, dst);
      dst += len;
    }
  }
  return tape.record(std::move(out), parts, [widths, N, plane, channels](const BasicTensor<T>& gy) {
    std::vector<BasicTensor<T>> gs;
    const int H = gy.dim(2), W = gy.dim(3);
    for (int w : widths) gs.emplace_back(Shape{N, w, H, W});
    for (int n = 0; n < N; ++n) {
      const T* src = gy.ptr() + static_cast<std::size_t>(n) * channels * plane;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        const std::size_t len = widths[i] * plane;
        std::copy(src, src + len, gs[i].ptr() + n * len);
        src += len;
      }
    }
    return gs;
  });
}

template <typename T>
Var avg_pool2(Tape<T>& tape, Var x) {
  auto out = kernels::avg_pool2(tape.value(x));
  return tape.record(std::move(out), {x}, [](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{kernels::avg_pool2_backward(gy)};
  });
}

template <typename T>
Var channel_affine(Tape<T>& tape, Var x, Var gain, Var shift) {
  const auto& xv = tape.value(x);
  if (xv.rank() < 2) throw ShapeError("channel_affine: input rank must be >= 2");
  const int N = xv.dim(0), C = xv.dim(1);
  if (tape.value(gain).numel() != static_cast<std::size_t>(C) ||
      tape.value(shift).numel() != static_cast<std::size_t>(C)) {
    throw ShapeError("channel_affine: gain/shift must have " + std::to_string(C) + " entries");
  }
  const std::size_t plane = xv.numel() / (static_cast<std::size_t>(N) * C);
  const auto& gv = tape.value(gain);
  const auto& sv = tape.value(shift);
  BasicTensor<T> out(xv.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = xv[base + i] * gv[c] + sv[c];
    }
  return tape.record(std::move(out), {x, gain, shift},
                     [&tape, x, gain, N, C, plane](const BasicTensor<T>& gy) {
                       const auto& xv = tape.value(x);
                       const auto& gv = tape.value(gain);
                       BasicTensor<T> gx(xv.shape());
                       BasicTensor<T> gg(tape.value(gain).shape()), gs(tape.value(gain).shape());
                       for (int n = 0; n < N; ++n)
                         for (int c = 0; c < C; ++c) {
                           const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                           T sg = 0, ss = 0;
                           for (std::size_t i = 0; i < plane; ++i) {
                             gx[base + i] = gy[base + i] * gv[c];
                             sg += gy[base + i] * xv[base + i];
                             ss += gy[base + i];
                           }
                           gg[c] += sg;
                           gs[c] += ss;
                         }
                       return std::vector<BasicTensor<T>>{std::move(gx), std::move(gg), std::move(gs)};
                     });
}

template <typename T>
Var expand_channels(Tape<T>& tape, Var x, int channels) {
  const auto& xv = tape.value(x);
  require_rank(xv.shape(), 4, "expand_channels");
  if (xv.dim(1) != 1) throw ShapeError("expand_channels: expected one channel, got " + shape_str(xv.shape()));
  const int N = xv.dim(0);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  BasicTensor<T> out({N, channels, xv.dim(2), xv.dim(3)});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels; ++c)
      std::copy(xv.ptr() + n * plane, xv.ptr() + (n + 1) * plane,
                out.ptr() + (static_cast<std::size_t>(n) * channels + c) * plane);
  const Shape in_shape = xv.shape();
  return tape.record(std::move(out), {x}, [in_shape, N, channels, plane](const BasicTensor<T>& gy) {
    BasicTensor<T> g(in_shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < channels; ++c) {
        const T* src = gy.ptr() + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) g[n * plane + i] += src[i];
      }
    return std::vector<BasicTensor<T>>{std::move(g)};
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  const Shape in_shape = tape.shape(x);
  auto out = tape.value(x).reshaped(std::move(shape));
  return tape.record(std::move(out), {x}, [in_shape](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{gy.reshaped(in_shape)};
  });
}

template <typename T>
Var transpose12(Tape<T>& tape, Var x) {
  auto out = kernels::transpose12(tape.value(x));
  return tape.record(std::move(out), {x}, [](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{kernels::transpose12(gy)};
  });
}

template <typename T>
Var bmm(Tape<T>& tape, Var a, Var b, bool trans_a, bool trans_b) {
  auto out = kernels::bmm(tape.value(a), tape.value(b), trans_a, trans_b);
  return tape.record(std::move(out), {a, b}, [&tape, a, b, trans_a, trans_b](const BasicTensor<T>& gy) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    BasicTensor<T> ga, gb;
    // C = op(A) op(B); each case is the transpose-aware chain rule.
    if (!trans_a && !trans_b) {
      ga = kernels::bmm(gy, bv, false, true);
      gb = kernels::bmm(av, gy, true, false);
    } else if (trans_a && !trans_b) {
      ga = kernels::bmm(bv, gy, false, true);
      gb = kernels::bmm(av, gy, false, false);
    } else if (!trans_a && trans_b) {
      ga = kernels::bmm(gy, bv, false, false);
      gb = kernels::bmm(gy, av, true, false);
    } else {
      ga = kernels::bmm(bv, gy, true, true);
      gb = kernels::bmm(gy, av, true, true);
    }
    return std::vector<BasicTensor<T>>{std::move(ga), std::move(gb)};
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  T s = 0;
  for (T v : xv.data()) s += v;
  const Shape in_shape = xv.shape();
  return tape.record(BasicTensor<T>({1}, s), {x}, [in_shape](const BasicTensor<T>& gy) {
    return std::vector<BasicTensor<T>>{BasicTensor<T>(in_shape, gy[0])};
  });
}

template <typename T>
Var dot_const(Tape<T>& tape, Var x, const BasicTensor<T>& weights) {
  const auto& xv = tape.value(x);
  if (weights.numel() != xv.numel()) throw ShapeError("dot_const: weight count mismatch");
  T s = 0;
  for (std::size_t i = 0; i < xv.numel(); ++i) s += weights[i] * xv[i];
  const Shape in_shape = xv.shape();
  return tape.record(BasicTensor<T>({1}, s), {x}, [in_shape, weights](const BasicTensor<T>& gy) {
    BasicTensor<T> g(in_shape);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = weights[i] * gy[0];
    return std::vector<BasicTensor<T>>{std::move(g)};
  });
}

template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, const LabelMap& labels, std::optional<int> ignore_id) {
  const auto& lv = tape.value(logits);
  require_rank(lv.shape(), 4, "cross_entropy logits");
  const int N = lv.dim(0), C = lv.dim(1), H = lv.dim(2), W = lv.dim(3);
  if (labels.shape != Shape{N, H, W}) {
    throw ShapeError("cross_entropy: labels " + shape_str(labels.shape) + " do not match logits " +
                     shape_str(lv.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  // Softmax probabilities are kept for the backward pass.
  auto probs = std::make_shared<BasicTensor<T>>(kernels::softmax_axis(lv, 1));
  std::size_t counted = 0;
  T total = 0;
  for (int n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int y = labels.data[n * plane + p];
      if (ignore_id && y == *ignore_id) continue;
      if (y < 0 || y >= C) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(C) + ")");
      }
      const std::size_t base = static_cast<std::size_t>(n) * C * plane + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < C; ++c) mx = std::max(mx, lv[base + c * plane]);
      T se = 0;
      for (int c = 0; c < C; ++c) se += std::exp(lv[base + c * plane] - mx);
      total += std::log(se) + mx - lv[base + y * plane];
      ++counted;
    }
  }
  const T loss = counted ? total / static_cast<T>(counted) : T(0);
  const Shape shape = lv.shape();
  return tape.record(
      BasicTensor<T>({1}, loss), {logits},
      [probs, labels, ignore_id, counted, shape, N, C, plane](const BasicTensor<T>& gy) {
        BasicTensor<T> g(shape);
        if (counted == 0) return std::vector<BasicTensor<T>>{std::move(g)};
        const T w = gy[0] / static_cast<T>(counted);
        for (int n = 0; n < N; ++n) {
          for (std::size_t p = 0; p < plane; ++p) {
            const int y = labels.data[n * plane + p];
            if (ignore_id && y == *ignore_id) continue;
            const std::size_t base = static_cast<std::size_t>(n) * C * plane + p;
            for (int c = 0; c < C; ++c) g[base + c * plane] = (*probs)[base + c * plane] * w;
            g[base + y * plane] -= w;
          }
        }
        return std::vector<BasicTensor<T>>{std::move(g)};
      });
}

#define DSG_INSTANTIATE(T)                                                              \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var, int, int);                            \
  template Var bilinear_resize<T>(Tape<T>&, Var, int, int);                             \
  template Var softmax_axis<T>(Tape<T>&, Var, int);                                     \
  template Var relu<T>(Tape<T>&, Var);                                                  \
  template Var sigmoid<T>(Tape<T>&, Var);                                               \
  template Var log<T>(Tape<T>&, Var);                                                   \
  template Var add<T>(Tape<T>&, Var, Var);                                              \
  template Var sub<T>(Tape<T>&, Var, Var);                                              \
  template Var mul<T>(Tape<T>&, Var, Var);                                              \
  template Var scale<T>(Tape<T>&, Var, T);                                              \
  template Var concat_channels<T>(Tape<T>&, const std::vector<Var>&);                   \
  template Var avg_pool2<T>(Tape<T>&, Var);                                             \
  template Var channel_affine<T>(Tape<T>&, Var, Var, Var);                              \
  template Var expand_channels<T>(Tape<T>&, Var, int);                                  \
  template Var reshape<T>(Tape<T>&, Var, Shape);                                        \
  template Var transpose12<T>(Tape<T>&, Var);                                           \
  template Var bmm<T>(Tape<T>&, Var, Var, bool, bool);                                  \
  template Var sum<T>(Tape<T>&, Var);                                                   \
  template Var dot_const<T>(Tape<T>&, Var, const BasicTensor<T>&);                      \
  template Var cross_entropy<T>(Tape<T>&, Var, const LabelMap&, std::optional<int>);

DSG_INSTANTIATE(float)
DSG_INSTANTIATE(double)

#undef DSG_INSTANTIATE

}  // namespace dsg::ops
