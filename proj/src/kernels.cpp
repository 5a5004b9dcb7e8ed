#include "dsg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace dsg::kernels {

namespace {

// 64-byte vectors: 16 floats or 8 doubles per register (split by the compiler
// when the target has narrower registers).
typedef float vfloat __attribute__((vector_size(64)));
typedef double vdouble __attribute__((vector_size(64)));

template <typename T>
struct Vec;
template <>
struct Vec<float> {
  using type = vfloat;
};
template <>
struct Vec<double> {
  using type = vdouble;
};

// MR x (one vector) tile; the accumulators stay in registers across K.
template <typename T, int MR>
inline void gemm_tile(int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc) {
  using V = typename Vec<T>::type;
  V acc[MR];
  for (int r = 0; r < MR; ++r) std::memcpy(&acc[r], C + static_cast<std::size_t>(r) * ldc, sizeof(V));
  for (int k = 0; k < K; ++k) {
    V b;
    std::memcpy(&b, B + static_cast<std::size_t>(k) * ldb, sizeof(V));
    for (int r = 0; r < MR; ++r) acc[r] += A[static_cast<std::size_t>(r) * lda + k] * b;
  }
  for (int r = 0; r < MR; ++r) std::memcpy(C + static_cast<std::size_t>(r) * ldc, &acc[r], sizeof(V));
}

template <typename T, int MR>
inline void gemm_rows(int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc) {
  constexpr int NR = static_cast<int>(sizeof(typename Vec<T>::type) / sizeof(T));
  int j = 0;
  for (; j + NR <= N; j += NR) gemm_tile<T, MR>(K, A, lda, B + j, ldb, C + j, ldc);
  for (; j < N; ++j) {
    for (int r = 0; r < MR; ++r) {
      T s = C[static_cast<std::size_t>(r) * ldc + j];
      for (int k = 0; k < K; ++k) s += A[static_cast<std::size_t>(r) * lda + k] * B[static_cast<std::size_t>(k) * ldb + j];
      C[static_cast<std::size_t>(r) * ldc + j] = s;
    }
  }
}

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, ConvGeometry g, int Ho, int Wo,
            T* col) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + static_cast<std::size_t>((c * kh + ky) * kw + kx) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          T* out = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(out, out + Wo, T(0));
            continue;
          }
          const T* in = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            out[ox] = (ix >= 0 && ix < W) ? in[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, ConvGeometry g, int Ho, int Wo,
                T* x) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * kh + ky) * kw + kx) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= H) continue;
          T* out = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < W) out[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* src, int rows, int cols) {
  std::vector<T> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
  return out;
}

struct ConvDims {
  int N, Cin, H, W, Cout, kh, kw, Ho, Wo;
  bool pointwise;
};

template <typename T>
ConvDims check_conv(const BasicTensor<T>& input, const BasicTensor<T>& kernel, ConvGeometry g) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  ConvDims d{};
  d.N = input.dim(0);
  d.Cin = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.Cout = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  if (kernel.dim(1) != d.Cin) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)) + " input channels, input " +
                     shape_str(input.shape()) + " has " + std::to_string(d.Cin));
  }
  if (d.kh % 2 == 0 || d.kw % 2 == 0) {
    throw ShapeError("conv2d: kernel size must be odd, got " + shape_str(kernel.shape()));
  }
  if (g.stride < 1 || g.padding < 0) {
    throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  }
  if (d.H + 2 * g.padding < d.kh || d.W + 2 * g.padding < d.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  d.Ho = (d.H + 2 * g.padding - d.kh) / g.stride + 1;
  d.Wo = (d.W + 2 * g.padding - d.kw) / g.stride + 1;
  d.pointwise = d.kh == 1 && d.kw == 1 && g.stride == 1 && g.padding == 0;
  return d;
}

}  // namespace

template <typename T>
void gemm_acc(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc) {
  int i = 0;
  for (; i + 8 <= M; i += 8) {
    gemm_rows<T, 8>(N, K, A + static_cast<std::size_t>(i) * lda, lda, B, ldb, C + static_cast<std::size_t>(i) * ldc,
                    ldc);
  }
  for (; i + 4 <= M; i += 4) {
    gemm_rows<T, 4>(N, K, A + static_cast<std::size_t>(i) * lda, lda, B, ldb, C + static_cast<std::size_t>(i) * ldc,
                    ldc);
  }
  for (; i < M; ++i) {
    gemm_rows<T, 1>(N, K, A + static_cast<std::size_t>(i) * lda, lda, B, ldb,
                    C + static_cast<std::size_t>(i) * ldc, ldc);
  }
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, ConvGeometry g) {
  const ConvDims d = check_conv(input, kernel, g);
  if (bias.numel() != static_cast<std::size_t>(d.Cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(d.Cout) + " output channels");
  }
  const int K = d.Cin * d.kh * d.kw;
  const int P = d.Ho * d.Wo;
  BasicTensor<T> out({d.N, d.Cout, d.Ho, d.Wo});
  std::vector<T> col(d.pointwise ? 0 : static_cast<std::size_t>(K) * P);
  for (int n = 0; n < d.N; ++n) {
    const T* x = input.ptr() + static_cast<std::size_t>(n) * d.Cin * d.H * d.W;
    const T* cols = x;
    if (!d.pointwise) {
      im2col(x, d.Cin, d.H, d.W, d.kh, d.kw, g, d.Ho, d.Wo, col.data());
      cols = col.data();
    }
    T* y = out.ptr() + static_cast<std::size_t>(n) * d.Cout * P;
    for (int co = 0; co < d.Cout; ++co) std::fill(y + static_cast<std::size_t>(co) * P, y + static_cast<std::size_t>(co + 1) * P, bias[co]);
    gemm_acc(d.Cout, P, K, kernel.ptr(), K, cols, P, y, P);
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, ConvGeometry g, bool need_input) {
  const ConvDims d = check_conv(input, kernel, g);
  if (grad_out.shape() != Shape{d.N, d.Cout, d.Ho, d.Wo}) {
    throw ShapeError("conv2d backward: grad " + shape_str(grad_out.shape()) + " mismatches output");
  }
  const int K = d.Cin * d.kh * d.kw;
  const int P = d.Ho * d.Wo;
  ConvGrads<T> gr;
  gr.kernel = BasicTensor<T>::zeros_like(kernel);
  gr.bias = BasicTensor<T>::zeros({d.Cout});
  if (need_input) gr.input = BasicTensor<T>::zeros_like(input);

  const std::vector<T> wt = transposed(kernel.ptr(), d.Cout, K);
  std::vector<T> col(d.pointwise ? 0 : static_cast<std::size_t>(K) * P);
  std::vector<T> gcol(d.pointwise || !need_input ? 0 : static_cast<std::size_t>(K) * P);
  for (int n = 0; n < d.N; ++n) {
    const T* x = input.ptr() + static_cast<std::size_t>(n) * d.Cin * d.H * d.W;
    const T* gy = grad_out.ptr() + static_cast<std::size_t>(n) * d.Cout * P;
    for (int co = 0; co < d.Cout; ++co) {
      T s = gr.bias[co];
      for (int p = 0; p < P; ++p) s += gy[static_cast<std::size_t>(co) * P + p];
      gr.bias[co] = s;
    }
    const T* cols = x;
    if (!d.pointwise) {
      im2col(x, d.Cin, d.H, d.W, d.kh, d.kw, g, d.Ho, d.Wo, col.data());
      cols = col.data();
    }
    const std::vector<T> colt = transposed(cols, K, P);
    gemm_acc(d.Cout, K, P, gy, P, colt.data(), K, gr.kernel.ptr(), K);
    if (need_input) {
      T* gx = gr.input.ptr() + static_cast<std::size_t>(n) * d.Cin * d.H * d.W;
      if (d.pointwise) {
        gemm_acc(K, P, d.Cout, wt.data(), d.Cout, gy, P, gx, P);
      } else {
        std::fill(gcol.begin(), gcol.end(), T(0));
        gemm_acc(K, P, d.Cout, wt.data(), d.Cout, gy, P, gcol.data(), P);
        col2im_add(gcol.data(), d.Cin, d.H, d.W, d.kh, d.kw, g, d.Ho, d.Wo, gx);
      }
    }
  }
  return gr;
}

namespace {

struct LerpTap {
  int i0, i1;
  double frac;
};

std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, int out_h, int out_w) {
  require_rank(input.shape(), 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: target size must be >= 1");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (out_h == H && out_w == W) return input;
  const auto ty = lerp_taps(H, out_h);
  const auto tx = lerp_taps(W, out_w);
  BasicTensor<T> out({N, C, out_h, out_w});
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = input.ptr() + static_cast<std::size_t>(nc) * H * W;
    T* dst = out.ptr() + static_cast<std::size_t>(nc) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      const T* r0 = src + ty[y].i0 * W;
      const T* r1 = src + ty[y].i1 * W;
      for (int x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(tx[x].frac);
        const T top = r0[tx[x].i0] + fx * (r0[tx[x].i1] - r0[tx[x].i0]);
        const T bot = r1[tx[x].i0] + fx * (r1[tx[x].i1] - r1[tx[x].i0]);
        dst[y * out_w + x] = top + fy * (bot - top);
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> bilinear_resize_backward(const BasicTensor<T>& grad_out, int in_h, int in_w) {
  require_rank(grad_out.shape(), 4, "bilinear_resize backward");
  const int N = grad_out.dim(0), C = grad_out.dim(1), out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (out_h == in_h && out_w == in_w) return grad_out;
  const auto ty = lerp_taps(in_h, out_h);
  const auto tx = lerp_taps(in_w, out_w);
  BasicTensor<T> gin({N, C, in_h, in_w});
  for (int nc = 0; nc < N * C; ++nc) {
    const T* g = grad_out.ptr() + static_cast<std::size_t>(nc) * out_h * out_w;
    T* dst = gin.ptr() + static_cast<std::size_t>(nc) * in_h * in_w;
    for (int y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      T* r0 = dst + ty[y].i0 * in_w;
      T* r1 = dst + ty[y].i1 * in_w;
      for (int x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(tx[x].frac);
        const T v = g[y * out_w + x];
        const T top = v * (T(1) - fy);
        const T bot = v * fy;
        r0[tx[x].i0] += top * (T(1) - fx);
        r0[tx[x].i1] += top * fx;
        r1[tx[x].i0] += bot * (T(1) - fx);
        r1[tx[x].i1] += bot * fx;
      }
    }
  }
  return gin;
}

namespace {

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("softmax_axis: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  AxisSplit a{1, static_cast<std::size_t>(s[axis]), 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  for (int i = axis + 1; i < r; ++i) a.inner *= s[i];
  return a;
}

}  // namespace

template <typename T>
BasicTensor<T> softmax_axis(const BasicTensor<T>& input, int axis) {
  const AxisSplit a = split_axis(input.shape(), axis);
  BasicTensor<T> out(input.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      const std::size_t base = o * a.len * a.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < a.len; ++k) mx = std::max(mx, input[base + k * a.inner]);
      T sum = 0;
      for (std::size_t k = 0; k < a.len; ++k) {
        const T e = std::exp(input[base + k * a.inner] - mx);
        out[base + k * a.inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t k = 0; k < a.len; ++k) out[base + k * a.inner] *= inv;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_axis_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out,
                                     int axis) {
  const AxisSplit a = split_axis(output.shape(), axis);
  BasicTensor<T> gin(output.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      const std::size_t base = o * a.len * a.inner + i;
      T dot = 0;
      for (std::size_t k = 0; k < a.len; ++k) {
        const std::size_t idx = base + k * a.inner;
        dot += output[idx] * grad_out[idx];
      }
      for (std::size_t k = 0; k < a.len; ++k) {
        const std::size_t idx = base + k * a.inner;
        gin[idx] = output[idx] * (grad_out[idx] - dot);
      }
    }
  }
  return gin;
}

template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& input) {
  require_rank(input.shape(), 4, "avg_pool2");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 || W % 2) throw ShapeError("avg_pool2: H and W must be even, got " + shape_str(input.shape()));
  BasicTensor<T> out({N, C, H / 2, W / 2});
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = input.ptr() + static_cast<std::size_t>(nc) * H * W;
    T* dst = out.ptr() + static_cast<std::size_t>(nc) * (H / 2) * (W / 2);
    for (int y = 0; y < H / 2; ++y)
      for (int x = 0; x < W / 2; ++x) {
        const T s = src[2 * y * W + 2 * x] + src[2 * y * W + 2 * x + 1] + src[(2 * y + 1) * W + 2 * x] +
                    src[(2 * y + 1) * W + 2 * x + 1];
        dst[y * (W / 2) + x] = s * T(0.25);
      }
  }
  return out;
}

template <typename T>
BasicTensor<T> avg_pool2_backward(const BasicTensor<T>& grad_out) {
  require_rank(grad_out.shape(), 4, "avg_pool2 backward");
  const int N = grad_out.dim(0), C = grad_out.dim(1), h = grad_out.dim(2), w = grad_out.dim(3);
  BasicTensor<T> gin({N, C, 2 * h, 2 * w});
  for (int nc = 0; nc < N * C; ++nc) {
    const T* g = grad_out.ptr() + static_cast<std::size_t>(nc) * h * w;
    T* dst = gin.ptr() + static_cast<std::size_t>(nc) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x) dst[y * 2 * w + x] = g[(y / 2) * w + x / 2] * T(0.25);
  }
  return gin;
}

template <typename T>
BasicTensor<T> transpose12(const BasicTensor<T>& x) {
  require_rank(x.shape(), 3, "transpose12");
  const int B = x.dim(0), R = x.dim(1), C = x.dim(2);
  BasicTensor<T> out({B, C, R});
  for (int b = 0; b < B; ++b) {
    const auto t = transposed(x.ptr() + static_cast<std::size_t>(b) * R * C, R, C);
    std::copy(t.begin(), t.end(), out.ptr() + static_cast<std::size_t>(b) * R * C);
  }
  return out;
}

template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b, bool trans_a, bool trans_b) {
  require_rank(a.shape(), 3, "bmm lhs");
  require_rank(b.shape(), 3, "bmm rhs");
  if (a.dim(0) != b.dim(0)) throw ShapeError("bmm: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const BasicTensor<T> lhs = trans_a ? transpose12(a) : a;
  const BasicTensor<T> rhs = trans_b ? transpose12(b) : b;
  const int B = lhs.dim(0), M = lhs.dim(1), K = lhs.dim(2), N = rhs.dim(2);
  if (rhs.dim(1) != K) {
    throw ShapeError("bmm: inner dimension mismatch " + shape_str(lhs.shape()) + " x " + shape_str(rhs.shape()));
  }
  BasicTensor<T> out({B, M, N});
  for (int i = 0; i < B; ++i) {
    gemm_acc(M, N, K, lhs.ptr() + static_cast<std::size_t>(i) * M * K, K,
             rhs.ptr() + static_cast<std::size_t>(i) * K * N, N,
             out.ptr() + static_cast<std::size_t>(i) * M * N, N);
  }
  return out;
}

#define DSG_INSTANTIATE(T)                                                                       \
  template void gemm_acc<T>(int, int, int, const T*, int, const T*, int, T*, int);               \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                    const BasicTensor<T>&, ConvGeometry);                        \
  template ConvGrads<T> conv2d_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                           const BasicTensor<T>&, ConvGeometry, bool);           \
  template BasicTensor<T> bilinear_resize<T>(const BasicTensor<T>&, int, int);                   \
  template BasicTensor<T> bilinear_resize_backward<T>(const BasicTensor<T>&, int, int);          \
  template BasicTensor<T> softmax_axis<T>(const BasicTensor<T>&, int);                           \
  template BasicTensor<T> softmax_axis_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                   int);                                         \
  template BasicTensor<T> avg_pool2<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> avg_pool2_backward<T>(const BasicTensor<T>&);                          \
  template BasicTensor<T> transpose12<T>(const BasicTensor<T>&);                                 \
  template BasicTensor<T> bmm<T>(const BasicTensor<T>&, const BasicTensor<T>&, bool, bool);

DSG_INSTANTIATE(float)
DSG_INSTANTIATE(double)

#undef DSG_INSTANTIATE

}  // namespace dsg::kernels
