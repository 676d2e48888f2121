#include "aag/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "aag/errors.hpp"
#include "blas.hpp"

namespace aag {

namespace {

using detail::make_result;
using detail::TensorImpl;

template <typename T>
TensorImpl<T>* raw(const Tensor<T>& t) {
  return t.impl().get();
}

template <typename T>
bool wants_grad(const TensorImpl<T>* p) {
  return p != nullptr && p->requires_grad;
}

void require_rank(const Shape& d, std::size_t rank, const char* op, const char* what) {
  if (d.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + shape_str(d));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& d, std::size_t axis, const char* op) {
  if (axis >= d.size()) {
    throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) +
                        " out of range for " + shape_str(d));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= d[i];
  s.len = d[axis];
  for (std::size_t i = axis + 1; i < d.size(); ++i) s.inner *= d[i];
  return s;
}

template <typename Fn>
auto unary(const char* name, const auto& x, Fn&& fwd) {
  using T = typename std::decay_t<decltype(x)>::value_type;
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return std::pair<std::vector<T>, const char*>(std::move(out), name);
}

// im2col for one image: col[(c*kh + i)*kw + j][oy*wo + ox].
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            T* col) {
  const std::size_t p = ho * wo;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = col + ((ch * kh + i) * kw + j) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0)
                                                              : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
                std::size_t wo, T* img) {
  const std::size_t p = ho * wo;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = col + ((ch * kh + i) * kw + j) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
    }
  }
}

// Per-axis bilinear sampling table for the half-pixel mapping.
struct LerpTap {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

std::vector<LerpTap> lerp_table(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    double frac = src - static_cast<double>(i0);
    if (i1 == i0) frac = 0.0;
    taps[o] = {i0, i1, frac};
  }
  return taps;
}

}  // namespace

template <typename T>
std::size_t argmax(std::span<const T> values) {
  if (values.empty()) throw DimensionError("argmax of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.dims(), b.dims(), "add");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto* pa = raw(a);
  auto* pb = raw(b);
  return make_result<T>(a.dims(), std::move(out), "add", {a, b}, [pa, pb](std::span<const T> g) {
    for (auto* p : {pa, pb}) {
      if (!wants_grad(p)) continue;
      auto& gp = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.dims(), b.dims(), "sub");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  auto* pa = raw(a);
  auto* pb = raw(b);
  return make_result<T>(a.dims(), std::move(out), "sub", {a, b}, [pa, pb](std::span<const T> g) {
    if (wants_grad(pa)) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants_grad(pb)) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.dims(), b.dims(), "mul");
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto* pa = raw(a);
  auto* pb = raw(b);
  return make_result<T>(a.dims(), std::move(out), "mul", {a, b}, [pa, pb](std::span<const T> g) {
    if (wants_grad(pa)) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->data[i];
    }
    if (wants_grad(pb)) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->data[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  auto* pa = raw(a);
  return make_result<T>(a.dims(), std::move(out), "add_scalar", {a}, [pa](std::span<const T> g) {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto* pa = raw(a);
  return make_result<T>(a.dims(), std::move(out), "scale", {a},
                        [pa, factor](std::span<const T> g) {
                          auto& ga = pa->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  auto* pa = raw(a);
  return make_result<T>({1}, {static_cast<T>(acc)}, "sum", {a}, [pa](std::span<const T> g) {
    auto& ga = pa->ensure_grad();
    for (auto& v : ga) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  auto* pa = raw(a);
  return make_result<T>({1}, {static_cast<T>(acc / n)}, "mean", {a},
                        [pa, n](std::span<const T> g) {
                          auto& ga = pa->ensure_grad();
                          const T share = static_cast<T>(g[0] / n);
                          for (auto& v : ga) v += share;
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto [out, name] = unary("relu", x, [](T v) { return v > T(0) ? v : T(0); });
  auto* px = raw(x);
  return make_result<T>(x.dims(), std::move(out), name, {x}, [px](std::span<const T> g) {
    auto& gx = px->ensure_grad();
    // Subgradient 0 at the kink.
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (px->data[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  // Rounded into the open interval: for large |v| the nearest value would
  // be exactly 0 or 1, which mask consumers treat as out of range.
  const T hi = std::nextafter(T(1), T(0));
  auto [out, name] = unary("sigmoid", x, [hi](T v) {
    if (v >= T(0)) return std::min(hi, T(1) / (T(1) + std::exp(-v)));
    const T e = std::exp(v);
    return std::max(std::numeric_limits<T>::denorm_min(), e / (T(1) + e));
  });
  auto* px = raw(x);
  auto y = make_result<T>(x.dims(), out, name, {x}, nullptr);
  if (!y.requires_grad()) return y;
  y.impl()->grad_fn->backward = [px, out = std::move(out)](std::span<const T> g) {
    auto& gx = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (T(1) - out[i]);
  };
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_axis(x.dims(), axis, "softmax");
  auto in = x.data();
  std::vector<T> out(in.size());
  std::vector<double> e(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t r = 0; r < s.inner; ++r) {
      const std::size_t base = o * s.len * s.inner + r;
      T mx = in[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        e[k] = std::exp(static_cast<double>(in[base + k * s.inner]) - static_cast<double>(mx));
        z += e[k];
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = static_cast<T>(e[k] / z);
    }
  }
  auto* px = raw(x);
  auto y = make_result<T>(x.dims(), out, "softmax", {x}, nullptr);
  if (!y.requires_grad()) return y;
  y.impl()->grad_fn->backward = [px, s, out = std::move(out)](std::span<const T> g) {
    auto& gx = px->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t r = 0; r < s.inner; ++r) {
        const std::size_t base = o * s.len * s.inner + r;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          dot += static_cast<double>(g[i]) * out[i];
        }
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += static_cast<T>(out[i] * (g[i] - dot));
        }
      }
    }
  };
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opts) {
  const auto& xd = x.dims();
  const auto& wd = weight.dims();
  require_rank(xd, 4, "conv2d", "input");
  require_rank(wd, 4, "conv2d", "weight");
  if (opts.stride == 0) throw ArgumentError("conv2d: stride must be positive");
  const std::size_t n = xd[0], cin = xd[1], h = xd[2], w = xd[3];
  const std::size_t cout = wd[0], kh = wd[2], kw = wd[3];
  if (wd[1] != cin) {
    throw DimensionError("conv2d: input channels (axis 1 of input) = " + std::to_string(cin) +
                         " but weight axis 1 = " + std::to_string(wd[1]));
  }
  if (h + 2 * opts.pad < kh || w + 2 * opts.pad < kw) {
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input (axes 2,3) of " + shape_str(xd));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(cout) + "], got " +
                         shape_str(bias.dims()));
  }
  const std::size_t ho = (h + 2 * opts.pad - kh) / opts.stride + 1;
  const std::size_t wo = (w + 2 * opts.pad - kw) / opts.stride + 1;
  const std::size_t k = cin * kh * kw;
  const std::size_t p = ho * wo;
  const bool direct = kh == 1 && kw == 1 && opts.stride == 1 && opts.pad == 0;

  std::vector<T> out(n * cout * p);
  std::vector<T> col(direct ? 0 : k * p);
  auto xin = x.data();
  auto win = weight.data();
  for (std::size_t b = 0; b < n; ++b) {
    const T* img = xin.data() + b * cin * h * w;
    const T* cols = img;
    if (!direct) {
      im2col(img, cin, h, w, kh, kw, opts.stride, opts.pad, ho, wo, col.data());
      cols = col.data();
    }
    T* dst = out.data() + b * cout * p;
    detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(p), static_cast<int>(k),
                 T(1), win.data(), static_cast<int>(k), cols, static_cast<int>(p), T(0), dst,
                 static_cast<int>(p));
    if (bias.defined()) {
      auto bv = bias.data();
      for (std::size_t c = 0; c < cout; ++c) {
        T* row = dst + c * p;
        for (std::size_t i = 0; i < p; ++i) row[i] += bv[c];
      }
    }
  }

  auto* px = raw(x);
  auto* pw = raw(weight);
  auto* pb = bias.defined() ? raw(bias) : nullptr;
  return make_result<T>(
      {n, cout, ho, wo}, std::move(out), "conv2d", {x, weight, bias},
      [=](std::span<const T> g) {
        std::vector<T> colbuf(direct ? 0 : k * p);
        for (std::size_t b = 0; b < n; ++b) {
          const T* gout = g.data() + b * cout * p;
          const T* img = px->data.data() + b * cin * h * w;
          if (wants_grad(pw)) {
            const T* cols = img;
            if (!direct) {
              im2col(img, cin, h, w, kh, kw, opts.stride, opts.pad, ho, wo, colbuf.data());
              cols = colbuf.data();
            }
            detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(k),
                         static_cast<int>(p), T(1), gout, static_cast<int>(p), cols,
                         static_cast<int>(p), T(1), pw->ensure_grad().data(),
                         static_cast<int>(k));
          }
          if (wants_grad(pb)) {
            auto& gb = pb->ensure_grad();
            for (std::size_t c = 0; c < cout; ++c) {
              double acc = 0.0;
              for (std::size_t i = 0; i < p; ++i) acc += gout[c * p + i];
              gb[c] += static_cast<T>(acc);
            }
          }
          if (wants_grad(px)) {
            T* gimg = px->ensure_grad().data() + b * cin * h * w;
            if (direct) {
              detail::gemm(true, false, static_cast<int>(k), static_cast<int>(p),
                           static_cast<int>(cout), T(1), pw->data.data(), static_cast<int>(k),
                           gout, static_cast<int>(p), T(1), gimg, static_cast<int>(p));
            } else {
              detail::gemm(true, false, static_cast<int>(k), static_cast<int>(p),
                           static_cast<int>(cout), T(1), pw->data.data(), static_cast<int>(k),
                           gout, static_cast<int>(p), T(0), colbuf.data(), static_cast<int>(p));
              col2im_add(colbuf.data(), cin, h, w, kh, kw, opts.stride, opts.pad, ho, wo, gimg);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  const auto& xd = x.dims();
  require_rank(xd, 4, "maxpool2d", "input");
  if (k == 0 || stride == 0) throw ArgumentError("maxpool2d: window and stride must be positive");
  const std::size_t n = xd[0], c = xd[1], h = xd[2], w = xd[3];
  if (h < k || w < k) {
    throw DimensionError("maxpool2d: window " + std::to_string(k) + " larger than input " +
                         shape_str(xd));
  }
  const std::size_t ho = (h - k) / stride + 1;
  const std::size_t wo = (w - k) / stride + 1;
  std::vector<T> out(n * c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  auto in = x.data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = base + oy * stride * w + ox * stride;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = base + (oy * stride + i) * w + ox * stride + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[o] = in[best];
        arg[o] = best;
      }
    }
  }
  auto* px = raw(x);
  return make_result<T>({n, c, ho, wo}, std::move(out), "maxpool2d", {x},
                        [px, arg = std::move(arg)](std::span<const T> g) {
                          auto& gx = px->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
                        });
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto& xd = x.dims();
  require_rank(xd, 4, "upsample_bilinear", "input");
  const std::size_t n = xd[0], c = xd[1], h = xd[2], w = xd[3];
  if (out_h < h || out_w < w) {
    throw ArgumentError("upsample_bilinear: target " + std::to_string(out_h) + "x" +
                        std::to_string(out_w) + " smaller than source " + shape_str(xd));
  }
  const auto ty = lerp_table(h, out_h);
  const auto tx = lerp_table(w, out_w);
  std::vector<T> out(n * c * out_h * out_w);
  auto in = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = in.data() + plane * h * w;
    T* dst = out.data() + plane * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ly = ty[oy];
      const T fy = static_cast<T>(ly.frac);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& lx = tx[ox];
        const T fx = static_cast<T>(lx.frac);
        const T a = src[ly.i0 * w + lx.i0];
        const T b = src[ly.i0 * w + lx.i1];
        const T cc = src[ly.i1 * w + lx.i0];
        const T d = src[ly.i1 * w + lx.i1];
        // Difference form keeps constant fields exactly constant.
        const T top = a + fx * (b - a);
        const T bottom = cc + fx * (d - cc);
        dst[oy * out_w + ox] = top + fy * (bottom - top);
      }
    }
  }
  auto* px = raw(x);
  return make_result<T>({n, c, out_h, out_w}, std::move(out), "upsample_bilinear", {x},
                        [=](std::span<const T> g) {
                          auto& gx = px->ensure_grad();
                          for (std::size_t plane = 0; plane < n * c; ++plane) {
                            const T* gsrc = g.data() + plane * out_h * out_w;
                            T* gdst = gx.data() + plane * h * w;
                            for (std::size_t oy = 0; oy < out_h; ++oy) {
                              const auto& ly = ty[oy];
                              const T fy = static_cast<T>(ly.frac);
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                const auto& lx = tx[ox];
                                const T fx = static_cast<T>(lx.frac);
                                const T v = gsrc[oy * out_w + ox];
                                gdst[ly.i0 * w + lx.i0] += v * (T(1) - fy) * (T(1) - fx);
                                gdst[ly.i0 * w + lx.i1] += v * (T(1) - fy) * fx;
                                gdst[ly.i1 * w + lx.i0] += v * fy * (T(1) - fx);
                                gdst[ly.i1 * w + lx.i1] += v * fy * fx;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& scale_t, const Tensor<T>& shift,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                      BatchNormOptions opts) {
  const auto& xd = x.dims();
  require_rank(xd, 4, "batchnorm2d", "input");
  const std::size_t n = xd[0], c = xd[1], hw = xd[2] * xd[3];
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&scale_t, &shift, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw DimensionError("batchnorm2d: per-channel tensors must be [" + std::to_string(c) +
                           "], got " + shape_str(t->dims()));
    }
  }
  const std::size_t m = n * hw;
  if (mode == Mode::Train && m < 2) {
    throw DimensionError("batchnorm2d: degenerate batch, training needs N*H*W >= 2 per channel");
  }
  auto in = x.data();
  auto gamma = scale_t.data();
  auto beta = shift.data();
  std::vector<T> xhat(in.size());
  std::vector<T> out(in.size());
  std::vector<double> invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    double var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = in.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) mu += p[i];
      }
      mu /= static_cast<double>(m);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = in.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
      rm[ch] = static_cast<T>((1.0 - opts.momentum) * rm[ch] + opts.momentum * mu);
      rv[ch] = static_cast<T>((1.0 - opts.momentum) * rv[ch] + opts.momentum * unbiased);
    } else {
      mu = running_mean.data()[ch];
      var = running_var.data()[ch];
    }
    const double is = 1.0 / std::sqrt(var + opts.eps);
    invstd[ch] = is;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = static_cast<T>((in[off + i] - mu) * is);
        xhat[off + i] = xh;
        out[off + i] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  auto* px = raw(x);
  auto* pg = raw(scale_t);
  auto* pb = raw(shift);
  const bool train = mode == Mode::Train;
  return make_result<T>(
      xd, std::move(out), "batchnorm2d", {x, scale_t, shift},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const T> g) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0;
          double sum_gx = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g += g[off + i];
              sum_gx += static_cast<double>(g[off + i]) * xhat[off + i];
            }
          }
          if (wants_grad(pg)) pg->ensure_grad()[ch] += static_cast<T>(sum_gx);
          if (wants_grad(pb)) pb->ensure_grad()[ch] += static_cast<T>(sum_g);
          if (!wants_grad(px)) continue;
          auto& gx = px->ensure_grad();
          const double gam = pg->data[ch];
          const double is = invstd[ch];
          const double md = static_cast<double>(m);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              double d;
              if (train) {
                d = gam * is * (g[off + i] - sum_g / md - xhat[off + i] * sum_gx / md);
              } else {
                d = gam * is * g[off + i];
              }
              gx[off + i] += static_cast<T>(d);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.dims(), 2, "dense", "input");
  require_rank(weight.dims(), 2, "dense", "weight");
  const std::size_t n = x.dim(0), f = x.dim(1), gdim = weight.dim(1);
  if (weight.dim(0) != f) {
    throw DimensionError("dense: input features (axis 1) = " + std::to_string(f) +
                         " but weight axis 0 = " + std::to_string(weight.dim(0)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != gdim)) {
    throw DimensionError("dense: bias must be [" + std::to_string(gdim) + "], got " +
                         shape_str(bias.dims()));
  }
  std::vector<T> out(n * gdim, T(0));
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t r = 0; r < n; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * gdim);
  }
  detail::gemm(false, false, static_cast<int>(n), static_cast<int>(gdim), static_cast<int>(f),
               T(1), x.data().data(), static_cast<int>(f), weight.data().data(),
               static_cast<int>(gdim), T(1), out.data(), static_cast<int>(gdim));
  auto* px = raw(x);
  auto* pw = raw(weight);
  auto* pb = bias.defined() ? raw(bias) : nullptr;
  return make_result<T>(
      {n, gdim}, std::move(out), "dense", {x, weight, bias}, [=](std::span<const T> g) {
        if (wants_grad(px)) {
          detail::gemm(false, true, static_cast<int>(n), static_cast<int>(f),
                       static_cast<int>(gdim), T(1), g.data(), static_cast<int>(gdim),
                       pw->data.data(), static_cast<int>(gdim), T(1), px->ensure_grad().data(),
                       static_cast<int>(f));
        }
        if (wants_grad(pw)) {
          detail::gemm(true, false, static_cast<int>(f), static_cast<int>(gdim),
                       static_cast<int>(n), T(1), px->data.data(), static_cast<int>(f), g.data(),
                       static_cast<int>(gdim), T(1), pw->ensure_grad().data(),
                       static_cast<int>(gdim));
        }
        if (wants_grad(pb)) {
          auto& gb = pb->ensure_grad();
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < gdim; ++j) gb[j] += g[r * gdim + j];
          }
        }
      });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const Shape& first = parts[0].dims();
  if (axis >= first.size()) {
    throw ArgumentError("concat: axis " + std::to_string(axis) + " out of range for " +
                        shape_str(first));
  }
  Shape out_dims = first;
  out_dims[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& t : parts) {
    const auto& d = t.dims();
    if (d.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i != axis && d[i] != first[i]) {
        throw DimensionError("concat: axis " + std::to_string(i) + " differs: " + shape_str(d) +
                             " vs " + shape_str(first));
      }
    }
    lens.push_back(d[axis]);
    out_dims[axis] += d[axis];
  }
  const auto s = split_axis(out_dims, axis, "concat");
  std::vector<T> out(numel(out_dims));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].data();
    const std::size_t block = lens[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src.data() + o * block, block, out.data() + o * s.len * s.inner + offset);
    }
    offset += block;
  }
  std::vector<TensorImpl<T>*> ptrs;
  for (const auto& t : parts) ptrs.push_back(raw(t));
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return make_result<T>(out_dims, std::move(out), "concat", std::move(inputs),
                        [ptrs, lens, s](std::span<const T> g) {
                          std::size_t offset = 0;
                          for (std::size_t p = 0; p < ptrs.size(); ++p) {
                            const std::size_t block = lens[p] * s.inner;
                            if (wants_grad(ptrs[p])) {
                              auto& gp = ptrs[p]->ensure_grad();
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                const T* src = g.data() + o * s.len * s.inner + offset;
                                T* dst = gp.data() + o * block;
                                for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                              }
                            }
                            offset += block;
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_axis(x.dims(), axis, "slice");
  if (begin >= end || end > s.len) {
    throw ArgumentError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") invalid for axis of length " + std::to_string(s.len));
  }
  Shape out_dims = x.dims();
  out_dims[axis] = end - begin;
  const std::size_t block = (end - begin) * s.inner;
  const std::size_t offset = begin * s.inner;
  std::vector<T> out(numel(out_dims));
  auto src = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.data() + o * s.len * s.inner + offset, block, out.data() + o * block);
  }
  auto* px = raw(x);
  return make_result<T>(out_dims, std::move(out), "slice", {x}, [=](std::span<const T> g) {
    auto& gx = px->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = gx.data() + o * s.len * s.inner + offset;
      for (std::size_t i = 0; i < block; ++i) dst[i] += g[o * block + i];
    }
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.dims(), 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  auto in = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += in[i * hw + j];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  auto* px = raw(x);
  return make_result<T>({n, c}, std::move(out), "global_avg_pool", {x},
                        [px, hw](std::span<const T> g) {
                          auto& gx = px->ensure_grad();
                          const T inv = T(1) / static_cast<T>(hw);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] * inv;
                          }
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.dims(), 2, "cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  auto in = logits.data();
  std::vector<T> probs(n * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ArgumentError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                          std::to_string(k) + ")");
    }
    const T* row = in.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[label];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  loss /= static_cast<double>(n);
  auto* px = raw(logits);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>({1}, {static_cast<T>(loss)}, "cross_entropy", {logits},
                        [px, n, k, probs = std::move(probs), lab = std::move(lab)](
                            std::span<const T> g) {
                          auto& gx = px->ensure_grad();
                          const double s = g[0] / static_cast<double>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const double onehot = static_cast<int>(j) == lab[r] ? 1.0 : 0.0;
                              gx[r * k + j] += static_cast<T>(s * (probs[r * k + j] - onehot));
                            }
                          }
                        });
}

#define AAG_INSTANTIATE_OPS(T)                                                                  \
  template std::size_t argmax(std::span<const T>);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                            Conv2dOptions);                                                    \
  template Tensor<T> maxpool2d(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t, std::size_t);            \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                 Tensor<T>&, Tensor<T>&, Mode, BatchNormOptions);              \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                          \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

AAG_INSTANTIATE_OPS(float)
AAG_INSTANTIATE_OPS(double)

}  // namespace aag
