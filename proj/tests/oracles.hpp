#pragma once

// Brute-force reference implementations used only by tests. They operate on
// plain vectors in double precision and share no code with src/.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// out[n][co][oy][ox] = b[co] + sum_{ci,i,j} x[n][ci][oy*s+i-p][ox*s+j-p] * w[co][ci][i][j]
inline std::vector<double> conv2d(const std::vector<double>& x, std::size_t n, std::size_t cin,
                                  std::size_t h, std::size_t w, const std::vector<double>& wt,
                                  std::size_t cout, std::size_t kh, std::size_t kw,
                                  const std::vector<double>& bias, std::size_t stride,
                                  std::size_t pad, std::size_t& ho, std::size_t& wo) {
  ho = (h + 2 * pad - kh) / stride + 1;
  wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * cout * ho * wo, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                  continue;
                acc += x[((b * cin + ci) * h + iy) * w + ix] *
                       wt[((co * cin + ci) * kh + i) * kw + j];
              }
          out[((b * cout + co) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

// [n,f] x [f,g] + bias[g]
inline std::vector<double> matmul_bias(const std::vector<double>& a, std::size_t n, std::size_t f,
                                       const std::vector<double>& b, std::size_t g,
                                       const std::vector<double>& bias) {
  std::vector<double> out(n * g, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < g; ++c) {
      double acc = bias.empty() ? 0.0 : bias[c];
      for (std::size_t k = 0; k < f; ++k) acc += a[r * f + k] * b[k * g + c];
      out[r * g + c] = acc;
    }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (e[i] = std::exp(x[i]));
  for (auto& v : e) v /= z;
  return e;
}

inline double cross_entropy(const std::vector<double>& logits, std::size_t n, std::size_t k,
                            const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> row(logits.begin() + r * k, logits.begin() + (r + 1) * k);
    total += -std::log(softmax(row)[labels[r]]);
  }
  return total / static_cast<double>(n);
}

// Bilinear weight of source pixel s for destination pixel d along one axis,
// derived from the half-pixel coordinate and the clamped tent kernel.
inline double tent_weight(std::size_t d, std::size_t s, std::size_t in, std::size_t out) {
  double src = (d + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const double dist = std::abs(src - static_cast<double>(s));
  return dist >= 1.0 ? 0.0 : 1.0 - dist;
}

inline std::vector<double> bilinear(const std::vector<double>& x, std::size_t h, std::size_t w,
                                    std::size_t oh, std::size_t ow) {
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx) {
      double acc = 0.0;
      for (std::size_t sy = 0; sy < h; ++sy)
        for (std::size_t sx = 0; sx < w; ++sx)
          acc += tent_weight(y, sy, h, oh) * tent_weight(xx, sx, w, ow) * x[sy * w + sx];
      out[y * ow + xx] = acc;
    }
  return out;
}

inline double aabd(const std::vector<int>& pred, const std::vector<int>& truth) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

inline std::vector<std::size_t> confusion(const std::vector<int>& pred,
                                          const std::vector<int>& truth, std::size_t k) {
  std::vector<std::size_t> m(k * k, 0);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < pred.size(); ++i)
        if (truth[i] == static_cast<int>(t) && pred[i] == static_cast<int>(p)) ++m[t * k + p];
  return m;
}

}  // namespace oracle
