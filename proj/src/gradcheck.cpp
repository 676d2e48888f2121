#include "aag/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aag/errors.hpp"
#include "aag/ops.hpp"

namespace aag {

namespace {

double rel_error(double numeric, double analytic) {
  const double denom = std::max(std::abs(numeric), std::abs(analytic));
  if (denom == 0.0) return 0.0;
  return std::abs(numeric - analytic) / denom;
}

template <typename T>
double eval_loss(const std::function<Tensor<T>()>& loss_fn) {
  NoGradGuard guard;
  const Tensor<T> loss = loss_fn();
  if (loss.numel() != 1) throw DimensionError("finite_diff_check: loss must be scalar");
  return static_cast<double>(loss.item());
}

}  // namespace

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, const Tensor<T>& weights) {
  return sum(mul(y, weights));
}

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss_fn,
                                  std::vector<Tensor<T>> inputs, GradCheckOptions opts) {
  const double eps = opts.eps > 0.0 ? opts.eps : (sizeof(T) == 4 ? 1e-3 : 1e-6);
  for (auto& x : inputs) {
    if (!x.requires_grad()) throw ArgumentError("finite_diff_check: input does not require grad");
    x.zero_grad();
  }
  Tensor<T> loss = loss_fn();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  for (auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());

  GradCheckResult result;
  auto record = [&](double numeric, double an) {
    result.max_rel_error = std::max(result.max_rel_error, rel_error(numeric, an));
    result.max_abs_error = std::max(result.max_abs_error, std::abs(numeric - an));
    ++result.comparisons;
  };

  if (opts.mode == GradCheckMode::Elementwise) {
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto data = inputs[t].mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T orig = data[i];
        const T plus = static_cast<T>(orig + eps);
        const T minus = static_cast<T>(orig - eps);
        data[i] = plus;
        const double lp = eval_loss(loss_fn);
        data[i] = minus;
        const double lm = eval_loss(loss_fn);
        data[i] = orig;
        const double step = static_cast<double>(plus) - static_cast<double>(minus);
        record((lp - lm) / step, analytic[t][i]);
      }
    }
    return result;
  }

  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<T>> orig;
  for (auto& x : inputs) orig.emplace_back(x.data().begin(), x.data().end());
  auto assign = [&](const std::vector<std::vector<T>>& src) {
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      std::copy(src[t].begin(), src[t].end(), inputs[t].mutable_data().begin());
    }
  };
  for (int d = 0; d < opts.directions; ++d) {
    // Signs follow the analytic gradient so the projection cannot cancel to
    // near zero; zero entries get a random sign.
    std::vector<std::vector<double>> dir;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      dir.emplace_back(analytic[t].size());
      for (std::size_t i = 0; i < dir.back().size(); ++i) {
        const T g = analytic[t][i];
        const bool negative = g < 0 || (g == 0 && coin(rng));
        dir.back()[i] = negative ? -magnitude(rng) : magnitude(rng);
      }
    }
    if (opts.unit_direction) {
      double norm2 = 0.0;
      for (const auto& v : dir) norm2 += std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
      const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
      for (auto& v : dir) {
        for (auto& e : v) e *= inv;
      }
    }
    // Returns {L(x + h v) - L(x - h v), projected analytic change}, using the
    // perturbations actually representable in T.
    auto difference = [&](double h) {
      std::vector<std::vector<T>> plus = orig, minus = orig;
      double projected = 0.0;
      for (std::size_t t = 0; t < inputs.size(); ++t) {
        for (std::size_t i = 0; i < orig[t].size(); ++i) {
          plus[t][i] = static_cast<T>(orig[t][i] + h * dir[t][i]);
          minus[t][i] = static_cast<T>(orig[t][i] - h * dir[t][i]);
          projected += static_cast<double>(analytic[t][i]) *
                       (static_cast<double>(plus[t][i]) - static_cast<double>(minus[t][i]));
        }
      }
      assign(plus);
      const double lp = eval_loss(loss_fn);
      assign(minus);
      const double lm = eval_loss(loss_fn);
      assign(orig);
      return std::pair{lp - lm, projected};
    };
    const auto [numeric, projected] = difference(eps);
    if (opts.smoothness_tol > 0.0) {
      const auto [fine, fine_projected] = difference(eps / 10.0);
      if (rel_error(numeric / projected, fine / fine_projected) > opts.smoothness_tol) {
        ++result.excluded;
        continue;
      }
    }
    record(numeric, projected);
  }
  return result;
}

template Tensor<float> weighted_sum(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> weighted_sum(const Tensor<double>&, const Tensor<double>&);
template GradCheckResult finite_diff_check(const std::function<Tensor<float>()>&,
                                           std::vector<Tensor<float>>, GradCheckOptions);
template GradCheckResult finite_diff_check(const std::function<Tensor<double>()>&,
                                           std::vector<Tensor<double>>, GradCheckOptions);

}  // namespace aag
