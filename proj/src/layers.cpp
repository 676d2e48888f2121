#include "aag/layers.hpp"

#include <cmath>

#include "aag/errors.hpp"

namespace aag {

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, std::size_t pad, bool with_bias, std::mt19937_64& rng)
    : options{stride, pad} {
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  weight = Tensor<T>::randn({out_channels, in_channels, kernel, kernel}, rng,
                            std::sqrt(2.0 / fan_in), true);
  if (with_bias) bias = Tensor<T>::zeros({out_channels}, true);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, options);
}

template <typename T>
void Conv2d<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(join_name(prefix, "weight"), weight, ParamKind::Parameter);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias, ParamKind::Parameter);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : scale(Tensor<T>::full({channels}, T(1), true)),
      shift(Tensor<T>::zeros({channels}, true)),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::full({channels}, T(1))) {}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  return batchnorm2d(x, scale, shift, running_mean, running_var, mode);
}

template <typename T>
void BatchNorm2d<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(join_name(prefix, "scale"), scale, ParamKind::Parameter);
  fn(join_name(prefix, "shift"), shift, ParamKind::Parameter);
  fn(join_name(prefix, "running_mean"), running_mean, ParamKind::Buffer);
  fn(join_name(prefix, "running_var"), running_var, ParamKind::Buffer);
}

template <typename T>
Dense<T>::Dense(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = Tensor<T>::uniform({in_features, out_features}, rng, -bound, bound, true);
  bias = Tensor<T>::uniform({out_features}, rng, -bound, bound, true);
}

template <typename T>
Tensor<T> Dense<T>::forward(const Tensor<T>& x) const {
  return dense(x, weight, bias);
}

template <typename T>
void Dense<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(join_name(prefix, "weight"), weight, ParamKind::Parameter);
  fn(join_name(prefix, "bias"), bias, ParamKind::Parameter);
}

template <typename T>
ResidualUnit<T>::ResidualUnit(ResidualUnitSpec spec, std::mt19937_64& rng) : spec_(spec) {
  if (spec.in_channels == 0 || spec.out_channels == 0 || (spec.stride != 1 && spec.stride != 2)) {
    throw ConfigError("residual unit needs positive channels and stride 1 or 2");
  }
  conv1 = Conv2d<T>(spec.in_channels, spec.out_channels, 3, spec.stride, 1, false, rng);
  bn1 = BatchNorm2d<T>(spec.out_channels);
  conv2 = Conv2d<T>(spec.out_channels, spec.out_channels, 3, 1, 1, false, rng);
  bn2 = BatchNorm2d<T>(spec.out_channels);
  if (spec.projection()) {
    proj = Conv2d<T>(spec.in_channels, spec.out_channels, 1, spec.stride, 0, false, rng);
    proj_bn = BatchNorm2d<T>(spec.out_channels);
  }
}

template <typename T>
Tensor<T> ResidualUnit<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
    throw DimensionError("residual unit expects " + std::to_string(spec_.in_channels) +
                         " input channels, got " + shape_str(x.dims()));
  }
  auto h = relu(bn1.forward(conv1.forward(x), mode));
  h = bn2.forward(conv2.forward(h), mode);
  const Tensor<T> skip = proj ? proj_bn->forward(proj->forward(x), mode) : x;
  return relu(add(h, skip));
}

template <typename T>
void ResidualUnit<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  conv1.visit(join_name(prefix, "conv1"), fn);
  bn1.visit(join_name(prefix, "bn1"), fn);
  conv2.visit(join_name(prefix, "conv2"), fn);
  bn2.visit(join_name(prefix, "bn2"), fn);
  if (proj) {
    proj->visit(join_name(prefix, "proj"), fn);
    proj_bn->visit(join_name(prefix, "proj_bn"), fn);
  }
}

template <typename T>
MaskBranch<T>::MaskBranch(const AttentionModuleSpec& spec, std::mt19937_64& rng)
    : levels_(spec.mask_levels) {
  if (spec.mask_levels == 0) throw ConfigError("mask branch needs at least one level");
  const ResidualUnitSpec unit{spec.channels, spec.channels, 1};
  down.resize(levels_);
  up.resize(levels_);
  for (auto& level : down) {
    for (std::size_t u = 0; u < spec.units_per_level; ++u) level.emplace_back(unit, rng);
  }
  for (auto& level : up) {
    for (std::size_t u = 0; u < spec.units_per_level; ++u) level.emplace_back(unit, rng);
  }
  out = Conv2d<T>(spec.channels, spec.channels, 1, 1, 0, true, rng);
}

template <typename T>
Tensor<T> MaskBranch<T>::forward(const Tensor<T>& x, Mode mode) {
  const std::size_t div = std::size_t{1} << levels_;
  if (x.rank() != 4 || x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw ConfigError("mask branch with " + std::to_string(levels_) +
                      " levels needs spatial dims divisible by " + std::to_string(div) +
                      ", got " + shape_str(x.dims()));
  }
  std::vector<Tensor<T>> levels{x};
  for (std::size_t i = 0; i < levels_; ++i) {
    auto h = maxpool2d(levels.back(), 2, 2);
    for (auto& unit : down[i]) h = unit.forward(h, mode);
    levels.push_back(h);
  }
  Tensor<T> h = levels.back();
  for (std::size_t i = levels_; i-- > 0;) {
    const auto& skip = levels[i];
    h = add(upsample_bilinear(h, skip.dim(2), skip.dim(3)), skip);
    for (auto& unit : up[i]) h = unit.forward(h, mode);
  }
  return sigmoid(out.forward(h));
}

template <typename T>
void MaskBranch<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  for (std::size_t i = 0; i < down.size(); ++i) {
    for (std::size_t u = 0; u < down[i].size(); ++u) {
      const std::string level = "down" + std::to_string(i);
      down[i][u].visit(join_name(prefix, u == 0 ? level : level + "_" + std::to_string(u)), fn);
    }
  }
  for (std::size_t i = 0; i < up.size(); ++i) {
    for (std::size_t u = 0; u < up[i].size(); ++u) {
      const std::string level = "up" + std::to_string(i);
      up[i][u].visit(join_name(prefix, u == 0 ? level : level + "_" + std::to_string(u)), fn);
    }
  }
  out.visit(join_name(prefix, "out"), fn);
}

template <typename T>
Tensor<T> combine_attention(const Tensor<T>& trunk, const Tensor<T>& mask, CombineRule rule) {
  if (rule == CombineRule::Residual) return mul(add_scalar(mask, T(1)), trunk);
  return mul(mask, trunk);
}

template <typename T>
AttentionModule<T>::AttentionModule(const AttentionModuleSpec& spec, std::mt19937_64& rng)
    : spec_(spec) {
  if (spec.channels == 0 || spec.trunk_depth == 0) {
    throw ConfigError("attention module needs positive channels and trunk depth");
  }
  for (std::size_t i = 0; i < spec.trunk_depth; ++i) {
    trunk.emplace_back(ResidualUnitSpec{spec.channels, spec.channels, 1}, rng);
  }
  mask = MaskBranch<T>(spec, rng);
}

template <typename T>
Tensor<T> AttentionModule<T>::trunk_forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = x;
  for (auto& unit : trunk) h = unit.forward(h, mode);
  return h;
}

template <typename T>
AttentionOutput<T> AttentionModule<T>::forward(const Tensor<T>& x, Mode mode) {
  const auto t = trunk_forward(x, mode);
  const auto m = mask.forward(x, mode);
  return {combine_attention(t, m, spec_.combine), m};
}

template <typename T>
void AttentionModule<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    trunk[i].visit(join_name(prefix, "trunk" + std::to_string(i)), fn);
  }
  mask.visit(join_name(prefix, "mask"), fn);
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class Dense<float>;
template class Dense<double>;
template class ResidualUnit<float>;
template class ResidualUnit<double>;
template class MaskBranch<float>;
template class MaskBranch<double>;
template class AttentionModule<float>;
template class AttentionModule<double>;
template Tensor<float> combine_attention(const Tensor<float>&, const Tensor<float>&, CombineRule);
template Tensor<double> combine_attention(const Tensor<double>&, const Tensor<double>&,
                                          CombineRule);

}  // namespace aag
