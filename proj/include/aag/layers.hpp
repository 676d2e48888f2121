#pragma once

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aag/ops.hpp"
#include "aag/tensor.hpp"

namespace aag {

enum class ParamKind { Parameter, Buffer };

// Called once per tensor with its dotted path, e.g.
// "attn1.mask.down0.conv1.weight". Buffers are batch-norm running statistics.
template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, ParamKind)>;

std::string join_name(const std::string& prefix, const std::string& name);

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t pad, bool with_bias, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);

  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer has no bias
  Conv2dOptions options;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);

  Tensor<T> scale;
  Tensor<T> shift;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;
};

struct ResidualUnitSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;

  bool projection() const { return in_channels != out_channels || stride != 1; }
};

// relu(BN(conv3x3(relu(BN(conv3x3(x))))) + skip(x)), skip being the identity
// or a strided 1x1 conv + BN when the shape changes.
template <typename T>
class ResidualUnit {
 public:
  ResidualUnit() = default;
  ResidualUnit(ResidualUnitSpec spec, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
  const ResidualUnitSpec& spec() const { return spec_; }

  Conv2d<T> conv1;
  BatchNorm2d<T> bn1;
  Conv2d<T> conv2;
  BatchNorm2d<T> bn2;
  std::optional<Conv2d<T>> proj;
  std::optional<BatchNorm2d<T>> proj_bn;

 private:
  ResidualUnitSpec spec_;
};

enum class CombineRule {
  Residual,  // (1 + M) * T
  Plain,     // M * T
};

struct AttentionModuleSpec {
  std::size_t channels = 0;
  std::size_t trunk_depth = 2;
  std::size_t mask_levels = 1;
  std::size_t units_per_level = 1;
  CombineRule combine = CombineRule::Residual;

  // Spatial sizes must be divisible by this for the mask to come back to
  // the trunk's resolution.
  std::size_t spatial_divisor() const { return std::size_t{1} << mask_levels; }
};

// Bottom-up/top-down soft mask. Descends `mask_levels` times through
// maxpool(2,2) + residual units, then climbs back with bilinear upsampling,
// adding the activation of the matching level on the way up, and ends in a
// 1x1 conv followed by a sigmoid.
template <typename T>
class MaskBranch {
 public:
  MaskBranch() = default;
  MaskBranch(const AttentionModuleSpec& spec, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);

  std::vector<std::vector<ResidualUnit<T>>> down;
  std::vector<std::vector<ResidualUnit<T>>> up;
  Conv2d<T> out;

 private:
  std::size_t levels_ = 0;
};

template <typename T>
struct AttentionOutput {
  Tensor<T> out;
  Tensor<T> mask;
};

template <typename T>
class AttentionModule {
 public:
  AttentionModule() = default;
  AttentionModule(const AttentionModuleSpec& spec, std::mt19937_64& rng);

  AttentionOutput<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> trunk_forward(const Tensor<T>& x, Mode mode);
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
  const AttentionModuleSpec& spec() const { return spec_; }

  std::vector<ResidualUnit<T>> trunk;
  MaskBranch<T> mask;

 private:
  AttentionModuleSpec spec_;
};

// Applies the combination rule to a trunk output and a mask of equal shape.
template <typename T>
Tensor<T> combine_attention(const Tensor<T>& trunk, const Tensor<T>& mask, CombineRule rule);

}  // namespace aag
