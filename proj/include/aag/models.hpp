#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aag/layers.hpp"
#include "json.hpp"

namespace aag {

enum class BackboneKind { AttentionNet, ResNetLite };

std::string to_string(BackboneKind kind);
BackboneKind backbone_from_string(const std::string& name);

// Declarative description of a two-headed model; enough to rebuild it from a
// weight file.
struct MultiTaskModelSpec {
  BackboneKind backbone = BackboneKind::AttentionNet;
  std::size_t input_size = 64;
  // Attention net: stem width, attention stages at 1x/2x/4x, embedding 8x.
  // ResNet-lite: stage widths 1x/2x/4x/8x, embedding 8x.
  std::size_t base_channels = 32;
  std::size_t num_age_buckets = 11;
  std::size_t age_hidden = 64;
  bool gender_augmentation = true;
  bool detach_gender_input = false;
  // Attention-net only.
  std::size_t trunk_depth = 2;
  std::array<std::size_t, 3> mask_levels{2, 2, 1};
  CombineRule combine = CombineRule::Residual;
  // 3x3 stride-1 stem without max-pool, for very small inputs.
  bool compact_stem = false;
  std::uint64_t init_seed = 42;

  static MultiTaskModelSpec attention_net();
  static MultiTaskModelSpec resnet_lite();

  std::size_t embedding_dim() const { return 8 * base_channels; }
  std::size_t gender_head_inputs() const { return embedding_dim(); }
  std::size_t age_head_inputs() const { return embedding_dim() + (gender_augmentation ? 2 : 0); }
  // Input side length must be a multiple of this.
  std::size_t required_divisor() const;
  // Throws ConfigError describing the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static MultiTaskModelSpec from_json(const nlohmann::json& j);
};

template <typename T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  // Image batch -> [N, embedding]. Appends attention masks to `taps` when
  // given and the backbone has any.
  virtual Tensor<T> forward(const Tensor<T>& images, Mode mode, std::vector<Tensor<T>>* taps) = 0;
  virtual void visit(const ParamVisitor<T>& fn) = 0;
  virtual std::size_t attention_modules() const { return 0; }
};

template <typename T>
class AttentionNet final : public Backbone<T> {
 public:
  AttentionNet(const MultiTaskModelSpec& spec, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& images, Mode mode, std::vector<Tensor<T>>* taps) override;
  void visit(const ParamVisitor<T>& fn) override;
  std::size_t attention_modules() const override { return attn.size(); }

  Conv2d<T> stem;
  BatchNorm2d<T> stem_bn;
  std::vector<AttentionModule<T>> attn;
  std::vector<ResidualUnit<T>> transitions;

 private:
  bool pool_;
};

template <typename T>
class ResNetLite final : public Backbone<T> {
 public:
  ResNetLite(const MultiTaskModelSpec& spec, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& images, Mode mode, std::vector<Tensor<T>>* taps) override;
  void visit(const ParamVisitor<T>& fn) override;

  Conv2d<T> stem;
  BatchNorm2d<T> stem_bn;
  std::vector<std::vector<ResidualUnit<T>>> stages;

 private:
  bool pool_;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> embedding;
  Tensor<T> gender_logits;
  Tensor<T> gender_probs;
  Tensor<T> age_logits;
  Tensor<T> age_probs;
  std::vector<Tensor<T>> taps;
};

struct Prediction {
  std::vector<double> gender_probs;  // [male, female]
  std::vector<double> age_probs;     // one entry per age bucket

  std::size_t gender() const;
  std::size_t age_bucket() const;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  ParamKind kind;
};

// Backbone -> embedding e; gender head dense(e) -> softmax; age head
// dense(relu(dense([e, p_gender]))) -> softmax, where p_gender is the
// gender probability vector (optionally detached) when augmentation is on.
template <typename T>
class MultiTaskModel {
 public:
  explicit MultiTaskModel(const MultiTaskModelSpec& spec);

  ForwardOutput<T> forward(const Tensor<T>& images, Mode mode);
  // Eval-mode forward without graph recording.
  std::vector<Prediction> predict(const Tensor<T>& images);
  // Attention masks, one per module in forward order, as detached copies.
  std::vector<Tensor<T>> attention_taps(const Tensor<T>& images);

  void visit(const ParamVisitor<T>& fn);
  std::vector<NamedTensor<T>> named_tensors();
  std::vector<NamedTensor<T>> parameters();
  std::size_t parameter_count();
  void zero_grad();

  const MultiTaskModelSpec& spec() const { return spec_; }
  Backbone<T>& backbone() { return *backbone_; }

  Dense<T> gender_head;
  Dense<T> age_hidden;
  Dense<T> age_head;

 private:
  MultiTaskModelSpec spec_;
  std::unique_ptr<Backbone<T>> backbone_;
};

// Elementwise mean of the members' probability vectors.
Prediction ensemble_predict(std::span<const Prediction> members);
// Per-sample ensemble over models: per_model[m][i] is model m's i-th output.
std::vector<Prediction> ensemble_predict(std::span<const std::vector<Prediction>> per_model);

}  // namespace aag
