#include "aag/models.hpp"

#include <algorithm>

#include "aag/errors.hpp"

namespace aag {

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::AttentionNet ? "attention-net" : "resnet-lite";
}

BackboneKind backbone_from_string(const std::string& name) {
  if (name == "attention-net") return BackboneKind::AttentionNet;
  if (name == "resnet-lite") return BackboneKind::ResNetLite;
  throw ConfigError("unknown backbone '" + name + "' (expected attention-net or resnet-lite)");
}

MultiTaskModelSpec MultiTaskModelSpec::attention_net() {
  MultiTaskModelSpec s;
  s.backbone = BackboneKind::AttentionNet;
  s.base_channels = 32;
  return s;
}

MultiTaskModelSpec MultiTaskModelSpec::resnet_lite() {
  MultiTaskModelSpec s;
  s.backbone = BackboneKind::ResNetLite;
  s.base_channels = 64;
  return s;
}

std::size_t MultiTaskModelSpec::required_divisor() const {
  const std::size_t f = compact_stem ? 1 : 4;
  if (backbone == BackboneKind::ResNetLite) return 8 * f;
  return std::max({f << mask_levels[0], (2 * f) << mask_levels[1], (4 * f) << mask_levels[2],
                   8 * f});
}

void MultiTaskModelSpec::validate() const {
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  if (num_age_buckets < 2) throw ConfigError("need at least two age buckets");
  if (age_hidden == 0) throw ConfigError("age_hidden must be positive");
  if (backbone == BackboneKind::AttentionNet) {
    if (trunk_depth == 0) throw ConfigError("trunk_depth must be positive");
    for (auto l : mask_levels) {
      if (l == 0 || l > 8) throw ConfigError("mask_levels must be in [1,8]");
    }
  }
  const std::size_t div = required_divisor();
  if (input_size == 0 || input_size % div != 0) {
    throw ConfigError("input size " + std::to_string(input_size) + " is not divisible by " +
                      std::to_string(div) + " as " + to_string(backbone) +
                      " requires (pad e.g. 200 to 224)");
  }
}

nlohmann::json MultiTaskModelSpec::to_json() const {
  return {
      {"backbone", to_string(backbone)},
      {"input_size", input_size},
      {"base_channels", base_channels},
      {"embedding_dim", embedding_dim()},
      {"num_age_buckets", num_age_buckets},
      {"age_hidden", age_hidden},
      {"gender_augmentation", gender_augmentation},
      {"detach_gender_input", detach_gender_input},
      {"trunk_depth", trunk_depth},
      {"mask_levels", mask_levels},
      {"combine", combine == CombineRule::Residual ? "residual" : "plain"},
      {"compact_stem", compact_stem},
      {"init_seed", init_seed},
  };
}

MultiTaskModelSpec MultiTaskModelSpec::from_json(const nlohmann::json& j) {
  try {
    MultiTaskModelSpec s;
    s.backbone = backbone_from_string(j.at("backbone").get<std::string>());
    s.input_size = j.at("input_size").get<std::size_t>();
    s.base_channels = j.at("base_channels").get<std::size_t>();
    s.num_age_buckets = j.at("num_age_buckets").get<std::size_t>();
    s.age_hidden = j.at("age_hidden").get<std::size_t>();
    s.gender_augmentation = j.at("gender_augmentation").get<bool>();
    s.detach_gender_input = j.at("detach_gender_input").get<bool>();
    s.trunk_depth = j.at("trunk_depth").get<std::size_t>();
    s.mask_levels = j.at("mask_levels").get<std::array<std::size_t, 3>>();
    const auto combine = j.at("combine").get<std::string>();
    if (combine != "residual" && combine != "plain") {
      throw ConfigError("unknown combine rule '" + combine + "'");
    }
    s.combine = combine == "residual" ? CombineRule::Residual : CombineRule::Plain;
    s.compact_stem = j.at("compact_stem").get<bool>();
    s.init_seed = j.at("init_seed").get<std::uint64_t>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model spec: ") + e.what());
  }
}

namespace {

void check_images(const Shape& d, std::size_t size) {
  if (d.size() != 4 || d[1] != 3 || d[2] != size || d[3] != size) {
    throw DimensionError("model expects images [N,3," + std::to_string(size) + "," +
                         std::to_string(size) + "], got " + shape_str(d));
  }
}

template <typename T>
Conv2d<T> make_stem(const MultiTaskModelSpec& spec, std::mt19937_64& rng) {
  if (spec.compact_stem) return Conv2d<T>(3, spec.base_channels, 3, 1, 1, false, rng);
  return Conv2d<T>(3, spec.base_channels, 7, 2, 3, false, rng);
}

}  // namespace

template <typename T>
AttentionNet<T>::AttentionNet(const MultiTaskModelSpec& spec, std::mt19937_64& rng)
    : stem(make_stem<T>(spec, rng)), stem_bn(spec.base_channels), pool_(!spec.compact_stem) {
  std::size_t c = spec.base_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    AttentionModuleSpec am;
    am.channels = c;
    am.trunk_depth = spec.trunk_depth;
    am.mask_levels = spec.mask_levels[i];
    am.combine = spec.combine;
    attn.emplace_back(am, rng);
    transitions.emplace_back(ResidualUnitSpec{c, 2 * c, 2}, rng);
    c *= 2;
  }
}

template <typename T>
Tensor<T> AttentionNet<T>::forward(const Tensor<T>& images, Mode mode,
                                   std::vector<Tensor<T>>* taps) {
  auto h = relu(stem_bn.forward(stem.forward(images), mode));
  if (pool_) h = maxpool2d(h, 2, 2);
  for (std::size_t i = 0; i < attn.size(); ++i) {
    auto a = attn[i].forward(h, mode);
    if (taps) taps->push_back(a.mask);
    h = transitions[i].forward(a.out, mode);
  }
  return global_avg_pool(h);
}

template <typename T>
void AttentionNet<T>::visit(const ParamVisitor<T>& fn) {
  stem.visit("stem", fn);
  stem_bn.visit("stem_bn", fn);
  for (std::size_t i = 0; i < attn.size(); ++i) {
    attn[i].visit("attn" + std::to_string(i + 1), fn);
    transitions[i].visit("trans" + std::to_string(i + 1), fn);
  }
}

template <typename T>
ResNetLite<T>::ResNetLite(const MultiTaskModelSpec& spec, std::mt19937_64& rng)
    : stem(make_stem<T>(spec, rng)), stem_bn(spec.base_channels), pool_(!spec.compact_stem) {
  std::size_t in = spec.base_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out = spec.base_channels << s;
    std::vector<ResidualUnit<T>> stage;
    stage.emplace_back(ResidualUnitSpec{in, out, s == 0 ? std::size_t{1} : std::size_t{2}}, rng);
    stage.emplace_back(ResidualUnitSpec{out, out, 1}, rng);
    stages.push_back(std::move(stage));
    in = out;
  }
}

template <typename T>
Tensor<T> ResNetLite<T>::forward(const Tensor<T>& images, Mode mode, std::vector<Tensor<T>>*) {
  auto h = relu(stem_bn.forward(stem.forward(images), mode));
  if (pool_) h = maxpool2d(h, 2, 2);
  for (auto& stage : stages) {
    for (auto& unit : stage) h = unit.forward(h, mode);
  }
  return global_avg_pool(h);
}

template <typename T>
void ResNetLite<T>::visit(const ParamVisitor<T>& fn) {
  stem.visit("stem", fn);
  stem_bn.visit("stem_bn", fn);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t u = 0; u < stages[s].size(); ++u) {
      stages[s][u].visit("layer" + std::to_string(s + 1) + "." + std::to_string(u), fn);
    }
  }
}

std::size_t Prediction::gender() const { return argmax<double>(gender_probs); }
std::size_t Prediction::age_bucket() const { return argmax<double>(age_probs); }

template <typename T>
MultiTaskModel<T>::MultiTaskModel(const MultiTaskModelSpec& spec) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(spec_.init_seed);
  if (spec_.backbone == BackboneKind::AttentionNet) {
    backbone_ = std::make_unique<AttentionNet<T>>(spec_, rng);
  } else {
    backbone_ = std::make_unique<ResNetLite<T>>(spec_, rng);
  }
  // Gender head first: its initial weights must not depend on the age
  // head's input width.
  gender_head = Dense<T>(spec_.gender_head_inputs(), 2, rng);
  age_hidden = Dense<T>(spec_.age_head_inputs(), spec_.age_hidden, rng);
  age_head = Dense<T>(spec_.age_hidden, spec_.num_age_buckets, rng);
}

template <typename T>
ForwardOutput<T> MultiTaskModel<T>::forward(const Tensor<T>& images, Mode mode) {
  check_images(images.dims(), spec_.input_size);
  ForwardOutput<T> out;
  out.embedding = backbone_->forward(images, mode, &out.taps);
  out.gender_logits = gender_head.forward(out.embedding);
  out.gender_probs = softmax(out.gender_logits, 1);
  Tensor<T> age_in = out.embedding;
  if (spec_.gender_augmentation) {
    const Tensor<T> g = spec_.detach_gender_input ? out.gender_probs.detach() : out.gender_probs;
    age_in = concat({out.embedding, g}, 1);
  }
  out.age_logits = age_head.forward(relu(age_hidden.forward(age_in)));
  out.age_probs = softmax(out.age_logits, 1);
  return out;
}

template <typename T>
std::vector<Prediction> MultiTaskModel<T>::predict(const Tensor<T>& images) {
  NoGradGuard guard;
  const auto out = forward(images, Mode::Eval);
  const std::size_t n = images.dim(0);
  const std::size_t b = spec_.num_age_buckets;
  std::vector<Prediction> preds(n);
  auto gp = out.gender_probs.data();
  auto ap = out.age_probs.data();
  for (std::size_t i = 0; i < n; ++i) {
    preds[i].gender_probs.assign(gp.begin() + i * 2, gp.begin() + (i + 1) * 2);
    preds[i].age_probs.assign(ap.begin() + i * b, ap.begin() + (i + 1) * b);
  }
  return preds;
}

template <typename T>
std::vector<Tensor<T>> MultiTaskModel<T>::attention_taps(const Tensor<T>& images) {
  if (backbone_->attention_modules() == 0) {
    throw UnsupportedError("attention taps are only available for attention-net models, not " +
                           to_string(spec_.backbone));
  }
  NoGradGuard guard;
  auto out = forward(images, Mode::Eval);
  std::vector<Tensor<T>> taps;
  for (const auto& t : out.taps) taps.push_back(t.detach());
  return taps;
}

template <typename T>
void MultiTaskModel<T>::visit(const ParamVisitor<T>& fn) {
  backbone_->visit(fn);
  gender_head.visit("gender_head", fn);
  age_hidden.visit("age_hidden", fn);
  age_head.visit("age_head", fn);
}

template <typename T>
std::vector<NamedTensor<T>> MultiTaskModel<T>::named_tensors() {
  std::vector<NamedTensor<T>> all;
  visit([&](const std::string& name, Tensor<T>& t, ParamKind kind) {
    all.push_back({name, t, kind});
  });
  return all;
}

template <typename T>
std::vector<NamedTensor<T>> MultiTaskModel<T>::parameters() {
  auto all = named_tensors();
  std::erase_if(all, [](const NamedTensor<T>& t) { return t.kind != ParamKind::Parameter; });
  return all;
}

template <typename T>
std::size_t MultiTaskModel<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void MultiTaskModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Prediction ensemble_predict(std::span<const Prediction> members) {
  if (members.size() < 2) throw ArgumentError("ensemble needs at least two members");
  const std::size_t b = members[0].age_probs.size();
  Prediction mean{std::vector<double>(members[0].gender_probs.size(), 0.0),
                  std::vector<double>(b, 0.0)};
  for (const auto& m : members) {
    if (m.age_probs.size() != b || m.gender_probs.size() != mean.gender_probs.size()) {
      throw DimensionError("ensemble members disagree on the number of age buckets (" +
                           std::to_string(b) + " vs " + std::to_string(m.age_probs.size()) + ")");
    }
    for (std::size_t i = 0; i < mean.gender_probs.size(); ++i) mean.gender_probs[i] += m.gender_probs[i];
    for (std::size_t i = 0; i < b; ++i) mean.age_probs[i] += m.age_probs[i];
  }
  const double k = static_cast<double>(members.size());
  for (auto& v : mean.gender_probs) v /= k;
  for (auto& v : mean.age_probs) v /= k;
  return mean;
}

std::vector<Prediction> ensemble_predict(std::span<const std::vector<Prediction>> per_model) {
  if (per_model.size() < 2) throw ArgumentError("ensemble needs at least two members");
  const std::size_t n = per_model[0].size();
  for (const auto& m : per_model) {
    if (m.size() != n) throw DimensionError("ensemble members predicted different sample counts");
  }
  std::vector<Prediction> out(n);
  std::vector<Prediction> column(per_model.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < per_model.size(); ++m) column[m] = per_model[m][i];
    out[i] = ensemble_predict(std::span<const Prediction>(column));
  }
  return out;
}

template class AttentionNet<float>;
template class AttentionNet<double>;
template class ResNetLite<float>;
template class ResNetLite<double>;
template class MultiTaskModel<float>;
template class MultiTaskModel<double>;

}  // namespace aag
