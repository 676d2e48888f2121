#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "aag/errors.hpp"
#include "aag/gradcheck.hpp"
#include "aag/models.hpp"
#include "aag/ops.hpp"
#include "gradcheck_cases.hpp"

using aag::BackboneKind;
using aag::Mode;
using aag::MultiTaskModelSpec;
using aag::Tensor;

namespace {

// Hand-summed layer table. BN running statistics are buffers, not counted.
std::size_t conv_params(std::size_t k, std::size_t in, std::size_t out, bool bias = false) {
  return k * k * in * out + (bias ? out : 0);
}
std::size_t bn_params(std::size_t c) { return 2 * c; }
std::size_t unit_params(std::size_t in, std::size_t out, std::size_t stride) {
  std::size_t n = conv_params(3, in, out) + bn_params(out) + conv_params(3, out, out) + bn_params(out);
  if (in != out || stride != 1) n += conv_params(1, in, out) + bn_params(out);
  return n;
}
std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t expected_params(const MultiTaskModelSpec& s) {
  const std::size_t c = s.base_channels;
  std::size_t n = (s.compact_stem ? conv_params(3, 3, c) : conv_params(7, 3, c)) + bn_params(c);
  if (s.backbone == BackboneKind::AttentionNet) {
    std::size_t w = c;
    for (std::size_t i = 0; i < 3; ++i) {
      n += s.trunk_depth * unit_params(w, w, 1);
      n += 2 * s.mask_levels[i] * unit_params(w, w, 1) + conv_params(1, w, w, true);
      n += unit_params(w, 2 * w, 2);
      w *= 2;
    }
  } else {
    std::size_t in = c;
    for (std::size_t st = 0; st < 4; ++st) {
      const std::size_t out = c << st;
      n += unit_params(in, out, st == 0 ? 1 : 2) + unit_params(out, out, 1);
      in = out;
    }
  }
  const std::size_t e = s.embedding_dim();
  n += dense_params(e, 2);
  n += dense_params(e + (s.gender_augmentation ? 2 : 0), s.age_hidden);
  n += dense_params(s.age_hidden, s.num_age_buckets);
  return n;
}

MultiTaskModelSpec small(BackboneKind kind, bool augmentation = true) {
  auto s = kind == BackboneKind::AttentionNet ? MultiTaskModelSpec::attention_net()
                                              : MultiTaskModelSpec::resnet_lite();
  s.input_size = 32;
  s.base_channels = 4;
  s.age_hidden = 16;
  s.gender_augmentation = augmentation;
  return s;
}

template <typename T>
Tensor<T> images(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<T>::uniform({n, 3, side, side}, rng, -1.0, 1.0);
}

template <typename T>
double age_loss(aag::MultiTaskModel<T>& m, const Tensor<T>& x, const std::vector<int>& ages) {
  aag::NoGradGuard g;
  return static_cast<double>(aag::cross_entropy(m.forward(x, Mode::Train).age_logits, ages).item());
}

}  // namespace

TEST_CASE("attention net at 64x64 yields a 256-long embedding") {
  auto spec = MultiTaskModelSpec::attention_net();
  CHECK(spec.input_size == 64);
  CHECK(spec.embedding_dim() == 256);
  aag::MultiTaskModel<float> model(spec);
  auto out = model.forward(images<float>(2, 64, 1), Mode::Eval);
  CHECK(out.embedding.dims() == aag::Shape{2, 256});
  CHECK(out.gender_probs.dims() == aag::Shape{2, 2});
  CHECK(out.age_probs.dims() == aag::Shape{2, 11});
  CHECK(out.taps.size() == 3);
}

TEST_CASE("input size must divide evenly; 200 is rejected and 224 accepted") {
  for (auto kind : {BackboneKind::AttentionNet, BackboneKind::ResNetLite}) {
    auto spec = kind == BackboneKind::AttentionNet ? MultiTaskModelSpec::attention_net()
                                                   : MultiTaskModelSpec::resnet_lite();
    CHECK(spec.required_divisor() == 32);
    spec.input_size = 200;
    CHECK_THROWS_AS(aag::MultiTaskModel<float>{spec}, aag::ConfigError);
    spec.input_size = 224;
    CHECK_NOTHROW(spec.validate());
  }
  auto spec = MultiTaskModelSpec::attention_net();
  spec.base_channels = 4;
  spec.input_size = 224;
  aag::MultiTaskModel<float> model(spec);
  CHECK(model.forward(images<float>(1, 224, 2), Mode::Eval).embedding.dims() == aag::Shape{1, 32});
}

TEST_CASE("resnet-lite downsamples by 32 and embeds into 512") {
  auto spec = MultiTaskModelSpec::resnet_lite();
  CHECK(spec.embedding_dim() == 512);
  spec.base_channels = 8;
  aag::MultiTaskModel<float> model(spec);
  std::vector<Tensor<float>> taps;
  auto x = images<float>(1, 64, 3);
  CHECK(model.forward(x, Mode::Eval).embedding.dims() == aag::Shape{1, 64});
  CHECK_THROWS_AS(model.forward(images<float>(1, 32, 3), Mode::Eval), aag::DimensionError);
}

TEST_CASE("parameter counts match the layer table") {
  for (auto kind : {BackboneKind::AttentionNet, BackboneKind::ResNetLite}) {
    for (bool aug : {true, false}) {
      auto spec = kind == BackboneKind::AttentionNet ? MultiTaskModelSpec::attention_net()
                                                     : MultiTaskModelSpec::resnet_lite();
      spec.gender_augmentation = aug;
      aag::MultiTaskModel<float> model(spec);
      INFO(aag::to_string(kind) << " augmentation " << aug);
      CHECK(model.parameter_count() == expected_params(spec));
      CHECK(model.age_hidden.weight.dim(0) == spec.age_head_inputs());
      CHECK(model.gender_head.weight.dim(0) == spec.embedding_dim());
    }
  }
  auto tiny = gradcases::tiny_spec(BackboneKind::AttentionNet, 0);
  CHECK(aag::MultiTaskModel<double>(tiny).parameter_count() == expected_params(tiny));
}

TEST_CASE("probability vectors are normalized") {
  for (auto kind : {BackboneKind::AttentionNet, BackboneKind::ResNetLite}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto spec = small(kind);
      spec.init_seed = seed;
      aag::MultiTaskModel<float> model(spec);
      for (const auto& p : model.predict(images<float>(4, 32, seed))) {
        double g = 0.0, a = 0.0;
        for (double v : p.gender_probs) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          g += v;
        }
        for (double v : p.age_probs) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          a += v;
        }
        CHECK(std::abs(g - 1.0) < 1e-6);
        CHECK(std::abs(a - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("without augmentation the age branch ignores the gender head") {
  aag::MultiTaskModel<float> model(small(BackboneKind::ResNetLite, false));
  auto x = images<float>(3, 32, 5);
  const auto before = model.predict(x);
  std::mt19937_64 rng(9);
  for (auto& v : model.gender_head.weight.mutable_data()) v += static_cast<float>(rng() % 100) / 50.0f;
  for (auto& v : model.gender_head.bias.mutable_data()) v -= 0.75f;
  const auto after = model.predict(x);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(before[i].age_probs == after[i].age_probs);
    CHECK(before[i].gender_probs != after[i].gender_probs);
  }
}

TEST_CASE("with augmentation the age loss reaches the gender head") {
  auto spec = small(BackboneKind::ResNetLite, true);
  spec.input_size = 32;
  aag::MultiTaskModel<double> model(spec);
  auto x = images<double>(4, 32, 6);
  const std::vector<int> ages{1, 4, 7, 10};

  model.zero_grad();
  aag::backward(aag::cross_entropy(model.forward(x, Mode::Train).age_logits, ages));
  const auto analytic = std::vector<double>(model.gender_head.weight.grad().begin(),
                                            model.gender_head.weight.grad().end());
  double norm = 0.0;
  for (double g : analytic) norm += g * g;
  CHECK(norm > 0.0);

  // Central differences on the single largest entry.
  std::size_t k = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (std::abs(analytic[i]) > std::abs(analytic[k])) k = i;
  }
  auto w = model.gender_head.weight.mutable_data();
  const double orig = w[k], h = 1e-6;
  w[k] = orig + h;
  const double lp = age_loss(model, x, ages);
  w[k] = orig - h;
  const double lm = age_loss(model, x, ages);
  w[k] = orig;
  const double numeric = (lp - lm) / (2 * h);
  CHECK(std::abs(numeric) > 0.0);
  CHECK(numeric == doctest::Approx(analytic[k]).epsilon(1e-5));
}

TEST_CASE("detaching the gender input blocks the age loss from the gender head") {
  auto spec = small(BackboneKind::ResNetLite, true);
  spec.detach_gender_input = true;
  aag::MultiTaskModel<double> model(spec);
  auto x = images<double>(2, 32, 7);
  model.zero_grad();
  aag::backward(aag::cross_entropy(model.forward(x, Mode::Train).age_logits, std::vector<int>{0, 3}));
  for (double g : model.gender_head.weight.grad()) CHECK(g == 0.0);
}

TEST_CASE("toggling augmentation leaves gender outputs bit-identical") {
  for (auto kind : {BackboneKind::AttentionNet, BackboneKind::ResNetLite}) {
    aag::MultiTaskModel<float> on(small(kind, true));
    aag::MultiTaskModel<float> off(small(kind, false));
    auto x = images<float>(3, 32, 8);
    const auto a = on.predict(x);
    const auto b = off.predict(x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].gender_probs == b[i].gender_probs);
    CHECK(on.age_hidden.weight.dim(0) == off.age_hidden.weight.dim(0) + 2);
  }
}

TEST_CASE("ensemble of identical members is the member") {
  aag::Prediction p{{0.3, 0.7}, {0.1, 0.2, 0.7}};
  std::vector<aag::Prediction> members{p, p};
  auto e = aag::ensemble_predict(members);
  CHECK(e.gender_probs == p.gender_probs);
  CHECK(e.age_probs == p.age_probs);
}

TEST_CASE("ensemble ties resolve to the lowest index") {
  std::vector<aag::Prediction> members{{{1.0, 0.0}, {1.0, 0.0}}, {{0.0, 1.0}, {0.0, 1.0}}};
  auto e = aag::ensemble_predict(members);
  CHECK(e.gender_probs == std::vector<double>{0.5, 0.5});
  CHECK(e.gender() == 0);
  CHECK(e.age_bucket() == 0);
}

TEST_CASE("ensemble mean matches a direct average and is order independent") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto random_probs = [&](std::size_t n) {
    std::vector<double> v(n);
    double s = 0.0;
    for (auto& e : v) s += (e = u(rng));
    for (auto& e : v) e /= s;
    return v;
  };
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<aag::Prediction> members;
    for (int m = 0; m < 3; ++m) members.push_back({random_probs(2), random_probs(11)});
    auto e = aag::ensemble_predict(members);
    for (std::size_t i = 0; i < 11; ++i) {
      const double want = (members[0].age_probs[i] + members[1].age_probs[i] + members[2].age_probs[i]) / 3.0;
      CHECK(std::abs(e.age_probs[i] - want) < 1e-12);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < 11; ++i) {
      if (e.age_probs[i] > e.age_probs[best]) best = i;
    }
    CHECK(e.age_bucket() == best);
    std::vector<aag::Prediction> reversed(members.rbegin(), members.rend());
    auto r = aag::ensemble_predict(reversed);
    for (std::size_t i = 0; i < 11; ++i) CHECK(std::abs(r.age_probs[i] - e.age_probs[i]) < 1e-15);
  }
}

TEST_CASE("ensemble rejects bad member sets") {
  aag::Prediction a{{0.5, 0.5}, {0.5, 0.5}};
  aag::Prediction b{{0.5, 0.5}, {0.2, 0.3, 0.5}};
  std::vector<aag::Prediction> one{a};
  CHECK_THROWS_AS(aag::ensemble_predict(one), aag::ArgumentError);
  std::vector<aag::Prediction> mixed{a, b};
  CHECK_THROWS_AS(aag::ensemble_predict(mixed), aag::DimensionError);
}

TEST_CASE("attention taps: one per module, inside (0,1), forward unchanged") {
  aag::MultiTaskModel<float> model(small(BackboneKind::AttentionNet));
  auto x = images<float>(2, 32, 11);
  const auto before = model.predict(x);
  const auto taps = model.attention_taps(x);
  const auto after = model.predict(x);
  REQUIRE(taps.size() == 3);
  const std::size_t sides[] = {8, 4, 2};
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(taps[i].dims() == aag::Shape{2, 4u << i, sides[i], sides[i]});
    CHECK_FALSE(taps[i].requires_grad());
    for (float v : taps[i].data()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(before[i].gender_probs == after[i].gender_probs);
    CHECK(before[i].age_probs == after[i].age_probs);
  }

  aag::MultiTaskModel<float> resnet(small(BackboneKind::ResNetLite));
  CHECK_THROWS_AS(resnet.attention_taps(x), aag::UnsupportedError);
}

TEST_CASE("eval-mode prediction is deterministic and leaves running stats alone") {
  aag::MultiTaskModel<float> model(small(BackboneKind::AttentionNet));
  auto x = images<float>(2, 32, 12);
  auto snapshot = [&] {
    std::vector<float> v;
    for (auto& t : model.named_tensors()) v.insert(v.end(), t.tensor.data().begin(), t.tensor.data().end());
    return v;
  };
  const auto s0 = snapshot();
  const auto a = model.predict(x);
  const auto b = model.predict(x);
  CHECK(snapshot() == s0);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].age_probs == b[i].age_probs);
}

TEST_CASE("same init seed gives identical weights; different seeds differ") {
  auto spec = small(BackboneKind::ResNetLite);
  aag::MultiTaskModel<float> a(spec), b(spec);
  spec.init_seed += 1;
  aag::MultiTaskModel<float> c(spec);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
    any_diff |= !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pc[i].tensor.data().begin());
  }
  CHECK(any_diff);
}

TEST_CASE("model spec survives a JSON round trip") {
  auto spec = small(BackboneKind::AttentionNet);
  spec.mask_levels = {1, 2, 1};
  spec.combine = aag::CombineRule::Plain;
  spec.detach_gender_input = true;
  auto back = MultiTaskModelSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  CHECK_THROWS_AS(MultiTaskModelSpec::from_json(nlohmann::json{{"backbone", "vgg"}}), aag::ConfigError);
  auto bad = spec.to_json();
  bad["input_size"] = "large";
  CHECK_THROWS_AS(MultiTaskModelSpec::from_json(bad), aag::FormatError);
}
