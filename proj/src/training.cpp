#include "aag/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "aag/errors.hpp"
#include "aag/evaluation.hpp"
#include "aag/ops.hpp"

namespace aag {

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (!(lambda_age >= 0.0) || !std::isfinite(lambda_age)) throw ConfigError("lambda_age must be >= 0");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"epochs", epochs},
          {"lambda_age", lambda_age},       {"seed", seed},             {"precision", to_string(precision)},
          {"eval_every", eval_every},       {"augment", augment}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lambda_age = j.value("lambda_age", c.lambda_age);
    c.seed = j.value("seed", c.seed);
    c.precision = parse_precision(j.value("precision", to_string(c.precision)));
    c.eval_every = j.value("eval_every", c.eval_every);
    c.augment = j.value("augment", c.augment);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::hash() const {
  auto j = to_json();
  j.erase("epochs");
  std::ostringstream s;
  s << std::hex << keyed_hash(j.dump(), 0);
  return s.str();
}

template <typename T>
Tensor<T> multitask_loss(const Tensor<T>& gender_logits, const Tensor<T>& age_logits,
                         std::span<const int> genders, std::span<const int> buckets, T lambda_age) {
  const auto g = cross_entropy(gender_logits, genders);
  if (lambda_age == T(0)) return g;
  const auto a = cross_entropy(age_logits, buckets);
  return add(g, lambda_age == T(1) ? a : scale(a, lambda_age));
}

template <typename T>
void adam_step(std::span<const NamedTensor<T>> params, AdamState<T>& state, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("optimizer state does not match the parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (state.m[i].size() != t.numel() || state.v[i].size() != t.numel()) {
      throw DimensionError("optimizer state shape differs for '" + params[i].name + "'");
    }
    if (!t.has_grad()) continue;
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
      }
    }
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto w = t.mutable_data();
    const bool has = t.has_grad();
    const auto grad = has ? t.grad() : std::span<const T>{};
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = has ? static_cast<double>(grad[k]) : 0.0;
      const double mk = state.beta1 * static_cast<double>(m[k]) + (1.0 - state.beta1) * g;
      const double vk = state.beta2 * static_cast<double>(v[k]) + (1.0 - state.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double step = lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) - step);
    }
  }
}

nlohmann::json EpochLog::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", epoch},
          {"train_loss", train_loss},
          {"val_gender_acc", opt(val_gender_acc)},
          {"val_age_acc", opt(val_age_acc)},
          {"val_aabd", opt(val_aabd)},
          {"wall_seconds", wall_seconds}};
}

template <typename T>
std::pair<double, double> dataset_accuracy(MultiTaskModel<T>& model, BatchLoader& loader, std::size_t batch_size) {
  std::vector<std::size_t> all(loader.records().size()), kept;
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto preds = predict_records(model, loader, all, batch_size, &kept);
  if (preds.empty()) throw DataError("no decodable images");
  std::size_t g = 0, a = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& rec = loader.records()[kept[i]];
    g += preds[i].gender() == static_cast<std::size_t>(rec.gender);
    a += preds[i].age_bucket() == static_cast<std::size_t>(rec.bucket);
  }
  const auto n = static_cast<double>(preds.size());
  return {static_cast<double>(g) / n, static_cast<double>(a) / n};
}

template <typename T>
Trainer<T>::Trainer(const MultiTaskModelSpec& spec, TrainConfig config, std::vector<SampleRecord> train,
                    std::vector<SampleRecord> val, std::string out_dir)
    : config_(config),
      model_(spec),
      train_(std::move(train), spec.input_size),
      val_(std::move(val), spec.input_size),
      out_dir_(std::move(out_dir)),
      rng_(config.seed) {
  config_.validate();
  if (train_.records().empty()) throw DataError("training partition is empty");
  if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
}

template <typename T>
double Trainer<T>::batch_loss(const Batch<T>& batch, Mode mode) {
  NoGradGuard guard;
  auto out = model_.forward(batch.images, mode);
  return static_cast<double>(
      multitask_loss(out.gender_logits, out.age_logits, batch.genders, batch.buckets, static_cast<T>(config_.lambda_age))
          .item());
}

template <typename T>
double Trainer<T>::train_step(const Batch<T>& batch) {
  model_.zero_grad();
  auto out = model_.forward(batch.images, Mode::Train);
  auto loss = multitask_loss(out.gender_logits, out.age_logits, batch.genders, batch.buckets,
                             static_cast<T>(config_.lambda_age));
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) {
    throw NumericError("loss diverged (" + std::to_string(value) + ") at epoch " + std::to_string(epoch_ + 1));
  }
  loss.backward();
  const auto params = model_.parameters();
  adam_step<T>(params, adam_, config_.learning_rate);
  return value;
}

template <typename T>
EpochLog Trainer<T>::run_epoch() {
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_.records().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng_);
  const std::uint64_t flip_seed = rng_();

  double loss_sum = 0.0;
  std::size_t seen = 0;
  for (std::size_t s = 0; s < order.size(); s += config_.batch_size) {
    const std::size_t n = std::min(config_.batch_size, order.size() - s);
    auto batch = train_.load<T>(std::span<const std::size_t>(order).subspan(s, n), config_.augment, flip_seed);
    // Batch norm needs two samples to estimate a variance.
    if (batch.indices.size() < 2) continue;
    loss_sum += train_step(batch) * static_cast<double>(batch.indices.size());
    seen += batch.indices.size();
  }
  if (seen == 0) throw DataError("no trainable batch in the training partition");
  ++epoch_;

  EpochLog entry;
  entry.epoch = epoch_;
  entry.train_loss = loss_sum / static_cast<double>(seen);
  double score = -entry.train_loss;
  const bool eval_now = !val_.records().empty() && (epoch_ % config_.eval_every == 0 || epoch_ == config_.epochs);
  if (eval_now) {
    MultiTaskModel<T>* m = &model_;
    const auto res = evaluate<T>(std::span<MultiTaskModel<T>* const>(&m, 1), val_, config_.batch_size, BucketScheme{});
    entry.val_gender_acc = res.report.gender_accuracy;
    entry.val_age_acc = res.report.age_bucket_accuracy;
    entry.val_aabd = res.report.aabd;
    score = 0.5 * (res.report.gender_accuracy + res.report.age_bucket_accuracy);
  }
  const bool improved = (val_.records().empty() || eval_now) && (!best_score_ || score > *best_score_);
  if (improved) {
    best_score_ = score;
    best_epoch_ = epoch_;
  }
  entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out_dir_.empty()) {
    const auto ckpt = checkpoint();
    ckpt.save(out_dir_ + "/last.aagw");
    if (improved) ckpt.save(out_dir_ + "/best.aagw");
    write_log(entry);
  }
  return entry;
}

template <typename T>
std::vector<EpochLog> Trainer<T>::run() {
  std::vector<EpochLog> logs;
  while (epoch_ < config_.epochs) logs.push_back(run_epoch());
  return logs;
}

template <typename T>
WeightFile Trainer<T>::checkpoint() const {
  auto& model = const_cast<MultiTaskModel<T>&>(model_);
  WeightFile file = weights_from_model(model);
  std::ostringstream rng;
  rng << rng_;
  file.header["checkpoint"] = {
      {"epoch", epoch_},
      {"rng", rng.str()},
      {"config", config_.to_json()},
      {"config_hash", config_.hash()},
      {"best_epoch", best_epoch_},
      {"best_score", best_score_ ? nlohmann::json(*best_score_) : nlohmann::json(nullptr)},
      {"adam", {{"t", adam_.t}, {"beta1", adam_.beta1}, {"beta2", adam_.beta2}, {"eps", adam_.eps}}},
  };
  if (!adam_.m.empty()) {
    const auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      file.tensors.push_back(
          TensorRecord::from_values<T>("adam.m." + params[i].name, params[i].tensor.dims(), std::span<const T>(adam_.m[i])));
      file.tensors.push_back(
          TensorRecord::from_values<T>("adam.v." + params[i].name, params[i].tensor.dims(), std::span<const T>(adam_.v[i])));
    }
  }
  return file;
}

template <typename T>
void Trainer<T>::resume(const WeightFile& file, bool allow_config_mismatch) {
  if (!file.header.contains("checkpoint")) throw FormatError("weight file carries no training state");
  const auto& c = file.header.at("checkpoint");
  try {
    if (spec_from_weights(file).to_json() != model_.spec().to_json()) {
      throw ConfigError("checkpoint was written for a different model spec");
    }
    const std::string hash = c.at("config_hash").get<std::string>();
    if (hash != config_.hash()) {
      if (!allow_config_mismatch) {
        throw ConfigError("checkpoint config hash " + hash + " differs from the current config " + config_.hash());
      }
      std::cerr << "warning: resuming with a different training config\n";
    }
    load_into(model_, file);
    const auto& a = c.at("adam");
    adam_ = AdamState<T>{};
    adam_.t = a.at("t").get<std::uint64_t>();
    adam_.beta1 = a.at("beta1").get<double>();
    adam_.beta2 = a.at("beta2").get<double>();
    adam_.eps = a.at("eps").get<double>();
    if (adam_.t > 0) {
      for (const auto& p : model_.parameters()) {
        const auto* m = file.find("adam.m." + p.name);
        const auto* v = file.find("adam.v." + p.name);
        if (!m || !v) throw FormatError("checkpoint lacks optimizer state for '" + p.name + "'");
        adam_.m.push_back(m->template values<T>());
        adam_.v.push_back(v->template values<T>());
      }
    }
    epoch_ = c.at("epoch").get<std::size_t>();
    std::istringstream rng(c.at("rng").get<std::string>());
    rng >> rng_;
    if (!rng) throw FormatError("checkpoint RNG state is unreadable");
    best_epoch_ = c.at("best_epoch").get<std::size_t>();
    best_score_.reset();
    if (!c.at("best_score").is_null()) best_score_ = c.at("best_score").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
}

template <typename T>
void Trainer<T>::write_log(const EpochLog& entry) {
  if (!log_synced_) {
    truncate_log(entry.epoch - 1);
    log_synced_ = true;
  }
  std::ofstream out(out_dir_ + "/train_log.ndjson", std::ios::app);
  if (!out) throw Error("cannot append to " + out_dir_ + "/train_log.ndjson");
  out << entry.to_json().dump() << "\n";
}

// Drops log lines past `epoch` so a resumed run continues the file where
// the checkpoint left off and a fresh run starts it over.
template <typename T>
void Trainer<T>::truncate_log(std::size_t epoch) {
  const std::string path = out_dir_ + "/train_log.ndjson";
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("epoch") && j["epoch"].get<std::size_t>() <= epoch) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

template Tensor<float> multitask_loss(const Tensor<float>&, const Tensor<float>&, std::span<const int>,
                                      std::span<const int>, float);
template Tensor<double> multitask_loss(const Tensor<double>&, const Tensor<double>&, std::span<const int>,
                                       std::span<const int>, double);
template void adam_step(std::span<const NamedTensor<float>>, AdamState<float>&, double);
template void adam_step(std::span<const NamedTensor<double>>, AdamState<double>&, double);
template std::pair<double, double> dataset_accuracy(MultiTaskModel<float>&, BatchLoader&, std::size_t);
template std::pair<double, double> dataset_accuracy(MultiTaskModel<double>&, BatchLoader&, std::size_t);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace aag
