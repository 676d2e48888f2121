#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aag/data.hpp"
#include "aag/models.hpp"
#include "aag/weight_file.hpp"
#include "json.hpp"

namespace aag {

enum class Precision { F32, F64 };
std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

struct TrainConfig {
  double learning_rate = 0.005;
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  double lambda_age = 1.0;
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;
  std::size_t eval_every = 1;
  bool augment = true;  // horizontal flips

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Hex digest of everything except `epochs`, so a run can be extended.
  std::string hash() const;
};

// cross_entropy(gender) + lambda_age * cross_entropy(age), both batch means.
template <typename T>
Tensor<T> multitask_loss(const Tensor<T>& gender_logits, const Tensor<T>& age_logits,
                         std::span<const int> genders, std::span<const int> buckets, T lambda_age);

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// Bias-corrected Adam update of every tensor in `params`, in place. Tensors
// without a gradient count as zero gradient. A non-finite gradient throws
// NumericError naming the parameter before anything is modified.
template <typename T>
void adam_step(std::span<const NamedTensor<T>> params, AdamState<T>& state, double lr);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_gender_acc;
  std::optional<double> val_age_acc;
  std::optional<double> val_aabd;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

// Owns a model, its optimizer state and the data order RNG. Writes
//   <out>/train_log.ndjson  one EpochLog per line
//   <out>/last.aagw         checkpoint after the latest epoch
//   <out>/best.aagw         checkpoint with the best validation score
// when `out_dir` is non-empty.
template <typename T>
class Trainer {
 public:
  Trainer(const MultiTaskModelSpec& spec, TrainConfig config, std::vector<SampleRecord> train,
          std::vector<SampleRecord> val, std::string out_dir);

  // Restores model, optimizer, epoch and RNG from a checkpoint written by
  // this class. A differing config hash throws ConfigError unless
  // `allow_config_mismatch`, in which case it only warns.
  void resume(const WeightFile& checkpoint, bool allow_config_mismatch = false);

  // Trains until `config.epochs` epochs are complete.
  std::vector<EpochLog> run();
  EpochLog run_epoch();

  // One optimizer step on `batch`; returns the loss before the step.
  double train_step(const Batch<T>& batch);
  double batch_loss(const Batch<T>& batch, Mode mode);

  WeightFile checkpoint() const;

  MultiTaskModel<T>& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  std::size_t epoch() const { return epoch_; }
  BatchLoader& train_loader() { return train_; }
  BatchLoader& val_loader() { return val_; }

 private:
  void write_log(const EpochLog& entry);
  void truncate_log(std::size_t epoch);

  TrainConfig config_;
  MultiTaskModel<T> model_;
  AdamState<T> adam_;
  BatchLoader train_;
  BatchLoader val_;
  std::string out_dir_;
  std::size_t epoch_ = 0;
  std::mt19937_64 rng_;
  std::optional<double> best_score_;
  std::size_t best_epoch_ = 0;
  bool log_synced_ = false;
};

// Eval-mode accuracy of `model` on every record of `loader` (no flips).
template <typename T>
std::pair<double, double> dataset_accuracy(MultiTaskModel<T>& model, BatchLoader& loader, std::size_t batch_size);

}  // namespace aag
