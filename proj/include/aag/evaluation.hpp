#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aag/data.hpp"
#include "aag/image_io.hpp"
#include "aag/models.hpp"
#include "json.hpp"

namespace aag {

using CountMatrix = std::vector<std::vector<std::size_t>>;

// Fraction of positions where pred == truth.
double accuracy(std::span<const int> pred, std::span<const int> truth);
// Mean absolute difference between predicted and true bucket indices.
double aabd(std::span<const int> pred, std::span<const int> truth);
// Rows are true classes, columns predictions.
CountMatrix confusion_matrix(std::span<const int> pred, std::span<const int> truth, std::size_t classes);
// Each row as percentages of its total; empty rows stay zero.
std::vector<std::vector<double>> row_percentages(const CountMatrix& m);
double trace_accuracy(const CountMatrix& m);
// Equal-width bins over [0,1]; 1.0 lands in the last bin.
std::vector<std::size_t> probability_histogram(std::span<const double> probs, std::size_t bins = 20);

struct MetricsReport {
  std::size_t samples = 0;
  double gender_accuracy = 0.0;
  double age_bucket_accuracy = 0.0;
  double aabd = 0.0;
  CountMatrix confusion_gender;
  CountMatrix confusion_age;
  std::vector<std::size_t> female_prob_histogram;
  BucketScheme scheme;

  static MetricsReport from_predictions(std::span<const Prediction> preds, std::span<const int> genders,
                                        std::span<const int> buckets, const BucketScheme& scheme);

  nlohmann::json to_json() const;
  // One header line and one value line.
  std::string to_csv() const;
  // <stem>.json, <stem>.csv and the two confusion grids as CSV.
  std::vector<std::string> write(const std::string& dir, const std::string& stem) const;
};

std::string confusion_csv(const CountMatrix& m, const std::vector<std::string>& labels);

template <typename T>
struct EvaluationResult {
  MetricsReport report;
  std::vector<Prediction> predictions;               // ensemble mean when several models
  std::vector<std::vector<Prediction>> member_predictions;
  std::vector<MetricsReport> member_reports;
  std::vector<std::size_t> indices;                  // loader records that were evaluated
};

// Eval-mode predictions for the given loader records, in `batch_size` chunks.
// Records that fail to decode are left out of `kept`.
template <typename T>
std::vector<Prediction> predict_records(MultiTaskModel<T>& model, BatchLoader& loader,
                                        std::span<const std::size_t> indices, std::size_t batch_size,
                                        std::vector<std::size_t>* kept = nullptr);

// One model: its own report. Two or more: the report of the averaged
// probabilities, plus each member's report.
template <typename T>
EvaluationResult<T> evaluate(std::span<MultiTaskModel<T>* const> models, BatchLoader& loader,
                             std::size_t batch_size, const BucketScheme& scheme);

// Min-max normalizes a single-channel map to 0..255. A constant map becomes
// mid-gray (128) and `constant` is set.
Image normalize_map(const FloatImage& map, bool* constant = nullptr);
// Blue (0) to red (255), linear.
Image colorize(const Image& gray);

// Writes <id>_attn<k>.pgm and .ppm for every tap k (1-based) of sample
// `sample`, using the channel mean upscaled to `size`x`size`. With
// `per_channel`, also <id>_attn<k>_c<c>.pgm for each channel. Returns the
// written paths.
template <typename T>
std::vector<std::string> export_attention_maps(const std::vector<Tensor<T>>& taps, std::size_t sample,
                                               const std::string& id, const std::string& out_dir,
                                               std::size_t size, bool per_channel = false);

}  // namespace aag
