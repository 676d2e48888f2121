#include "aag/evaluation.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "aag/errors.hpp"

namespace aag {

namespace {

void check_lengths(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("prediction and label counts differ (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
  }
  if (pred.empty()) throw ArgumentError("no samples to score");
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

}  // namespace

double accuracy(std::span<const int> pred, std::span<const int> truth) {
  check_lengths(pred, truth);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double aabd(std::span<const int> pred, std::span<const int> truth) {
  check_lengths(pred, truth);
  long long total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += std::abs(static_cast<long long>(pred[i]) - truth[i]);
  return static_cast<double>(total) / static_cast<double>(pred.size());
}

CountMatrix confusion_matrix(std::span<const int> pred, std::span<const int> truth, std::size_t classes) {
  if (pred.size() != truth.size()) throw DimensionError("prediction and label counts differ");
  CountMatrix m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= classes ||
        static_cast<std::size_t>(truth[i]) >= classes) {
      throw ArgumentError("class index out of range at sample " + std::to_string(i));
    }
    ++m[truth[i]][pred[i]];
  }
  return m;
}

std::vector<std::vector<double>> row_percentages(const CountMatrix& m) {
  std::vector<std::vector<double>> out;
  for (const auto& row : m) {
    std::size_t total = 0;
    for (auto c : row) total += c;
    std::vector<double> r(row.size(), 0.0);
    if (total > 0) {
      for (std::size_t j = 0; j < row.size(); ++j) r[j] = 100.0 * static_cast<double>(row[j]) / static_cast<double>(total);
    }
    out.push_back(std::move(r));
  }
  return out;
}

double trace_accuracy(const CountMatrix& m) {
  std::size_t diag = 0, total = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m[i].size(); ++j) total += m[i][j];
    diag += m[i][i];
  }
  if (total == 0) throw ArgumentError("empty confusion matrix");
  return static_cast<double>(diag) / static_cast<double>(total);
}

std::vector<std::size_t> probability_histogram(std::span<const double> probs, std::size_t bins) {
  if (bins == 0) throw ArgumentError("histogram needs at least one bin");
  std::vector<std::size_t> counts(bins, 0);
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("probability outside [0,1]: " + fmt(p));
    const auto b = std::min(static_cast<std::size_t>(p * static_cast<double>(bins)), bins - 1);
    ++counts[b];
  }
  return counts;
}

MetricsReport MetricsReport::from_predictions(std::span<const Prediction> preds, std::span<const int> genders,
                                              std::span<const int> buckets, const BucketScheme& scheme) {
  if (preds.empty()) throw DataError("nothing to evaluate");
  if (preds.size() != genders.size() || preds.size() != buckets.size()) {
    throw DimensionError("prediction and label counts differ");
  }
  std::vector<int> pg, pa;
  std::vector<double> female;
  for (const auto& p : preds) {
    if (p.age_probs.size() != static_cast<std::size_t>(scheme.count)) {
      throw DimensionError("model predicts " + std::to_string(p.age_probs.size()) + " age buckets, scheme has " +
                           std::to_string(scheme.count));
    }
    pg.push_back(static_cast<int>(p.gender()));
    pa.push_back(static_cast<int>(p.age_bucket()));
    female.push_back(p.gender_probs.at(1));
  }
  MetricsReport r;
  r.scheme = scheme;
  r.samples = preds.size();
  r.confusion_gender = confusion_matrix(pg, genders, 2);
  r.confusion_age = confusion_matrix(pa, buckets, static_cast<std::size_t>(scheme.count));
  r.gender_accuracy = accuracy(pg, genders);
  r.age_bucket_accuracy = accuracy(pa, buckets);
  r.aabd = aag::aabd(pa, buckets);
  r.female_prob_histogram = probability_histogram(female);
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["samples"] = samples;
  j["gender_accuracy"] = gender_accuracy;
  j["age_bucket_accuracy"] = age_bucket_accuracy;
  j["aabd"] = aabd;
  j["confusion_gender"] = {{"labels", {"male", "female"}},
                           {"counts", confusion_gender},
                           {"row_percent", row_percentages(confusion_gender)}};
  std::vector<std::string> labels;
  for (int b = 0; b < scheme.count; ++b) labels.push_back(scheme.label(b));
  j["confusion_age"] = {{"labels", labels}, {"counts", confusion_age}, {"row_percent", row_percentages(confusion_age)}};
  j["female_prob_histogram"] = {{"bins", female_prob_histogram.size()}, {"counts", female_prob_histogram}};
  j["buckets"] = scheme.to_json();
  return j;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream s;
  s << "samples,gender_accuracy,age_bucket_accuracy,aabd";
  for (std::size_t i = 0; i < female_prob_histogram.size(); ++i) s << ",hist" << i;
  s << "\n" << samples << "," << fmt(gender_accuracy) << "," << fmt(age_bucket_accuracy) << "," << fmt(aabd);
  for (auto c : female_prob_histogram) s << "," << c;
  s << "\n";
  return s.str();
}

std::string confusion_csv(const CountMatrix& m, const std::vector<std::string>& labels) {
  std::ostringstream s;
  s << "truth\\pred";
  for (const auto& l : labels) s << "," << l;
  s << "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    s << labels.at(i);
    for (auto c : m[i]) s << "," << c;
    s << "\n";
  }
  return s.str();
}

std::vector<std::string> MetricsReport::write(const std::string& dir, const std::string& stem) const {
  std::filesystem::create_directories(dir);
  const std::string base = dir + "/" + stem;
  std::vector<std::string> paths{base + ".json", base + ".csv", base + "_confusion_gender.csv",
                                 base + "_confusion_age.csv"};
  write_text(paths[0], to_json().dump(2) + "\n");
  write_text(paths[1], to_csv());
  write_text(paths[2], confusion_csv(confusion_gender, {"male", "female"}));
  std::vector<std::string> labels;
  for (int b = 0; b < scheme.count; ++b) labels.push_back(scheme.label(b));
  write_text(paths[3], confusion_csv(confusion_age, labels));
  return paths;
}

template <typename T>
std::vector<Prediction> predict_records(MultiTaskModel<T>& model, BatchLoader& loader,
                                        std::span<const std::size_t> indices, std::size_t batch_size,
                                        std::vector<std::size_t>* kept) {
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  std::vector<Prediction> out;
  if (kept) kept->clear();
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    auto batch = loader.load<T>(chunk, false, 0);
    if (batch.indices.empty()) continue;
    auto preds = model.predict(batch.images);
    out.insert(out.end(), std::make_move_iterator(preds.begin()), std::make_move_iterator(preds.end()));
    if (kept) kept->insert(kept->end(), batch.indices.begin(), batch.indices.end());
  }
  return out;
}

template <typename T>
EvaluationResult<T> evaluate(std::span<MultiTaskModel<T>* const> models, BatchLoader& loader,
                             std::size_t batch_size, const BucketScheme& scheme) {
  if (models.empty()) throw ArgumentError("no models to evaluate");
  if (loader.records().empty()) throw DataError("partition is empty");
  for (auto* m : models) {
    if (m->spec().num_age_buckets != static_cast<std::size_t>(scheme.count)) {
      throw ConfigError("model has " + std::to_string(m->spec().num_age_buckets) +
                        " age buckets but the scheme has " + std::to_string(scheme.count));
    }
  }
  std::vector<std::size_t> all(loader.records().size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  EvaluationResult<T> res;
  for (auto* m : models) {
    std::vector<std::size_t> kept;
    res.member_predictions.push_back(predict_records(*m, loader, all, batch_size, &kept));
    if (res.member_predictions.size() == 1) {
      res.indices = kept;
    } else if (kept != res.indices) {
      throw DataError("models saw different samples");
    }
  }
  if (res.indices.empty()) throw DataError("no decodable images in partition");
  std::vector<int> genders, buckets;
  for (auto i : res.indices) {
    genders.push_back(static_cast<int>(loader.records()[i].gender));
    buckets.push_back(loader.records()[i].bucket);
  }
  for (const auto& p : res.member_predictions) {
    res.member_reports.push_back(MetricsReport::from_predictions(p, genders, buckets, scheme));
  }
  if (models.size() == 1) {
    res.predictions = res.member_predictions[0];
    res.report = res.member_reports[0];
  } else {
    res.predictions = ensemble_predict(std::span<const std::vector<Prediction>>(res.member_predictions));
    res.report = MetricsReport::from_predictions(res.predictions, genders, buckets, scheme);
  }
  return res;
}

Image normalize_map(const FloatImage& map, bool* constant) {
  if (map.channels != 1) throw DimensionError("attention map must have one channel");
  Image img{map.width, map.height, 1, std::vector<std::uint8_t>(map.data.size())};
  const auto [lo, hi] = std::minmax_element(map.data.begin(), map.data.end());
  const bool flat = map.data.empty() || *lo == *hi;
  if (constant) *constant = flat;
  if (flat) {
    std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{128});
    return img;
  }
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  for (std::size_t i = 0; i < map.data.size(); ++i) {
    const double v = 255.0 * (static_cast<double>(map.data[i]) - static_cast<double>(*lo)) / range;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  return img;
}

Image colorize(const Image& gray) {
  if (gray.channels != 1) throw DimensionError("colorize expects a grayscale image");
  Image out{gray.width, gray.height, 3, std::vector<std::uint8_t>(gray.pixels.size() * 3)};
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
    out.pixels[3 * i] = gray.pixels[i];
    out.pixels[3 * i + 1] = 0;
    out.pixels[3 * i + 2] = static_cast<std::uint8_t>(255 - gray.pixels[i]);
  }
  return out;
}

template <typename T>
std::vector<std::string> export_attention_maps(const std::vector<Tensor<T>>& taps, std::size_t sample,
                                               const std::string& id, const std::string& out_dir,
                                               std::size_t size, bool per_channel) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> paths;
  for (std::size_t k = 0; k < taps.size(); ++k) {
    const auto& tap = taps[k];
    if (tap.rank() != 4) throw DimensionError("attention tap must be [N,C,H,W]");
    if (sample >= tap.dim(0)) throw ArgumentError("sample index out of range");
    const std::size_t c = tap.dim(1), h = tap.dim(2), w = tap.dim(3);
    const auto data = tap.data().subspan(sample * c * h * w, c * h * w);
    const std::string base = out_dir + "/" + id + "_attn" + std::to_string(k + 1);

    auto emit = [&](const FloatImage& small, const std::string& stem, bool color) {
      bool flat = false;
      const auto gray = normalize_map(resize_bilinear(small, size, size), &flat);
      if (flat) std::cerr << "warning: " << stem << " is constant; written as mid-gray\n";
      write_pgm(stem + ".pgm", gray);
      paths.push_back(stem + ".pgm");
      if (color) {
        write_ppm(stem + ".ppm", colorize(gray));
        paths.push_back(stem + ".ppm");
      }
    };

    FloatImage avg{1, h, w, std::vector<float>(h * w, 0.0f)};
    for (std::size_t i = 0; i < h * w; ++i) {
      double acc = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) acc += static_cast<double>(data[ch * h * w + i]);
      avg.data[i] = static_cast<float>(acc / static_cast<double>(c));
    }
    emit(avg, base, true);
    if (per_channel) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        FloatImage one{1, h, w, std::vector<float>(data.begin() + ch * h * w, data.begin() + (ch + 1) * h * w)};
        emit(one, base + "_c" + std::to_string(ch), false);
      }
    }
  }
  return paths;
}

template std::vector<Prediction> predict_records(MultiTaskModel<float>&, BatchLoader&, std::span<const std::size_t>,
                                                 std::size_t, std::vector<std::size_t>*);
template std::vector<Prediction> predict_records(MultiTaskModel<double>&, BatchLoader&, std::span<const std::size_t>,
                                                 std::size_t, std::vector<std::size_t>*);
template EvaluationResult<float> evaluate(std::span<MultiTaskModel<float>* const>, BatchLoader&, std::size_t,
                                          const BucketScheme&);
template EvaluationResult<double> evaluate(std::span<MultiTaskModel<double>* const>, BatchLoader&, std::size_t,
                                           const BucketScheme&);
template std::vector<std::string> export_attention_maps(const std::vector<Tensor<float>>&, std::size_t,
                                                        const std::string&, const std::string&, std::size_t, bool);
template std::vector<std::string> export_attention_maps(const std::vector<Tensor<double>>&, std::size_t,
                                                        const std::string&, const std::string&, std::size_t, bool);

}  // namespace aag
