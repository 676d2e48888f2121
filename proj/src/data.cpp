#include "aag/data.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <iostream>

#include "aag/errors.hpp"

namespace fs = std::filesystem;

namespace aag {

std::string to_string(Gender g) { return g == Gender::Male ? "male" : "female"; }

namespace {

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

bool is_image_name(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const char* ext : {".jpg", ".jpeg", ".png", ".ppm", ".pgm"}) {
    const std::string e(ext);
    if (lower.size() > e.size() && lower.compare(lower.size() - e.size(), e.size(), e) == 0) return true;
  }
  return false;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double unit_interval(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

}  // namespace

std::optional<UtkLabel> parse_utk_filename(const std::string& name) {
  const std::string base = fs::path(name).filename().string();
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t end = base.find_first_of("_.", start);
    if (end == std::string::npos) return std::nullopt;
    fields.push_back(base.substr(start, end - start));
    // The third field may end the stem ("1_1_0.jpg"); the first two may not.
    if (base[end] == '.' && i < 2) return std::nullopt;
    start = end + 1;
  }
  for (const auto& f : fields) {
    if (!all_digits(f) || f.size() > 18) return std::nullopt;
  }
  UtkLabel label;
  if (fields[0].size() > 3) return std::nullopt;
  label.age = std::stoi(fields[0]);
  if (label.age < 1 || label.age > 116) return std::nullopt;
  if (fields[1] != "0" && fields[1] != "1") return std::nullopt;
  label.gender = fields[1] == "0" ? Gender::Male : Gender::Female;
  label.race = std::stoll(fields[2]);
  return label;
}

int BucketScheme::bucket(int age) const {
  if (age < 0) throw ArgumentError("age must be nonnegative, got " + std::to_string(age));
  return std::min(age, max_age()) / width;
}

std::string BucketScheme::label(int b) const {
  if (b < 0 || b >= count) throw ArgumentError("bucket index " + std::to_string(b) + " out of range");
  return std::to_string(b * width) + "-" + std::to_string((b + 1) * width);
}

nlohmann::json BucketScheme::to_json() const {
  return {{"width", width}, {"count", count}, {"display_offset", display_offset}};
}

BucketScheme BucketScheme::from_json(const nlohmann::json& j) {
  BucketScheme s;
  try {
    s.width = j.value("width", s.width);
    s.count = j.value("count", s.count);
    s.display_offset = j.value("display_offset", s.display_offset);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bucket scheme: ") + e.what());
  }
  if (s.width <= 0 || s.count < 2) throw ConfigError("bucket scheme needs width > 0 and count >= 2");
  return s;
}

std::string SampleRecord::filename() const { return fs::path(path).filename().string(); }

nlohmann::json Census::to_json(const BucketScheme& scheme) const {
  nlohmann::json buckets = nlohmann::json::array();
  for (std::size_t b = 0; b < per_bucket.size(); ++b) {
    buckets.push_back({{"index", b},
                       {"display_index", scheme.display_index(static_cast<int>(b))},
                       {"label", scheme.label(static_cast<int>(b))},
                       {"count", per_bucket[b]}});
  }
  return {{"total", total},     {"male", male},       {"female", female},
          {"buckets", buckets}, {"skipped", skipped}, {"skipped_count", skipped.size()}};
}

Census make_census(std::span<const SampleRecord> records, const BucketScheme& scheme) {
  Census c;
  c.per_bucket.assign(static_cast<std::size_t>(scheme.count), 0);
  for (const auto& r : records) {
    ++c.total;
    ++(r.gender == Gender::Male ? c.male : c.female);
    ++c.per_bucket[static_cast<std::size_t>(r.bucket)];
  }
  return c;
}

ScanResult scan_dataset(const std::string& dir, const BucketScheme& scheme) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw DataError("dataset directory not found: " + dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && is_image_name(entry.path().filename().string())) {
      names.push_back(entry.path().filename().string());
    }
  }
  if (ec) throw DataError("cannot list " + dir + ": " + ec.message());
  std::sort(names.begin(), names.end());
  ScanResult result;
  std::vector<std::string> skipped;
  for (const auto& name : names) {
    const auto label = parse_utk_filename(name);
    if (!label) {
      skipped.push_back(name);
      continue;
    }
    result.records.push_back(
        {(fs::path(dir) / name).string(), label->age, label->gender, scheme.bucket(label->age)});
  }
  if (result.records.empty()) {
    throw DataError("no usable images in " + dir + " (" + std::to_string(skipped.size()) +
                    " files skipped)");
  }
  for (const auto& s : skipped) std::cerr << "warning: skipping badly named file " << s << "\n";
  result.census = make_census(result.records, scheme);
  result.census.skipped = std::move(skipped);
  return result;
}

Partition parse_partition(const std::string& name) {
  if (name == "train") return Partition::Train;
  if (name == "val") return Partition::Val;
  if (name == "test") return Partition::Test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

std::string to_string(Partition p) {
  switch (p) {
    case Partition::Train: return "train";
    case Partition::Val: return "val";
    case Partition::Test: return "test";
  }
  return "?";
}

const std::vector<SampleRecord>& DatasetSplit::get(Partition p) const {
  switch (p) {
    case Partition::Train: return train;
    case Partition::Val: return val;
    case Partition::Test: return test;
  }
  return test;
}

nlohmann::json DatasetSplit::manifest() const {
  auto names = [](const std::vector<SampleRecord>& rs) {
    std::vector<std::string> out;
    for (const auto& r : rs) out.push_back(r.filename());
    return out;
  };
  return {{"seed", seed},
          {"ratios", {{"train", ratios.train}, {"val", ratios.val}, {"test", ratios.test}}},
          {"counts", {{"train", train.size()}, {"val", val.size()}, {"test", test.size()}}},
          {"train", names(train)},
          {"val", names(val)},
          {"test", names(test)}};
}

std::uint64_t keyed_hash(const std::string& key, std::uint64_t seed) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return splitmix64(h ^ splitmix64(seed));
}

DatasetSplit split_dataset(std::span<const SampleRecord> records, std::uint64_t seed,
                           SplitRatios ratios) {
  const double sum = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || !(sum > 0)) {
    throw ConfigError("split ratios must be nonnegative with a positive sum");
  }
  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  const double cut_train = ratios.train / sum;
  const double cut_val = (ratios.train + ratios.val) / sum;
  for (const auto& r : records) {
    const double u = unit_interval(keyed_hash(r.filename(), seed));
    if (u < cut_train) {
      split.train.push_back(r);
    } else if (u < cut_val) {
      split.val.push_back(r);
    } else {
      split.test.push_back(r);
    }
  }
  return split;
}

void normalize_into(const FloatImage& img, float* out) {
  for (std::size_t i = 0; i < img.data.size(); ++i) out[i] = (img.data[i] - 0.5f) / 0.5f;
}

BatchLoader::BatchLoader(std::vector<SampleRecord> records, std::size_t size, bool cache)
    : records_(std::move(records)), size_(size), cache_(cache) {
  if (size_ == 0) throw ConfigError("image size must be positive");
}

const FloatImage* BatchLoader::fetch(std::size_t index, std::string& error) {
  if (auto it = images_.find(index); it != images_.end()) return &it->second;
  if (auto it = failures_.find(index); it != failures_.end()) {
    error = it->second;
    return nullptr;
  }
  try {
    auto img = resize_bilinear(to_float_rgb(read_image(records_[index].path)), size_, size_);
    if (!cache_) {
      scratch_ = std::move(img);
      return &scratch_;
    }
    return &images_.emplace(index, std::move(img)).first->second;
  } catch (const Error& e) {
    failures_.emplace(index, e.what());
    error = e.what();
    return nullptr;
  }
}

template <typename T>
Batch<T> BatchLoader::load(std::span<const std::size_t> indices, bool augment,
                           std::uint64_t augment_seed) {
  Batch<T> batch;
  const std::size_t per = 3 * size_ * size_;
  std::vector<T> pixels;
  pixels.reserve(indices.size() * per);
  std::vector<float> scratch(per);
  for (std::size_t index : indices) {
    if (index >= records_.size()) throw ArgumentError("batch index out of range");
    std::string error;
    const FloatImage* img = fetch(index, error);
    if (!img) {
      std::cerr << "warning: skipping " << records_[index].path << ": " << error << "\n";
      batch.skipped.push_back(records_[index].path);
      continue;
    }
    const auto& rec = records_[index];
    const bool flip = augment && (keyed_hash(rec.filename(), augment_seed) & 1u);
    if (flip) {
      FloatImage copy = *img;
      flip_horizontal(copy);
      normalize_into(copy, scratch.data());
    } else {
      normalize_into(*img, scratch.data());
    }
    pixels.insert(pixels.end(), scratch.begin(), scratch.end());
    batch.genders.push_back(static_cast<int>(rec.gender));
    batch.buckets.push_back(rec.bucket);
    batch.indices.push_back(index);
  }
  batch.images = Tensor<T>::from_data({batch.indices.size(), 3, size_, size_}, std::move(pixels));
  return batch;
}

template <typename T>
Batch<T> load_batch(std::span<const SampleRecord> records, std::size_t size, bool augment,
                    std::uint64_t seed) {
  BatchLoader loader({records.begin(), records.end()}, size, false);
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return loader.load<T>(idx, augment, seed);
}

template Batch<float> BatchLoader::load(std::span<const std::size_t>, bool, std::uint64_t);
template Batch<double> BatchLoader::load(std::span<const std::size_t>, bool, std::uint64_t);
template Batch<float> load_batch(std::span<const SampleRecord>, std::size_t, bool, std::uint64_t);
template Batch<double> load_batch(std::span<const SampleRecord>, std::size_t, bool, std::uint64_t);

}  // namespace aag
