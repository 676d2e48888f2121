#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "aag/image_io.hpp"
#include "aag/tensor.hpp"
#include "json.hpp"

namespace aag {

enum class Gender { Male = 0, Female = 1 };

std::string to_string(Gender g);

struct UtkLabel {
  int age = 0;
  Gender gender = Gender::Male;
  long long race = 0;  // parsed, unused
};

// "age_gender_race_..." with gender 0 = male, 1 = female. Returns nullopt
// for anything else, including ages outside [1,116].
std::optional<UtkLabel> parse_utk_filename(const std::string& name);

// Decade buckets: internal index i covers [width*i, width*(i+1)); ages past
// the last bucket are clamped into it. Display indices are 1-based.
struct BucketScheme {
  int width = 10;
  int count = 11;
  int display_offset = 1;

  int bucket(int age) const;
  int display_index(int bucket) const { return bucket + display_offset; }
  std::string label(int bucket) const;  // "20-30"
  int max_age() const { return width * count - 1; }

  nlohmann::json to_json() const;
  static BucketScheme from_json(const nlohmann::json& j);
};

struct SampleRecord {
  std::string path;
  int age = 0;
  Gender gender = Gender::Male;
  int bucket = 0;

  std::string filename() const;
};

struct Census {
  std::size_t total = 0;
  std::size_t male = 0;
  std::size_t female = 0;
  std::vector<std::size_t> per_bucket;
  std::vector<std::string> skipped;

  nlohmann::json to_json(const BucketScheme& scheme) const;
};

struct ScanResult {
  std::vector<SampleRecord> records;  // sorted by filename
  Census census;
};

// Lists image files (.jpg/.jpeg/.png/.ppm/.pgm) in `dir`, non-recursively.
// Badly named files are skipped and listed in the census. Throws DataError
// for a missing directory or one without any usable image.
ScanResult scan_dataset(const std::string& dir, const BucketScheme& scheme);

Census make_census(std::span<const SampleRecord> records, const BucketScheme& scheme);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

enum class Partition { Train, Val, Test };

Partition parse_partition(const std::string& name);
std::string to_string(Partition p);

struct DatasetSplit {
  std::uint64_t seed = 0;
  SplitRatios ratios;
  std::vector<SampleRecord> train, val, test;

  const std::vector<SampleRecord>& get(Partition p) const;
  nlohmann::json manifest() const;
};

// Each record goes to a partition chosen by a hash of its filename and the
// seed, so membership does not depend on listing order.
DatasetSplit split_dataset(std::span<const SampleRecord> records, std::uint64_t seed,
                           SplitRatios ratios = {});

// Deterministic 64-bit hash of a string mixed with a seed.
std::uint64_t keyed_hash(const std::string& key, std::uint64_t seed);

// Decoded, resized [0,1] image -> normalized CHW values ((v - 0.5) / 0.5).
void normalize_into(const FloatImage& img, float* out);

template <typename T>
struct Batch {
  Tensor<T> images;            // [N,3,S,S]
  std::vector<int> genders;    // 0/1
  std::vector<int> buckets;    // internal bucket index
  std::vector<std::size_t> indices;  // records that made it into the batch
  std::vector<std::string> skipped;  // undecodable files
};

// Decodes and resizes records on demand and keeps the resized result, so
// later epochs skip decoding.
class BatchLoader {
 public:
  BatchLoader(std::vector<SampleRecord> records, std::size_t size, bool cache = true);

  // Horizontal flips (p = 0.5) are keyed by (filename, augment_seed) when
  // `augment` is set.
  template <typename T>
  Batch<T> load(std::span<const std::size_t> indices, bool augment, std::uint64_t augment_seed);

  const std::vector<SampleRecord>& records() const { return records_; }
  std::size_t size() const { return size_; }

 private:
  const FloatImage* fetch(std::size_t index, std::string& error);

  std::vector<SampleRecord> records_;
  std::size_t size_;
  bool cache_;
  std::unordered_map<std::size_t, FloatImage> images_;
  std::unordered_map<std::size_t, std::string> failures_;
  FloatImage scratch_;
};

template <typename T>
Batch<T> load_batch(std::span<const SampleRecord> records, std::size_t size, bool augment,
                    std::uint64_t seed);

}  // namespace aag
