#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "aag/data.hpp"
#include "aag/errors.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using aag::Gender;

namespace {

aag::Image gradient_image(std::size_t w, std::size_t h, std::size_t channels) {
  aag::Image img{w, h, channels, std::vector<std::uint8_t>(w * h * channels)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
  return img;
}

std::vector<aag::SampleRecord> fake_records(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<aag::SampleRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int age = 1 + static_cast<int>(rng() % 100);
    out.push_back({"/data/" + std::to_string(age) + "_" + std::to_string(rng() % 2) + "_0_" +
                       std::to_string(rng()) + ".jpg",
                   age, Gender::Male, aag::BucketScheme{}.bucket(age)});
  }
  return out;
}

std::set<std::string> names(const std::vector<aag::SampleRecord>& rs) {
  std::set<std::string> s;
  for (const auto& r : rs) s.insert(r.filename());
  return s;
}

}  // namespace

TEST_CASE("UTK filenames") {
  auto a = aag::parse_utk_filename("25_0_2_20170116174525125.jpg.chip.jpg");
  REQUIRE(a);
  CHECK(a->age == 25);
  CHECK(a->gender == Gender::Male);
  CHECK(a->race == 2);
  auto b = aag::parse_utk_filename("/some/dir/1_1_0_x.jpg");
  REQUIRE(b);
  CHECK(b->age == 1);
  CHECK(b->gender == Gender::Female);
  // Some real files lack the race field; the timestamp takes its place.
  auto c = aag::parse_utk_filename("39_1_20170116174525125.jpg.chip.jpg");
  REQUIRE(c);
  CHECK(c->age == 39);
  CHECK(aag::parse_utk_filename("25_0_2.jpg"));
  for (const char* bad : {"face.jpg", "25_0.jpg", "25_2_0_x.jpg", "0_0_0_x.jpg", "117_1_0_x.jpg",
                          "a_0_0_x.jpg", "25__0_x.jpg", "25_0_x_y.jpg", "-3_0_0_x.jpg", ""}) {
    CHECK_MESSAGE(!aag::parse_utk_filename(bad), bad);
  }
}

TEST_CASE("age buckets") {
  aag::BucketScheme s;
  CHECK(s.bucket(25) == 2);
  CHECK(s.display_index(s.bucket(25)) == 3);
  CHECK(s.label(s.bucket(25)) == "20-30");
  CHECK(s.bucket(0) == 0);
  CHECK(s.label(0) == "0-10");
  CHECK(s.display_index(0) == 1);
  CHECK(s.bucket(110) == 10);
  CHECK(s.label(10) == "100-110");
  CHECK(s.bucket(116) == 10);
  CHECK_THROWS_AS(s.bucket(-1), aag::ArgumentError);
  CHECK_THROWS_AS(s.label(11), aag::ArgumentError);
  int prev = 0;
  for (int age = 0; age <= 200; ++age) {
    const int b = s.bucket(age);
    CHECK(b >= prev);
    CHECK(b < s.count);
    prev = b;
  }
  CHECK(s.width * s.count >= 110);
}

TEST_CASE("split ratios (1,0,0) put everything in train") {
  auto rs = fake_records(500, 1);
  auto split = aag::split_dataset(rs, 7, {1, 0, 0});
  CHECK(split.train.size() == 500);
  CHECK(split.val.empty());
  CHECK(split.test.empty());
}

TEST_CASE("split is deterministic, order independent, disjoint and exhaustive") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto rs = fake_records(200 + seed * 13, seed);
    auto a = aag::split_dataset(rs, seed);
    auto b = aag::split_dataset(rs, seed);
    CHECK(names(a.train) == names(b.train));
    CHECK(names(a.test) == names(b.test));
    std::reverse(rs.begin(), rs.end());
    std::shuffle(rs.begin(), rs.end(), std::mt19937_64(seed));
    auto c = aag::split_dataset(rs, seed);
    CHECK(names(a.train) == names(c.train));
    CHECK(names(a.val) == names(c.val));
    CHECK(names(a.test) == names(c.test));
    std::set<std::string> all;
    for (const auto* part : {&a.train, &a.val, &a.test}) {
      for (const auto& r : *part) CHECK(all.insert(r.filename()).second);
    }
    CHECK(all == names(rs));
  }
  auto rs = fake_records(300, 3);
  CHECK(names(aag::split_dataset(rs, 1).train) != names(aag::split_dataset(rs, 2).train));
}

TEST_CASE("split proportions on 10k names are within 1 percent") {
  auto rs = fake_records(10000, 42);
  auto split = aag::split_dataset(rs, 42);
  CHECK(std::abs(static_cast<double>(split.train.size()) / 10000 - 0.8) < 0.01);
  CHECK(std::abs(static_cast<double>(split.val.size()) / 10000 - 0.1) < 0.01);
  CHECK(std::abs(static_cast<double>(split.test.size()) / 10000 - 0.1) < 0.01);
  CHECK_THROWS_AS(aag::split_dataset(rs, 1, {-1, 1, 1}), aag::ConfigError);
  CHECK_THROWS_AS(aag::split_dataset(rs, 1, {0, 0, 0}), aag::ConfigError);
}

TEST_CASE("image formats decode to the written pixels") {
  const auto dir = synthetic::temp_dir("formats");
  const auto rgb = gradient_image(7, 5, 3);
  const auto gray = gradient_image(6, 4, 1);
  aag::write_png(dir + "/a.png", rgb);
  aag::write_ppm(dir + "/a.ppm", rgb);
  aag::write_pgm(dir + "/g.pgm", gray);
  aag::write_png(dir + "/g.png", gray);
  for (const char* f : {"/a.png", "/a.ppm"}) {
    auto img = aag::read_image(dir + f);
    CHECK(img.width == 7);
    CHECK(img.height == 5);
    CHECK(img.channels == 3);
    CHECK(img.pixels == rgb.pixels);
  }
  for (const char* f : {"/g.pgm", "/g.png"}) {
    auto img = aag::read_image(dir + f);
    CHECK(img.channels == 1);
    CHECK(img.pixels == gray.pixels);
  }
  aag::Image flat{16, 16, 3, std::vector<std::uint8_t>(16 * 16 * 3, 140)};
  aag::write_jpeg(dir + "/flat.jpg", flat, 95);
  auto j = aag::read_image(dir + "/flat.jpg");
  CHECK(j.channels == 3);
  for (auto v : j.pixels) CHECK(std::abs(int(v) - 140) <= 2);

  std::ofstream(dir + "/junk.jpg") << "not an image";
  CHECK_THROWS_AS(aag::read_image(dir + "/junk.jpg"), aag::FormatError);
  {
    std::ifstream in(dir + "/flat.jpg", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream(dir + "/cut.jpg", std::ios::binary) << bytes.substr(0, 40);
  }
  CHECK_THROWS_AS(aag::read_image(dir + "/cut.jpg"), aag::FormatError);
  std::ofstream(dir + "/cut.ppm", std::ios::binary) << "P6\n4 4\n255\nabc";
  CHECK_THROWS_AS(aag::read_image(dir + "/cut.ppm"), aag::FormatError);
  CHECK_THROWS_AS(aag::read_image(dir + "/missing.png"), aag::DataError);
  fs::remove_all(dir);
}

TEST_CASE("normalization, resize and flip") {
  aag::FloatImage gray{3, 5, 5, std::vector<float>(75, 0.5f)};
  std::vector<float> out(75);
  aag::normalize_into(gray, out.data());
  for (float v : out) CHECK(v == 0.0f);

  aag::FloatImage constant{3, 7, 9, std::vector<float>(3 * 7 * 9, 0.3f)};
  for (auto [h, w] : {std::pair{4, 4}, {13, 5}, {20, 30}}) {
    auto r = aag::resize_bilinear(constant, h, w);
    for (float v : r.data) CHECK(v == 0.3f);
  }

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  aag::FloatImage img{1, 6, 5, std::vector<float>(30)};
  for (auto& v : img.data) v = u(rng);
  for (auto [h, w] : {std::pair{3, 4}, {6, 5}, {11, 8}, {2, 2}}) {
    auto r = aag::resize_bilinear(img, h, w);
    auto want = oracle::bilinear({img.data.begin(), img.data.end()}, 6, 5, h, w);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(r.data[i] == doctest::Approx(want[i]).epsilon(1e-6));
  }

  auto flipped = img;
  aag::flip_horizontal(flipped);
  CHECK(flipped.data != img.data);
  CHECK(flipped.data[0] == img.data[4]);
  aag::flip_horizontal(flipped);
  CHECK(flipped.data == img.data);
}

TEST_CASE("scan, census and batches over a synthetic directory") {
  const auto dir = synthetic::temp_dir("scan");
  synthetic::Options opt;
  opt.count = 12;
  opt.size = 20;
  auto written = synthetic::write_dataset(dir, opt);
  std::ofstream(dir + "/face.jpg") << "x";
  std::ofstream(dir + "/notes.txt") << "ignored";
  std::ofstream(dir + "/30_1_0_broken.jpg") << "not a jpeg";

  aag::BucketScheme scheme;
  auto scan = aag::scan_dataset(dir, scheme);
  CHECK(scan.records.size() == 13);
  CHECK(scan.census.total == 13);
  CHECK(scan.census.male + scan.census.female == 13);
  CHECK(scan.census.skipped == std::vector<std::string>{"face.jpg"});
  std::size_t bucket_sum = 0;
  for (auto c : scan.census.per_bucket) bucket_sum += c;
  CHECK(bucket_sum == 13);
  for (const auto& r : scan.records) {
    CHECK(r.bucket == scheme.bucket(r.age));
    CHECK(fs::exists(r.path));
  }
  auto j = scan.census.to_json(scheme);
  CHECK(j["total"] == 13);
  CHECK(j["buckets"][2]["label"] == "20-30");
  CHECK(j["buckets"][2]["display_index"] == 3);

  auto batch = aag::load_batch<float>(scan.records, 16, false, 0);
  CHECK(batch.images.dims() == aag::Shape{12, 3, 16, 16});
  CHECK(batch.skipped.size() == 1);
  CHECK(batch.genders.size() == 12);
  for (int g : batch.genders) CHECK((g == 0 || g == 1));
  for (int b : batch.buckets) CHECK((b >= 0 && b < 11));
  for (float v : batch.images.data()) CHECK((v >= -1.0f && v <= 1.0f));

  // Flips depend on filename and seed only, so order and batching do not matter.
  aag::BatchLoader loader(scan.records, 16);
  std::vector<std::size_t> fwd;
  for (std::size_t i = 0; i < scan.records.size() && fwd.size() < 4; ++i) {
    if (scan.records[i].filename().find("broken") == std::string::npos) fwd.push_back(i);
  }
  const std::vector<std::size_t> rev(fwd.rbegin(), fwd.rend());
  auto a = loader.load<float>(fwd, true, 99);
  auto b = loader.load<float>(rev, true, 99);
  const std::size_t per = 3 * 16 * 16;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::equal(a.images.data().begin() + i * per, a.images.data().begin() + (i + 1) * per,
                     b.images.data().begin() + (3 - i) * per));
  }
  auto plain = loader.load<float>(fwd, false, 99);
  std::size_t flipped = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto aug = loader.load<float>(std::vector<std::size_t>{fwd[0]}, true, seed);
    flipped += !std::equal(aug.images.data().begin(), aug.images.data().begin() + per, plain.images.data().begin());
  }
  CHECK(flipped > 5);
  CHECK(flipped < 35);

  CHECK_THROWS_AS(aag::scan_dataset(dir + "/nope", scheme), aag::DataError);
  const auto empty = synthetic::temp_dir("empty");
  CHECK_THROWS_AS(aag::scan_dataset(empty, scheme), aag::DataError);
  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST_CASE("8-bit mid gray normalizes to the nearest representable value") {
  const auto dir = synthetic::temp_dir("gray");
  aag::write_pgm(dir + "/20_0_0_a.pgm", aag::Image{8, 8, 1, std::vector<std::uint8_t>(64, 128)});
  auto scan = aag::scan_dataset(dir, {});
  auto batch = aag::load_batch<double>(scan.records, 4, false, 0);
  for (double v : batch.images.data()) CHECK(v == doctest::Approx(2.0 * 128.0 / 255.0 - 1.0).epsilon(1e-6));
  fs::remove_all(dir);
}
