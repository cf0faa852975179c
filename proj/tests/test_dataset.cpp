#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "spfl/dataset.hpp"
#include "spfl/errors.hpp"

using namespace spfl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("spfl_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static int counter;
};
int TempDir::counter = 0;

void put_u32_be(std::ofstream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void craft_idx_pair(const std::string& images, const std::string& labels,
                    int n, int rows, int cols,
                    const std::vector<uint8_t>& label_bytes) {
  std::ofstream im(images, std::ios::binary);
  put_u32_be(im, 0x803);
  put_u32_be(im, static_cast<uint32_t>(n));
  put_u32_be(im, static_cast<uint32_t>(rows));
  put_u32_be(im, static_cast<uint32_t>(cols));
  for (int i = 0; i < n * rows * cols; ++i)
    im.put(static_cast<char>(i % 256));
  std::ofstream lb(labels, std::ios::binary);
  put_u32_be(lb, 0x801);
  put_u32_be(lb, static_cast<uint32_t>(label_bytes.size()));
  lb.write(reinterpret_cast<const char*>(label_bytes.data()),
           static_cast<std::streamsize>(label_bytes.size()));
}

}  // namespace

TEST_CASE("idx loader reads crafted files bit-exactly") {
  TempDir tmp;
  craft_idx_pair(tmp.file("imgs"), tmp.file("labs"), 3, 4, 5, {1, 0, 9});
  Dataset d = load_idx(tmp.file("imgs"), tmp.file("labs"));
  CHECK(d.size() == 3);
  CHECK(d.channels == 1);
  CHECK(d.height == 4);
  CHECK(d.width == 5);
  CHECK(d.labels == std::vector<uint8_t>{1, 0, 9});
  // first pixel byte was 0, second 1, ... scaled into [0,1]
  CHECK(d.images[0] == doctest::Approx(0.0));
  CHECK(d.images[1] == doctest::Approx(1.0 / 255.0));
  for (float v : d.images) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("idx loader rejects malformed files") {
  TempDir tmp;
  SUBCASE("bad magic") {
    std::ofstream im(tmp.file("imgs"), std::ios::binary);
    put_u32_be(im, 0x804);
    put_u32_be(im, 1);
    put_u32_be(im, 2);
    put_u32_be(im, 2);
    im.put(0);
    im.close();
    std::ofstream lb(tmp.file("labs"), std::ios::binary);
    put_u32_be(lb, 0x801);
    put_u32_be(lb, 1);
    lb.put(0);
    lb.close();
    CHECK_THROWS_AS(load_idx(tmp.file("imgs"), tmp.file("labs")), FormatError);
  }
  SUBCASE("truncated image data") {
    craft_idx_pair(tmp.file("imgs"), tmp.file("labs"), 2, 3, 3, {0, 1});
    fs::resize_file(tmp.file("imgs"), 16 + 9);  // header + one sample only
    CHECK_THROWS_AS(load_idx(tmp.file("imgs"), tmp.file("labs")), FormatError);
  }
  SUBCASE("label count mismatch") {
    craft_idx_pair(tmp.file("imgs"), tmp.file("labs"), 2, 3, 3, {0, 1, 2});
    CHECK_THROWS_AS(load_idx(tmp.file("imgs"), tmp.file("labs")), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx(tmp.file("nope"), tmp.file("labs")), FormatError);
  }
}

TEST_CASE("cifar loader reads 3073-byte records") {
  TempDir tmp;
  SUBCASE("two records") {
    std::ofstream os(tmp.file("batch.bin"), std::ios::binary);
    for (int rec = 0; rec < 2; ++rec) {
      os.put(static_cast<char>(rec + 1));  // labels 1, 2
      for (int i = 0; i < 3072; ++i) os.put(static_cast<char>(i % 251));
    }
    os.close();
    Dataset d = load_cifar_binary(tmp.file("batch.bin"));
    CHECK(d.size() == 2);
    CHECK(d.channels == 3);
    CHECK(d.height == 32);
    CHECK(d.width == 32);
    CHECK(d.labels == std::vector<uint8_t>{1, 2});
    for (float v : d.images) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  SUBCASE("size not a multiple of 3073") {
    std::ofstream os(tmp.file("bad.bin"), std::ios::binary);
    for (int i = 0; i < 3072; ++i) os.put(0);
    os.close();
    CHECK_THROWS_AS(load_cifar_binary(tmp.file("bad.bin")), FormatError);
  }
  SUBCASE("empty file") {
    std::ofstream os(tmp.file("empty.bin"), std::ios::binary);
    os.close();
    CHECK_THROWS_AS(load_cifar_binary(tmp.file("empty.bin")), FormatError);
  }
  SUBCASE("label byte out of range") {
    std::ofstream os(tmp.file("lab.bin"), std::ios::binary);
    os.put(10);
    for (int i = 0; i < 3072; ++i) os.put(0);
    os.close();
    CHECK_THROWS_AS(load_cifar_binary(tmp.file("lab.bin")), FormatError);
  }
}

TEST_CASE("idx write/load round trip") {
  TempDir tmp;
  Dataset d = synth_digits(64, 9, true);
  write_idx(d, tmp.file("im"), tmp.file("lb"));
  Dataset back = load_idx(tmp.file("im"), tmp.file("lb"));
  REQUIRE(back.size() == d.size());
  CHECK(back.labels == d.labels);
  // quantization to bytes: within half a step
  for (size_t i = 0; i < d.images.size(); ++i)
    CHECK(std::abs(back.images[i] - d.images[i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("iid partition covers the dataset with disjoint near-equal shards") {
  Dataset d = synth_digits(103, 3, false);
  SUBCASE("single client takes everything") {
    auto shards = iid_partition(d, 1, 7);
    REQUIRE(shards.size() == 1);
    CHECK(shards[0].size() == 103);
  }
  SUBCASE("ten clients split 103 into 11/10 sized shards") {
    auto shards = iid_partition(d, 10, 7);
    std::set<uint32_t> seen;
    size_t total = 0;
    for (const auto& s : shards) {
      CHECK(s.size() >= 10);
      CHECK(s.size() <= 11);
      total += s.size();
      for (uint32_t idx : s.indices) CHECK(seen.insert(idx).second);
    }
    CHECK(total == 103);
  }
  SUBCASE("same seed gives identical shards, different seeds differ") {
    auto a = iid_partition(d, 4, 11);
    auto b = iid_partition(d, 4, 11);
    auto c = iid_partition(d, 4, 12);
    for (int i = 0; i < 4; ++i)
      CHECK(a[static_cast<size_t>(i)].indices ==
            b[static_cast<size_t>(i)].indices);
    CHECK(a[0].indices != c[0].indices);
  }
  SUBCASE("more clients than samples is an error") {
    Dataset small = synth_digits(3, 1, false);
    CHECK_THROWS_AS(iid_partition(small, 4, 1), std::invalid_argument);
  }
}

TEST_CASE("stratified capping keeps class balance") {
  Dataset d = synth_digits(1000, 5, true);
  auto shards = iid_partition(d, 2, 3);
  Rng rng = Rng::derive(5, {9});
  DatasetShard capped = stratified_cap(shards[0], 100, rng);
  CHECK(capped.size() == 100);
  std::vector<int> counts(10, 0);
  for (uint32_t idx : capped.indices) ++counts[d.labels[idx]];
  for (int c : counts) CHECK(std::abs(c - 10) <= 2);
}

TEST_CASE("epoch batches cover the shard once, shuffled per epoch") {
  Dataset d = synth_digits(50, 13, true);
  auto shards = iid_partition(d, 1, 1);
  Rng r1 = Rng::derive(1, {1});
  auto batches = epoch_batches(shards[0], 16, r1);
  REQUIRE(batches.size() == 4);  // 16+16+16+2
  CHECK(batches[3].size() == 2);
  size_t total = 0;
  for (const auto& b : batches) {
    total += static_cast<size_t>(b.size());
    // labels are one-hot
    for (int i = 0; i < b.size(); ++i) {
      float sum = 0;
      int nonzero = 0;
      for (int j = 0; j < 10; ++j) {
        float v = b.labels[static_cast<size_t>(i) * 10 + j];
        sum += v;
        nonzero += v != 0.0f;
      }
      CHECK(sum == 1.0f);
      CHECK(nonzero == 1);
    }
  }
  CHECK(total == 50);
  Rng r2 = Rng::derive(1, {1});
  auto again = epoch_batches(shards[0], 16, r2);
  CHECK(again[0].inputs.data == batches[0].inputs.data);
}

TEST_CASE("synthetic digits are balanced, in range, and deterministic") {
  Dataset a = synth_digits(200, 42, true);
  Dataset b = synth_digits(200, 42, true);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  std::vector<int> counts(10, 0);
  for (uint8_t l : a.labels) ++counts[l];
  for (int c : counts) CHECK(c == 20);
  for (float v : a.images) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  Dataset c = synth_digits(200, 43, true);
  CHECK(a.images != c.images);
}
