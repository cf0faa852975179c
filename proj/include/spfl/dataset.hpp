#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spfl/net.hpp"
#include "spfl/rng.hpp"

namespace spfl {

// Images as float32 in [0,1], NCHW; labels in [0, num_classes).
struct Dataset {
  std::string tag;
  int channels = 0, height = 0, width = 0;
  int num_classes = 10;
  std::vector<float> images;
  std::vector<uint8_t> labels;

  size_t size() const { return labels.size(); }
  size_t sample_extent() const {
    return static_cast<size_t>(channels) * height * width;
  }
  const float* image(size_t i) const {
    return images.data() + i * sample_extent();
  }
};

// MNIST IDX pair: big-endian magic 0x803 for images, 0x801 for labels.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);
// Directory layout with the standard file names; part is "train" or "t10k".
Dataset load_idx_dir(const std::string& dir, const std::string& part);

// One CIFAR-10 binary batch file of 3073-byte records.
Dataset load_cifar_binary(const std::string& path);
// data_batch_1..5.bin for train, test_batch.bin otherwise.
Dataset load_cifar_dir(const std::string& dir, bool train);

// Write a dataset back out in IDX form.
void write_idx(const Dataset& data, const std::string& images_path,
               const std::string& labels_path);

// Procedural 10-class digit-glyph stand-in used when MNIST is not on disk:
// 28x28 renderings of distinct glyph bitmaps with jitter, thickness and
// noise variation. Balanced when `balanced` is set.
Dataset synth_digits(int count, uint64_t seed, bool balanced);

// A client's immutable slice of a dataset.
struct DatasetShard {
  const Dataset* data = nullptr;
  int owner = -1;
  std::vector<uint32_t> indices;
  size_t size() const { return indices.size(); }
};

// Random permutation split into N near-equal disjoint shards.
std::vector<DatasetShard> iid_partition(const Dataset& data, int clients,
                                        uint64_t seed);

// Class-stratified subset of at most `cap` samples (keeps per-class
// fractions, so the target-class share stays ~1/k).
DatasetShard stratified_cap(const DatasetShard& shard, int cap, Rng& rng);
Dataset stratified_subset(const Dataset& data, int cap, uint64_t seed);

// Assemble a batch (copies samples; labels one-hot).
Batch<float> make_batch(const Dataset& data,
                        const std::vector<uint32_t>& indices);

// Shuffled mini-batches covering the shard once; trailing partial batch kept.
std::vector<Batch<float>> epoch_batches(const DatasetShard& shard,
                                        int batch_size, Rng& rng);

}  // namespace spfl
