#include "spfl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "spfl/errors.hpp"

namespace spfl {

namespace {

uint32_t read_u32_be(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | b[3];
}

void write_u32_be(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw FormatError("cannot open " + images_path);
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw FormatError("cannot open " + labels_path);

  uint32_t magic = read_u32_be(imgs);
  if (!imgs || magic != kIdxImagesMagic)
    throw FormatError(images_path + ": bad IDX image magic");
  uint32_t n = read_u32_be(imgs);
  uint32_t rows = read_u32_be(imgs);
  uint32_t cols = read_u32_be(imgs);
  if (!imgs || rows == 0 || cols == 0)
    throw FormatError(images_path + ": bad IDX image header");

  uint32_t lmagic = read_u32_be(labs);
  if (!labs || lmagic != kIdxLabelsMagic)
    throw FormatError(labels_path + ": bad IDX label magic");
  uint32_t ln = read_u32_be(labs);
  if (!labs || ln != n)
    throw FormatError(labels_path + ": label count does not match image count");

  Dataset d;
  d.tag = "idx";
  d.channels = 1;
  d.height = static_cast<int>(rows);
  d.width = static_cast<int>(cols);
  const size_t px = static_cast<size_t>(rows) * cols;
  std::vector<unsigned char> buf(px);
  d.images.resize(static_cast<size_t>(n) * px);
  d.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(px));
    if (!imgs) throw FormatError(images_path + ": truncated image data");
    float* dst = d.images.data() + static_cast<size_t>(i) * px;
    for (size_t j = 0; j < px; ++j)
      dst[j] = static_cast<float>(buf[j]) / 255.0f;
  }
  labs.read(reinterpret_cast<char*>(d.labels.data()), n);
  if (!labs) throw FormatError(labels_path + ": truncated label data");
  for (uint8_t l : d.labels)
    if (l > 9) throw FormatError(labels_path + ": label byte out of range");
  return d;
}

Dataset load_idx_dir(const std::string& dir, const std::string& part) {
  std::string prefix = dir.empty() ? part : dir + "/" + part;
  Dataset d = load_idx(prefix + "-images-idx3-ubyte",
                       prefix + "-labels-idx1-ubyte");
  d.tag = part == "train" ? "mnist-train" : "mnist-test";
  return d;
}

Dataset load_cifar_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw FormatError("cannot open " + path);
  std::streamoff bytes = is.tellg();
  constexpr std::streamoff kRecord = 3073;
  if (bytes % kRecord != 0)
    throw FormatError(path + ": size is not a multiple of 3073");
  size_t n = static_cast<size_t>(bytes / kRecord);
  if (n == 0) throw FormatError(path + ": empty dataset");
  is.seekg(0);

  Dataset d;
  d.tag = "cifar10";
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.images.resize(n * 3072);
  d.labels.resize(n);
  std::vector<unsigned char> rec(3073);
  for (size_t i = 0; i < n; ++i) {
    is.read(reinterpret_cast<char*>(rec.data()), 3073);
    if (!is) throw FormatError(path + ": truncated record");
    if (rec[0] > 9) throw FormatError(path + ": label byte out of range");
    d.labels[i] = rec[0];
    float* dst = d.images.data() + i * 3072;
    for (size_t j = 0; j < 3072; ++j)
      dst[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return d;
}

Dataset load_cifar_dir(const std::string& dir, bool train) {
  Dataset all;
  auto append = [&](const std::string& file) {
    Dataset part = load_cifar_binary(dir + "/" + file);
    if (all.size() == 0) {
      all = std::move(part);
    } else {
      all.images.insert(all.images.end(), part.images.begin(),
                        part.images.end());
      all.labels.insert(all.labels.end(), part.labels.begin(),
                        part.labels.end());
    }
  };
  if (train) {
    for (int i = 1; i <= 5; ++i)
      append("data_batch_" + std::to_string(i) + ".bin");
    all.tag = "cifar10-train";
  } else {
    append("test_batch.bin");
    all.tag = "cifar10-test";
  }
  return all;
}

void write_idx(const Dataset& data, const std::string& images_path,
               const std::string& labels_path) {
  if (data.channels != 1)
    throw FormatError("write_idx supports single-channel images only");
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw FormatError("cannot open " + images_path + " for writing");
  write_u32_be(imgs, kIdxImagesMagic);
  write_u32_be(imgs, static_cast<uint32_t>(data.size()));
  write_u32_be(imgs, static_cast<uint32_t>(data.height));
  write_u32_be(imgs, static_cast<uint32_t>(data.width));
  const size_t px = data.sample_extent();
  std::vector<unsigned char> buf(px);
  for (size_t i = 0; i < data.size(); ++i) {
    const float* src = data.image(i);
    for (size_t j = 0; j < px; ++j) {
      float v = std::min(std::max(src[j], 0.0f), 1.0f);
      buf[j] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    imgs.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(px));
  }
  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw FormatError("cannot open " + labels_path + " for writing");
  write_u32_be(labs, kIdxLabelsMagic);
  write_u32_be(labs, static_cast<uint32_t>(data.size()));
  labs.write(reinterpret_cast<const char*>(data.labels.data()),
             static_cast<std::streamsize>(data.labels.size()));
  if (!imgs || !labs) throw FormatError("short write while saving IDX files");
}

namespace {

// 5x7 glyph bitmaps, one string per row.
const char* const kGlyphs[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"}};

}  // namespace

Dataset synth_digits(int count, uint64_t seed, bool balanced) {
  Dataset d;
  d.tag = "synth";
  d.channels = 1;
  d.height = 28;
  d.width = 28;
  d.images.assign(static_cast<size_t>(count) * 28 * 28, 0.0f);
  d.labels.resize(static_cast<size_t>(count));
  Rng rng = Rng::derive(seed, {stream::kInit, 0x5d});

  // glyph cell occupancy with a soft edge, for antialiased sampling
  auto glyph_at = [](int label, float u, float v) -> float {
    if (u < 0.0f || v < 0.0f || u >= 5.0f || v >= 7.0f) return 0.0f;
    return kGlyphs[label][static_cast<int>(v)][static_cast<int>(u)] == '1'
               ? 1.0f
               : 0.0f;
  };

  for (int i = 0; i < count; ++i) {
    int label = balanced ? i % 10 : static_cast<int>(rng.below(10));
    d.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(label);
    float* dst = d.images.data() + static_cast<size_t>(i) * 28 * 28;

    // per-sample geometry: scale, rotation, shear, translation, stroke
    float cell = 2.0f + 1.6f * static_cast<float>(rng.uniform());  // px/cell
    float angle = static_cast<float>(rng.uniform(-0.35, 0.35));
    float shear = static_cast<float>(rng.uniform(-0.25, 0.25));
    float dx = static_cast<float>(rng.uniform(-3.5, 3.5));
    float dy = static_cast<float>(rng.uniform(-3.5, 3.5));
    float intensity = 0.55f + 0.45f * static_cast<float>(rng.uniform());
    float stroke = 0.35f + 0.45f * static_cast<float>(rng.uniform());
    float ca = std::cos(angle), sa = std::sin(angle);

    for (int r = 0; r < 28; ++r)
      for (int c = 0; c < 28; ++c) {
        // map the canvas pixel back into glyph coordinates
        float x = static_cast<float>(c) - 13.5f - dx;
        float y = static_cast<float>(r) - 13.5f - dy;
        float xr = ca * x + sa * y;
        float yr = -sa * x + ca * y;
        xr += shear * yr;
        float u = xr / cell + 2.5f;
        float v = yr / cell + 3.5f;
        // supersample the cell footprint for soft strokes
        float acc = 0.0f;
        for (int sy = -1; sy <= 1; ++sy)
          for (int sx = -1; sx <= 1; ++sx)
            acc += glyph_at(label, u + stroke * 0.5f * sx,
                            v + stroke * 0.5f * sy);
        float ink = acc / 9.0f;
        float noise = 0.09f * static_cast<float>(rng.normal());
        float val = intensity * ink + noise;
        dst[static_cast<size_t>(r) * 28 + c] =
            std::min(std::max(val, 0.0f), 1.0f);
      }
  }
  return d;
}

std::vector<DatasetShard> iid_partition(const Dataset& data, int clients,
                                        uint64_t seed) {
  if (clients < 1)
    throw std::invalid_argument("iid_partition: need at least one client");
  if (static_cast<size_t>(clients) > data.size())
    throw std::invalid_argument("iid_partition: more clients than samples");
  std::vector<uint32_t> perm(data.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<uint32_t>(i);
  Rng rng = Rng::derive(seed, {stream::kPartition});
  rng.shuffle(perm);

  std::vector<DatasetShard> shards(static_cast<size_t>(clients));
  size_t base = data.size() / static_cast<size_t>(clients);
  size_t extra = data.size() % static_cast<size_t>(clients);
  size_t pos = 0;
  for (int c = 0; c < clients; ++c) {
    size_t take = base + (static_cast<size_t>(c) < extra ? 1 : 0);
    auto& s = shards[static_cast<size_t>(c)];
    s.data = &data;
    s.owner = c;
    s.indices.assign(perm.begin() + static_cast<long>(pos),
                     perm.begin() + static_cast<long>(pos + take));
    pos += take;
  }
  return shards;
}

DatasetShard stratified_cap(const DatasetShard& shard, int cap, Rng& rng) {
  if (cap <= 0 || static_cast<size_t>(cap) >= shard.size()) return shard;
  std::vector<std::vector<uint32_t>> by_class(
      static_cast<size_t>(shard.data->num_classes));
  for (uint32_t idx : shard.indices)
    by_class[shard.data->labels[idx]].push_back(idx);
  for (auto& v : by_class) rng.shuffle(v);
  DatasetShard out;
  out.data = shard.data;
  out.owner = shard.owner;
  std::vector<size_t> cursor(by_class.size(), 0);
  while (out.indices.size() < static_cast<size_t>(cap)) {
    bool advanced = false;
    for (size_t c = 0; c < by_class.size() &&
                       out.indices.size() < static_cast<size_t>(cap);
         ++c) {
      if (cursor[c] < by_class[c].size()) {
        out.indices.push_back(by_class[c][cursor[c]++]);
        advanced = true;
      }
    }
    if (!advanced) break;
  }
  return out;
}

Dataset stratified_subset(const Dataset& data, int cap, uint64_t seed) {
  if (cap <= 0 || static_cast<size_t>(cap) >= data.size()) return data;
  DatasetShard whole;
  whole.data = &data;
  whole.owner = -1;
  whole.indices.resize(data.size());
  for (size_t i = 0; i < data.size(); ++i)
    whole.indices[i] = static_cast<uint32_t>(i);
  Rng rng = Rng::derive(seed, {stream::kPartition, 0x7e57});
  DatasetShard capped = stratified_cap(whole, cap, rng);
  Dataset out;
  out.tag = data.tag + "-subset";
  out.channels = data.channels;
  out.height = data.height;
  out.width = data.width;
  out.num_classes = data.num_classes;
  const size_t px = data.sample_extent();
  out.images.resize(capped.size() * px);
  out.labels.resize(capped.size());
  for (size_t i = 0; i < capped.size(); ++i) {
    std::copy_n(data.image(capped.indices[i]), px, out.images.data() + i * px);
    out.labels[i] = data.labels[capped.indices[i]];
  }
  return out;
}

Batch<float> make_batch(const Dataset& data,
                        const std::vector<uint32_t>& indices) {
  Batch<float> b;
  const int n = static_cast<int>(indices.size());
  b.inputs = Tensor<float>({n, data.channels, data.height, data.width});
  b.labels = Mat<float>({n, data.num_classes});
  const size_t px = data.sample_extent();
  for (int i = 0; i < n; ++i) {
    std::copy_n(data.image(indices[static_cast<size_t>(i)]), px,
                b.inputs.ptr() + static_cast<size_t>(i) * px);
    b.labels[static_cast<size_t>(i) * data.num_classes +
             data.labels[indices[static_cast<size_t>(i)]]] = 1.0f;
  }
  return b;
}

std::vector<Batch<float>> epoch_batches(const DatasetShard& shard,
                                        int batch_size, Rng& rng) {
  std::vector<uint32_t> order = shard.indices;
  rng.shuffle(order);
  std::vector<Batch<float>> batches;
  for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(batch_size)) {
    size_t end = std::min(order.size(), pos + static_cast<size_t>(batch_size));
    std::vector<uint32_t> sel(order.begin() + static_cast<long>(pos),
                              order.begin() + static_cast<long>(end));
    batches.push_back(make_batch(*shard.data, sel));
  }
  return batches;
}

}  // namespace spfl
