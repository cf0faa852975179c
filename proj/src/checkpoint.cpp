#include "spfl/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "spfl/errors.hpp"

namespace spfl {

namespace {

void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

bool host_is_little_endian() {
  const uint32_t probe = 1;
  return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}

}  // namespace

void save_checkpoint(const std::string& path, const Params<float>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  os.write("SPFL", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<uint32_t>(params.manifest->tensors.size()));
  for (const auto& t : params.manifest->tensors) {
    put_u16(os, static_cast<uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    os.put(static_cast<char>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
    put_u64(os, t.offset);
  }
  put_u64(os, params.values.size());
  if (host_is_little_endian()) {
    os.write(reinterpret_cast<const char*>(params.values.data()),
             static_cast<std::streamsize>(params.values.size() * 4));
  } else {
    for (float v : params.values) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw FormatError("short write to checkpoint: " + path);
}

Params<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SPFL", 4) != 0)
    throw FormatError("bad checkpoint magic in " + path);
  uint32_t version = get_u32(is);
  if (version != 1)
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  uint32_t count = get_u32(is);
  auto manifest = std::make_shared<Manifest>();
  for (uint32_t i = 0; i < count; ++i) {
    TensorInfo info;
    uint16_t len = get_u16(is);
    info.name.resize(len);
    is.read(info.name.data(), len);
    int ndim = is.get();
    for (int d = 0; d < ndim; ++d)
      info.shape.push_back(static_cast<int>(get_u32(is)));
    info.offset = get_u64(is);
    info.extent = Tensor<float>::count(info.shape);
    manifest->tensors.push_back(std::move(info));
    if (!is) throw FormatError("truncated checkpoint manifest in " + path);
  }
  uint64_t total = get_u64(is);
  size_t expect = 0;
  for (const auto& t : manifest->tensors) expect += t.extent;
  if (expect != total)
    throw FormatError("checkpoint manifest does not cover value block");
  manifest->total = total;
  Params<float> p{std::move(manifest), std::vector<float>(total)};
  if (host_is_little_endian()) {
    is.read(reinterpret_cast<char*>(p.values.data()),
            static_cast<std::streamsize>(total * 4));
  } else {
    for (auto& v : p.values) {
      uint32_t bits = get_u32(is);
      std::memcpy(&v, &bits, 4);
    }
  }
  if (!is) throw FormatError("truncated checkpoint values in " + path);
  return p;
}

void check_manifest_match(const Manifest& a, const Manifest& b) {
  if (a.total != b.total || a.tensors.size() != b.tensors.size())
    throw ConfigError("checkpoint does not match network spec");
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    const auto& x = a.tensors[i];
    const auto& y = b.tensors[i];
    if (x.name != y.name || x.shape != y.shape || x.offset != y.offset)
      throw ConfigError("checkpoint tensor mismatch at " + x.name);
  }
}

}  // namespace spfl
