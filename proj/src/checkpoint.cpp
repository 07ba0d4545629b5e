#include "cytoset/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cyto {
namespace {

constexpr char kMagic[8] = {'C', 'Y', 'T', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("checkpoint: truncated file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
         std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
  records.emplace_back(name, t.detached());
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : records)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw DataError("checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  Checkpoint ck;
  const std::uint32_t count = get_u32(is);
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t ndim = get_u32(is);
    std::vector<int> shape(ndim);
    std::int64_t total = 1;
    for (auto& d : shape) {
      d = static_cast<int>(get_u32(is));
      total *= d;
    }
    std::vector<float> payload(total);
    for (auto& v : payload) {
      const std::uint32_t bits = get_u32(is);
      std::memcpy(&v, &bits, 4);
    }
    if (!is) throw DataError("checkpoint: truncated record in " + path);
    ck.records.emplace_back(std::move(name),
                            Tensor::from(std::move(shape), std::move(payload)));
  }
  return ck;
}

}  // namespace cyto
