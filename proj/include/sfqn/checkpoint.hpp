#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sfqn/tensor.hpp"

// Binary checkpoint layout, little-endian throughout:
//   "SFQN" u16(version=1)
//   repeated until EOF: u16 name_len, name bytes, u8 rank, u32 dims[rank],
//                       f32 values[prod(dims)] row-major
namespace sfqn::checkpoint {

inline constexpr char kMagic[4] = {'S', 'F', 'Q', 'N'};
inline constexpr std::uint16_t kVersion = 1;

struct Record {
  std::string name;
  DenseArray value;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, Real v) {
  put(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  bool done() const { return pos_ == b_.size(); }

  template <class T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint: truncated record");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const std::vector<Record>& records) {
  std::string out(kMagic, 4);
  detail::put<std::uint16_t>(out, kVersion);
  for (const auto& r : records) {
    if (r.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw FormatError("checkpoint: record name too long");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.value.rank()));
    for (auto d : r.value.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (auto v : r.value.values()) detail::put_f32(out, v);
  }
  return out;
}

inline std::vector<Record> decode(const std::string& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic");
  detail::Reader rd(bytes);
  rd.bytes(4);
  if (auto v = rd.get<std::uint16_t>(); v != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  std::vector<Record> out;
  while (!rd.done()) {
    Record r;
    r.name = rd.bytes(rd.get<std::uint16_t>());
    const auto rank = rd.get<std::uint8_t>();
    if (rank == 0 || rank > 4) throw FormatError("checkpoint: bad rank in record " + r.name);
    Shape shape(rank);
    for (auto& d : shape) d = rd.get<std::uint32_t>();
    validate_shape(shape);
    std::vector<Real> vals(shape_numel(shape));
    for (auto& v : vals) v = static_cast<Real>(std::bit_cast<float>(rd.get<std::uint32_t>()));
    r.value = DenseArray(std::move(shape), std::move(vals));
    out.push_back(std::move(r));
  }
  return out;
}

inline void save(const std::string& path, const std::vector<Record>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
  const std::string bytes = encode(records);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("checkpoint: write failed for " + path);
}

inline std::vector<Record> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

inline const Record* find(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace sfqn::checkpoint
