#include "cimdd/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cimdd/error.hpp"

namespace cimdd {

namespace {

constexpr std::uint8_t kMagic[4] = {'C', 'I', 'M', 'D'};
constexpr std::uint8_t kVersion = 0x01;
constexpr std::uint8_t kDtypeF64 = 0x01;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> b, std::size_t off) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[off + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.ndim() > 255) throw FormatError("tensor rank exceeds 255", 7);
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(kDtypeF64);
  out.push_back(static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) {
    if (d > 0xffffffffULL) throw FormatError("dimension exceeds u32", out.size());
    put_le(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 8 * t.numel());
  for (double x : t.data()) put_le(out, std::bit_cast<std::uint64_t>(x));
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> b) {
  if (b.size() < 7) throw FormatError("truncated header", b.size());
  if (std::memcmp(b.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected CIMD", 0);
  if (b[4] != kVersion) throw FormatError("unsupported version " + std::to_string(b[4]), 4);
  if (b[5] != kDtypeF64) throw FormatError("unsupported dtype " + std::to_string(b[5]), 5);
  const std::size_t ndim = b[6];
  if (ndim == 0) throw FormatError("zero-rank tensor", 6);
  std::size_t off = 7;
  if (b.size() < off + 4 * ndim) throw FormatError("truncated dimension list", b.size());
  Shape shape;
  std::size_t numel = 1;
  for (std::size_t i = 0; i < ndim; ++i, off += 4) {
    const auto d = get_le<std::uint32_t>(b, off);
    if (d == 0) throw FormatError("zero dimension", off);
    shape.push_back(d);
    numel *= d;
  }
  if (b.size() - off != 8 * numel)
    throw FormatError(b.size() - off < 8 * numel ? "truncated payload" : "trailing bytes after payload",
                      b.size());
  std::vector<double> data(numel);
  for (std::size_t i = 0; i < numel; ++i, off += 8) data[i] = std::bit_cast<double>(get_le<std::uint64_t>(b, off));
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

std::uint64_t tensor_hash(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto byte : encode_tensor(t)) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cimdd
