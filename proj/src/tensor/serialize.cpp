#include "aqt/serialize.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

namespace aqt {

namespace {

constexpr std::uint64_t kMaxRank = 16;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

void require_stream(std::ios& stream, const char* what) {
  if (!stream) throw IoError(std::string("tensor stream error while ") + what);
}

}  // namespace

void write_u64(std::ostream& out, std::uint64_t value) {
  std::array<char, 8> bytes{};
  for (std::size_t i = 0; i < 8; ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
  require_stream(out, "writing");
}

std::uint64_t read_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  require_stream(in, "reading");
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < 8; ++i) value |= std::uint64_t{bytes[i]} << (8 * i);
  return value;
}

void write_u32(std::ostream& out, std::uint32_t value) {
  std::array<char, 4> bytes{};
  for (std::size_t i = 0; i < 4; ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
  require_stream(out, "writing");
}

std::uint32_t read_u32(std::istream& in) {
  std::array<unsigned char, 4> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  require_stream(in, "reading");
  std::uint32_t value = 0;
  for (std::size_t i = 0; i < 4; ++i) value |= std::uint32_t{bytes[i]} << (8 * i);
  return value;
}

void write_string(std::ostream& out, const std::string& value) {
  write_u64(out, value.size());
  out.write(value.data(), static_cast<std::streamsize>(value.size()));
  require_stream(out, "writing");
}

std::string read_string(std::istream& in) {
  const auto length = read_u64(in);
  if (length > (std::uint64_t{1} << 30)) throw IoError("string length out of range");
  std::string value(length, '\0');
  in.read(value.data(), static_cast<std::streamsize>(length));
  require_stream(in, "reading");
  return value;
}

template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& tensor) {
  write_u64(out, tensor.dim());
  for (auto d : tensor.shape()) write_u64(out, d);
  for (const T v : tensor.data()) write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

Tensor read_tensor(std::istream& in) {
  const auto rank = read_u64(in);
  if (rank > kMaxRank) throw IoError("tensor rank " + std::to_string(rank) + " out of range");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = read_u64(in);
    count *= d;
    if (count > kMaxElements) throw IoError("tensor element count out of range");
  }
  std::vector<float> values(count);
  for (auto& v : values) v = std::bit_cast<float>(read_u32(in));
  return Tensor(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return read_tensor(in);
}

template void write_tensor(std::ostream&, const BasicTensor<float>&);
template void write_tensor(std::ostream&, const BasicTensor<double>&);
template void save_tensor(const std::filesystem::path&, const BasicTensor<float>&);
template void save_tensor(const std::filesystem::path&, const BasicTensor<double>&);

}  // namespace aqt
