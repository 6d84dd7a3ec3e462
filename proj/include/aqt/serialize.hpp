#pragma once

#include <filesystem>
#include <iosfwd>

#include "aqt/tensor.hpp"

// Portable tensor format: little-endian u64 rank, u64 dims, then float32 values.
namespace aqt {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& tensor);
Tensor read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& tensor);
Tensor load_tensor(const std::filesystem::path& path);

void write_u64(std::ostream& out, std::uint64_t value);
std::uint64_t read_u64(std::istream& in);
void write_u32(std::ostream& out, std::uint32_t value);
std::uint32_t read_u32(std::istream& in);
void write_string(std::ostream& out, const std::string& value);
std::string read_string(std::istream& in);

}  // namespace aqt
