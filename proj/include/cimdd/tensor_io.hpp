#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cimdd/tensor.hpp"

namespace cimdd {

/// CIMD1 layout: "CIMD", version 0x01, dtype 0x01 (f64), ndim byte,
/// ndim little-endian u32 dims, then the row-major little-endian payload.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Throws FormatError (with byte offset) on bad magic/version/dtype or truncation.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

/// FNV-1a 64 over the CIMD1 encoding; used to fingerprint data splits.
std::uint64_t tensor_hash(const Tensor& t);

}  // namespace cimdd
