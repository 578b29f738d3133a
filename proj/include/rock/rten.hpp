#pragma once

// RTEN tensor files: magic "RTEN", u32 version (1), u32 rank, rank x u64 dims,
// then a row-major little-endian float32 payload.

#include <filesystem>
#include <string>

#include "rock/tensor.hpp"

namespace rock::rten {

inline constexpr std::uint32_t kVersion = 1;

std::string encode(const Tensor& t);
Tensor decode(std::string_view bytes);

void write(const std::filesystem::path& path, const Tensor& t);
Tensor read(const std::filesystem::path& path);

}  // namespace rock::rten
