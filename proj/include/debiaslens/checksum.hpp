#pragma once

#include <cstddef>
#include <span>
#include <string>

namespace debiaslens {

/// Lower-case hex SHA-256 digest of a byte range.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(const std::string& bytes);

}  // namespace debiaslens
