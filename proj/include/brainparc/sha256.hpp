#pragma once

#include <cstddef>
#include <string>

namespace brainparc {

// Lowercase hex SHA-256 digest of a byte buffer.
std::string sha256_hex(const void* data, size_t size);

} // namespace brainparc
