#pragma once

#include <span>
#include <string>

namespace cdtta {

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);

// Hex SHA-256 of a file's contents; throws ErrorKind::data if it cannot be read.
std::string file_digest(const std::string& path);

// Digest over the sorted relative paths and contents of every regular file below `dir`.
std::string directory_digest(const std::string& dir);

}  // namespace cdtta
