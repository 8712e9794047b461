#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace voladapter {

struct Tensor;

/// SHA-256 hex digest of a byte buffer (OpenSSL EVP under the hood).
std::string sha256_hex(const void* data, size_t size);

std::string sha256_hex(const std::string& s);

/// Digest of the raw float payload of a tensor (shape not included).
std::string tensor_sha256(const Tensor& t);

std::string file_sha256(const std::string& path);

}  // namespace voladapter
