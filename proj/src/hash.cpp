#include "voladapter/hash.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <stdexcept>

#include "voladapter/tensor.hpp"

namespace voladapter {

namespace {

std::string to_hex(const unsigned char* digest, unsigned len) {
    static const char* kHex = "0123456789abcdef";
    std::string out(len * 2, '0');
    for (unsigned i = 0; i < len; ++i) {
        out[2 * i] = kHex[digest[i] >> 4];
        out[2 * i + 1] = kHex[digest[i] & 0xf];
    }
    return out;
}

}  // namespace

std::string sha256_hex(const void* data, size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (!EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256 digest failed");
    return to_hex(digest, len);
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string tensor_sha256(const Tensor& t) {
    return sha256_hex(t.data.data(), t.data.size() * sizeof(float));
}

std::string file_sha256(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for hashing: " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        EVP_DigestUpdate(ctx, buf, static_cast<size_t>(in.gcount()));
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    return to_hex(digest, len);
}

}  // namespace voladapter
