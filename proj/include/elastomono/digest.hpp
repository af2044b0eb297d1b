#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "elastomono/errors.hpp"

namespace elastomono {

// Incremental SHA-256 with hex output. Used for basis fingerprints and the
// run manifest.
class Digest {
public:
    Digest() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
            throw NumericalError("digest", "cannot initialise SHA-256");
    }
    ~Digest() { EVP_MD_CTX_free(ctx_); }
    Digest(const Digest&) = delete;
    Digest& operator=(const Digest&) = delete;

    Digest& update(std::string_view bytes) {
        EVP_DigestUpdate(ctx_, bytes.data(), bytes.size());
        return *this;
    }
    Digest& update(double value) {
        unsigned char buf[sizeof(double)];
        std::memcpy(buf, &value, sizeof(double));
        EVP_DigestUpdate(ctx_, buf, sizeof(buf));
        return *this;
    }
    Digest& update(std::int64_t value) {
        unsigned char buf[sizeof(value)];
        std::memcpy(buf, &value, sizeof(value));
        EVP_DigestUpdate(ctx_, buf, sizeof(buf));
        return *this;
    }

    std::string hex() {
        unsigned char out[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, out, &len);
        std::string s;
        s.reserve(2 * len);
        char byte[3];
        for (unsigned int i = 0; i < len; ++i) {
            std::snprintf(byte, sizeof(byte), "%02x", out[i]);
            s += byte;
        }
        return s;
    }

private:
    EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::string_view bytes) {
    Digest d;
    d.update(bytes);
    return d.hex();
}

} // namespace elastomono
