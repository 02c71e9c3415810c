// SPDX-License-Identifier: Apache-2.0
#include "soup/hashing.hpp"

#include "soup/errors.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>

namespace soup {

namespace {

struct DigestContext {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};

    DigestContext() {
        if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
            throw Error("sha256 init failed");
        }
    }
    void update(const void * data, std::size_t n) {
        if (EVP_DigestUpdate(ctx.get(), data, n) != 1) {
            throw Error("sha256 update failed");
        }
    }
    std::string finish() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
            throw Error("sha256 final failed");
        }
        static constexpr char hex[] = "0123456789abcdef";
        std::string out = "sha256:";
        for (unsigned int i = 0; i < len; ++i) {
            out += hex[md[i] >> 4];
            out += hex[md[i] & 0xf];
        }
        return out;
    }
};

} // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    DigestContext d;
    d.update(bytes.data(), bytes.size());
    return d.finish();
}

std::string sha256_file(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(path.string(), "cannot open '" + path.string() + "' for hashing");
    }
    DigestContext d;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return d.finish();
}

} // namespace soup
