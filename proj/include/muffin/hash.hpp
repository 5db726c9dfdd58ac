#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "muffin/errors.hpp"
#include "muffin/nn.hpp"
#include "muffin/tensor.hpp"

namespace muffin::hash {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw ContractError("sha256: init failed");
  }
  void update(const void* data, std::size_t len) {
    if (EVP_DigestUpdate(ctx_.get(), data, len) != 1)
      throw ContractError("sha256: update failed");
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), digest, &len) != 1)
      throw ContractError("sha256: final failed");
    static const char* kHex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[digest[i] >> 4]);
      out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

/// Hash of a parameter set: names interleaved with little-endian f64
/// payloads. Used for the LLM freeze invariant and checkpoint stamps.
inline std::string params_hash(const nn::NamedParams& params) {
  Sha256 h;
  for (const auto& [name, t] : params) {
    h.update(name);
    h.update("\0", 1);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(t.at(i));
      unsigned char b[8];
      for (int j = 0; j < 8; ++j)
        b[j] = static_cast<unsigned char>(bits >> (8 * j));
      h.update(b, 8);
    }
  }
  return h.hex();
}

}  // namespace muffin::hash
