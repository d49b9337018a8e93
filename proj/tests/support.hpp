#pragma once

// Shared test helpers. The MD5 oracle is OpenSSL's EVP implementation,
// independent of the library's own digest path.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "pdid/radius.hpp"

namespace testsupport {

inline std::array<std::uint8_t, 16> md5_oracle(const std::vector<std::uint8_t>& data) {
  std::array<std::uint8_t, 16> out{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_md5(), nullptr);
  EVP_DigestUpdate(ctx, data.data(), data.size());
  EVP_DigestFinal_ex(ctx, out.data(), &len);
  EVP_MD_CTX_free(ctx);
  return out;
}

/// Oracle route for the RFC 2865 response authenticator:
/// MD5(Code | Identifier | Length | RequestAuth | Attributes | Secret).
inline std::array<std::uint8_t, 16> response_auth_oracle(
    std::uint8_t code, std::uint8_t identifier, const std::vector<std::uint8_t>& attrs,
    const std::array<std::uint8_t, 16>& request_auth, const std::string& secret) {
  std::vector<std::uint8_t> buf;
  size_t length = 20 + attrs.size();
  buf.push_back(code);
  buf.push_back(identifier);
  buf.push_back(static_cast<std::uint8_t>(length >> 8));
  buf.push_back(static_cast<std::uint8_t>(length));
  buf.insert(buf.end(), request_auth.begin(), request_auth.end());
  buf.insert(buf.end(), attrs.begin(), attrs.end());
  buf.insert(buf.end(), secret.begin(), secret.end());
  return md5_oracle(buf);
}

inline std::string hex(const std::uint8_t* p, size_t n) {
  static const char* d = "0123456789abcdef";
  std::string s;
  for (size_t i = 0; i < n; ++i) {
    s.push_back(d[p[i] >> 4]);
    s.push_back(d[p[i] & 0xF]);
  }
  return s;
}

inline std::vector<std::uint8_t> from_hex(const std::string& s) {
  std::vector<std::uint8_t> out;
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return c - 'A' + 10;
  };
  for (size_t i = 0; i + 1 < s.size(); i += 2)
    out.push_back(static_cast<std::uint8_t>((nib(s[i]) << 4) | nib(s[i + 1])));
  return out;
}

/// Random but reproducible packets for round-trip fuzzing.
inline pdid::radius::RadiusPacket random_packet(std::mt19937_64& rng) {
  pdid::radius::RadiusPacket p;
  p.code = static_cast<std::uint8_t>(1 + rng() % 5);
  p.identifier = static_cast<std::uint8_t>(rng() % 256);
  for (auto& b : p.authenticator) b = static_cast<std::uint8_t>(rng());
  size_t nattrs = rng() % 8;
  size_t budget = 4000;
  for (size_t i = 0; i < nattrs; ++i) {
    pdid::radius::Attribute a;
    a.type = static_cast<std::uint8_t>(1 + rng() % 255);
    size_t len = rng() % 64;
    if (len + 2 > budget) break;
    budget -= len + 2;
    a.value.resize(len);
    for (auto& b : a.value) b = static_cast<std::uint8_t>(rng());
    p.attributes.push_back(std::move(a));
  }
  return p;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("pdid_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
