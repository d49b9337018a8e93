#pragma once

#include <cstdint>
#include <cstdio>
#include <random>

#include <unistd.h>

#include "pdid/errors.hpp"

namespace pdid {

/// Byte stream backing PDID generation. Production uses the OS CSPRNG; the
/// simulator injects a seeded stream so runs are reproducible.
class EntropySource {
 public:
  virtual ~EntropySource() = default;
  /// Fills `out` with `n` bytes. Returns false only if entropy is unavailable.
  virtual bool fill(std::uint8_t* out, size_t n) = 0;
};

class SystemEntropy final : public EntropySource {
 public:
  bool fill(std::uint8_t* out, size_t n) override {
#if defined(__linux__) || defined(__APPLE__)
    size_t off = 0;
    while (off < n) {
      size_t chunk = std::min<size_t>(256, n - off);
      if (::getentropy(out + off, chunk) != 0) return fill_urandom(out, n);
      off += chunk;
    }
    return true;
#else
    return fill_urandom(out, n);
#endif
  }

 private:
  static bool fill_urandom(std::uint8_t* out, size_t n) {
    std::FILE* f = std::fopen("/dev/urandom", "rb");
    if (!f) return false;
    size_t got = std::fread(out, 1, n, f);
    std::fclose(f);
    return got == n;
  }
};

/// Deterministic stream for simulations. Not cryptographically secure; never
/// used by the server path.
class SeededEntropy final : public EntropySource {
 public:
  explicit SeededEntropy(std::uint64_t seed) : rng_(seed) {}

  bool fill(std::uint8_t* out, size_t n) override {
    for (size_t i = 0; i < n; ++i) {
      if (pool_bytes_ == 0) {
        pool_ = rng_();
        pool_bytes_ = 8;
      }
      out[i] = static_cast<std::uint8_t>(pool_);
      pool_ >>= 8;
      --pool_bytes_;
    }
    return true;
  }

 private:
  std::mt19937_64 rng_;
  std::uint64_t pool_ = 0;
  int pool_bytes_ = 0;
};

}  // namespace pdid
