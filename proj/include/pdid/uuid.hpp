#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "pdid/entropy.hpp"
#include "pdid/errors.hpp"
#include "pdid/util.hpp"

namespace pdid {

/// Persistent Device Identifier: a 128-bit version-4 UUID (RFC 4122 layout).
/// Raw bytes are kept in big-endian field order, which is also the on-wire
/// order of the RADIUS vendor attribute.
class Pdid {
 public:
  using Bytes = std::array<std::uint8_t, 16>;

  Pdid() { bytes_.fill(0); }
  explicit Pdid(const Bytes& b) : bytes_(b) {}

  static Result<Pdid> generate(EntropySource& entropy) {
    Bytes b{};
    if (!entropy.fill(b.data(), b.size()))
      return Error{Errc::EntropyUnavailable, "entropy source failed"};
    b[6] = static_cast<std::uint8_t>((b[6] & 0x0F) | 0x40);  // version 4
    b[8] = static_cast<std::uint8_t>((b[8] & 0x3F) | 0x80);  // variant 10
    return Pdid(b);
  }

  static std::optional<Pdid> parse(std::string_view s) {
    // canonical 8-4-4-4-12 form
    if (s.size() != 36 || s[8] != '-' || s[13] != '-' || s[18] != '-' || s[23] != '-')
      return std::nullopt;
    Bytes b;
    size_t bi = 0;
    for (size_t i = 0; i < s.size();) {
      if (s[i] == '-') {
        ++i;
        continue;
      }
      int hi = hex_nibble(s[i]);
      int lo = (i + 1 < s.size()) ? hex_nibble(s[i + 1]) : -1;
      if (hi < 0 || lo < 0) return std::nullopt;
      b[bi++] = static_cast<std::uint8_t>((hi << 4) | lo);
      i += 2;
    }
    if (bi != 16) return std::nullopt;
    return Pdid(b);
  }

  const Bytes& bytes() const { return bytes_; }

  bool is_nil() const {
    for (auto b : bytes_)
      if (b != 0) return false;
    return true;
  }

  int version() const { return bytes_[6] >> 4; }
  int variant_bits() const { return bytes_[8] >> 6; }  // 0b10 for RFC 4122

  std::string to_string() const {
    std::string hex = to_hex(bytes_.data(), bytes_.size());
    std::string out;
    out.reserve(36);
    out.append(hex, 0, 8);
    out.push_back('-');
    out.append(hex, 8, 4);
    out.push_back('-');
    out.append(hex, 12, 4);
    out.push_back('-');
    out.append(hex, 16, 4);
    out.push_back('-');
    out.append(hex, 20, 12);
    return out;
  }

  auto operator<=>(const Pdid&) const = default;

 private:
  Bytes bytes_;
};

struct PdidHash {
  size_t operator()(const Pdid& p) const {
    std::uint64_t h;
    std::memcpy(&h, p.bytes().data(), 8);
    std::uint64_t l;
    std::memcpy(&l, p.bytes().data() + 8, 8);
    return static_cast<size_t>(h ^ (l * 0x9E3779B97F4A7C15ULL));
  }
};

}  // namespace pdid
