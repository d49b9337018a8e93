#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "pdid/util.hpp"

namespace pdid {

/// 48-bit MAC address. Accepts the three NAS notations seen in
/// Calling-Station-Id ("AA-BB-CC-DD-EE-FF", "aa:bb:cc:dd:ee:ff",
/// "aabb.ccdd.eeff"); the canonical form is lowercase colon.
class MacAddress {
 public:
  using Bytes = std::array<std::uint8_t, 6>;

  MacAddress() { bytes_.fill(0); }
  explicit MacAddress(const Bytes& b) : bytes_(b) {}

  static std::optional<MacAddress> parse(std::string_view s) {
    Bytes b;
    auto from_hex_pairs = [&](std::string_view hex12) -> bool {
      if (hex12.size() != 12) return false;
      for (int i = 0; i < 6; ++i) {
        int hi = hex_nibble(hex12[i * 2]);
        int lo = hex_nibble(hex12[i * 2 + 1]);
        if (hi < 0 || lo < 0) return false;
        b[i] = static_cast<std::uint8_t>((hi << 4) | lo);
      }
      return true;
    };

    if (s.size() == 17 && (s[2] == ':' || s[2] == '-')) {
      char sep = s[2];
      std::string hex;
      for (size_t i = 0; i < s.size(); ++i) {
        if (i % 3 == 2) {
          if (s[i] != sep) return std::nullopt;
        } else {
          hex.push_back(s[i]);
        }
      }
      if (!from_hex_pairs(hex)) return std::nullopt;
      return MacAddress(b);
    }
    if (s.size() == 14 && s[4] == '.' && s[9] == '.') {
      std::string hex;
      for (char c : s)
        if (c != '.') hex.push_back(c);
      if (!from_hex_pairs(hex)) return std::nullopt;
      return MacAddress(b);
    }
    return std::nullopt;
  }

  const Bytes& bytes() const { return bytes_; }

  /// Bit 1 of the first octet; set on randomized addresses.
  bool locally_administered() const { return (bytes_[0] & 0x02) != 0; }
  bool multicast() const { return (bytes_[0] & 0x01) != 0; }

  /// First 24 bits, meaningful only for universally administered addresses.
  std::optional<std::string> oui_prefix() const {
    if (locally_administered()) return std::nullopt;
    return to_hex(bytes_.data(), 1) + ":" + to_hex(bytes_.data() + 1, 1) + ":" +
           to_hex(bytes_.data() + 2, 1);
  }

  std::string to_string() const {
    std::string out;
    out.reserve(17);
    for (int i = 0; i < 6; ++i) {
      if (i) out.push_back(':');
      out += to_hex(bytes_.data() + i, 1);
    }
    return out;
  }

  auto operator<=>(const MacAddress&) const = default;

 private:
  Bytes bytes_;
};

}  // namespace pdid
