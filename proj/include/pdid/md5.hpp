#pragma once

// RFC 1321 MD5. RADIUS (RFC 2865/2866) authenticators are defined over MD5,
// so the codec carries its own implementation; tests cross-check it against
// an external oracle.

#include <array>
#include <cstdint>
#include <cstring>
#include <string_view>

namespace pdid {

class Md5 {
 public:
  using Digest = std::array<std::uint8_t, 16>;

  Md5() { reset(); }

  void reset() {
    a_ = 0x67452301;
    b_ = 0xefcdab89;
    c_ = 0x98badcfe;
    d_ = 0x10325476;
    total_ = 0;
    buf_len_ = 0;
  }

  void update(const void* data, size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    total_ += n;
    if (buf_len_ > 0) {
      size_t take = std::min(n, sizeof(buf_) - buf_len_);
      std::memcpy(buf_ + buf_len_, p, take);
      buf_len_ += take;
      p += take;
      n -= take;
      if (buf_len_ == sizeof(buf_)) {
        transform(buf_);
        buf_len_ = 0;
      }
    }
    while (n >= 64) {
      transform(p);
      p += 64;
      n -= 64;
    }
    if (n > 0) {
      std::memcpy(buf_, p, n);
      buf_len_ = n;
    }
  }

  void update(std::string_view s) { update(s.data(), s.size()); }

  Digest finish() {
    std::uint64_t bit_len = total_ * 8;
    static const std::uint8_t pad[64] = {0x80};
    size_t pad_len = (buf_len_ < 56) ? 56 - buf_len_ : 120 - buf_len_;
    update(pad, pad_len);
    std::uint8_t len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<std::uint8_t>(bit_len >> (8 * i));
    // bypass total_ bookkeeping for the length block
    std::memcpy(buf_ + buf_len_, len_le, 8);
    transform(buf_);
    Digest out;
    put_le(out.data(), a_);
    put_le(out.data() + 4, b_);
    put_le(out.data() + 8, c_);
    put_le(out.data() + 12, d_);
    return out;
  }

  static Digest hash(const void* data, size_t n) {
    Md5 m;
    m.update(data, n);
    return m.finish();
  }

 private:
  static std::uint32_t rotl(std::uint32_t x, int s) { return (x << s) | (x >> (32 - s)); }

  static void put_le(std::uint8_t* out, std::uint32_t v) {
    out[0] = static_cast<std::uint8_t>(v);
    out[1] = static_cast<std::uint8_t>(v >> 8);
    out[2] = static_cast<std::uint8_t>(v >> 16);
    out[3] = static_cast<std::uint8_t>(v >> 24);
  }

  void transform(const std::uint8_t* block) {
    static const std::uint32_t K[64] = {
        0xd76aa478, 0xe8c7b756, 0x242070db, 0xc1bdceee, 0xf57c0faf, 0x4787c62a, 0xa8304613,
        0xfd469501, 0x698098d8, 0x8b44f7af, 0xffff5bb1, 0x895cd7be, 0x6b901122, 0xfd987193,
        0xa679438e, 0x49b40821, 0xf61e2562, 0xc040b340, 0x265e5a51, 0xe9b6c7aa, 0xd62f105d,
        0x02441453, 0xd8a1e681, 0xe7d3fbc8, 0x21e1cde6, 0xc33707d6, 0xf4d50d87, 0x455a14ed,
        0xa9e3e905, 0xfcefa3f8, 0x676f02d9, 0x8d2a4c8a, 0xfffa3942, 0x8771f681, 0x6d9d6122,
        0xfde5380c, 0xa4beea44, 0x4bdecfa9, 0xf6bb4b60, 0xbebfbc70, 0x289b7ec6, 0xeaa127fa,
        0xd4ef3085, 0x04881d05, 0xd9d4d039, 0xe6db99e5, 0x1fa27cf8, 0xc4ac5665, 0xf4292244,
        0x432aff97, 0xab9423a7, 0xfc93a039, 0x655b59c3, 0x8f0ccc92, 0xffeff47d, 0x85845dd1,
        0x6fa87e4f, 0xfe2ce6e0, 0xa3014314, 0x4e0811a1, 0xf7537e82, 0xbd3af235, 0x2ad7d2bb,
        0xeb86d391};
    static const int S[64] = {7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22, 7, 12, 17, 22,
                              5, 9,  14, 20, 5, 9,  14, 20, 5, 9,  14, 20, 5, 9,  14, 20,
                              4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23, 4, 11, 16, 23,
                              6, 10, 15, 21, 6, 10, 15, 21, 6, 10, 15, 21, 6, 10, 15, 21};

    std::uint32_t m[16];
    for (int i = 0; i < 16; ++i) {
      m[i] = static_cast<std::uint32_t>(block[i * 4]) |
             (static_cast<std::uint32_t>(block[i * 4 + 1]) << 8) |
             (static_cast<std::uint32_t>(block[i * 4 + 2]) << 16) |
             (static_cast<std::uint32_t>(block[i * 4 + 3]) << 24);
    }

    std::uint32_t a = a_, b = b_, c = c_, d = d_;
    for (int i = 0; i < 64; ++i) {
      std::uint32_t f;
      int g;
      if (i < 16) {
        f = (b & c) | (~b & d);
        g = i;
      } else if (i < 32) {
        f = (d & b) | (~d & c);
        g = (5 * i + 1) % 16;
      } else if (i < 48) {
        f = b ^ c ^ d;
        g = (3 * i + 5) % 16;
      } else {
        f = c ^ (b | ~d);
        g = (7 * i) % 16;
      }
      std::uint32_t tmp = d;
      d = c;
      c = b;
      b = b + rotl(a + f + K[i] + m[g], S[i]);
      a = tmp;
    }
    a_ += a;
    b_ += b;
    c_ += c;
    d_ += d;
  }

  std::uint32_t a_, b_, c_, d_;
  std::uint64_t total_;
  std::uint8_t buf_[64];
  size_t buf_len_;
};

}  // namespace pdid
