#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pdid/errors.hpp"
#include "pdid/mac.hpp"
#include "pdid/md5.hpp"
#include "pdid/uuid.hpp"

namespace pdid::radius {

using Octets = std::vector<std::uint8_t>;
using Authenticator = std::array<std::uint8_t, 16>;

constexpr std::uint8_t kAccessRequest = 1;
constexpr std::uint8_t kAccessAccept = 2;
constexpr std::uint8_t kAccessReject = 3;
constexpr std::uint8_t kAccountingRequest = 4;
constexpr std::uint8_t kAccountingResponse = 5;

constexpr size_t kHeaderLen = 20;
constexpr size_t kMaxPacketLen = 4096;

// attribute types (RFC 2865/2866)
namespace attr {
constexpr std::uint8_t kUserName = 1;
constexpr std::uint8_t kNasIpAddress = 4;
constexpr std::uint8_t kServiceType = 6;
constexpr std::uint8_t kReplyMessage = 18;
constexpr std::uint8_t kVendorSpecific = 26;
constexpr std::uint8_t kCallingStationId = 31;
constexpr std::uint8_t kNasIdentifier = 32;
constexpr std::uint8_t kAcctStatusType = 40;
constexpr std::uint8_t kAcctInputOctets = 42;
constexpr std::uint8_t kAcctOutputOctets = 43;
constexpr std::uint8_t kAcctSessionId = 44;
constexpr std::uint8_t kNasPortId = 87;
}  // namespace attr

constexpr std::uint32_t kServiceTypeCallCheck = 10;  // MAB marker

constexpr std::uint32_t kAcctStart = 1;
constexpr std::uint32_t kAcctStop = 2;
constexpr std::uint32_t kAcctInterim = 3;

// The identity VSAs live under the enterprise number reserved for
// documentation; see docs/protocol.md for the exact framing.
constexpr std::uint32_t kVendorId = 32473;
namespace vsa {
constexpr std::uint8_t kPdid = 1;
constexpr std::uint8_t kCertificateId = 2;
constexpr std::uint8_t kMdmEnrollmentId = 3;
constexpr std::uint8_t kAgentId = 4;
}  // namespace vsa

struct SharedSecret {
  std::string secret;  // never serialized into packets or logs
  bool valid() const { return !secret.empty(); }
};

struct Attribute {
  std::uint8_t type = 0;
  Octets value;  // 0..253 octets

  bool operator==(const Attribute&) const = default;

  static Attribute text(std::uint8_t type, std::string_view s) {
    return {type, Octets(s.begin(), s.end())};
  }

  static Attribute integer(std::uint8_t type, std::uint32_t v) {
    Octets o{static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
             static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
    return {type, std::move(o)};
  }

  std::string as_text() const { return std::string(value.begin(), value.end()); }

  std::optional<std::uint32_t> as_integer() const {
    if (value.size() != 4) return std::nullopt;
    return (std::uint32_t(value[0]) << 24) | (std::uint32_t(value[1]) << 16) |
           (std::uint32_t(value[2]) << 8) | std::uint32_t(value[3]);
  }
};

/// Builds a Vendor-Specific attribute in the single-octet vendor-type /
/// vendor-length framing of RFC 2865 §5.26.
inline Attribute make_vsa(std::uint32_t vendor_id, std::uint8_t vendor_type, const Octets& data) {
  Attribute a;
  a.type = attr::kVendorSpecific;
  a.value.reserve(6 + data.size());
  a.value.push_back(static_cast<std::uint8_t>(vendor_id >> 24));
  a.value.push_back(static_cast<std::uint8_t>(vendor_id >> 16));
  a.value.push_back(static_cast<std::uint8_t>(vendor_id >> 8));
  a.value.push_back(static_cast<std::uint8_t>(vendor_id));
  a.value.push_back(vendor_type);
  a.value.push_back(static_cast<std::uint8_t>(2 + data.size()));
  a.value.insert(a.value.end(), data.begin(), data.end());
  return a;
}

inline Attribute make_vsa_text(std::uint32_t vendor_id, std::uint8_t vendor_type,
                               std::string_view s) {
  return make_vsa(vendor_id, vendor_type, Octets(s.begin(), s.end()));
}

struct Vsa {
  std::uint32_t vendor_id;
  std::uint8_t vendor_type;
  Octets data;
};

/// Parses a well-formed single-TLV vendor attribute; returns nullopt for
/// anything else (foreign vendors pass through unparsed).
inline std::optional<Vsa> parse_vsa(const Attribute& a) {
  if (a.type != attr::kVendorSpecific || a.value.size() < 6) return std::nullopt;
  Vsa v;
  v.vendor_id = (std::uint32_t(a.value[0]) << 24) | (std::uint32_t(a.value[1]) << 16) |
                (std::uint32_t(a.value[2]) << 8) | std::uint32_t(a.value[3]);
  v.vendor_type = a.value[4];
  size_t vlen = a.value[5];
  if (vlen < 2 || 4 + vlen != a.value.size()) return std::nullopt;
  v.data.assign(a.value.begin() + 6, a.value.end());
  return v;
}

struct RadiusPacket {
  std::uint8_t code = 0;
  std::uint8_t identifier = 0;
  Authenticator authenticator{};
  std::vector<Attribute> attributes;

  bool operator==(const RadiusPacket&) const = default;

  const Attribute* find(std::uint8_t type) const {
    for (const auto& a : attributes)
      if (a.type == type) return &a;
    return nullptr;
  }

  std::optional<Vsa> find_vsa(std::uint32_t vendor_id, std::uint8_t vendor_type) const {
    for (const auto& a : attributes) {
      if (a.type != attr::kVendorSpecific) continue;
      if (auto v = parse_vsa(a); v && v->vendor_id == vendor_id && v->vendor_type == vendor_type)
        return v;
    }
    return std::nullopt;
  }

  size_t encoded_length() const {
    size_t n = kHeaderLen;
    for (const auto& a : attributes) n += 2 + a.value.size();
    return n;
  }
};

inline Result<RadiusPacket> decode_packet(const Octets& raw) {
  if (raw.size() < kHeaderLen)
    return Error{Errc::TooShort, "datagram of " + std::to_string(raw.size()) + " octets"};
  size_t declared = (size_t(raw[2]) << 8) | raw[3];
  if (declared < kHeaderLen || declared > kMaxPacketLen || declared != raw.size())
    return Error{Errc::LengthMismatch,
                 "declared " + std::to_string(declared) + ", usable " + std::to_string(raw.size())};
  RadiusPacket p;
  p.code = raw[0];
  if (p.code < 1 || p.code > 5)
    return Error{Errc::UnknownCode, "code " + std::to_string(int(raw[0]))};
  p.identifier = raw[1];
  std::copy(raw.begin() + 4, raw.begin() + 20, p.authenticator.begin());

  size_t off = kHeaderLen;
  while (off < declared) {
    if (declared - off < 2) return Error{Errc::LengthMismatch, "dangling attribute header"};
    std::uint8_t type = raw[off];
    size_t alen = raw[off + 1];
    if (alen < 2 || off + alen > declared)
      return Error{Errc::LengthMismatch, "attribute overrun at offset " + std::to_string(off)};
    Attribute a;
    a.type = type;
    a.value.assign(raw.begin() + off + 2, raw.begin() + off + alen);
    p.attributes.push_back(std::move(a));
    off += alen;
  }
  return p;
}

inline Result<Octets> encode_packet(const RadiusPacket& p) {
  size_t total = p.encoded_length();
  if (total > kMaxPacketLen)
    return Error{Errc::Oversize, "encoded length " + std::to_string(total)};
  Octets out;
  out.reserve(total);
  out.push_back(p.code);
  out.push_back(p.identifier);
  out.push_back(static_cast<std::uint8_t>(total >> 8));
  out.push_back(static_cast<std::uint8_t>(total));
  out.insert(out.end(), p.authenticator.begin(), p.authenticator.end());
  for (const auto& a : p.attributes) {
    if (a.value.size() > 253) return Error{Errc::Oversize, "attribute value > 253 octets"};
    out.push_back(a.type);
    out.push_back(static_cast<std::uint8_t>(2 + a.value.size()));
    out.insert(out.end(), a.value.begin(), a.value.end());
  }
  return out;
}

inline Octets encode_attributes(const std::vector<Attribute>& attrs) {
  Octets out;
  for (const auto& a : attrs) {
    out.push_back(a.type);
    out.push_back(static_cast<std::uint8_t>(2 + a.value.size()));
    out.insert(out.end(), a.value.begin(), a.value.end());
  }
  return out;
}

/// RFC 2865 §3: MD5(Code | Identifier | Length | RequestAuth | Attributes | Secret).
inline Authenticator compute_response_authenticator(std::uint8_t code, std::uint8_t identifier,
                                                    const Octets& encoded_attributes,
                                                    const Authenticator& request_authenticator,
                                                    const SharedSecret& secret) {
  size_t length = kHeaderLen + encoded_attributes.size();
  Md5 md5;
  std::uint8_t head[4] = {code, identifier, static_cast<std::uint8_t>(length >> 8),
                          static_cast<std::uint8_t>(length)};
  md5.update(head, 4);
  md5.update(request_authenticator.data(), request_authenticator.size());
  md5.update(encoded_attributes.data(), encoded_attributes.size());
  md5.update(secret.secret.data(), secret.secret.size());
  auto d = md5.finish();
  Authenticator out;
  std::copy(d.begin(), d.end(), out.begin());
  return out;
}

/// RFC 2866 §3: the accounting request authenticator is computed with a
/// zeroed authenticator field.
inline Authenticator compute_accounting_request_authenticator(
    std::uint8_t code, std::uint8_t identifier, const Octets& encoded_attributes,
    const SharedSecret& secret) {
  Authenticator zeros{};
  return compute_response_authenticator(code, identifier, encoded_attributes, zeros, secret);
}

inline bool verify_accounting_request(const RadiusPacket& p, const SharedSecret& secret) {
  auto expect = compute_accounting_request_authenticator(p.code, p.identifier,
                                                         encode_attributes(p.attributes), secret);
  return expect == p.authenticator;
}

/// The PDID rides in an Access-Accept as vendor 32473 type 1, vendor-value =
/// the 16 raw UUID octets. Total on-wire attribute length: 24.
inline Attribute encode_pdid_attribute(const Pdid& pdid) {
  return make_vsa(kVendorId, vsa::kPdid, Octets(pdid.bytes().begin(), pdid.bytes().end()));
}

inline std::optional<Pdid> decode_pdid_attribute(const Attribute& a) {
  auto v = parse_vsa(a);
  if (!v || v->vendor_id != kVendorId || v->vendor_type != vsa::kPdid || v->data.size() != 16)
    return std::nullopt;
  Pdid::Bytes b;
  std::copy(v->data.begin(), v->data.end(), b.begin());
  return Pdid(b);
}

enum class UseCaseHint { None, GuestHotspot, Mab, Dot1x, Vpn };

inline const char* hint_name(UseCaseHint h) {
  switch (h) {
    case UseCaseHint::None: return "none";
    case UseCaseHint::GuestHotspot: return "guest-hotspot";
    case UseCaseHint::Mab: return "mab";
    case UseCaseHint::Dot1x: return "dot1x";
    case UseCaseHint::Vpn: return "vpn";
  }
  return "none";
}

/// The per-authentication bundle of correlation evidence.
struct IdentitySignalSet {
  std::optional<std::string> cert_id;
  std::optional<std::string> mdm_id;
  std::optional<std::string> agent_id;
  std::optional<std::string> username;
  std::optional<MacAddress> mac;
  std::optional<std::string> fingerprint;
  UseCaseHint hint = UseCaseHint::None;

  bool empty() const {
    return !cert_id && !mdm_id && !agent_id && !username && !mac && !fingerprint;
  }
};

/// Pulls identity signals out of an Access-/Accounting-Request. A present
/// Service-Type of Call-Check marks the request as MAB.
inline Result<IdentitySignalSet> extract_signals(const RadiusPacket& p) {
  IdentitySignalSet s;
  if (const auto* a = p.find(attr::kCallingStationId)) {
    auto mac = MacAddress::parse(a->as_text());
    if (!mac) return Error{Errc::MalformedMac, "Calling-Station-Id \"" + a->as_text() + "\""};
    s.mac = *mac;
  }
  if (const auto* a = p.find(attr::kUserName)) s.username = a->as_text();
  if (auto v = p.find_vsa(kVendorId, vsa::kCertificateId)) {
    s.cert_id = std::string(v->data.begin(), v->data.end());
  }
  if (auto v = p.find_vsa(kVendorId, vsa::kMdmEnrollmentId)) {
    s.mdm_id = std::string(v->data.begin(), v->data.end());
  }
  if (auto v = p.find_vsa(kVendorId, vsa::kAgentId)) {
    s.agent_id = std::string(v->data.begin(), v->data.end());
  }
  if (const auto* a = p.find(attr::kServiceType)) {
    if (auto st = a->as_integer(); st && *st == kServiceTypeCallCheck) s.hint = UseCaseHint::Mab;
  }
  return s;
}

/// Assembles a response packet with exactly one PDID attribute at most; a
/// second add_pdid replaces the first rather than duplicating it.
class ResponseBuilder {
 public:
  ResponseBuilder(std::uint8_t code, std::uint8_t identifier) {
    pkt_.code = code;
    pkt_.identifier = identifier;
  }

  ResponseBuilder& add(Attribute a) {
    pkt_.attributes.push_back(std::move(a));
    return *this;
  }

  ResponseBuilder& add_pdid(const Pdid& pdid) {
    if (pdid_index_ >= 0) {
      pkt_.attributes[static_cast<size_t>(pdid_index_)] = encode_pdid_attribute(pdid);
    } else {
      pdid_index_ = static_cast<int>(pkt_.attributes.size());
      pkt_.attributes.push_back(encode_pdid_attribute(pdid));
    }
    return *this;
  }

  /// Seals the packet: fills in the response authenticator and encodes.
  Result<Octets> finish(const Authenticator& request_authenticator, const SharedSecret& secret) {
    pkt_.authenticator = compute_response_authenticator(
        pkt_.code, pkt_.identifier, encode_attributes(pkt_.attributes), request_authenticator,
        secret);
    return encode_packet(pkt_);
  }

  const RadiusPacket& packet() const { return pkt_; }

 private:
  RadiusPacket pkt_;
  int pdid_index_ = -1;
};

}  // namespace pdid::radius
