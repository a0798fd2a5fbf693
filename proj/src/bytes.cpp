#include "bld/common.hpp"

#include <cmath>

namespace bld {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::Lookup: return "lookup";
    case ErrorKind::Construction: return "construction";
    case ErrorKind::Io: return "i/o";
    case ErrorKind::Format: return "format";
    case ErrorKind::UnsupportedVersion: return "unsupported version";
    case ErrorKind::Fingerprint: return "fingerprint mismatch";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::Feasibility: return "feasibility";
    case ErrorKind::Conditioning: return "conditioning";
    case ErrorKind::Degenerate: return "degenerate lattice";
    case ErrorKind::Advance: return "advance";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Coverage: return "coverage";
    case ErrorKind::Config: return "configuration";
    case ErrorKind::EmptyInput: return "empty input";
  }
  return "unknown";
}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

ByteString to_bytes(std::string_view s) { return ByteString(s.begin(), s.end()); }

std::string to_string(std::span<const Byte> b) { return std::string(b.begin(), b.end()); }

std::string hex_encode(std::span<const Byte> b) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(b.size() * 2);
  for (Byte x : b) {
    out.push_back(kDigits[x >> 4]);
    out.push_back(kDigits[x & 0xf]);
  }
  return out;
}

namespace {
int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}
}  // namespace

ByteString hex_decode(std::string_view hex) {
  if (hex.size() % 2 != 0) fail(ErrorKind::Format, "odd-length hex string '" + std::string(hex) + "'");
  ByteString out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int hi = hex_value(hex[i]);
    int lo = hex_value(hex[i + 1]);
    if (hi < 0 || lo < 0) fail(ErrorKind::Format, "invalid hex digit in '" + std::string(hex) + "'");
    out.push_back(static_cast<Byte>(hi * 16 + lo));
  }
  return out;
}

std::string escape_bytes(std::span<const Byte> b) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  for (Byte x : b) {
    if (x >= 0x21 && x < 0x7f && x != '\\') {
      out.push_back(static_cast<char>(x));
    } else {
      out += "\\x";
      out.push_back(kDigits[x >> 4]);
      out.push_back(kDigits[x & 0xf]);
    }
  }
  return out;
}

std::uint64_t fnv1a64(std::span<const Byte> data, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (Byte x : data) {
    h ^= x;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double ByteDistribution::prob(std::size_t slot) const { return std::exp(logp.at(slot)); }

double ByteDistribution::total() const {
  double s = 0.0;
  for (double v : logp) s += std::exp(v);
  return s;
}

}  // namespace bld
