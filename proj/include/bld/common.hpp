#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bld {

using Byte = std::uint8_t;
using ByteString = std::vector<Byte>;
using TokenId = std::int32_t;

/// Size of a next-byte distribution: 256 byte values plus end-of-sequence.
inline constexpr std::size_t kByteDistSize = 257;
inline constexpr std::size_t kEosSlot = 256;

enum class ErrorKind {
  InvalidArgument,
  Lookup,
  Construction,
  Io,
  Format,
  UnsupportedVersion,
  Fingerprint,
  Truncated,
  Feasibility,
  Conditioning,
  Degenerate,
  Advance,
  Numeric,
  Contract,
  Coverage,
  Config,
  EmptyInput,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

ByteString to_bytes(std::string_view s);
std::string to_string(std::span<const Byte> b);

/// Lowercase two-digit hex per byte, no separators. Empty input gives "".
std::string hex_encode(std::span<const Byte> b);
ByteString hex_decode(std::string_view hex);

/// Printable rendering for diagnostics: ASCII graphic characters verbatim, others as \xNN.
std::string escape_bytes(std::span<const Byte> b);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const Byte> data, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// 257-way next-byte distribution stored as natural-log probabilities.
struct ByteDistribution {
  std::array<double, kByteDistSize> logp{};

  double prob(std::size_t slot) const;
  double eos_prob() const { return prob(kEosSlot); }
  /// Sum of exp(logp) over all slots.
  double total() const;
};

}  // namespace bld
