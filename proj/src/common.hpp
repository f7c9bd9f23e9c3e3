#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace msl {

using TokenId = std::int32_t;
using ItemId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class ErrorCode {
  InvalidArgument = 1,
  CatalogIntegrity = 2,
  NumericAbort = 3,
  Io = 4,
  Config = 5,
};

// Every failure the library reports carries one of the codes above; the C
// boundary maps them onto msl_status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& what);

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view s);

// Derives an independent seed for a named random stream ("catalog",
// "interactions", "init", "batching", ...) from one root seed.
std::uint64_t stream_seed(std::uint64_t root, std::string_view name);

// Formats a double so that reading it back yields the same bits.
std::string format_double(double v);

}  // namespace msl
