#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace studyrig {

// Opaque 128-bit random id as 32 lowercase hex characters.
std::string new_id();

// 256-bit bearer capability, lowercase hex.
std::string new_token();

// 10 characters from [A-Z0-9], drawn from the OS cryptographic generator.
std::string new_completion_code();

// "anon-" followed by a fresh id.
std::string new_anonymous_id();

std::string sha256_hex(std::string_view data);

// First eight bytes of SHA-256(data), big-endian.
std::uint64_t stable_hash64(std::string_view data);

// Constant-time equality for credential comparison.
bool constant_time_equal(std::string_view a, std::string_view b);

// Number of Unicode code points in a UTF-8 string (counts non-continuation
// bytes).
std::size_t utf8_length(std::string_view text);

}  // namespace studyrig
