#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace davit {

using Sha256Digest = std::array<uint8_t, 32>;

Sha256Digest sha256(std::span<const uint8_t> bytes);
std::string to_hex(std::span<const uint8_t> bytes);

std::string base64_encode(std::span<const uint8_t> bytes);
// Throws std::invalid_argument on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

}  // namespace davit
