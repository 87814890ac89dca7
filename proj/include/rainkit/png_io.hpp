#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rainkit/imaging.hpp"

namespace rainkit::png {

// 8-bit PNG, grayscale for 1 channel, RGB for 3. Values are quantized with
// round(v * 255).
std::vector<std::uint8_t> encode(const imaging::ImageBuffer& img);
imaging::ImageBuffer decode(std::span<const std::uint8_t> bytes);

void write_file(const std::string& path, const imaging::ImageBuffer& img);
imaging::ImageBuffer read_file(const std::string& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace rainkit::png
