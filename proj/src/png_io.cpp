#include "rainkit/png_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <png.h>

namespace rainkit::png {

using imaging::ImageBuffer;

std::vector<std::uint8_t> encode(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw std::invalid_argument("png encode: only 1- or 3-channel images supported");
  }
  std::vector<std::uint8_t> quant(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp(img.pixels[i], 0.0, 1.0);
    quant[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }

  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, quant.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + pi.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, quant.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + pi.message);
  }
  out.resize(size);
  return out;
}

ImageBuffer decode(std::span<const std::uint8_t> bytes) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) {
    throw std::runtime_error(std::string("png decode failed: ") + pi.message);
  }
  const bool color = (pi.format & PNG_FORMAT_FLAG_COLOR) != 0;
  pi.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, raw.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png decode failed: ") + pi.message);
  }
  ImageBuffer img = ImageBuffer::create(static_cast<int>(pi.height),
                                        static_cast<int>(pi.width), channels);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    img.pixels[i] = raw[i] / 255.0;
  }
  return img;
}

void write_file(const std::string& path, const ImageBuffer& img) {
  const auto bytes = encode(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

ImageBuffer read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::runtime_error("empty or unreadable file: " + path);
  return decode(bytes);
}

static const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  int rev[256];
  for (int& v : rev) v = -1;
  for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kB64[i])] = i;

  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (const char ch : text) {
    if (ch == '=' || ch == '\n' || ch == '\r') continue;
    const int v = rev[static_cast<unsigned char>(ch)];
    if (v < 0) throw std::invalid_argument("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  // A valid encoding never leaves a full 6-bit group dangling.
  if (bits >= 6) throw std::invalid_argument("base64: truncated input");
  return out;
}

}  // namespace rainkit::png
