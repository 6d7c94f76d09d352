#pragma once

// Netpbm images (P2/P3/P5/P6) as planar float arrays in [0, 1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hybrid/errors.hpp"

namespace hyb {

struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> data;  // (c, h, w)

  static Image blank(std::size_t c, std::size_t h, std::size_t w, float v = 0.0f) {
    return {c, h, w, std::vector<float>(c * h * w, v)};
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::size_t pixels() const noexcept { return height * width; }
};

// Binary per-pixel annotation, row-major, values 0 or 1.
struct LesionMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> px;

  static LesionMask empty(std::size_t h, std::size_t w) { return {h, w, std::vector<std::uint8_t>(h * w, 0)}; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : px) n += v ? 1 : 0;
    return n;
  }
};

namespace detail {

inline std::string read_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

inline std::size_t header_number(std::istream& in, const std::string& path) {
  const std::string t = read_token(in);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw FormatError(path + ": malformed netpbm header");
  }
  return std::stoul(t);
}

}  // namespace detail

inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  const std::string magic = detail::read_token(in);
  std::size_t channels = 0;
  bool binary = false;
  if (magic == "P2" || magic == "P5") channels = 1;
  if (magic == "P3" || magic == "P6") channels = 3;
  binary = magic == "P5" || magic == "P6";
  if (!channels) throw FormatError(path.string() + ": unsupported netpbm type '" + magic + "'");
  const std::size_t w = detail::header_number(in, path.string());
  const std::size_t h = detail::header_number(in, path.string());
  const std::size_t maxval = detail::header_number(in, path.string());
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError(path.string() + ": invalid netpbm header values");
  Image img = Image::blank(channels, h, w);
  const std::size_t n = w * h * channels;
  std::vector<std::uint32_t> raw(n);
  if (binary) {
    const std::size_t bps = maxval < 256 ? 1 : 2;
    std::vector<unsigned char> buf(n * bps);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw FormatError(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < n; ++i) raw[i] = bps == 1 ? buf[i] : (std::uint32_t(buf[2 * i]) << 8 | buf[2 * i + 1]);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string t = detail::read_token(in);
      if (t.empty()) throw FormatError(path.string() + ": truncated pixel data");
      raw[i] = static_cast<std::uint32_t>(std::stoul(t));
    }
  }
  // interleaved -> planar
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<float>(std::min<std::uint32_t>(raw[(y * w + x) * channels + c], maxval)) /
                          static_cast<float>(maxval);
  return img;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// 1 channel -> P5, 3 channels -> P6.
inline void write_pnm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("write_pnm: only 1 or 3 channels supported");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write image " + path.string());
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.pixels() * img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) buf[(y * img.width + x) * img.channels + c] = to_byte(img.at(c, y, x));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void write_pgm_bytes(const std::filesystem::path& path, std::size_t h, std::size_t w,
                            const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write image " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_mask(const std::filesystem::path& path, const LesionMask& m) {
  std::vector<std::uint8_t> bytes(m.px.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = m.px[i] ? 255 : 0;
  write_pgm_bytes(path, m.height, m.width, bytes);
}

// Any non-zero pixel of the first channel counts as lesion.
inline LesionMask read_mask(const std::filesystem::path& path) {
  const Image img = read_pnm(path);
  LesionMask m = LesionMask::empty(img.height, img.width);
  for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = img.data[i] > 0.0f ? 1 : 0;
  return m;
}

}  // namespace hyb
