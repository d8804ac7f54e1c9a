#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "pixpro/tensor.hpp"

namespace pixpro {

// Images are Tensor<T> of shape [C,H,W] with values in [0,1].

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline std::vector<std::uint8_t> read_pnm(const std::filesystem::path& path, const std::string& magic,
                                          std::size_t channels, std::size_t& w, std::size_t& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  std::string m;
  in >> m;
  if (m != magic) throw Error(path.string() + ": expected " + magic + " header, found '" + m + "'");
  int maxval = 0;
  skip_pnm_space(in);
  in >> w;
  skip_pnm_space(in);
  in >> h;
  skip_pnm_space(in);
  in >> maxval;
  in.get();
  if (!in || w == 0 || h == 0 || maxval != 255) throw Error(path.string() + ": unsupported or corrupt header");
  std::vector<std::uint8_t> bytes(w * h * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw Error(path.string() + ": truncated pixel data");
  return bytes;
}

inline void write_pnm(const std::filesystem::path& path, const std::string& magic, std::size_t w, std::size_t h,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

template <typename T = float>
Tensor<T> image_from_interleaved(const std::vector<std::uint8_t>& bytes, std::size_t channels, std::size_t w,
                                 std::size_t h) {
  Tensor<T> img({channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        img[(c * h + y) * w + x] = static_cast<T>(bytes[(y * w + x) * channels + c]) / T(255);
  return img;
}

template <typename T>
std::vector<std::uint8_t> image_to_interleaved(const Tensor<T>& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::vector<std::uint8_t> bytes(C * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c)
        bytes[(y * W + x) * C + c] = detail::to_byte(static_cast<double>(img[(c * H + y) * W + x]));
  return bytes;
}

/// Reads an 8-bit binary PPM (P6) as a [3,H,W] image.
template <typename T = float>
Tensor<T> read_ppm(const std::filesystem::path& path) {
  std::size_t w = 0, h = 0;
  auto bytes = detail::read_pnm(path, "P6", 3, w, h);
  return image_from_interleaved<T>(bytes, 3, w, h);
}

template <typename T>
void write_ppm(const std::filesystem::path& path, const Tensor<T>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw Error("write_ppm: expected [3,H,W], got " + shape_str(img.shape()));
  detail::write_pnm(path, "P6", img.dim(2), img.dim(1), image_to_interleaved(img));
}

/// 8-bit single-channel map (dense labels) as PGM (P5).
inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& w, std::size_t& h) {
  return detail::read_pnm(path, "P5", 1, w, h);
}

inline void write_pgm(const std::filesystem::path& path, std::size_t w, std::size_t h,
                      const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() != w * h) throw Error("write_pgm: size mismatch");
  detail::write_pnm(path, "P5", w, h, bytes);
}

/// Reads an 8-bit PNG, converted to RGB, as a [3,H,W] image.
template <typename T = float>
Tensor<T> read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw Error(path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(path.string() + ": " + image.message);
  }
  return image_from_interleaved<T>(bytes, 3, image.width, image.height);
}

/// Loads PPM or PNG by content signature.
template <typename T = float>
Tensor<T> load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  char sig[2] = {0, 0};
  in.read(sig, 2);
  if (sig[0] == 'P' && sig[1] == '6') return read_ppm<T>(path);
  if (static_cast<unsigned char>(sig[0]) == 0x89 && sig[1] == 'P') return read_png<T>(path);
  throw Error(path.string() + ": unrecognized image format");
}

/// Bilinear sample at continuous pixel coordinates (pixel centres at integer + 0.5),
/// clamped to the image border.
template <typename T>
T sample_bilinear(const Tensor<T>& img, std::size_t c, double x, double y) {
  const std::size_t H = img.dim(1), W = img.dim(2);
  const double fx = std::clamp(x - 0.5, 0.0, static_cast<double>(W - 1));
  const double fy = std::clamp(y - 0.5, 0.0, static_cast<double>(H - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(fx));
  const auto y0 = static_cast<std::size_t>(std::floor(fy));
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
  const T* p = img.data().data() + c * H * W;
  const double top = (1 - ax) * p[y0 * W + x0] + ax * p[y0 * W + x1];
  const double bot = (1 - ax) * p[y1 * W + x0] + ax * p[y1 * W + x1];
  return static_cast<T>((1 - ay) * top + ay * bot);
}

}  // namespace pixpro
