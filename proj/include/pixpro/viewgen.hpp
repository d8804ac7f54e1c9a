#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "pixpro/image.hpp"
#include "pixpro/ops.hpp"
#include "pixpro/rng.hpp"

namespace pixpro {

/// Geometric provenance of one view: crop box in original pixels, output side, flip.
struct CropRecord {
  int x0 = 0;
  int y0 = 0;
  int w = 1;
  int h = 1;
  int out_res = 1;
  bool flip = false;

  friend bool operator==(const CropRecord&, const CropRecord&) = default;
};

struct PhotometricConfig {
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_p = 0.2;
  double blur_p = 1.0;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  double solarize_p = 0.0;
  double solarize_threshold = 0.5;

  static PhotometricConfig disabled() {
    PhotometricConfig c;
    c.jitter_p = c.grayscale_p = c.blur_p = c.solarize_p = 0.0;
    return c;
  }
};

struct AugmentConfig {
  int out_res = 32;
  double scale_min = 0.25;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  int max_tries = 10;
  double flip_p = 0.5;
  int min_image_side = 8;
  std::array<PhotometricConfig, 2> photometric = {first_view_default(), second_view_default()};

  static PhotometricConfig first_view_default() { return {}; }
  static PhotometricConfig second_view_default() {
    PhotometricConfig c;
    c.blur_p = 0.1;
    c.solarize_p = 0.2;
    return c;
  }
};

/// Random resized crop. Area fraction is uniform in [scale_min, scale_max] and the
/// aspect ratio log-uniform in [ratio_min, ratio_max]; after max_tries rejected draws
/// the centred crop with the ratio clamped into range is used.
inline CropRecord sample_crop(int W, int H, const AugmentConfig& cfg, Rng& rng) {
  if (W < cfg.min_image_side || H < cfg.min_image_side)
    throw Error("image " + std::to_string(W) + "x" + std::to_string(H) + " is smaller than the minimum crop side " +
                std::to_string(cfg.min_image_side));
  const double area = static_cast<double>(W) * H;
  const double log_lo = std::log(cfg.ratio_min), log_hi = std::log(cfg.ratio_max);
  CropRecord rec;
  rec.out_res = cfg.out_res;
  for (int t = 0; t < cfg.max_tries; ++t) {
    const double target = area * rng.uniform(cfg.scale_min, cfg.scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    const double frac = static_cast<double>(w) * h / area;
    if (w < 1 || h < 1 || w > W || h > H || frac < cfg.scale_min || frac > cfg.scale_max) continue;
    rec.w = w;
    rec.h = h;
    rec.x0 = static_cast<int>(rng.uniform_int(0, W - w));
    rec.y0 = static_cast<int>(rng.uniform_int(0, H - h));
    return rec;
  }
  const double in_ratio = static_cast<double>(W) / H;
  if (in_ratio < cfg.ratio_min) {
    rec.w = W;
    rec.h = std::min(H, static_cast<int>(std::lround(W / cfg.ratio_min)));
  } else if (in_ratio > cfg.ratio_max) {
    rec.h = H;
    rec.w = std::min(W, static_cast<int>(std::lround(H * cfg.ratio_max)));
  } else {
    rec.w = W;
    rec.h = H;
  }
  rec.x0 = (W - rec.w) / 2;
  rec.y0 = (H - rec.h) / 2;
  return rec;
}

/// Bilinear resize of the crop to out_res x out_res with half-pixel centre alignment,
/// then the horizontal flip if recorded.
template <typename T>
Tensor<T> render_view(const Tensor<T>& image, const CropRecord& rec) {
  const std::size_t C = image.dim(0), R = static_cast<std::size_t>(rec.out_res);
  Tensor<T> out({C, R, R});
  const double sx = static_cast<double>(rec.w) / rec.out_res, sy = static_cast<double>(rec.h) / rec.out_res;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t q = 0; q < R; ++q) {
        const std::size_t src_q = rec.flip ? R - 1 - q : q;
        const double x = rec.x0 + (static_cast<double>(src_q) + 0.5) * sx;
        const double y = rec.y0 + (static_cast<double>(r) + 0.5) * sy;
        out[(c * R + r) * R + q] = sample_bilinear(image, c, x, y);
      }
  return out;
}

template <typename T>
struct View {
  Tensor<T> pixels;
  CropRecord rec;
};

/// Two independent random resized crops (with flips) of one [C,H,W] image.
template <typename T>
std::pair<View<T>, View<T>> sample_view_pair(const Tensor<T>& image, const AugmentConfig& cfg, Rng& rng) {
  if (image.rank() != 3) throw Error("sample_view_pair: expected [C,H,W], got " + shape_str(image.shape()));
  const int H = static_cast<int>(image.dim(1)), W = static_cast<int>(image.dim(2));
  std::pair<View<T>, View<T>> out;
  for (View<T>* v : {&out.first, &out.second}) {
    v->rec = sample_crop(W, H, cfg, rng);
    v->rec.flip = rng.bernoulli(cfg.flip_p);
    v->pixels = render_view(image, v->rec);
  }
  return out;
}

namespace detail {

template <typename T>
void clamp01(Tensor<T>& x) {
  for (auto& v : x.data()) v = std::clamp(v, T(0), T(1));
}

template <typename T>
T luma(const Tensor<T>& x, std::size_t p, std::size_t hw) {
  return T(0.299) * x[p] + T(0.587) * x[hw + p] + T(0.114) * x[2 * hw + p];
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0;
  if (d <= 0) {
    h = 0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d, 6.0) / 6.0;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0) / 6.0;
  } else {
    h = ((r - g) / d + 4.0) / 6.0;
  }
  if (h < 0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

template <typename T>
void adjust_brightness(Tensor<T>& x, double f) {
  for (auto& v : x.data()) v = static_cast<T>(v * f);
  detail::clamp01(x);
}

template <typename T>
void adjust_contrast(Tensor<T>& x, double f) {
  const std::size_t hw = x.dim(1) * x.dim(2);
  double m = 0;
  for (std::size_t p = 0; p < hw; ++p) m += detail::luma(x, p, hw);
  m /= static_cast<double>(hw);
  for (auto& v : x.data()) v = static_cast<T>((v - m) * f + m);
  detail::clamp01(x);
}

template <typename T>
void adjust_saturation(Tensor<T>& x, double f) {
  const std::size_t hw = x.dim(1) * x.dim(2);
  for (std::size_t p = 0; p < hw; ++p) {
    const double g = detail::luma(x, p, hw);
    for (std::size_t c = 0; c < 3; ++c) x[c * hw + p] = static_cast<T>((x[c * hw + p] - g) * f + g);
  }
  detail::clamp01(x);
}

/// Rotates hue by `shift` turns.
template <typename T>
void adjust_hue(Tensor<T>& x, double shift) {
  const std::size_t hw = x.dim(1) * x.dim(2);
  for (std::size_t p = 0; p < hw; ++p) {
    double h, s, v, r, g, b;
    detail::rgb_to_hsv(x[p], x[hw + p], x[2 * hw + p], h, s, v);
    detail::hsv_to_rgb(h + shift, s, v, r, g, b);
    x[p] = static_cast<T>(r);
    x[hw + p] = static_cast<T>(g);
    x[2 * hw + p] = static_cast<T>(b);
  }
  detail::clamp01(x);
}

template <typename T>
void to_grayscale(Tensor<T>& x) {
  const std::size_t hw = x.dim(1) * x.dim(2);
  for (std::size_t p = 0; p < hw; ++p) {
    const T g = detail::luma(x, p, hw);
    x[p] = x[hw + p] = x[2 * hw + p] = g;
  }
}

/// Separable Gaussian blur with replicated borders; the kernel sums to one, so constant
/// images are fixed points for any sigma.
template <typename T>
void gaussian_blur(Tensor<T>& x, double sigma) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) ks += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  auto clampi = [](long v, long n) { return static_cast<std::size_t>(std::clamp(v, 0L, n - 1)); };
  std::vector<double> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    T* p = x.data().data() + c * H * W;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t q = 0; q < W; ++q) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * p[r * W + clampi(static_cast<long>(q) + i, W)];
        tmp[r * W + q] = acc;
      }
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t q = 0; q < W; ++q) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[clampi(static_cast<long>(r) + i, H) * W + q];
        p[r * W + q] = static_cast<T>(acc);
      }
  }
  detail::clamp01(x);
}

template <typename T>
void solarize(Tensor<T>& x, double threshold) {
  for (auto& v : x.data()) v = v < threshold ? v : T(1) - v;
}

/// Colour jitter (random order), grayscale, blur and solarization, each gated by its
/// probability. Geometry is untouched.
template <typename T>
Tensor<T> apply_photometric(Tensor<T> view, Rng& rng, const PhotometricConfig& cfg) {
  if (view.rank() != 3) throw Error("apply_photometric: expected [C,H,W], got " + shape_str(view.shape()));
  const bool rgb = view.dim(0) == 3;
  if (rng.bernoulli(cfg.jitter_p)) {
    std::array<int, 4> order = {0, 1, 2, 3};
    for (int i = 3; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    for (int op : order) {
      switch (op) {
        case 0: adjust_brightness(view, rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)); break;
        case 1:
          if (rgb) adjust_contrast(view, rng.uniform(1 - cfg.contrast, 1 + cfg.contrast));
          break;
        case 2:
          if (rgb) adjust_saturation(view, rng.uniform(1 - cfg.saturation, 1 + cfg.saturation));
          break;
        default:
          if (rgb) adjust_hue(view, rng.uniform(-cfg.hue, cfg.hue));
          break;
      }
    }
  }
  if (rgb && rng.bernoulli(cfg.grayscale_p)) to_grayscale(view);
  if (rng.bernoulli(cfg.blur_p)) gaussian_blur(view, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
  if (rng.bernoulli(cfg.solarize_p)) solarize(view, cfg.solarize_threshold);
  return view;
}

/// Centres of the feature-map cells of a view, in original-image pixels, as a
/// [feat_res^2, 2] matrix of (x, y), row-major over the view's grid.
inline Tensor<double> warp_grid(const CropRecord& rec, int feat_res) {
  if (feat_res < 1) throw Error("warp_grid: feat_res must be positive");
  const auto n = static_cast<std::size_t>(feat_res);
  Tensor<double> out({n * n, 2});
  const double bw = static_cast<double>(rec.w) / feat_res, bh = static_cast<double>(rec.h) / feat_res;
  for (int r = 0; r < feat_res; ++r)
    for (int c = 0; c < feat_res; ++c) {
      const int cs = rec.flip ? feat_res - 1 - c : c;
      const std::size_t i = static_cast<std::size_t>(r * feat_res + c);
      out.at(i, 0) = rec.x0 + (cs + 0.5) * bw;
      out.at(i, 1) = rec.y0 + (r + 0.5) * bh;
    }
  return out;
}

/// Which bin diagonal normalizes distances when the views' bins differ.
enum class DiagonalRule { max, mean, per_view };

/// Diagonal of one feature-map bin in original pixels, using the geometric-mean side.
inline double bin_diagonal(const CropRecord& rec, int feat_res) {
  return std::sqrt(static_cast<double>(rec.w) * rec.h) / feat_res * std::sqrt(2.0);
}

struct DistanceMatrix {
  Tensor<double> values;  // [cells_a, cells_b]
  double bin_diag_a = 0;
  double bin_diag_b = 0;
};

/// Euclidean distances between warped cell centres divided by the bin diagonal.
/// With DiagonalRule::per_view each row is normalized by view A's diagonal.
inline DistanceMatrix distance_matrix(const Tensor<double>& coords_a, const Tensor<double>& coords_b,
                                      const CropRecord& rec_a, const CropRecord& rec_b, int feat_res,
                                      DiagonalRule rule = DiagonalRule::max) {
  DistanceMatrix d;
  d.bin_diag_a = bin_diagonal(rec_a, feat_res);
  d.bin_diag_b = bin_diagonal(rec_b, feat_res);
  double norm = std::max(d.bin_diag_a, d.bin_diag_b);
  if (rule == DiagonalRule::mean) norm = 0.5 * (d.bin_diag_a + d.bin_diag_b);
  if (rule == DiagonalRule::per_view) norm = d.bin_diag_a;
  const std::size_t na = coords_a.dim(0), nb = coords_b.dim(0);
  d.values = Tensor<double>({na, nb});
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      const double dx = coords_a.at(i, 0) - coords_b.at(j, 0);
      const double dy = coords_a.at(i, 1) - coords_b.at(j, 1);
      d.values.at(i, j) = std::hypot(dx, dy) / norm;
    }
  return d;
}

/// Positive pairs between the cells of two views: positives(i,j) = dist(i,j) <= threshold.
struct AssignmentMatrix {
  Mask positives;
  double threshold = 0.7;

  std::size_t positives_of(std::size_t i) const { return positives.row_count(i); }
  AssignmentMatrix transposed() const { return {positives.transposed(), threshold}; }
};

inline AssignmentMatrix assign(const DistanceMatrix& dist, double threshold) {
  if (!(threshold > 0)) throw Error("assign: threshold must be positive");
  AssignmentMatrix a{Mask(dist.values.dim(0), dist.values.dim(1)), threshold};
  for (std::size_t k = 0; k < dist.values.numel(); ++k) a.positives.bits[k] = dist.values[k] <= threshold ? 1 : 0;
  return a;
}

/// Full Eq.-1 labelling for two views at one feature resolution.
inline AssignmentMatrix assign_views(const CropRecord& a, const CropRecord& b, int feat_res, double threshold,
                                     DiagonalRule rule = DiagonalRule::max) {
  return assign(distance_matrix(warp_grid(a, feat_res), warp_grid(b, feat_res), a, b, feat_res, rule), threshold);
}

/// True iff the crop rectangles intersect with positive area.
inline bool overlap_check(const CropRecord& a, const CropRecord& b) {
  const int ix = std::min(a.x0 + a.w, b.x0 + b.w) - std::max(a.x0, b.x0);
  const int iy = std::min(a.y0 + a.h, b.y0 + b.h) - std::max(a.y0, b.y0);
  return ix > 0 && iy > 0;
}

inline constexpr char kAssignmentMagic[6] = {'P', 'X', 'A', 'S', 'N', '1'};

/// Binary layout: magic "PXASN1", rows and cols as little-endian uint32, then one byte
/// (0 or 1) per entry in row-major order.
inline void write_assignment(const std::filesystem::path& path, const AssignmentMatrix& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kAssignmentMagic, 6);
  for (std::uint32_t v : {static_cast<std::uint32_t>(a.positives.rows), static_cast<std::uint32_t>(a.positives.cols)}) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  out.write(reinterpret_cast<const char*>(a.positives.bits.data()), static_cast<std::streamsize>(a.positives.bits.size()));
}

inline Mask read_assignment(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[6];
  unsigned char dims[8];
  in.read(magic, 6);
  in.read(reinterpret_cast<char*>(dims), 8);
  if (!in || std::memcmp(magic, kAssignmentMagic, 6) != 0) throw Error(path.string() + ": not a PXASN1 file");
  auto u32 = [&](int o) {
    return static_cast<std::uint32_t>(dims[o]) | static_cast<std::uint32_t>(dims[o + 1]) << 8 |
           static_cast<std::uint32_t>(dims[o + 2]) << 16 | static_cast<std::uint32_t>(dims[o + 3]) << 24;
  };
  Mask m(u32(0), u32(4));
  in.read(reinterpret_cast<char*>(m.bits.data()), static_cast<std::streamsize>(m.bits.size()));
  if (in.gcount() != static_cast<std::streamsize>(m.bits.size())) throw Error(path.string() + ": truncated payload");
  return m;
}

}  // namespace pixpro
