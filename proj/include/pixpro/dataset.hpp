#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "pixpro/image.hpp"
#include "pixpro/rng.hpp"
#include "pixpro/viewgen.hpp"

namespace pixpro {

/// One generated image with its dense per-pixel labels and image-level label.
struct SyntheticScene {
  Tensor<float> image;               // [3,H,W]
  std::vector<std::uint8_t> dense;   // H*W, 0 = background
  int label = 0;                     // class of the dominant object, in 1..n_classes-1
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int size = 32;
  int n_classes = 4;             // includes background
  std::vector<double> mixture;   // weights over object classes 1..n_classes-1; empty = uniform
  int max_distractors = 2;
};

namespace detail {

inline std::array<double, 3> random_color(Rng& rng) {
  double r, g, b;
  hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), r, g, b);
  return {r, g, b};
}

// Shape family cycles rectangle / ellipse / stripes; classes past the first three add a
// checker texture.
inline bool shape_covers(int cls, double u, double v, double angle) {
  const int family = (cls - 1) % 3;
  if (family == 1) return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
  (void)angle;
  return u >= 0 && u <= 1 && v >= 0 && v <= 1;
}

inline double texture(int cls, double u, double v, double angle, double freq) {
  const int family = (cls - 1) % 3;
  const int variant = (cls - 1) / 3;
  double t = 1.0;
  if (family == 2) {
    const double s = std::cos(angle) * u + std::sin(angle) * v;
    t = std::fmod(std::floor(s * freq) + 64.0, 2.0) < 1.0 ? 1.0 : 0.35;
  }
  if (variant % 2 == 1) t *= (static_cast<int>(std::floor(u * 4) + std::floor(v * 4)) % 2) ? 1.0 : 0.6;
  return t;
}

}  // namespace detail

inline int sample_class(const SceneConfig& cfg, Rng& rng) {
  const int k = cfg.n_classes - 1;
  if (cfg.mixture.empty()) return 1 + static_cast<int>(rng.uniform_int(0, k - 1));
  double total = 0;
  for (double w : cfg.mixture) total += w;
  double u = rng.uniform() * total;
  for (int c = 0; c < k; ++c) {
    u -= cfg.mixture[static_cast<std::size_t>(c)];
    if (u < 0) return c + 1;
  }
  return k;
}

/// Textured coloured shapes on a noisy background. The dominant object is drawn last and
/// largest; its class is the image-level label.
inline SyntheticScene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  if (cfg.n_classes < 2) throw Error("generate_scene: need at least one object class");
  if (!cfg.mixture.empty() && cfg.mixture.size() != static_cast<std::size_t>(cfg.n_classes - 1))
    throw Error("generate_scene: mixture must have n_classes-1 weights");
  Rng rng({seed, 0x736365ULL});
  const auto S = static_cast<std::size_t>(cfg.size);
  SyntheticScene sc;
  sc.seed = seed;
  sc.image = Tensor<float>({3, S, S});
  sc.dense.assign(S * S, 0);

  const auto bg = detail::random_color(rng);
  const double gx = rng.uniform(-0.2, 0.2), gy = rng.uniform(-0.2, 0.2);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double ramp = gx * (x / double(S) - 0.5) + gy * (y / double(S) - 0.5);
      for (std::size_t c = 0; c < 3; ++c)
        sc.image[(c * S + y) * S + x] = static_cast<float>(0.6 * bg[c] + ramp + 0.06 * rng.normal());
    }

  const int distractors = static_cast<int>(rng.uniform_int(0, cfg.max_distractors));
  const int dominant = sample_class(cfg, rng);
  for (int o = 0; o <= distractors; ++o) {
    const bool main = o == distractors;
    const int cls = main ? dominant : sample_class(cfg, rng);
    const double side = main ? rng.uniform(0.45, 0.75) : rng.uniform(0.2, 0.35);
    const double w = side * S * std::exp(rng.uniform(-0.2, 0.2)), h = side * S * std::exp(rng.uniform(-0.2, 0.2));
    const double x0 = rng.uniform(0, S - w), y0 = rng.uniform(0, S - h);
    const double angle = rng.uniform(0, std::numbers::pi), freq = rng.uniform(3, 6);
    const auto col = detail::random_color(rng);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double u = (x + 0.5 - x0) / w, v = (y + 0.5 - y0) / h;
        if (!detail::shape_covers(cls, u, v, angle)) continue;
        const double t = detail::texture(cls, u, v, angle, freq);
        for (std::size_t c = 0; c < 3; ++c)
          sc.image[(c * S + y) * S + x] = static_cast<float>(col[c] * t + 0.03 * rng.normal());
        sc.dense[y * S + x] = static_cast<std::uint8_t>(cls);
      }
  }
  for (auto& v : sc.image.data()) v = std::clamp(v, 0.0f, 1.0f);
  sc.label = dominant;
  return sc;
}

/// Images plus labels as loaded from a manifest.
struct Dataset {
  std::vector<std::string> ids;
  std::vector<Tensor<float>> images;
  std::vector<int> labels;  // -1 when the manifest has none
  std::vector<std::vector<std::uint8_t>> dense;

  std::size_t size() const { return images.size(); }
};

/// Writes `n_images` scenes as PPM images and PGM label maps under `dir`, with a
/// line-delimited JSON manifest mapping ids to files.
inline void gen_synthetic_dataset(const std::filesystem::path& dir, int n_images, const SceneConfig& cfg,
                                  std::uint64_t seed) {
  if (n_images < 1) throw Error("gen_synthetic_dataset: n_images must be >= 1");
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw Error("cannot write manifest in " + dir.string());
  for (int i = 0; i < n_images; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "%06d", i);
    const auto scene = generate_scene(cfg, stream_key({seed, static_cast<std::uint64_t>(i)}));
    const std::string img = std::string("images/") + id + ".ppm", lbl = std::string("labels/") + id + ".pgm";
    write_ppm(dir / img, scene.image);
    write_pgm(dir / lbl, static_cast<std::size_t>(cfg.size), static_cast<std::size_t>(cfg.size), scene.dense);
    nlohmann::ordered_json rec = {{"id", id}, {"image", img}, {"label_map", lbl}, {"label", scene.label},
                                  {"seed", scene.seed}};
    manifest << rec.dump() << '\n';
  }
}

/// Loads a manifest (the file itself or its directory). Image paths are relative to
/// the manifest's directory.
inline Dataset load_dataset(const std::filesystem::path& path, bool with_dense = false) {
  const auto manifest = std::filesystem::is_directory(path) ? path / "manifest.jsonl" : path;
  std::ifstream in(manifest);
  if (!in) throw Error("cannot open dataset manifest " + manifest.string());
  const auto root = manifest.parent_path();
  Dataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      ds.ids.push_back(rec.at("id").get<std::string>());
      ds.images.push_back(load_image<float>(root / rec.at("image").get<std::string>()));
      ds.labels.push_back(rec.value("label", -1));
    } catch (const nlohmann::json::exception& e) {
      throw Error(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (with_dense && rec.contains("label_map")) {
      std::size_t w = 0, h = 0;
      ds.dense.push_back(read_pgm(root / rec["label_map"].get<std::string>(), w, h));
    }
  }
  if (ds.images.empty()) throw Error("dataset " + manifest.string() + " is empty");
  return ds;
}

}  // namespace pixpro
