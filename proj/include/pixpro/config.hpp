#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "pixpro/encoder.hpp"
#include "pixpro/viewgen.hpp"

namespace pixpro {

enum class Variant { pixpro, pixcontrast, pixpro_instance };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::pixpro: return "pixpro";
    case Variant::pixcontrast: return "pixcontrast";
    case Variant::pixpro_instance: return "pixpro+instance";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "pixpro") return Variant::pixpro;
  if (s == "pixcontrast") return Variant::pixcontrast;
  if (s == "pixpro+instance") return Variant::pixpro_instance;
  throw Error("unknown variant '" + s + "' (expected pixpro, pixcontrast or pixpro+instance)");
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Every knob of a pre-training run. Plain-text form is one `key = value` per line.
struct TrainRunConfig {
  std::string variant = "pixpro";
  // loss / propagation
  double threshold = 0.7;
  double tau = 0.3;
  double tau_inst = 0.3;
  double gamma = 2.0;
  int ppm_layers = 1;
  bool use_ppm = true;
  double alpha = 1.0;
  std::string feat_levels = "c5";
  std::string dist_norm = "max";
  // resolution
  int out_res = 32;
  int feat_res = 0;  // 0: derived from out_res and the level
  // schedule and optimizer
  int epochs = 100;
  int steps = 0;  // nonzero overrides epochs
  int batch_size = 32;
  double lr_base = 4.0;
  double warmup_frac = 0.05;
  double weight_decay = 1e-5;
  double trust_coeff = 0.001;
  double lars_momentum = 0.9;
  double m_base = 0.99;
  // run
  std::int64_t seed = 0;
  std::string dataset;
  int checkpoint_interval = 0;
  // architecture
  std::vector<int> stage_channels = {16, 32, 64};
  int convs_per_stage = 1;
  int proj_hidden = 128;
  int embed_dim = 64;
  int inst_hidden = 128;
  int inst_dim = 64;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // augmentation
  double scale_min = 0.25;
  double scale_max = 1.0;
  double ratio_min = 0.75;
  double ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  int min_image_side = 8;
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_p = 0.2;
  double blur_p_a = 1.0;
  double blur_p_b = 0.1;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  double solarize_p_a = 0.0;
  double solarize_p_b = 0.2;
  // diagnostics
  double collapse_threshold = 0.01;

  using Member = std::variant<double TrainRunConfig::*, int TrainRunConfig::*, std::int64_t TrainRunConfig::*,
                              bool TrainRunConfig::*, std::string TrainRunConfig::*, std::vector<int> TrainRunConfig::*>;
  struct Field {
    const char* key;
    Member member;
  };

  static const std::vector<Field>& schema() {
    using C = TrainRunConfig;
    static const std::vector<Field> f = {
        {"variant", &C::variant},
        {"threshold", &C::threshold},
        {"tau", &C::tau},
        {"tau_inst", &C::tau_inst},
        {"gamma", &C::gamma},
        {"ppm_layers", &C::ppm_layers},
        {"use_ppm", &C::use_ppm},
        {"alpha", &C::alpha},
        {"feat_levels", &C::feat_levels},
        {"dist_norm", &C::dist_norm},
        {"out_res", &C::out_res},
        {"feat_res", &C::feat_res},
        {"epochs", &C::epochs},
        {"steps", &C::steps},
        {"batch_size", &C::batch_size},
        {"lr_base", &C::lr_base},
        {"warmup_frac", &C::warmup_frac},
        {"weight_decay", &C::weight_decay},
        {"trust_coeff", &C::trust_coeff},
        {"lars_momentum", &C::lars_momentum},
        {"m_base", &C::m_base},
        {"seed", &C::seed},
        {"dataset", &C::dataset},
        {"checkpoint_interval", &C::checkpoint_interval},
        {"stage_channels", &C::stage_channels},
        {"convs_per_stage", &C::convs_per_stage},
        {"proj_hidden", &C::proj_hidden},
        {"embed_dim", &C::embed_dim},
        {"inst_hidden", &C::inst_hidden},
        {"inst_dim", &C::inst_dim},
        {"bn_momentum", &C::bn_momentum},
        {"bn_eps", &C::bn_eps},
        {"scale_min", &C::scale_min},
        {"scale_max", &C::scale_max},
        {"ratio_min", &C::ratio_min},
        {"ratio_max", &C::ratio_max},
        {"flip_p", &C::flip_p},
        {"min_image_side", &C::min_image_side},
        {"jitter_p", &C::jitter_p},
        {"brightness", &C::brightness},
        {"contrast", &C::contrast},
        {"saturation", &C::saturation},
        {"hue", &C::hue},
        {"grayscale_p", &C::grayscale_p},
        {"blur_p_a", &C::blur_p_a},
        {"blur_p_b", &C::blur_p_b},
        {"blur_sigma_min", &C::blur_sigma_min},
        {"blur_sigma_max", &C::blur_sigma_max},
        {"solarize_p_a", &C::solarize_p_a},
        {"solarize_p_b", &C::solarize_p_b},
        {"collapse_threshold", &C::collapse_threshold},
    };
    return f;
  }

  /// Assigns one field from text. Unknown keys and malformed values are rejected.
  void set(const std::string& key, const std::string& value) {
    for (const auto& f : schema()) {
      if (key != f.key) continue;
      std::visit([&](auto m) { parse_into(this->*m, key, value); }, f.member);
      return;
    }
    throw Error("config: unknown key '" + key + "'");
  }

  std::string get(const std::string& key) const {
    for (const auto& f : schema())
      if (key == f.key) return std::visit([&](auto m) { return format(this->*m); }, f.member);
    throw Error("config: unknown key '" + key + "'");
  }

  /// Canonical text: every field in schema order.
  std::string serialize() const {
    std::string out;
    for (const auto& f : schema()) out += std::string(f.key) + " = " + get(f.key) + "\n";
    return out;
  }

  std::string digest() const { return hex64(fnv1a(serialize())); }

  static TrainRunConfig parse(const std::string& text) {
    TrainRunConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const Error& e) {
        throw Error("config line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    c.validate();
    return c;
  }

  static TrainRunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  Variant variant_kind() const { return parse_variant(variant); }

  std::vector<Level> levels() const {
    std::vector<Level> out;
    std::stringstream ss(feat_levels);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_level(trim(tok)));
    return out;
  }

  DiagonalRule diagonal_rule() const {
    if (dist_norm == "max") return DiagonalRule::max;
    if (dist_norm == "mean") return DiagonalRule::mean;
    if (dist_norm == "per_view") return DiagonalRule::per_view;
    throw Error("config: dist_norm must be max, mean or per_view");
  }

  double effective_lr() const { return lr_base * batch_size / 256.0; }

  EncoderConfig encoder() const {
    EncoderConfig e;
    e.stage_channels = stage_channels;
    e.convs_per_stage = convs_per_stage;
    e.proj_hidden = proj_hidden;
    e.embed_dim = embed_dim;
    const bool contrast = variant_kind() == Variant::pixcontrast;
    e.use_ppm = contrast ? false : use_ppm;
    e.ppm_layers = contrast ? 0 : ppm_layers;
    e.gamma = gamma;
    e.levels = levels();
    e.instance_head = variant_kind() == Variant::pixpro_instance;
    e.inst_hidden = inst_hidden;
    e.inst_dim = inst_dim;
    e.bn_momentum = bn_momentum;
    e.bn_eps = bn_eps;
    return e;
  }

  AugmentConfig augment() const {
    AugmentConfig a;
    a.out_res = out_res;
    a.scale_min = scale_min;
    a.scale_max = scale_max;
    a.ratio_min = ratio_min;
    a.ratio_max = ratio_max;
    a.flip_p = flip_p;
    a.min_image_side = min_image_side;
    for (int v = 0; v < 2; ++v) {
      auto& p = a.photometric[static_cast<std::size_t>(v)];
      p.jitter_p = jitter_p;
      p.brightness = brightness;
      p.contrast = contrast;
      p.saturation = saturation;
      p.hue = hue;
      p.grayscale_p = grayscale_p;
      p.blur_p = v == 0 ? blur_p_a : blur_p_b;
      p.blur_sigma_min = blur_sigma_min;
      p.blur_sigma_max = blur_sigma_max;
      p.solarize_p = v == 0 ? solarize_p_a : solarize_p_b;
    }
    return a;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw Error("config: " + msg);
    };
    variant_kind();
    diagonal_rule();
    need(threshold > 0, "threshold must be positive");
    need(tau > 0 && tau_inst > 0, "temperatures must be positive");
    need(alpha >= 0, "alpha must be nonnegative");
    need(epochs >= 0 && steps >= 0, "epochs and steps must be nonnegative");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(lr_base >= 0 && weight_decay >= 0 && trust_coeff > 0, "invalid optimizer settings");
    need(warmup_frac >= 0 && warmup_frac < 1, "warmup_frac must lie in [0,1)");
    need(lars_momentum >= 0 && lars_momentum < 1, "lars_momentum must lie in [0,1)");
    need(m_base >= 0 && m_base <= 1, "m_base must lie in [0,1]");
    need(checkpoint_interval >= 0, "checkpoint_interval must be nonnegative");
    need(scale_min > 0 && scale_min <= scale_max && scale_max <= 1, "crop scale range must satisfy 0 < min <= max <= 1");
    need(ratio_min > 0 && ratio_min <= ratio_max, "aspect ratio range invalid");
    need(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max, "blur sigma range invalid");
    for (double p : {flip_p, jitter_p, grayscale_p, blur_p_a, blur_p_b, solarize_p_a, solarize_p_b})
      need(p >= 0 && p <= 1, "probabilities must lie in [0,1]");
    need(collapse_threshold > 0, "collapse_threshold must be positive");
    const auto enc = encoder();
    enc.validate();
    need(out_res % enc.total_stride() == 0,
         "out_res " + std::to_string(out_res) + " must be divisible by the total stride " + std::to_string(enc.total_stride()));
    if (feat_res != 0)
      need(feat_res == enc.level_resolution(enc.levels.front(), out_res),
           "feat_res does not match the first feature level at out_res");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static void parse_into(double& dst, const std::string& key, const std::string& v) {
    std::size_t used = 0;
    try {
      dst = std::stod(v, &used);
    } catch (...) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw Error("config: '" + key + "' expects a number, got '" + v + "'");
  }
  template <typename I>
  static void parse_integer(I& dst, const std::string& key, const std::string& v) {
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), dst);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
      throw Error("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  static void parse_into(int& dst, const std::string& key, const std::string& v) { parse_integer(dst, key, v); }
  static void parse_into(std::int64_t& dst, const std::string& key, const std::string& v) { parse_integer(dst, key, v); }
  static void parse_into(bool& dst, const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") dst = true;
    else if (v == "false" || v == "0") dst = false;
    else throw Error("config: '" + key + "' expects true or false, got '" + v + "'");
  }
  static void parse_into(std::string& dst, const std::string&, const std::string& v) { dst = v; }
  static void parse_into(std::vector<int>& dst, const std::string& key, const std::string& v) {
    dst.clear();
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      int x = 0;
      parse_integer(x, key, trim(tok));
      dst.push_back(x);
    }
    if (dst.empty()) throw Error("config: '" + key + "' expects a comma-separated integer list");
  }

  static std::string format(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string format(int v) { return std::to_string(v); }
  static std::string format(std::int64_t v) { return std::to_string(v); }
  static std::string format(bool v) { return v ? "true" : "false"; }
  static std::string format(const std::string& v) { return v; }
  static std::string format(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  }
};

}  // namespace pixpro
