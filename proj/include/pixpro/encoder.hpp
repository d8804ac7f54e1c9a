#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pixpro/ops.hpp"
#include "pixpro/rng.hpp"

namespace pixpro {

/// Feature levels: the last backbone stage, or one of the pyramid outputs.
enum class Level { c5, p3, p4, p5, p6 };

inline std::string level_name(Level l) {
  switch (l) {
    case Level::c5: return "c5";
    case Level::p3: return "p3";
    case Level::p4: return "p4";
    case Level::p5: return "p5";
    case Level::p6: return "p6";
  }
  return "?";
}

inline Level parse_level(const std::string& s) {
  if (s == "c5") return Level::c5;
  if (s == "p3") return Level::p3;
  if (s == "p4") return Level::p4;
  if (s == "p5") return Level::p5;
  if (s == "p6") return Level::p6;
  throw Error("unknown feature level '" + s + "' (expected c5, p3, p4, p5 or p6)");
}

struct EncoderConfig {
  int in_channels = 3;
  std::vector<int> stage_channels = {16, 32, 64};
  int convs_per_stage = 1;  // the stride-2 entry conv plus (n-1) stride-1 convs
  int proj_hidden = 128;
  int embed_dim = 64;
  bool use_ppm = true;
  int ppm_layers = 1;  // l: layers of the transform g
  double gamma = 2.0;
  std::vector<Level> levels = {Level::c5};
  bool instance_head = false;
  int inst_hidden = 128;
  int inst_dim = 64;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  bool uses_pyramid() const {
    for (auto l : levels)
      if (l != Level::c5) return true;
    return false;
  }
  int total_stride() const { return 1 << stage_channels.size(); }

  /// Spatial side of a level's map for a square input of side `input`.
  int level_resolution(Level l, int input) const {
    const int s = static_cast<int>(stage_channels.size());
    switch (l) {
      case Level::c5:
      case Level::p5: return input >> s;
      case Level::p4: return input >> (s - 1);
      case Level::p3: return input >> (s - 2);
      case Level::p6: return ((input >> s) + 1) / 2;
    }
    return 0;
  }

  void validate() const {
    if (stage_channels.empty()) throw Error("encoder: at least one stage is required");
    for (int c : stage_channels)
      if (c < 1) throw Error("encoder: stage channels must be positive");
    if (convs_per_stage < 1) throw Error("encoder: convs_per_stage must be >= 1");
    if (proj_hidden < 1 || embed_dim < 1 || inst_hidden < 1 || inst_dim < 1)
      throw Error("encoder: head dimensions must be positive");
    if (ppm_layers < 0) throw Error("encoder: ppm_layers must be >= 0");
    if (!(gamma > 0)) throw Error("encoder: gamma must be positive");
    if (levels.empty()) throw Error("encoder: at least one feature level is required");
    if (uses_pyramid() && stage_channels.size() < 3)
      throw Error("encoder: pyramid levels need at least 3 backbone stages");
  }
};

enum class ParamKind { weight, bias, norm };

template <typename T>
struct Conv {
  Var<T> weight;
  Var<T> bias;  // may be undefined
  std::size_t stride = 1;
  std::size_t pad = 0;

  Var<T> operator()(const Var<T>& x) const {
    auto y = conv2d(x, weight, stride, pad);
    return bias.defined() ? add_channel_bias(y, bias) : y;
  }
};

template <typename T>
struct ConvBn {
  Conv<T> conv;
  BatchNormState<T> bn;
};

template <typename T>
struct Backbone {
  std::vector<std::vector<ConvBn<T>>> stages;
  std::vector<Conv<T>> lateral;  // 1x1 projections of the last three stages, shallow to deep
  std::optional<Conv<T>> p6;
};

template <typename T>
struct ProjectionHead {
  Conv<T> fc1;
  BatchNormState<T> bn;
  Conv<T> fc2;
};

/// g(.) of the propagation module: 1x1 convs with BN+ReLU strictly between them.
template <typename T>
struct PropagationTransform {
  std::vector<Conv<T>> layers;
  std::vector<BatchNormState<T>> norms;
};

/// Online encoder: backbone, pixel projection head, transform g, optional instance head.
/// The momentum copy has the same layout with an empty transform.
template <typename T>
struct EncoderParams {
  Backbone<T> backbone;
  ProjectionHead<T> proj;
  PropagationTransform<T> ppm;
  std::optional<ProjectionHead<T>> inst;
};

namespace detail {

template <typename T>
Var<T> kaiming(Rng& rng, Shape s) {
  const std::size_t fan_in = s[1] * s[2] * s[3];
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * sd);
  return Var<T>::leaf(std::move(t), true);
}

template <typename T>
Conv<T> make_conv(Rng& rng, int in, int out, int k, int stride, bool bias) {
  Conv<T> c;
  c.weight = kaiming<T>(rng, {static_cast<std::size_t>(out), static_cast<std::size_t>(in), static_cast<std::size_t>(k),
                              static_cast<std::size_t>(k)});
  if (bias) c.bias = Var<T>::leaf(Tensor<T>({static_cast<std::size_t>(out)}), true);
  c.stride = static_cast<std::size_t>(stride);
  c.pad = static_cast<std::size_t>(k / 2);
  return c;
}

template <typename T>
BatchNormState<T> make_bn(const EncoderConfig& cfg, int channels) {
  auto bn = BatchNormState<T>::make(static_cast<std::size_t>(channels));
  bn.epsilon = static_cast<T>(cfg.bn_eps);
  bn.momentum = static_cast<T>(cfg.bn_momentum);
  return bn;
}

template <typename T>
ProjectionHead<T> make_head(Rng& rng, const EncoderConfig& cfg, int in, int hidden, int out) {
  return {make_conv<T>(rng, in, hidden, 1, 1, true), make_bn<T>(cfg, hidden), make_conv<T>(rng, hidden, out, 1, 1, true)};
}

}  // namespace detail

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng({seed, 0x656e63ULL});
  EncoderParams<T> p;
  int in = cfg.in_channels;
  for (int c : cfg.stage_channels) {
    std::vector<ConvBn<T>> stage;
    for (int k = 0; k < cfg.convs_per_stage; ++k) {
      stage.push_back({detail::make_conv<T>(rng, k == 0 ? in : c, c, 3, k == 0 ? 2 : 1, false), detail::make_bn<T>(cfg, c)});
    }
    p.backbone.stages.push_back(std::move(stage));
    in = c;
  }
  const int top = cfg.stage_channels.back();
  if (cfg.uses_pyramid()) {
    const std::size_t s = cfg.stage_channels.size();
    for (std::size_t k = s - 3; k < s; ++k)
      p.backbone.lateral.push_back(detail::make_conv<T>(rng, cfg.stage_channels[k], top, 1, 1, true));
    p.backbone.p6 = detail::make_conv<T>(rng, top, top, 3, 2, true);
  }
  p.proj = detail::make_head<T>(rng, cfg, top, cfg.proj_hidden, cfg.embed_dim);
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  for (int k = 0; k < cfg.ppm_layers; ++k) {
    Tensor<T> w({d, d, 1, 1});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) w[i * d + j] = static_cast<T>((i == j ? 1.0 : 0.0) + 0.01 * rng.normal());
    p.ppm.layers.push_back({Var<T>::leaf(std::move(w), true), Var<T>::leaf(Tensor<T>({d}), true), 1, 0});
    if (k + 1 < cfg.ppm_layers) p.ppm.norms.push_back(detail::make_bn<T>(cfg, cfg.embed_dim));
  }
  if (cfg.instance_head) p.inst = detail::make_head<T>(rng, cfg, top, cfg.inst_hidden, cfg.inst_dim);
  return p;
}

/// Visits every learnable tensor with a stable dotted name.
template <typename T, typename F>
void for_each_param(EncoderParams<T>& p, F&& fn) {
  auto conv = [&](const std::string& name, Conv<T>& c) {
    fn(name + ".weight", ParamKind::weight, c.weight);
    if (c.bias.defined()) fn(name + ".bias", ParamKind::bias, c.bias);
  };
  auto bn = [&](const std::string& name, BatchNormState<T>& b) {
    fn(name + ".gamma", ParamKind::norm, b.gamma);
    fn(name + ".beta", ParamKind::norm, b.beta);
  };
  auto head = [&](const std::string& name, ProjectionHead<T>& h) {
    conv(name + ".fc1", h.fc1);
    bn(name + ".bn", h.bn);
    conv(name + ".fc2", h.fc2);
  };
  for (std::size_t s = 0; s < p.backbone.stages.size(); ++s)
    for (std::size_t k = 0; k < p.backbone.stages[s].size(); ++k) {
      const std::string base = "backbone.s" + std::to_string(s) + ".c" + std::to_string(k);
      conv(base, p.backbone.stages[s][k].conv);
      bn(base + ".bn", p.backbone.stages[s][k].bn);
    }
  for (std::size_t k = 0; k < p.backbone.lateral.size(); ++k) conv("backbone.lateral" + std::to_string(k), p.backbone.lateral[k]);
  if (p.backbone.p6) conv("backbone.p6", *p.backbone.p6);
  head("proj", p.proj);
  for (std::size_t k = 0; k < p.ppm.layers.size(); ++k) conv("ppm.g" + std::to_string(k), p.ppm.layers[k]);
  for (std::size_t k = 0; k < p.ppm.norms.size(); ++k) bn("ppm.bn" + std::to_string(k), p.ppm.norms[k]);
  if (p.inst) head("inst", *p.inst);
}

/// Visits every batch-norm layer (for running statistics).
template <typename T, typename F>
void for_each_norm(EncoderParams<T>& p, F&& fn) {
  for (std::size_t s = 0; s < p.backbone.stages.size(); ++s)
    for (std::size_t k = 0; k < p.backbone.stages[s].size(); ++k)
      fn("backbone.s" + std::to_string(s) + ".c" + std::to_string(k) + ".bn", p.backbone.stages[s][k].bn);
  fn("proj.bn", p.proj.bn);
  for (std::size_t k = 0; k < p.ppm.norms.size(); ++k) fn("ppm.bn" + std::to_string(k), p.ppm.norms[k]);
  if (p.inst) fn("inst.bn", p.inst->bn);
}

/// Gradient-free deep copy of the backbone and heads; the transform g is not copied.
template <typename T>
EncoderParams<T> make_momentum_copy(const EncoderParams<T>& online) {
  EncoderParams<T> target = online;
  target.ppm = {};
  // Fresh leaves so the copy shares no storage with the online encoder.
  for_each_param(target, [](const std::string&, ParamKind, Var<T>& v) { v = Var<T>::leaf(v.value(), false); });
  return target;
}

/// Backbone outputs at the configured levels (projection not yet applied), plus the
/// deepest stage map used by the instance branch.
template <typename T>
struct FeatureMapSet {
  std::vector<Level> levels;
  std::vector<Var<T>> maps;
  Var<T> c5;

  const Var<T>& at(Level l) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i] == l) return maps[i];
    throw Error("feature level " + level_name(l) + " not computed");
  }
};

template <typename T>
FeatureMapSet<T> backbone_forward(const Var<T>& images, Backbone<T>& bb, const EncoderConfig& cfg, Mode mode) {
  const auto& s = images.shape();
  const int stride = cfg.total_stride();
  if (s.size() != 4 || s[1] != static_cast<std::size_t>(cfg.in_channels))
    throw Error("backbone_forward: expected [N," + std::to_string(cfg.in_channels) + ",H,W], got " + shape_str(s));
  if (s[2] % static_cast<std::size_t>(stride) != 0 || s[3] % static_cast<std::size_t>(stride) != 0)
    throw Error("backbone_forward: input " + shape_str(s) + " not divisible by total stride " + std::to_string(stride));

  std::vector<Var<T>> stage_out;
  Var<T> x = images;
  for (auto& stage : bb.stages) {
    for (auto& layer : stage) x = relu(batch_norm(layer.conv(x), layer.bn, mode));
    stage_out.push_back(x);
  }
  FeatureMapSet<T> out;
  out.c5 = x;
  std::vector<Var<T>> pyr;  // p3, p4, p5, p6
  if (cfg.uses_pyramid()) {
    const std::size_t n = stage_out.size();
    Var<T> p5 = bb.lateral[2](stage_out[n - 1]);
    Var<T> p4 = add(bb.lateral[1](stage_out[n - 2]), upsample2x(p5));
    Var<T> p3 = add(bb.lateral[0](stage_out[n - 3]), upsample2x(p4));
    pyr = {p3, p4, p5, (*bb.p6)(p5)};
  }
  for (auto l : cfg.levels) {
    out.levels.push_back(l);
    switch (l) {
      case Level::c5: out.maps.push_back(x); break;
      case Level::p3: out.maps.push_back(pyr[0]); break;
      case Level::p4: out.maps.push_back(pyr[1]); break;
      case Level::p5: out.maps.push_back(pyr[2]); break;
      case Level::p6: out.maps.push_back(pyr[3]); break;
    }
  }
  return out;
}

/// Two 1x1 convolutions with BN+ReLU between them; cells never mix.
template <typename T>
Var<T> projection_forward(const Var<T>& feat, ProjectionHead<T>& head, Mode mode) {
  return head.fc2(relu(batch_norm(head.fc1(feat), head.bn, mode)));
}

/// Instance embedding: spatial average of the deepest map through the instance head.
template <typename T>
Var<T> instance_forward(const Var<T>& c5, ProjectionHead<T>& head, Mode mode) {
  const auto pooled = global_avg_pool(c5);
  const std::size_t N = pooled.shape()[0], C = pooled.shape()[1];
  auto z = projection_forward(reshape(pooled, {N, C, 1, 1}), head, mode);
  return reshape(z, {N, z.shape()[1]});
}

/// The transform g applied to a whole [N,d,h,w] map.
template <typename T>
Var<T> transform_forward(const Var<T>& x, PropagationTransform<T>& g, Mode mode) {
  Var<T> y = x;
  for (std::size_t k = 0; k < g.layers.size(); ++k) {
    y = g.layers[k](y);
    if (k + 1 < g.layers.size()) y = relu(batch_norm(y, g.norms[k], mode));
  }
  return y;
}

/// Per-image [h*w, d] propagated cells:
///   y_i = sum_j max(cos(x_i, x_j), 0)^gamma * g(x_j)
/// with no normalization of the weights. With use_ppm=false only g is applied.
template <typename T>
std::vector<Var<T>> ppm_cells(const Var<T>& x, PropagationTransform<T>& g, double gamma, bool use_ppm, Mode mode) {
  const auto gx = transform_forward(x, g, mode);
  std::vector<Var<T>> out;
  for (std::size_t n = 0; n < x.shape()[0]; ++n) {
    auto gn = image_cells(gx, n);
    if (!use_ppm) {
      out.push_back(gn);
      continue;
    }
    auto xn = image_cells(x, n);
    auto s = clamped_power(cosine_similarity_matrix(xn, xn), static_cast<T>(gamma));
    out.push_back(matmul(s, gn));
  }
  return out;
}

template <typename T>
Var<T> ppm_forward(const Var<T>& x, PropagationTransform<T>& g, double gamma, bool use_ppm = true,
                   Mode mode = Mode::train) {
  return cells_to_map(ppm_cells(x, g, gamma, use_ppm, mode), x.shape()[2], x.shape()[3]);
}

/// Scalar similarity of two vectors: max(cos, 0)^gamma.
template <typename T>
Var<T> similarity(const Var<T>& a, const Var<T>& b, T gamma) {
  const auto d = a.value().numel();
  return reshape(clamped_power(cosine_similarity_matrix(reshape(a, {1, d}), reshape(b, {1, d})), gamma), {1});
}

/// target <- m * target + (1 - m) * online over backbone and heads. The transform g has
/// no momentum copy.
template <typename T>
void momentum_update(EncoderParams<T>& online, EncoderParams<T>& target, double m) {
  if (!(m >= 0 && m <= 1)) throw Error("momentum_update: m must lie in [0,1]");
  std::vector<std::pair<std::string, Var<T>>> src;
  for_each_param(online, [&](const std::string& name, ParamKind, Var<T>& v) {
    if (name.rfind("ppm.", 0) != 0) src.emplace_back(name, v);
  });
  std::size_t k = 0;
  const T mm = static_cast<T>(m), om = static_cast<T>(1 - m);
  for_each_param(target, [&](const std::string& name, ParamKind, Var<T>& v) {
    if (k >= src.size() || src[k].first != name || src[k].second.shape() != v.shape())
      throw Error("momentum_update: parameter layout mismatch at '" + name + "'");
    auto& dst = v.mutable_value();
    const auto& from = src[k].second.value();
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = mm * dst[i] + om * from[i];
    ++k;
  });
  if (k != src.size()) throw Error("momentum_update: target is missing parameters");
}

/// Cosine ramp from m_base at step 0 to 1 at total_steps.
inline double momentum_schedule(long step, long total_steps, double m_base) {
  if (step < 0 || step > total_steps) throw Error("momentum_schedule: step out of range");
  if (total_steps == 0) return 1.0;
  return 1.0 - (1.0 - m_base) * (std::cos(std::numbers::pi * static_cast<double>(step) / total_steps) + 1.0) / 2.0;
}

}  // namespace pixpro
