#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "pixpro/encoder.hpp"

namespace pixpro {

/// Linear warmup to lr_effective over warmup_steps, then half-cosine decay to zero at
/// total_steps.
inline double cosine_lr(long step, long total_steps, double lr_effective, long warmup_steps) {
  if (step < 0 || step > total_steps) throw Error("cosine_lr: step out of range");
  if (step < warmup_steps) return lr_effective * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return lr_effective;
  const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return lr_effective * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct LarsConfig {
  double weight_decay = 1e-5;
  double trust_coeff = 0.001;
  double momentum = 0.9;
  double eps = 1e-9;
};

template <typename T>
struct ParamRef {
  std::string name;
  ParamKind kind;
  Var<T> var;
};

template <typename T>
std::vector<ParamRef<T>> param_refs(EncoderParams<T>& p) {
  std::vector<ParamRef<T>> out;
  for_each_param(p, [&](const std::string& name, ParamKind k, Var<T>& v) { out.push_back({name, k, v}); });
  return out;
}

/// Heavy-ball velocity per parameter, keyed by name.
template <typename T>
struct LarsState {
  std::map<std::string, Tensor<T>> velocity;
};

/// Layer-wise trust ratio: trust * |w| / (|g| + wd |w| + eps) when both norms are
/// positive, else 1.
inline double lars_local_lr(double w_norm, double g_norm, double weight_decay, double trust, double eps) {
  if (w_norm > 0 && g_norm > 0) return trust * w_norm / (g_norm + weight_decay * w_norm + eps);
  return 1.0;
}

/// One LARS update using each parameter's accumulated gradient. Biases and
/// normalization parameters get neither weight decay nor trust adaptation.
/// Returns the local learning rate used per parameter.
template <typename T>
std::map<std::string, double> lars_step(const std::vector<ParamRef<T>>& params, LarsState<T>& state, double lr,
                                        const LarsConfig& cfg) {
  for (const auto& p : params)
    if (p.var.has_grad() && !p.var.grad().all_finite())
      throw NumericError("lars_step: non-finite gradient in parameter '" + p.name + "'");

  std::map<std::string, double> local;
  for (const auto& p : params) {
    Var<T> v = p.var;
    // Parameters the loss never reached are left alone, momentum included.
    if (!v.has_grad()) continue;
    auto& w = v.mutable_value();
    const bool adapt = p.kind == ParamKind::weight;
    const double wd = adapt ? cfg.weight_decay : 0.0;
    double wn = 0, gn = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      wn += static_cast<double>(w[i]) * w[i];
      gn += static_cast<double>(v.grad()[i]) * v.grad()[i];
    }
    wn = std::sqrt(wn);
    gn = std::sqrt(gn);
    const double llr = adapt ? lars_local_lr(wn, gn, wd, cfg.trust_coeff, cfg.eps) : 1.0;
    local[p.name] = llr;

    auto [it, fresh] = state.velocity.try_emplace(p.name, Tensor<T>(w.shape()));
    auto& vel = it->second;
    if (vel.shape() != w.shape()) throw Error("lars_step: velocity shape mismatch for '" + p.name + "'");
    const T scale = static_cast<T>(lr * llr), mom = static_cast<T>(cfg.momentum), twd = static_cast<T>(wd);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const T g = v.grad()[i] + twd * w[i];
      vel[i] = mom * vel[i] + scale * g;
      w[i] -= vel[i];
    }
  }
  return local;
}

}  // namespace pixpro
