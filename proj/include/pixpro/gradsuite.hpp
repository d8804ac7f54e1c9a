#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pixpro/encoder.hpp"
#include "pixpro/gradcheck.hpp"
#include "pixpro/objectives.hpp"

namespace pixpro {

struct GradSuiteCase {
  std::string name;
  int instances = 0;
  double max_rel_error = 0;
  int worst_instance = -1;
  bool passed = false;
};

namespace detail {

inline Tensor<double> randn(Rng& rng, Shape s, double sd = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.normal() * sd;
  return t;
}

// Reduces a tensor-valued op to a scalar with fixed random weights.
inline Var<double> contract(const Var<double>& out, const Tensor<double>& w) {
  return sum(mul(out, Var<double>::leaf(w, false)));
}

struct Instance {
  std::vector<Tensor<double>> point;
  GradFn f;
};

inline AssignmentMatrix random_assignment(Rng& rng, int f) {
  AugmentConfig aug;
  aug.out_res = 8;
  aug.scale_min = 0.3;
  for (;;) {
    auto a = sample_crop(24, 24, aug, rng), b = sample_crop(24, 24, aug, rng);
    a.flip = rng.bernoulli(0.5);
    b.flip = rng.bernoulli(0.5);
    if (!overlap_check(a, b)) continue;
    auto m = assign_views(a, b, f, 0.7, DiagonalRule::max);
    if (m.positives.count() > 0) return m;
  }
}

inline std::vector<CellPair<double>> cell_pairs(const std::vector<Var<double>>& p, std::size_t images,
                                                const std::vector<AssignmentMatrix>& assign) {
  std::vector<CellPair<double>> out;
  for (std::size_t i = 0; i < images; ++i)
    out.push_back({p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3], assign[i]});
  return out;
}

inline Instance make_instance(const std::string& name, Rng& rng) {
  Instance in;
  if (name == "conv2d") {
    const std::size_t stride = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1)), pad = static_cast<std::size_t>(rng.uniform_int(0, 1));
    const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
    in.point = {randn(rng, {2, 2, 5, 5}), randn(rng, {3, 2, k, k})};
    const std::size_t out = (5 + 2 * pad - k) / stride + 1;
    const auto w = randn(rng, {2, 3, out, out});
    in.f = [=](const std::vector<Var<double>>& p) { return contract(conv2d(p[0], p[1], stride, pad), w); };
  } else if (name == "batch_norm") {
    const bool flat = rng.bernoulli(0.3);
    const Shape s = flat ? Shape{6, 3} : Shape{4, 3, 2, 2};
    in.point = {randn(rng, s), randn(rng, {3}), randn(rng, {3})};
    const auto w = randn(rng, s);
    in.f = [=](const std::vector<Var<double>>& p) {
      auto st = BatchNormState<double>::make(3);
      st.gamma = p[1];
      st.beta = p[2];
      return contract(batch_norm(p[0], st, Mode::train), w);
    };
  } else if (name == "cosine_similarity") {
    in.point = {randn(rng, {4, 5}), randn(rng, {3, 5})};
    const auto w = randn(rng, {4, 3});
    in.f = [=](const std::vector<Var<double>>& p) { return contract(cosine_similarity_matrix(p[0], p[1]), w); };
  } else if (name == "similarity") {
    const double gammas[] = {0.5, 1, 2, 4, 8};
    const double g = gammas[rng.uniform_int(0, 4)];
    // Positive cosine keeps the instance away from the clamp at zero.
    for (;;) {
      in.point = {randn(rng, {6}), randn(rng, {6})};
      double dot = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < 6; ++i) {
        dot += in.point[0][i] * in.point[1][i];
        na += in.point[0][i] * in.point[0][i];
        nb += in.point[1][i] * in.point[1][i];
      }
      if (dot / std::sqrt(na * nb) > 0.1) break;
    }
    in.f = [=](const std::vector<Var<double>>& p) { return sum(similarity(p[0], p[1], g)); };
  } else if (name == "ppm_forward") {
    const int l = static_cast<int>(rng.uniform_int(0, 2));
    const double gammas[] = {1, 2, 4};
    const double g = gammas[rng.uniform_int(0, 2)];
    const std::size_t d = 4;
    // Redrawn until no cosine sits on the clamp at zero and no ReLU input sits at zero,
    // where the map has kinks. A bias feeding batch norm has an identically zero
    // gradient, so it is held fixed.
    std::vector<Tensor<double>> fixed_bias;
    for (bool near_kink = true; near_kink;) {
      in.point = {randn(rng, {2, d, 3, 3})};
      fixed_bias.clear();
      for (int k = 0; k < l; ++k) {
        in.point.push_back(randn(rng, {d, d, 1, 1}, 0.5));
        if (k + 1 < l) fixed_bias.push_back(randn(rng, {d}, 0.1));
        else in.point.push_back(randn(rng, {d}, 0.1));
      }
      near_kink = false;
      const auto& x = in.point[0];
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 9; ++i)
          for (std::size_t j = 0; j < 9; ++j) {
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const double a = x[(n * d + c) * 9 + i], b = x[(n * d + c) * 9 + j];
              dot += a * b;
              ni += a * a;
              nj += b * b;
            }
            if (std::abs(dot) < 0.01 * std::sqrt(ni * nj)) near_kink = true;
          }
      if (l == 2) {
        auto bn = BatchNormState<double>::make(d);
        const auto pre = batch_norm(add_channel_bias(conv2d(Var<double>::leaf(x, false), Var<double>::leaf(in.point[1], false), 1, 0),
                                                     Var<double>::leaf(fixed_bias[0], false)),
                                    bn, Mode::train);
        for (double v : pre.value().data())
          if (std::abs(v) < 1e-3) near_kink = true;
      }
    }
    const auto w = randn(rng, {2, d, 3, 3});
    in.f = [=](const std::vector<Var<double>>& p) {
      PropagationTransform<double> t;
      std::size_t next = 1;
      for (int k = 0; k < l; ++k) {
        Conv<double> c;
        c.weight = p[next++];
        c.bias = k + 1 < l ? Var<double>::leaf(fixed_bias[static_cast<std::size_t>(k)], false) : p[next++];
        t.layers.push_back(c);
        if (k + 1 < l) t.norms.push_back(BatchNormState<double>::make(d));
      }
      return contract(ppm_forward(p[0], t, g), w);
    };
  } else if (name == "pix_contrast_loss" || name == "pixpro_loss" || name == "combined_loss") {
    const std::size_t images = 2, f = 3, d = 4;
    std::vector<AssignmentMatrix> assign;
    for (std::size_t i = 0; i < images; ++i) {
      assign.push_back(random_assignment(rng, static_cast<int>(f)));
      for (int k = 0; k < 4; ++k) in.point.push_back(randn(rng, {f * f, d}));
    }
    const double tau = rng.uniform(0.2, 1.0), alpha = rng.uniform(0.1, 2.0);
    if (name == "combined_loss")
      for (int k = 0; k < 4; ++k) in.point.push_back(randn(rng, {3, d}));
    in.f = [=](const std::vector<Var<double>>& p) {
      const auto cells = cell_pairs(p, images, assign);
      if (name == "pix_contrast_loss") return pix_contrast_loss(cells, tau)->value;
      if (name == "pixpro_loss") return pixpro_loss(cells)->value;
      const auto base = 4 * images;
      const auto inst = instance_loss(p[base], p[base + 1], p[base + 2], p[base + 3], tau);
      return combined_loss(pixpro_loss(cells)->value, inst, alpha);
    };
  } else if (name == "instance_loss") {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    for (int k = 0; k < 4; ++k) in.point.push_back(randn(rng, {n, 5}));
    const double tau = rng.uniform(0.2, 1.0);
    in.f = [=](const std::vector<Var<double>>& p) { return instance_loss(p[0], p[1], p[2], p[3], tau); };
  } else {
    throw Error("gradcheck: unknown case '" + name + "'");
  }
  return in;
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_case_names() {
  static const std::vector<std::string> names = {"conv2d",      "batch_norm",        "cosine_similarity",
                                                 "similarity",  "ppm_forward",       "pix_contrast_loss",
                                                 "pixpro_loss", "instance_loss",     "combined_loss"};
  return names;
}

/// Central-difference check of every differentiable building block on `instances`
/// random toy problems each, in double precision. Entries below `floor` in magnitude are
/// compared in absolute terms, since their central differences are mostly round-off.
inline std::vector<GradSuiteCase> run_gradcheck_suite(std::uint64_t seed, int instances = 20, double tol = 1e-4,
                                                      double floor = 1e-6) {
  std::vector<GradSuiteCase> out;
  for (std::size_t c = 0; c < gradcheck_case_names().size(); ++c) {
    const auto& name = gradcheck_case_names()[c];
    GradSuiteCase r;
    r.name = name;
    for (int i = 0; i < instances; ++i) {
      Rng rng({seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)});
      const auto inst = detail::make_instance(name, rng);
      const auto res = finite_diff_check(inst.f, inst.point, 1e-5, floor);
      if (r.worst_instance < 0 || res.max_rel_error > r.max_rel_error) {
        r.max_rel_error = res.max_rel_error;
        r.worst_instance = i;
      }
      ++r.instances;
    }
    r.passed = r.max_rel_error <= tol;
    out.push_back(r);
  }
  return out;
}

}  // namespace pixpro
