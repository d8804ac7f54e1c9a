#pragma once

#include <optional>
#include <vector>

#include "pixpro/ops.hpp"
#include "pixpro/viewgen.hpp"

namespace pixpro {

/// Cells of one image at one level: online and momentum features of both views, plus
/// the view-A-to-view-B assignment. Cell matrices are [cells, d].
template <typename T>
struct CellPair {
  Var<T> online_a;
  Var<T> online_b;
  Var<T> target_a;
  Var<T> target_b;
  AssignmentMatrix assign;
};

/// A differentiable loss term with the number of positive pairs that fed it.
/// An absent term is the skip signal.
template <typename T>
struct LossTerm {
  Var<T> value;
  std::size_t pairs = 0;
};

/// Contrastive pixel loss. For each cell i of view A with at least one positive,
///   -log( sum_{j in pos(i)} e^{cos(x_i, x'_j)/tau} / sum_{all j} e^{cos(x_i, x'_j)/tau} )
/// averaged over those cells; the same from view B against momentum view A; the two
/// directions averaged, then the images. Images without positives contribute nothing.
template <typename T>
std::optional<LossTerm<T>> pix_contrast_loss(const std::vector<CellPair<T>>& images, double tau) {
  if (!(tau > 0)) throw Error("pix_contrast_loss: tau must be positive");
  const T inv = static_cast<T>(1.0 / tau);
  std::vector<Var<T>> per_image;
  std::size_t pairs = 0;
  for (const auto& im : images) {
    const std::size_t cnt = im.assign.positives.count();
    if (cnt == 0) continue;
    auto la = positive_set_nll(scale(cosine_similarity_matrix(im.online_a, im.target_b), inv), im.assign.positives);
    auto lb = positive_set_nll(scale(cosine_similarity_matrix(im.online_b, im.target_a), inv),
                               im.assign.positives.transposed());
    per_image.push_back(mean_of<T>({la, lb}));
    pairs += cnt;
  }
  if (per_image.empty()) return std::nullopt;
  return LossTerm<T>{mean_of(per_image), pairs};
}

/// Consistency loss -cos(y_i, x'_j) - cos(y_j, x'_i) averaged over the positive pairs of
/// each image, then over images. The online features are the propagated ones.
template <typename T>
std::optional<LossTerm<T>> pixpro_loss(const std::vector<CellPair<T>>& images) {
  std::vector<Var<T>> per_image;
  std::size_t pairs = 0;
  for (const auto& im : images) {
    const std::size_t cnt = im.assign.positives.count();
    if (cnt == 0) continue;
    auto ab = masked_mean(cosine_similarity_matrix(im.online_a, im.target_b), im.assign.positives);
    auto ba = masked_mean(cosine_similarity_matrix(im.online_b, im.target_a), im.assign.positives.transposed());
    per_image.push_back(scale(add(ab, ba), T(-1)));
    pairs += cnt;
  }
  if (per_image.empty()) return std::nullopt;
  return LossTerm<T>{mean_of(per_image), pairs};
}

/// InfoNCE over a batch of global embeddings [N, d]: image i's positive is its own other
/// view in the momentum branch, every other image's momentum embedding is a negative.
/// Averaged over both view directions.
template <typename T>
Var<T> instance_loss(const Var<T>& online_a, const Var<T>& target_b, const Var<T>& online_b, const Var<T>& target_a,
                     double tau) {
  if (!(tau > 0)) throw Error("instance_loss: tau must be positive");
  const std::size_t n = online_a.shape()[0];
  if (n < 2) throw Error("instance_loss: batch of " + std::to_string(n) + " has no negatives");
  const T inv = static_cast<T>(1.0 / tau);
  const auto eye = Mask::identity(n);
  auto la = positive_set_nll(scale(cosine_similarity_matrix(online_a, target_b), inv), eye);
  auto lb = positive_set_nll(scale(cosine_similarity_matrix(online_b, target_a), inv), eye);
  return mean_of<T>({la, lb});
}

/// One direction only, as written for a single pair of embedding sets.
template <typename T>
Var<T> instance_loss(const Var<T>& online, const Var<T>& target, double tau) {
  if (!(tau > 0)) throw Error("instance_loss: tau must be positive");
  const std::size_t n = online.shape()[0];
  if (n < 2) throw Error("instance_loss: batch of " + std::to_string(n) + " has no negatives");
  return positive_set_nll(scale(cosine_similarity_matrix(online, target), static_cast<T>(1.0 / tau)),
                          Mask::identity(n));
}

/// Mean over levels of the per-level loss; levels that were skipped are left out.
template <typename T>
std::optional<LossTerm<T>> multiscale_loss(const std::vector<std::optional<LossTerm<T>>>& levels) {
  std::vector<Var<T>> vals;
  std::size_t pairs = 0;
  for (const auto& l : levels)
    if (l) {
      vals.push_back(l->value);
      pairs += l->pairs;
    }
  if (vals.empty()) return std::nullopt;
  return LossTerm<T>{mean_of(vals), pairs};
}

struct LossBreakdown {
  double total = 0;
  double pix_component = 0;
  double instance_component = 0;
  std::size_t pairs_used = 0;
  std::size_t pairs_skipped = 0;
  bool skipped = false;
};

/// total = pix + alpha * inst.
template <typename T>
Var<T> combined_loss(const Var<T>& pix, const Var<T>& inst, double alpha) {
  if (!(alpha >= 0)) throw Error("combined_loss: alpha must be nonnegative");
  return add(pix, scale(inst, static_cast<T>(alpha)));
}

inline LossBreakdown combined_loss(double pix, double inst, double alpha) {
  if (!(alpha >= 0)) throw Error("combined_loss: alpha must be nonnegative");
  LossBreakdown b;
  b.pix_component = pix;
  b.instance_component = inst;
  b.total = pix + alpha * inst;
  return b;
}

}  // namespace pixpro
