#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "pixpro/trainer.hpp"

namespace pixpro {

namespace detail {

// Forward in eval mode over chunks; `fn` receives the chunk offset, the first level's map
// before and after the projection head, and the pooled deepest map.
template <typename T, typename F>
void encode_chunks(EncoderParams<T>& enc, const EncoderConfig& cfg, const std::vector<Tensor<T>>& imgs, F&& fn,
                   std::size_t chunk = 64) {
  for (std::size_t b = 0; b < imgs.size(); b += chunk) {
    const std::size_t e = std::min(imgs.size(), b + chunk);
    std::vector<Tensor<T>> part(imgs.begin() + static_cast<std::ptrdiff_t>(b), imgs.begin() + static_cast<std::ptrdiff_t>(e));
    auto feats = backbone_forward(stack_views(part), enc.backbone, cfg, Mode::eval);
    auto proj = projection_forward(feats.maps.front(), enc.proj, Mode::eval);
    fn(b, feats.maps.front(), proj, global_avg_pool(feats.c5));
  }
}

}  // namespace detail

/// Embedding statistics over every cell of every image, encoder in eval mode.
template <typename T>
CollapseReport collapse_diagnostic(EncoderParams<T>& enc, const EncoderConfig& cfg, const std::vector<Tensor<T>>& images,
                                   double threshold = 0.01) {
  if (images.size() < 32)
    throw Error("collapse_diagnostic: needs at least 32 images, got " + std::to_string(images.size()));
  std::vector<Tensor<T>> cells;
  detail::encode_chunks(enc, cfg, images, [&](std::size_t, const Var<T>&, const Var<T>& proj, const Var<T>&) {
    for (std::size_t n = 0; n < proj.shape()[0]; ++n) cells.push_back(image_cells(proj, n).value());
  });
  return collapse_report(cells, threshold);
}

struct ProbeConfig {
  int epochs = 100;
  double lr = 0.1;
  double momentum = 0.9;
  std::size_t batch = 64;
  double train_frac = 0.8;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t n_classes = 0;
};

/// Softmax regression on fixed features [N, C] with integer labels. Features are
/// standardized with train-split statistics; minibatch gradient descent with momentum
/// and a cosine learning rate.
inline ProbeResult linear_probe_features(const Eigen::MatrixXd& feats, const std::vector<int>& labels,
                                         const ProbeConfig& pc) {
  const auto N = static_cast<std::size_t>(feats.rows());
  if (N != labels.size()) throw Error("linear_probe: feature and label counts differ");
  if (N < 2) throw Error("linear_probe: need at least 2 labeled images");
  for (int l : labels)
    if (l < 0) throw Error("linear_probe: dataset has unlabeled images");
  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng({pc.seed, 0x70726f6265ULL});
  for (std::size_t i = N - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::round(pc.train_frac * N)), 1, N - 1);
  std::vector<std::size_t> tr(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train)),
      te(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());

  std::set<int> train_classes, all_classes(labels.begin(), labels.end());
  for (auto i : tr) train_classes.insert(labels[i]);
  for (int c : all_classes)
    if (!train_classes.count(c)) throw Error("linear_probe: class " + std::to_string(c) + " absent from train split");
  std::map<int, int> cls_index;
  for (int c : all_classes) cls_index.emplace(c, static_cast<int>(cls_index.size()));
  const auto K = static_cast<Eigen::Index>(all_classes.size());
  const auto D = feats.cols();

  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(D), sd = Eigen::RowVectorXd::Zero(D);
  for (auto i : tr) mu += feats.row(static_cast<Eigen::Index>(i));
  mu /= static_cast<double>(tr.size());
  for (auto i : tr) sd += (feats.row(static_cast<Eigen::Index>(i)) - mu).array().square().matrix();
  sd = (sd / static_cast<double>(tr.size())).array().sqrt().max(1e-8).matrix();
  auto standardized = [&](std::size_t i) -> Eigen::RowVectorXd {
    return (feats.row(static_cast<Eigen::Index>(i)) - mu).array() / sd.array();
  };

  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(D, K), VW = W;
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(K), Vb = b;
  const std::size_t per_epoch = (tr.size() + pc.batch - 1) / pc.batch;
  const std::size_t total = per_epoch * static_cast<std::size_t>(pc.epochs);
  std::size_t it = 0;
  for (int ep = 0; ep < pc.epochs; ++ep) {
    for (std::size_t i = tr.size() - 1; i > 0; --i)
      std::swap(tr[i], tr[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    for (std::size_t s = 0; s < tr.size(); s += pc.batch, ++it) {
      const std::size_t e = std::min(tr.size(), s + pc.batch);
      const auto B = static_cast<Eigen::Index>(e - s);
      Eigen::MatrixXd X(B, D);
      for (Eigen::Index r = 0; r < B; ++r) X.row(r) = standardized(tr[s + static_cast<std::size_t>(r)]);
      Eigen::MatrixXd Z = (X * W).rowwise() + b;
      Z = (Z.colwise() - Z.rowwise().maxCoeff()).array().exp().matrix();
      Z.array().colwise() /= Z.rowwise().sum().array();
      for (Eigen::Index r = 0; r < B; ++r) Z(r, cls_index.at(labels[tr[s + static_cast<std::size_t>(r)]])) -= 1.0;
      Z /= static_cast<double>(B);
      const double lr = pc.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / static_cast<double>(total)));
      VW = pc.momentum * VW + lr * (X.transpose() * Z);
      Vb = pc.momentum * Vb + lr * Z.colwise().sum();
      W -= VW;
      b -= Vb;
    }
  }
  std::size_t correct = 0;
  for (auto i : te) {
    Eigen::RowVectorXd z = standardized(i) * W + b;
    Eigen::Index arg = 0;
    z.maxCoeff(&arg);
    if (arg == cls_index.at(labels[i])) ++correct;
  }
  return {static_cast<double>(correct) / static_cast<double>(te.size()), tr.size(), te.size(),
          static_cast<std::size_t>(K)};
}

/// Spatially averaged deepest-stage features of every image, BN in eval mode.
template <typename T>
Eigen::MatrixXd pooled_features(EncoderParams<T>& enc, const EncoderConfig& cfg, const std::vector<Tensor<T>>& images) {
  Eigen::MatrixXd F;
  detail::encode_chunks(enc, cfg, images, [&](std::size_t off, const Var<T>&, const Var<T>&, const Var<T>& pooled) {
    const auto& v = pooled.value();
    const std::size_t n = v.dim(0), c = v.dim(1);
    if (F.size() == 0) F.resize(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(c));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k)
        F(static_cast<Eigen::Index>(off + i), static_cast<Eigen::Index>(k)) = static_cast<double>(v[i * c + k]);
  });
  return F;
}

/// Trains a linear classifier on frozen pooled features and reports held-out top-1.
template <typename T>
ProbeResult linear_probe(EncoderParams<T>& enc, const EncoderConfig& cfg, const std::vector<Tensor<T>>& images,
                         const std::vector<int>& labels, const ProbeConfig& pc) {
  return linear_probe_features(pooled_features(enc, cfg, images), labels, pc);
}

struct CorrespondenceConfig {
  int n_pairs = 256;
  std::uint64_t seed = 0;
  double threshold = 0.7;
  DiagonalRule rule = DiagonalRule::max;
  int max_retries = 10;
  bool identical_views = false;
  bool photometric = false;  // distort views as in training
  bool backbone_features = false;  // retrieve on the backbone map instead of the projection
};

struct CorrespondenceResult {
  double accuracy = 0;
  double chance = 0;  // mean over evaluated cells of |positives| / cells in view B
  std::size_t cells = 0;
  std::size_t pairs = 0;
};

/// View pairs for retrieval, optionally photometrically distorted like training views.
/// Each pair is redrawn until the crops overlap with at least one positive cell.
template <typename T>
std::vector<std::pair<View<T>, View<T>>> sample_eval_pairs(const std::vector<Tensor<T>>& images, const AugmentConfig& aug,
                                                           int feat_res, const CorrespondenceConfig& cc) {
  if (images.empty()) throw Error("correspondence_eval: no images");
  std::vector<std::pair<View<T>, View<T>>> out;
  for (int p = 0; p < cc.n_pairs; ++p) {
    const auto& img = images[static_cast<std::size_t>(p) % images.size()];
    if (img.dim(1) < static_cast<std::size_t>(aug.min_image_side) || img.dim(2) < static_cast<std::size_t>(aug.min_image_side))
      throw Error("correspondence_eval: image " + shape_str(img.shape()) + " too small for two crops");
    Rng rng({cc.seed, static_cast<std::uint64_t>(p), 0x636f7272ULL});
    bool ok = false;
    for (int t = 0; t <= cc.max_retries && !ok; ++t) {
      auto pair = sample_view_pair(img, aug, rng);
      if (cc.identical_views) pair.second = pair.first;
      if (!overlap_check(pair.first.rec, pair.second.rec)) continue;
      if (assign_views(pair.first.rec, pair.second.rec, feat_res, cc.threshold, cc.rule).positives.count() == 0) continue;
      if (cc.photometric && !cc.identical_views) {
        pair.first.pixels = apply_photometric(std::move(pair.first.pixels), rng, aug.photometric[0]);
        pair.second.pixels = apply_photometric(std::move(pair.second.pixels), rng, aug.photometric[1]);
      }
      out.push_back(std::move(pair));
      ok = true;
    }
    if (!ok)
      throw Error("correspondence_eval: no overlapping pair for sample " + std::to_string(p) + " after " +
                  std::to_string(cc.max_retries + 1) + " tries");
  }
  return out;
}

/// Argmax-cosine retrieval from cells of view A to cells of view B on projection
/// embeddings, scored against the geometric assignment.
template <typename T>
CorrespondenceResult correspondence_from_embeddings(const std::vector<Tensor<T>>& cells_a,
                                                    const std::vector<Tensor<T>>& cells_b,
                                                    const std::vector<AssignmentMatrix>& assign) {
  CorrespondenceResult r;
  double chance = 0;
  std::size_t correct = 0;
  for (std::size_t p = 0; p < assign.size(); ++p) {
    const auto& A = cells_a[p];
    const auto& B = cells_b[p];
    const auto& P = assign[p].positives;
    const std::size_t na = A.dim(0), nb = B.dim(0), d = A.dim(1);
    auto norm = [&](const Tensor<T>& M, std::size_t i) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(M[i * d + c]) * M[i * d + c];
      return std::max(std::sqrt(s), kCosineEps);
    };
    std::vector<double> nbv(nb);
    for (std::size_t j = 0; j < nb; ++j) nbv[j] = norm(B, j);
    for (std::size_t i = 0; i < na; ++i) {
      const std::size_t k = P.row_count(i);
      if (k == 0) continue;
      const double ni = norm(A, i);
      std::size_t best = 0;
      double best_cos = -2;
      for (std::size_t j = 0; j < nb; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(A[i * d + c]) * B[j * d + c];
        const double cs = dot / (ni * nbv[j]);
        if (cs > best_cos) {
          best_cos = cs;
          best = j;
        }
      }
      if (P(i, best)) ++correct;
      chance += static_cast<double>(k) / static_cast<double>(nb);
      ++r.cells;
    }
  }
  r.pairs = assign.size();
  if (r.cells == 0) throw Error("correspondence_eval: no cell has a positive");
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.cells);
  r.chance = chance / static_cast<double>(r.cells);
  return r;
}

template <typename T>
CorrespondenceResult correspondence_eval(EncoderParams<T>& enc, const EncoderConfig& cfg, const AugmentConfig& aug,
                                         const std::vector<Tensor<T>>& images, const CorrespondenceConfig& cc) {
  const int f = cfg.level_resolution(cfg.levels.front(), aug.out_res);
  const auto pairs = sample_eval_pairs(images, aug, f, cc);
  std::vector<Tensor<T>> va, vb, ca, cb;
  std::vector<AssignmentMatrix> assign;
  for (const auto& [a, b] : pairs) {
    va.push_back(a.pixels);
    vb.push_back(b.pixels);
    assign.push_back(assign_views(a.rec, b.rec, f, cc.threshold, cc.rule));
  }
  auto collect = [&](const std::vector<Tensor<T>>& views, std::vector<Tensor<T>>& out) {
    detail::encode_chunks(enc, cfg, views, [&](std::size_t, const Var<T>& map, const Var<T>& proj, const Var<T>&) {
      const auto& src = cc.backbone_features ? map : proj;
      for (std::size_t n = 0; n < src.shape()[0]; ++n) out.push_back(image_cells(src, n).value());
    });
  };
  collect(va, ca);
  collect(vb, cb);
  return correspondence_from_embeddings(ca, cb, assign);
}

/// One evaluation number with what produced it.
struct EvalReport {
  std::string metric;
  double value = 0;
  std::string config_digest;
  std::string checkpoint_digest;
  std::vector<std::uint64_t> seeds;

  nlohmann::ordered_json to_json() const {
    return {{"metric", metric}, {"value", value}, {"config_digest", config_digest},
            {"checkpoint_digest", checkpoint_digest}, {"seeds", seeds}};
  }
  static EvalReport from_json(const nlohmann::json& j) {
    return {j.at("metric").get<std::string>(), j.at("value").get<double>(), j.at("config_digest").get<std::string>(),
            j.at("checkpoint_digest").get<std::string>(), j.at("seeds").get<std::vector<std::uint64_t>>()};
  }
};

/// Both probes and the collapse statistic for one checkpoint.
struct EvalSettings {
  ProbeConfig probe;
  CorrespondenceConfig corr;
};

template <typename T = float>
std::vector<EvalReport> evaluate_checkpoint(const std::filesystem::path& ckpt, const Dataset& data, const EvalSettings& es) {
  auto s = load_checkpoint<T>(ckpt);
  const auto enc = s.cfg.encoder();
  std::vector<Tensor<T>> imgs;
  for (const auto& im : data.images) imgs.push_back(im.template cast<T>());
  const auto cdig = s.cfg.digest(), kdig = file_digest(ckpt);
  const auto dseed = static_cast<std::uint64_t>(s.cfg.seed);
  std::vector<EvalReport> out;
  const auto probe = linear_probe(s.online, enc, imgs, data.labels, es.probe);
  out.push_back({"linear_probe_top1", probe.accuracy, cdig, kdig, {dseed, es.probe.seed}});
  auto cc = es.corr;
  cc.threshold = s.cfg.threshold;
  cc.rule = s.cfg.diagonal_rule();
  const auto corr = correspondence_eval(s.online, enc, s.cfg.augment(), imgs, cc);
  out.push_back({"correspondence_accuracy", corr.accuracy, cdig, kdig, {dseed, cc.seed}});
  out.push_back({"correspondence_chance", corr.chance, cdig, kdig, {dseed, cc.seed}});
  if (imgs.size() >= 32) {
    const auto col = collapse_diagnostic(s.online, enc, imgs, s.cfg.collapse_threshold);
    out.push_back({"embed_std_mean", col.mean_std, cdig, kdig, {dseed}});
  }
  return out;
}

/// Cartesian product of `axes` applied to `base`, in axis order.
inline std::vector<TrainRunConfig> expand_grid(const TrainRunConfig& base,
                                               const std::vector<std::pair<std::string, std::vector<std::string>>>& axes) {
  std::vector<TrainRunConfig> out = {base};
  for (const auto& [key, values] : axes) {
    if (values.empty()) throw Error("grid axis '" + key + "' has no values");
    std::vector<TrainRunConfig> next;
    for (const auto& c : out)
      for (const auto& v : values) {
        auto d = c;
        d.set(key, v);
        next.push_back(d);
      }
    out = std::move(next);
  }
  for (const auto& c : out) c.validate();
  return out;
}

struct AblationRow {
  std::string cell;  // config digest
  TrainRunConfig cfg;
  bool ok = false;
  bool cached = false;
  std::string error;
  std::vector<EvalReport> reports;
};

/// Pretrain plus evaluation per config, each in out_dir/<config digest>/. Completed
/// cells (with a report.json) are reused; a failing cell is recorded and the grid goes
/// on. Writes the merged table as table.jsonl and table.txt, sorted by config text.
template <typename T = float>
std::vector<AblationRow> run_ablation(const std::vector<TrainRunConfig>& grid, const Dataset& data,
                                      const std::filesystem::path& out_dir, const EvalSettings& es) {
  for (const auto& c : grid) c.validate();
  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (const auto& cfg : grid) {
    AblationRow row;
    row.cfg = cfg;
    row.cell = cfg.digest();
    const auto dir = out_dir / row.cell;
    const auto report = dir / "report.json";
    try {
      if (std::filesystem::exists(report)) {
        std::ifstream in(report);
        const auto j = nlohmann::json::parse(in);
        for (const auto& r : j.at("reports")) row.reports.push_back(EvalReport::from_json(r));
        row.cached = true;
      } else {
        std::filesystem::create_directories(dir);
        { std::ofstream(dir / "config.cfg") << cfg.serialize(); }
        RunOptions ro;
        ro.out_dir = dir;
        ro.resume = true;
        const auto res = run_pretrain<T>(cfg, data, ro);
        row.reports = evaluate_checkpoint<T>(res.checkpoint, data, es);
        nlohmann::ordered_json j;
        j["cell"] = row.cell;
        j["reports"] = nlohmann::json::array();
        for (const auto& r : row.reports) j["reports"].push_back(r.to_json());
        std::ofstream(dir / "report.json.tmp") << j.dump(2) << '\n';
        std::filesystem::rename(dir / "report.json.tmp", report);
      }
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    return a.cfg.serialize() < b.cfg.serialize();
  });

  std::set<std::string> varying;
  for (const auto& f : TrainRunConfig::schema())
    for (const auto& r : rows)
      if (r.cfg.get(f.key) != rows.front().cfg.get(f.key)) varying.insert(f.key);
  std::ofstream jl(out_dir / "table.jsonl"), txt(out_dir / "table.txt");
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["cell"] = r.cell;
    for (const auto& k : varying) j[k] = r.cfg.get(k);
    j["status"] = r.ok ? "ok" : "failed";
    if (!r.ok) j["error"] = r.error;
    for (const auto& rep : r.reports) j[rep.metric] = rep.value;
    jl << j.dump() << '\n';
    txt << r.cell;
    for (const auto& k : varying) txt << "  " << k << "=" << r.cfg.get(k);
    if (!r.ok) txt << "  FAILED: " << r.error;
    for (const auto& rep : r.reports) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "  %s=%.4f", rep.metric.c_str(), rep.value);
      txt << buf;
    }
    txt << '\n';
  }
  return rows;
}

}  // namespace pixpro
