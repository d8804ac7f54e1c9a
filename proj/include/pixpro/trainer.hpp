#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "pixpro/checkpoint.hpp"
#include "pixpro/dataset.hpp"
#include "pixpro/objectives.hpp"

namespace pixpro {

/// Per-channel std of L2-normalized embeddings and the constant-output flag.
struct CollapseReport {
  std::vector<double> channel_std;
  double mean_std = 0;
  bool collapsed = false;
  std::size_t n_cells = 0;
};

template <typename T>
CollapseReport collapse_report(const std::vector<Tensor<T>>& cells, double threshold = 0.01) {
  if (cells.empty()) throw Error("collapse_report: no embeddings");
  const std::size_t d = cells.front().dim(1);
  std::vector<double> sum(d, 0.0), sq(d, 0.0), row(d);
  CollapseReport r;
  for (const auto& m : cells) {
    if (m.rank() != 2 || m.dim(1) != d) throw Error("collapse_report: inconsistent embedding widths");
    for (std::size_t i = 0; i < m.dim(0); ++i) {
      double norm = 0;
      for (std::size_t c = 0; c < d; ++c) {
        row[c] = static_cast<double>(m[i * d + c]);
        norm += row[c] * row[c];
      }
      norm = std::max(std::sqrt(norm), kCosineEps);
      for (std::size_t c = 0; c < d; ++c) {
        sum[c] += row[c] / norm;
        sq[c] += (row[c] / norm) * (row[c] / norm);
      }
      ++r.n_cells;
    }
  }
  const double n = static_cast<double>(r.n_cells);
  for (std::size_t c = 0; c < d; ++c) {
    const double mu = sum[c] / n;
    r.channel_std.push_back(std::sqrt(std::max(sq[c] / n - mu * mu, 0.0)));
  }
  r.mean_std = std::accumulate(r.channel_std.begin(), r.channel_std.end(), 0.0) / static_cast<double>(d);
  r.collapsed = r.mean_std < threshold;
  return r;
}

/// Mean over channels of the per-channel standard deviation of L2-normalized cell
/// embeddings, pooled over every cell of every matrix in `cells` ([n_i, d] each).
template <typename T>
double normalized_channel_std(const std::vector<Tensor<T>>& cells) {
  return collapse_report(cells).mean_std;
}

inline std::int64_t steps_per_epoch(const TrainRunConfig& cfg, std::size_t n_images) {
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n_images);
  return static_cast<std::int64_t>(n_images / b);
}

inline std::int64_t total_steps(const TrainRunConfig& cfg, std::size_t n_images) {
  if (cfg.steps > 0) return cfg.steps;
  return static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch(cfg, n_images);
}

inline std::int64_t warmup_steps(const TrainRunConfig& cfg, std::int64_t total) {
  return static_cast<std::int64_t>(std::floor(cfg.warmup_frac * static_cast<double>(total)));
}

/// Image indices of the batch at `step`: a fresh permutation every epoch, keyed by
/// (seed, epoch).
inline std::vector<std::size_t> batch_indices(const TrainRunConfig& cfg, std::size_t n_images, std::int64_t step) {
  const auto spe = steps_per_epoch(cfg, n_images);
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n_images);
  const auto epoch = static_cast<std::uint64_t>(step / spe);
  std::vector<std::size_t> perm(n_images);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng({static_cast<std::uint64_t>(cfg.seed), epoch, 0x7065726dULL});
  for (std::size_t i = n_images - 1; i > 0; --i)
    std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  const auto start = static_cast<std::size_t>(step % spe) * b;
  return {perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(start + b)};
}

/// Everything logged for one step.
struct StepReport {
  std::int64_t step = 0;
  double lr = 0;
  double m = 0;
  LossBreakdown loss;
  double embed_std_mean = 0;
  std::string loss_name;
};

namespace detail {

template <typename T>
Var<T> stack_views(const std::vector<Tensor<T>>& views) {
  const auto& s = views.front().shape();
  Tensor<T> out({views.size(), s[0], s[1], s[2]});
  const std::size_t per = views.front().numel();
  for (std::size_t i = 0; i < views.size(); ++i)
    std::copy(views[i].data().begin(), views[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  return Var<T>::leaf(std::move(out), false);
}

inline std::string index_list(const std::vector<std::size_t>& idx) {
  std::string s;
  for (std::size_t i = 0; i < idx.size(); ++i) s += (i ? "," : "") + std::to_string(idx[i]);
  return s;
}

template <typename T>
void zero_grads(EncoderParams<T>& p) {
  for_each_param(p, [](const std::string&, ParamKind, Var<T>& v) { v.zero_grad(); });
}

}  // namespace detail

/// One optimization step on the images at `indices`: two views per image, pairs
/// without overlap dropped, both branches encoded, the configured loss minimized with
/// LARS, then the momentum encoder moved toward the online one. A step whose every pair
/// is dropped (or yields no positive cell pair) changes no parameters.
template <typename T>
StepReport train_step(TrainState<T>& s, const std::vector<const Tensor<T>*>& images,
                      const std::vector<std::size_t>& indices, std::int64_t total) {
  const auto& cfg = s.cfg;
  const auto enc = cfg.encoder();
  const auto aug = cfg.augment();
  const auto variant = cfg.variant_kind();
  StepReport rep;
  rep.step = s.step;
  rep.loss_name = variant_name(variant);
  rep.lr = cosine_lr(s.step, total, cfg.effective_lr(), warmup_steps(cfg, total));
  rep.m = momentum_schedule(s.step, total, cfg.m_base);

  const std::uint64_t salt = s.rng.next_u64();
  std::vector<Tensor<T>> va, vb;
  std::vector<CropRecord> ra, rb;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng rng({salt, static_cast<std::uint64_t>(indices[i])});
    auto [a, b] = sample_view_pair(*images[i], aug, rng);
    if (!overlap_check(a.rec, b.rec)) {
      ++rep.loss.pairs_skipped;
      continue;
    }
    va.push_back(apply_photometric(std::move(a.pixels), rng, aug.photometric[0]));
    vb.push_back(apply_photometric(std::move(b.pixels), rng, aug.photometric[1]));
    ra.push_back(a.rec);
    rb.push_back(b.rec);
    kept.push_back(indices[i]);
  }

  auto skip = [&] {
    rep.loss = LossBreakdown{0, 0, 0, 0, rep.loss.pairs_skipped, true};
    ++s.step;
    return rep;
  };
  if (kept.empty()) return skip();

  try {
    const auto xa = detail::stack_views(va), xb = detail::stack_views(vb);
    auto fa = backbone_forward(xa, s.online.backbone, enc, Mode::train);
    auto fb = backbone_forward(xb, s.online.backbone, enc, Mode::train);
    auto ta = backbone_forward(xa, s.target.backbone, enc, Mode::train);
    auto tb = backbone_forward(xb, s.target.backbone, enc, Mode::train);

    std::vector<std::optional<LossTerm<T>>> per_level;
    for (std::size_t l = 0; l < enc.levels.size(); ++l) {
      const auto za = projection_forward(fa.maps[l], s.online.proj, Mode::train);
      const auto zb = projection_forward(fb.maps[l], s.online.proj, Mode::train);
      const auto pa = projection_forward(ta.maps[l], s.target.proj, Mode::train);
      const auto pb = projection_forward(tb.maps[l], s.target.proj, Mode::train);
      const int f = static_cast<int>(za.shape()[2]);
      if (l == 0) {
        std::vector<Tensor<T>> cells;
        for (std::size_t n = 0; n < kept.size(); ++n) cells.push_back(image_cells(za, n).value());
        rep.embed_std_mean = normalized_channel_std(cells);
      }
      std::vector<Var<T>> ya, yb;
      if (variant == Variant::pixcontrast) {
        for (std::size_t n = 0; n < kept.size(); ++n) {
          ya.push_back(image_cells(za, n));
          yb.push_back(image_cells(zb, n));
        }
      } else {
        ya = ppm_cells(za, s.online.ppm, enc.gamma, enc.use_ppm, Mode::train);
        yb = ppm_cells(zb, s.online.ppm, enc.gamma, enc.use_ppm, Mode::train);
      }
      std::vector<CellPair<T>> pairs;
      for (std::size_t n = 0; n < kept.size(); ++n)
        pairs.push_back({ya[n], yb[n], image_cells(pa, n), image_cells(pb, n),
                         assign_views(ra[n], rb[n], f, cfg.threshold, cfg.diagonal_rule())});
      per_level.push_back(variant == Variant::pixcontrast ? pix_contrast_loss(pairs, cfg.tau) : pixpro_loss(pairs));
    }
    const auto pix = multiscale_loss(per_level);
    if (!pix) return skip();
    rep.loss.pairs_used = pix->pairs;

    Var<T> total_loss = pix->value;
    rep.loss.pix_component = static_cast<double>(pix->value.value().item());
    if (variant == Variant::pixpro_instance && kept.size() >= 2) {
      const auto ia = instance_forward(fa.c5, *s.online.inst, Mode::train);
      const auto ib = instance_forward(fb.c5, *s.online.inst, Mode::train);
      const auto ja = instance_forward(ta.c5, *s.target.inst, Mode::train);
      const auto jb = instance_forward(tb.c5, *s.target.inst, Mode::train);
      const auto inst = instance_loss(ia, jb, ib, ja, cfg.tau_inst);
      total_loss = combined_loss(pix->value, inst, cfg.alpha);
      rep.loss.instance_component = static_cast<double>(inst.value().item());
    }
    rep.loss.total = static_cast<double>(total_loss.value().item());
    if (!std::isfinite(rep.loss.total)) throw NumericError("non-finite loss");

    detail::zero_grads(s.online);
    backward(total_loss);
    lars_step(param_refs(s.online), s.opt, rep.lr,
              LarsConfig{cfg.weight_decay, cfg.trust_coeff, cfg.lars_momentum, 1e-9});
    detail::zero_grads(s.online);
    momentum_update(s.online, s.target, rep.m);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(s.step) + ", batch images [" + detail::index_list(kept) +
                       "]: " + e.what());
  }
  ++s.step;
  return rep;
}

inline nlohmann::ordered_json step_record(const StepReport& r) {
  return {{"step", r.step},
          {"lr", r.lr},
          {"m", r.m},
          {"loss_total", r.loss.total},
          {"loss_pix", r.loss.pix_component},
          {"loss_inst", r.loss.instance_component},
          {"pairs_used", r.loss.pairs_used},
          {"pairs_skipped", r.loss.pairs_skipped},
          {"embed_std_mean", r.embed_std_mean},
          {"loss_name", r.loss_name},
          {"skipped", r.loss.skipped}};
}

inline nlohmann::ordered_json config_record(const TrainRunConfig& cfg) {
  nlohmann::ordered_json c;
  for (const auto& f : TrainRunConfig::schema()) c[f.key] = cfg.get(f.key);
  return {{"type", "config"}, {"digest", cfg.digest()}, {"config", c}};
}

struct RunOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  std::int64_t stop_at = -1;  // halt (as if interrupted) once this many steps are done
  std::function<void(const StepReport&)> on_step;
};

struct RunResult {
  std::filesystem::path checkpoint;  // final.pxp, or latest.pxp when halted early
  std::filesystem::path metrics;
  std::int64_t steps_done = 0;
  std::int64_t total_steps = 0;
  bool finished = false;
};

namespace detail {

// Keeps the header plus the first `steps` step records.
inline void truncate_metrics(const std::filesystem::path& p, std::int64_t steps) {
  std::ifstream in(p);
  if (!in) throw Error("resume: missing metrics file " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line) && static_cast<std::int64_t>(lines.size()) < steps + 1) lines.push_back(line);
  in.close();
  if (static_cast<std::int64_t>(lines.size()) < steps + 1)
    throw Error("resume: metrics file has fewer than " + std::to_string(steps) + " step records");
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace detail

/// Trains from scratch (or from out_dir/latest.pxp when resuming), writing one metrics
/// record per step to out_dir/metrics.jsonl, periodic checkpoints to latest.pxp and the
/// final state to final.pxp.
template <typename T = float>
RunResult run_pretrain(const TrainRunConfig& cfg, const Dataset& data, const RunOptions& opt) {
  cfg.validate();
  if (data.size() == 0) throw Error("run_pretrain: dataset is empty");
  if (opt.out_dir.empty()) throw Error("run_pretrain: no output directory");
  std::filesystem::create_directories(opt.out_dir);
  RunResult res;
  res.metrics = opt.out_dir / "metrics.jsonl";
  const auto latest = opt.out_dir / "latest.pxp", final_path = opt.out_dir / "final.pxp";
  res.total_steps = total_steps(cfg, data.size());

  std::vector<Tensor<T>> imgs;
  imgs.reserve(data.size());
  for (const auto& im : data.images) imgs.push_back(im.template cast<T>());

  TrainState<T> s;
  std::ofstream metrics;
  if (opt.resume && std::filesystem::exists(latest)) {
    s = load_checkpoint<T>(latest);
    if (s.cfg.digest() != cfg.digest()) throw Error("resume: checkpoint config differs from the requested config");
    detail::truncate_metrics(res.metrics, s.step);
    metrics.open(res.metrics, std::ios::binary | std::ios::app);
  } else {
    s = TrainState<T>::fresh(cfg);
    metrics.open(res.metrics, std::ios::binary | std::ios::trunc);
    metrics << config_record(cfg).dump() << '\n';
  }
  if (!metrics) throw Error("cannot write metrics file " + res.metrics.string());

  while (s.step < res.total_steps) {
    if (opt.stop_at >= 0 && s.step >= opt.stop_at) {
      metrics.flush();
      save_checkpoint(latest, s);
      res.checkpoint = latest;
      res.steps_done = s.step;
      return res;
    }
    const auto idx = batch_indices(cfg, data.size(), s.step);
    std::vector<const Tensor<T>*> batch;
    for (auto i : idx) batch.push_back(&imgs[i]);
    const auto rep = train_step(s, batch, idx, res.total_steps);
    metrics << step_record(rep).dump() << '\n';
    if (opt.on_step) opt.on_step(rep);
    if (cfg.checkpoint_interval > 0 && s.step % cfg.checkpoint_interval == 0) {
      metrics.flush();
      save_checkpoint(latest, s);
    }
  }
  metrics.flush();
  save_checkpoint(final_path, s);
  save_checkpoint(latest, s);
  res.checkpoint = final_path;
  res.steps_done = s.step;
  res.finished = true;
  return res;
}

template <typename T = float>
RunResult run_pretrain(const TrainRunConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  if (cfg.dataset.empty()) throw Error("run_pretrain: config has no dataset path");
  return run_pretrain<T>(cfg, load_dataset(cfg.dataset), opt);
}

/// Reads a metrics file back: the config header and the step records.
struct MetricsLog {
  nlohmann::json header;
  std::vector<nlohmann::json> steps;
};

inline MetricsLog read_metrics(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open metrics file " + p.string());
  MetricsLog log;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (first) log.header = std::move(j);
    else log.steps.push_back(std::move(j));
    first = false;
  }
  return log;
}

}  // namespace pixpro
