#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "pixpro/eval.hpp"
#include "pixpro/gradsuite.hpp"

namespace pixpro {

namespace detail {

inline std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

inline void print_error(const std::string& kind, const std::string& msg) {
  std::cerr << nlohmann::json{{"error", one_line(msg)}, {"kind", kind}}.dump() << std::endl;
}

// Config from an optional file, then --set overrides, then the dedicated flags.
struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> direct;

  void add(CLI::App* app) {
    app->add_option("--config", path, "key = value config file");
    app->add_option("--set", sets, "override, key=value (repeatable)");
    for (const char* key : {"variant", "threshold", "tau", "tau_inst", "gamma", "ppm_layers", "use_ppm", "alpha",
                            "feat_levels", "dist_norm", "out_res", "epochs", "steps", "batch_size", "lr_base",
                            "weight_decay", "m_base", "seed", "dataset", "checkpoint_interval"}) {
      std::string flag = std::string("--") + key;
      for (auto& c : flag)
        if (c == '_') c = '-';
      app->add_option_function<std::string>(flag, [this, key](const std::string& v) { direct.emplace_back(key, v); },
                                            std::string("sets ") + key);
    }
  }

  TrainRunConfig resolve() const {
    TrainRunConfig c = path.empty() ? TrainRunConfig{} : TrainRunConfig::load(path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& [k, v] : direct) c.set(k, v);
    c.validate();
    return c;
  }
};

inline void print_report(const EvalReport& r) { std::cout << r.to_json().dump() << std::endl; }

}  // namespace detail

/// Entry point of the command-line tool. Returns the process exit code: 0 on success,
/// 1 with a one-line JSON error on stderr, 2 for usage errors.
inline int cli_main(int argc, char** argv) {
  CLI::App app{"Pixel-level self-supervised pre-training at desk scale"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic labeled dataset");
  std::string gen_out;
  int gen_n = 256, gen_size = 32, gen_classes = 4, gen_distract = 2;
  std::uint64_t gen_seed = 0;
  std::vector<double> gen_mix;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of images");
  gen->add_option("--size", gen_size, "image side in pixels");
  gen->add_option("--classes", gen_classes, "classes including background");
  gen->add_option("--mixture", gen_mix, "weights of the object classes")->delimiter(',');
  gen->add_option("--distractors", gen_distract, "maximum distractor objects per scene");
  gen->add_option("--seed", gen_seed, "generator seed");

  auto* pre = app.add_subcommand("pretrain", "run pre-training");
  detail::ConfigFlags pre_cfg;
  pre_cfg.add(pre);
  std::string pre_out;
  bool pre_resume = false;
  std::int64_t pre_stop = -1;
  pre->add_option("--out", pre_out, "run directory")->required();
  pre->add_flag("--resume", pre_resume, "continue from the run directory's latest checkpoint");
  pre->add_option("--stop-at", pre_stop, "halt after this many steps, keeping a resumable checkpoint");

  std::string ckpt, data_path;
  std::uint64_t eval_seed = 0;
  auto* probe = app.add_subcommand("eval-probe", "linear probe on frozen features");
  int probe_epochs = 100;
  probe->add_option("checkpoint", ckpt, "checkpoint file")->required();
  probe->add_option("--dataset", data_path, "labeled dataset (manifest or directory)")->required();
  probe->add_option("--epochs", probe_epochs, "probe epochs");
  probe->add_option("--seed", eval_seed, "split and shuffle seed");

  auto* corr = app.add_subcommand("eval-correspondence", "pixel correspondence retrieval");
  int corr_pairs = 256;
  bool corr_identical = false, corr_photo = false, corr_backbone = false;
  corr->add_option("checkpoint", ckpt, "checkpoint file")->required();
  corr->add_option("--dataset", data_path, "image set")->required();
  corr->add_option("--pairs", corr_pairs, "number of view pairs");
  corr->add_option("--seed", eval_seed, "view sampling seed");
  corr->add_flag("--identical-views", corr_identical, "use the same view twice");
  corr->add_flag("--photometric", corr_photo, "distort views as in training");
  corr->add_flag("--backbone-features", corr_backbone, "retrieve on backbone features");

  auto* diag = app.add_subcommand("diagnose-collapse", "embedding spread statistics");
  diag->add_option("checkpoint", ckpt, "checkpoint file")->required();
  diag->add_option("--dataset", data_path, "image set (at least 32 images)")->required();

  auto* abl = app.add_subcommand("ablate", "pretrain and evaluate a grid of configs");
  detail::ConfigFlags abl_cfg;
  abl_cfg.add(abl);
  std::vector<std::string> grid;
  std::string abl_out;
  abl->add_option("--grid", grid, "axis, key=v1,v2,... (repeatable)");
  abl->add_option("--out", abl_out, "grid directory")->required();
  abl->add_option("--pairs", corr_pairs, "correspondence pairs per cell");
  abl->add_option("--probe-epochs", probe_epochs, "probe epochs per cell");
  abl->add_option("--eval-seed", eval_seed, "evaluation seed");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t gc_seed = 0;
  int gc_instances = 20;
  double gc_tol = 1e-4;
  gc->add_option("--seed", gc_seed, "instance seed");
  gc->add_option("--instances", gc_instances, "random instances per case");
  gc->add_option("--tol", gc_tol, "maximum relative error");

  auto* insp = app.add_subcommand("inspect-checkpoint", "print a checkpoint's manifest");
  insp->add_option("checkpoint", ckpt, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\nerror: " << e.what() << std::endl;
    return 2;
  }

  try {
    if (*gen) {
      SceneConfig sc;
      sc.size = gen_size;
      sc.n_classes = gen_classes;
      sc.mixture = gen_mix;
      sc.max_distractors = gen_distract;
      gen_synthetic_dataset(gen_out, gen_n, sc, gen_seed);
      std::cout << nlohmann::json{{"dataset", gen_out}, {"images", gen_n}}.dump() << std::endl;
    } else if (*pre) {
      const auto cfg = pre_cfg.resolve();
      RunOptions ro;
      ro.out_dir = pre_out;
      ro.resume = pre_resume;
      ro.stop_at = pre_stop;
      const auto res = run_pretrain<float>(cfg, ro);
      std::cout << nlohmann::json{{"checkpoint", res.checkpoint.string()}, {"metrics", res.metrics.string()},
                                  {"steps", res.steps_done}, {"total_steps", res.total_steps},
                                  {"finished", res.finished}}
                       .dump()
                << std::endl;
    } else if (*probe) {
      auto s = load_checkpoint<float>(ckpt);
      const auto data = load_dataset(data_path);
      ProbeConfig pc;
      pc.epochs = probe_epochs;
      pc.seed = eval_seed;
      const auto r = linear_probe(s.online, s.cfg.encoder(), data.images, data.labels, pc);
      detail::print_report({"linear_probe_top1", r.accuracy, s.cfg.digest(), file_digest(ckpt),
                            {static_cast<std::uint64_t>(s.cfg.seed), eval_seed}});
    } else if (*corr) {
      auto s = load_checkpoint<float>(ckpt);
      const auto data = load_dataset(data_path);
      CorrespondenceConfig cc;
      cc.n_pairs = corr_pairs;
      cc.seed = eval_seed;
      cc.threshold = s.cfg.threshold;
      cc.rule = s.cfg.diagonal_rule();
      cc.identical_views = corr_identical;
      cc.photometric = corr_photo;
      cc.backbone_features = corr_backbone;
      const auto r = correspondence_eval(s.online, s.cfg.encoder(), s.cfg.augment(), data.images, cc);
      const auto kd = file_digest(ckpt);
      const std::vector<std::uint64_t> seeds = {static_cast<std::uint64_t>(s.cfg.seed), eval_seed};
      detail::print_report({"correspondence_accuracy", r.accuracy, s.cfg.digest(), kd, seeds});
      detail::print_report({"correspondence_chance", r.chance, s.cfg.digest(), kd, seeds});
    } else if (*diag) {
      auto s = load_checkpoint<float>(ckpt);
      const auto data = load_dataset(data_path);
      const auto r = collapse_diagnostic(s.online, s.cfg.encoder(), data.images, s.cfg.collapse_threshold);
      std::cout << nlohmann::json{{"mean_std", r.mean_std}, {"collapsed", r.collapsed}, {"cells", r.n_cells},
                                  {"channel_std", r.channel_std}, {"config_digest", s.cfg.digest()},
                                  {"checkpoint_digest", file_digest(ckpt)}}
                       .dump()
                << std::endl;
    } else if (*abl) {
      const auto base = abl_cfg.resolve();
      std::vector<std::pair<std::string, std::vector<std::string>>> axes;
      for (const auto& g : grid) {
        const auto eq = g.find('=');
        if (eq == std::string::npos) throw Error("--grid expects key=v1,v2,..., got '" + g + "'");
        std::vector<std::string> vals;
        std::stringstream ss(g.substr(eq + 1));
        std::string tok;
        while (std::getline(ss, tok, ',')) vals.push_back(tok);
        axes.emplace_back(g.substr(0, eq), vals);
      }
      const auto cfgs = expand_grid(base, axes);
      if (base.dataset.empty()) throw Error("ablate: config has no dataset path");
      const auto data = load_dataset(base.dataset);
      EvalSettings es;
      es.probe.epochs = probe_epochs;
      es.probe.seed = eval_seed;
      es.corr.n_pairs = corr_pairs;
      es.corr.seed = eval_seed;
      const auto rows = run_ablation<float>(cfgs, data, abl_out, es);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += r.ok ? 0 : 1;
      std::ifstream table(std::filesystem::path(abl_out) / "table.txt");
      std::cout << table.rdbuf();
      if (failed) throw Error(std::to_string(failed) + " of " + std::to_string(rows.size()) + " grid cells failed");
    } else if (*gc) {
      bool all = true;
      for (const auto& r : run_gradcheck_suite(gc_seed, gc_instances, gc_tol)) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-20s instances=%d max_rel_error=%.3e %s", r.name.c_str(), r.instances,
                      r.max_rel_error, r.passed ? "PASS" : "FAIL");
        std::cout << buf << std::endl;
        all = all && r.passed;
      }
      if (!all) throw NumericError("gradient check failed");
    } else if (*insp) {
      const auto f = read_checkpoint(ckpt);
      std::cout << "version " << f.version << "\nstep " << f.step << "\nconfig_digest " << hex64(f.config_digest)
                << "\ntensors " << f.manifest.size() << "\n";
      for (const auto& e : f.manifest)
        std::cout << e.name << " " << dtype_name(e.dtype) << " " << shape_str(e.shape) << " @" << e.offset << "\n";
    }
  } catch (const NumericError& e) {
    detail::print_error("numeric", e.what());
    return 1;
  } catch (const Error& e) {
    detail::print_error("error", e.what());
    return 1;
  } catch (const std::exception& e) {
    detail::print_error("system", e.what());
    return 1;
  }
  return 0;
}

}  // namespace pixpro
