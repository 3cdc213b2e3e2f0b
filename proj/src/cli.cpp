#include "mfdet/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <iterator>

#include "CLI11.hpp"
#include "mfdet/checkpoint.hpp"
#include "mfdet/config.hpp"
#include "mfdet/report.hpp"

namespace mfdet {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kInitSeedMix = 0x6A09E667F3BCC909ULL;
constexpr std::uint64_t kStage2SeedMix = 0x5851F42D4C957F2DULL;
constexpr std::uint64_t kEvalSeedBase = 0x51ED270B8A9C17E5ULL;

std::uint64_t train_seq_seed(std::uint64_t seed, int i) {
  return seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1));
}

std::uint64_t val_seq_seed(std::uint64_t seed, int i) {
  return (seed ^ 0x94D049BB133111EBULL) ^
         (0xC2B2AE3D27D4EB4FULL * static_cast<std::uint64_t>(i + 1));
}

std::string seq_dir(const std::string& root, const std::string& split, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq_%03d", i);
  return root + "/" + split + "/" + buf;
}

std::vector<WindowSample> load_split(const RunConfig& cfg, const std::string& split, int count) {
  std::vector<WindowSample> out;
  for (int i = 0; i < count; ++i) {
    SynthSequence seq = load_sequence(seq_dir(cfg.data_dir, split, i));
    for (WindowSample& w : make_windows(seq, cfg.model.window)) out.push_back(std::move(w));
  }
  if (out.empty())
    throw ConfigError("dataset " + cfg.data_dir + "/" + split + " yields no full windows");
  return out;
}

std::vector<WindowSample> generate_split(const RunConfig& cfg, bool val, std::uint64_t seed) {
  const SceneConfig sc = cfg.scene_config();
  const int count = val ? cfg.val_sequences : cfg.train_sequences;
  std::vector<WindowSample> out;
  for (int i = 0; i < count; ++i) {
    SynthSequence seq =
        generate_sequence(sc, val ? val_seq_seed(seed, i) : train_seq_seed(seed, i));
    for (WindowSample& w : make_windows(seq, cfg.model.window)) out.push_back(std::move(w));
  }
  if (out.empty()) throw ConfigError("generated dataset yields no full windows");
  return out;
}

GtFilter moving_filter() {
  return [](const GroundTruthBox& g) { return g.speed > 0.5; };
}

int cmd_gen(const RunConfig& cfg) {
  const SceneConfig sc = cfg.scene_config();
  for (const bool val : {false, true}) {
    const char* split = val ? "val" : "train";
    const int count = val ? cfg.val_sequences : cfg.train_sequences;
    for (int i = 0; i < count; ++i) {
      const std::string dir = seq_dir(cfg.data_dir, split, i);
      fs::create_directories(dir);
      const std::uint64_t s = val ? val_seq_seed(cfg.seed, i) : train_seq_seed(cfg.seed, i);
      save_sequence(dir, generate_sequence(sc, s));
    }
    std::printf("gen: wrote %d %s sequences (%d frames each) under %s/%s\n", count, split,
                sc.frames, cfg.data_dir.c_str(), split);
  }
  return 0;
}

struct StageRun {
  bool base = true, full = true;
};

int cmd_train(const RunConfig& cfg, const StageRun& stages, const std::string& ckpt_override) {
  const ModelConfig mcfg = cfg.model_config();
  const std::vector<WindowSample> train = load_split(cfg, "train", cfg.train_sequences);
  const std::vector<WindowSample> val = load_split(cfg, "val", cfg.val_sequences);
  fs::create_directories(cfg.out_dir);

  std::mt19937_64 init_rng(cfg.seed ^ kInitSeedMix);
  ModelParams<double> params = make_model_params<double>(mcfg, init_rng);
  const std::string hash = config_hash_hex(cfg);

  MetricsWriter metrics;
  metrics.open(cfg.out_dir + "/metrics.csv");
  auto on_epoch = [&](const EpochStats& r) {
    metrics.append(r);
    std::printf("epoch %3d  l_base %.4f  l_aggr %.4f  l_total %.4f  mAP %.4f\n", r.epoch,
                r.l_base, r.l_aggr, r.l_total, r.map);
    std::fflush(stdout);
  };

  std::printf("train: %zu train windows, %zu val windows, config hash %s\n", train.size(),
              val.size(), hash.c_str());
  if (stages.base) {
    train_stage(params, mcfg, true, train, val, cfg.base_epochs, cfg.lr, cfg.seed, 0,
                cfg.clip_norm, cfg.weight_decay, on_epoch);
    NamedParams<double> named;
    params.named_base_parameters(named);
    save_checkpoint(cfg.out_dir + "/base", named, hash);
    std::printf("train: saved %s/base\n", cfg.out_dir.c_str());
  } else {
    const std::string stem = ckpt_override.empty() ? cfg.out_dir + "/base" : ckpt_override;
    NamedParams<double> named = params.named_parameters(mcfg);
    const CheckpointManifest man = load_checkpoint(stem, named, false);
    std::printf("train: resumed from %s (%zu tensors)\n", stem.c_str(), man.entries.size());
    if (man.config_hash != hash)
      std::printf("train: note, checkpoint was written under config hash %s\n",
                  man.config_hash.c_str());
  }
  if (stages.full) {
    train_stage(params, mcfg, false, train, val, cfg.full_epochs, cfg.lr,
                cfg.seed ^ kStage2SeedMix, cfg.base_epochs, cfg.clip_norm, cfg.weight_decay,
                on_epoch);
    NamedParams<double> named = params.named_parameters(mcfg);
    save_checkpoint(cfg.out_dir + "/full", named, hash);
    std::printf("train: saved %s/full\n", cfg.out_dir.c_str());
  }
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_override) {
  const ModelConfig mcfg = cfg.model_config();
  const std::vector<WindowSample> val = load_split(cfg, "val", cfg.val_sequences);

  std::mt19937_64 init_rng(cfg.seed ^ kInitSeedMix);
  ModelParams<double> params = make_model_params<double>(mcfg, init_rng);
  const std::string stem = ckpt_override.empty() ? cfg.out_dir + "/full" : ckpt_override;
  load_checkpoint(stem, params.named_parameters(mcfg), true);

  std::vector<EvalSample> samples;
  evaluate_model(params, mcfg, val, {}, &samples);
  const double half_extent = 0.5 * (mcfg.grid.x_max - mcfg.grid.x_min);
  const std::vector<EvalRow> rows = evaluate_subsets(samples, mcfg.num_classes, half_extent);

  fs::create_directories(cfg.out_dir);
  write_eval_csv(cfg.out_dir + "/eval.csv", rows);
  std::printf("eval: %s over %zu val windows\n%s", stem.c_str(), val.size(),
              render_eval_table(rows, half_extent).c_str());
  return 0;
}

int cmd_attn_dump(const RunConfig& cfg, const std::string& ckpt_override,
                  const std::string& sequence) {
  if (sequence.empty()) throw ConfigError("attn-dump: --sequence DIR is required");
  const ModelConfig mcfg = cfg.model_config();
  if (mcfg.frame_mode != FrameMode::kFull || mcfg.window < 2)
    throw ConfigError("attn-dump: needs the multi-frame model (model.frames = full)");

  const SynthSequence seq = load_sequence(sequence);
  const std::vector<WindowSample> windows = make_windows(seq, mcfg.window);
  if (windows.empty())
    throw ConfigError("attn-dump: sequence holds fewer frames than one window");

  std::mt19937_64 init_rng(cfg.seed ^ kInitSeedMix);
  ModelParams<double> params = make_model_params<double>(mcfg, init_rng);
  const std::string stem = ckpt_override.empty() ? cfg.out_dir + "/full" : ckpt_override;
  load_checkpoint(stem, params.named_parameters(mcfg), true);

  ModelOutput<double> out = forward_window(windows[0].frames, params, mcfg, kEvalSeedBase, true);

  fs::create_directories(cfg.out_dir);
  std::vector<ScaleDump> scales;
  const std::pair<const std::vector<AttnDump>*, const QuerySelection*> by_scale[3] = {
      {&out.dumps1, &out.sel1}, {&out.dumps2, &out.sel2}, {&out.dumps3, &out.sel3}};
  for (int s = 1; s <= 3; ++s) {
    const auto& [dumps, sel] = by_scale[s - 1];
    if (dumps->empty()) continue;
    scales.push_back({s, dumps, sel});
    const Tensor<double>& feat = out.cur.feat(s);
    const int upscale = std::clamp(256 / std::max(1, feat.dim(1)), 4, 32);
    write_ppm(cfg.out_dir + "/attn_scale" + std::to_string(s) + ".ppm",
              render_attn_overlay(feat, *sel, dumps->back(), upscale));
  }
  write_attn_csv(cfg.out_dir + "/attn.csv", scales);
  std::printf("attn-dump: wrote %s/attn.csv and %zu heatmaps from the first window of %s\n",
              cfg.out_dir.c_str(), scales.size(), sequence.c_str());
  return 0;
}

struct AblateVariant {
  const char* name;
  const char* frames;
  const char* attention;
  const char* aggregation;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_ablate(const RunConfig& cfg) {
  static const AblateVariant kVariants[] = {
      {"frames-1", "1", "qk", "hierarchical"},
      {"frames-concat", "concat-only", "qk", "hierarchical"},
      {"full", "full", "qk", "hierarchical"},
      {"attn-baseline", "full", "baseline-deform", "hierarchical"},
      {"agg-separate", "full", "qk", "separate"},
      {"agg-single", "full", "qk", "single-scale"},
  };

  fs::create_directories(cfg.out_dir);
  std::ofstream csv(cfg.out_dir + "/ablate.csv", std::ios::trunc);
  if (!csv) throw ConfigError("ablate: cannot write " + cfg.out_dir + "/ablate.csv");
  csv << "variant,seed,mAP,mAP_moving\n";

  std::vector<std::vector<double>> maps(std::size(kVariants)), moving(std::size(kVariants));
  for (int s = 0; s < cfg.ablate_seeds; ++s) {
    const std::uint64_t sd = cfg.seed + static_cast<std::uint64_t>(s);
    const std::vector<WindowSample> train = generate_split(cfg, false, sd);
    const std::vector<WindowSample> val = generate_split(cfg, true, sd);

    for (std::size_t v = 0; v < std::size(kVariants); ++v) {
      RunConfig vcfg = cfg;
      apply_override(vcfg, std::string("model.frames=") + kVariants[v].frames);
      apply_override(vcfg, std::string("model.attention=") + kVariants[v].attention);
      apply_override(vcfg, std::string("model.aggregation=") + kVariants[v].aggregation);
      const ModelConfig mcfg = vcfg.model_config();
      mcfg.validate();

      std::mt19937_64 init_rng(sd ^ kInitSeedMix);
      ModelParams<double> params = make_model_params<double>(mcfg, init_rng);
      train_stage(params, mcfg, true, train, val, vcfg.base_epochs, vcfg.lr, sd, 0,
                  vcfg.clip_norm, vcfg.weight_decay);
      train_stage(params, mcfg, false, train, val, vcfg.full_epochs, vcfg.lr,
                  sd ^ kStage2SeedMix, vcfg.base_epochs, vcfg.clip_norm, vcfg.weight_decay);

      std::vector<EvalSample> samples;
      const double m = evaluate_model(params, mcfg, val, {}, &samples);
      const double mm =
          evaluate_map(samples, {0.5, 1.0, 2.0}, mcfg.num_classes, moving_filter());
      maps[v].push_back(m);
      moving[v].push_back(mm);
      csv << kVariants[v].name << "," << sd << "," << format_double(m) << ","
          << format_double(mm) << "\n";
      csv.flush();
      std::printf("ablate: %-14s seed %llu  mAP %.4f  moving %.4f\n", kVariants[v].name,
                  static_cast<unsigned long long>(sd), m, mm);
      std::fflush(stdout);
    }
  }

  std::ofstream sum(cfg.out_dir + "/ablate_summary.csv", std::ios::trunc);
  if (!sum) throw ConfigError("ablate: cannot write " + cfg.out_dir + "/ablate_summary.csv");
  sum << "variant,median_mAP,median_mAP_moving\n";
  std::printf("%-14s %12s %14s\n", "variant", "median mAP", "median moving");
  for (std::size_t v = 0; v < std::size(kVariants); ++v) {
    const double m = median(maps[v]), mm = median(moving[v]);
    sum << kVariants[v].name << "," << format_double(m) << "," << format_double(mm) << "\n";
    std::printf("%-14s %12.4f %14.4f\n", kVariants[v].name, m, mm);
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"multi-frame BEV point cloud detector"};
  app.require_subcommand(1);

  std::string config_path, out, stage, checkpoint, sequence;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "config file (TOML-style sections)");
  app.add_option("--seed", seed, "override [run] seed");
  app.add_option("--out", out, "override [run] out");
  app.add_option("--stage", stage, "train only one stage")
      ->check(CLI::IsMember({"base", "full"}));
  app.add_option("--set", sets, "override one key, section.key=value")->allow_extra_args(false);
  app.add_option("--checkpoint", checkpoint, "checkpoint stem to load");
  app.add_option("--sequence", sequence, "sequence directory for attn-dump");

  CLI::App* gen = app.add_subcommand("gen", "write synthetic train/val sequences");
  CLI::App* train = app.add_subcommand("train", "two-stage training run");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  CLI::App* attn = app.add_subcommand("attn-dump", "dump cross-frame attention of one window");
  CLI::App* ablate = app.add_subcommand("ablate", "frame/attention/aggregation sweep");
  for (CLI::App* sub : {gen, train, eval, attn, ablate}) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    for (const std::string& s : sets) apply_override(cfg, s);
    if (app.count("--seed")) cfg.seed = seed;
    if (app.count("--out")) cfg.out_dir = out;
    cfg.validate();

    if (gen->parsed()) return cmd_gen(cfg);
    if (train->parsed()) {
      StageRun stages;
      if (stage == "base") stages.full = false;
      if (stage == "full") stages.base = false;
      return cmd_train(cfg, stages, checkpoint);
    }
    if (eval->parsed()) return cmd_eval(cfg, checkpoint);
    if (attn->parsed()) return cmd_attn_dump(cfg, checkpoint, sequence);
    return cmd_ablate(cfg);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace mfdet
