// Command-line front end. Every experiment is configured by a JSON file
// matching the RunConfig schema; subcommands pick the experiment kind and a
// few flags override the hot fields (seed, output directory). Exit codes:
// 0 success, 2 config error, 3 training error, 4 audit error, 5 format
// error, 1 anything else.

#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "fuselab/harness.hpp"

namespace {

using namespace fuselab;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool out_set = false;
  bool single_thread = false;
};

RunConfig base_config(const CommonFlags& flags) {
  RunConfig cfg = flags.config_path.empty() ? RunConfig{} : load_config(flags.config_path);
  if (flags.seed_set) cfg.seed = flags.seed;
  if (flags.out_set) cfg.out_dir = flags.out_dir;
  return cfg;
}

int run_and_report(RunConfig cfg) {
  cfg.validate();
  auto record = run_experiment(cfg);
  std::printf("run %s complete\n", record.config_hash.c_str());
  std::printf("summary: %s/summary.json\n", cfg.out_dir.c_str());
  for (const char* key : {"final_train_loss", "best_bleu4", "best_accuracy",
                          "zero_shot_accuracy", "ratio_grounded_over_standard"}) {
    if (record.summary.contains(key)) {
      std::printf("%s: %.6g\n", key, record.summary.at(key).get<double>());
    }
  }
  return 0;
}

std::vector<std::pair<int, int>> parse_holdout(const std::vector<std::string>& entries) {
  std::vector<std::pair<int, int>> pairs;
  for (const auto& entry : entries) {
    int shape = 0, color = 0;
    if (std::sscanf(entry.c_str(), "%d:%d", &shape, &color) != 2) {
      throw config_error("holdout entry '" + entry + "' is not shape:color");
    }
    pairs.emplace_back(shape, color);
  }
  return pairs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale vision-language fusion laboratory"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags are accepted after the subcommand name too

  CommonFlags flags;
  app.add_option("--config", flags.config_path, "JSON run configuration file");
  auto* seed_opt = app.add_option("--seed", flags.seed, "override the config seed");
  auto* out_opt = app.add_option("--out", flags.out_dir, "override the output directory");
  app.add_flag("--single-thread", flags.single_thread,
               "deterministic single-threaded mode (the only mode; kept for script parity)");

  auto* mk = app.add_subcommand("make-frozen", "pretrain and save a frozen model bundle");
  std::string mk_kind = "encoder-decoder", mk_size = "default";
  mk->add_option("--kind", mk_kind, "encoder-decoder | decoder-only");
  mk->add_option("--size", mk_size, "default | small | tiny");

  auto* gen = app.add_subcommand("gen-data", "generate and save a synthetic scene dataset");
  std::size_t gen_scenes = 200;
  std::size_t gen_val_every = 5;
  std::vector<std::string> gen_holdout;
  gen->add_option("--scenes", gen_scenes, "number of scenes");
  gen->add_option("--holdout", gen_holdout, "held-out shape:color combinations");
  gen->add_option("--val-every", gen_val_every, "every k-th non-holdout scene goes to val");

  auto* train = app.add_subcommand("train", "run a training experiment from the config");
  auto* zero = app.add_subcommand("eval-zero-shot", "multitask training plus holdout evaluation");
  auto* probe = app.add_subcommand("probe", "linear probes from QFormer outputs to LM layers");
  auto* align = app.add_subcommand("align", "mutual-KNN layer alignment heatmap");
  auto* bench = app.add_subcommand("bench-time", "standard vs grounded epoch timing");
  auto* ablate = app.add_subcommand("ablate-grounding", "paired grounded run with grounding blanked");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  flags.seed_set = seed_opt->count() > 0;
  flags.out_set = out_opt->count() > 0;

  try {
    if (mk->parsed()) {
      RunConfig cfg = base_config(flags);
      cfg.bundle.kind = lm_kind_from(mk_kind);
      if (mk->count("--size")) cfg.bundle.size = mk_size;
      if (flags.seed_set) cfg.bundle.seed = flags.seed;
      if (cfg.out_dir.empty()) throw config_error("make-frozen needs --out (or out_dir in config)");
      auto bundle = build_frozen_bundle<float>(cfg.bundle.seed, cfg.bundle.config());
      save_bundle(cfg.out_dir, bundle);
      std::printf("bundle %s (%s, seed %llu) -> %s\n", lm_kind_name(bundle.kind()).c_str(),
                  cfg.bundle.size.c_str(), static_cast<unsigned long long>(cfg.bundle.seed),
                  cfg.out_dir.c_str());
      std::printf("fingerprint: %s\n", hex64(bundle.fingerprint).c_str());
      return 0;
    }
    if (gen->parsed()) {
      RunConfig cfg = base_config(flags);
      if (gen->count("--scenes")) cfg.dataset.n_scenes = gen_scenes;
      if (gen->count("--val-every")) cfg.dataset.split.val_every = gen_val_every;
      if (!gen_holdout.empty()) cfg.dataset.split.holdout = parse_holdout(gen_holdout);
      if (flags.seed_set) cfg.dataset.seed = flags.seed;
      if (cfg.out_dir.empty()) throw config_error("gen-data needs --out (or out_dir in config)");
      auto ds = gen_dataset(cfg.dataset.seed, cfg.dataset.n_scenes, cfg.dataset.split);
      save_dataset(cfg.out_dir, ds);
      std::printf("dataset: %zu scenes (train %zu / val %zu / test %zu) -> %s\n",
                  ds.scenes.size(), ds.train.size(), ds.val.size(), ds.test.size(),
                  cfg.out_dir.c_str());
      return 0;
    }

    RunConfig cfg = base_config(flags);
    if (train->parsed()) {
      if (cfg.kind != ExperimentKind::single_task_caption &&
          cfg.kind != ExperimentKind::single_task_vqa && cfg.kind != ExperimentKind::multitask) {
        throw config_error("train wants a config with kind single-task-caption, "
                           "single-task-vqa, or multitask (got " +
                           experiment_kind_name(cfg.kind) + ")");
      }
      return run_and_report(std::move(cfg));
    }
    if (zero->parsed()) {
      cfg.kind = ExperimentKind::zero_shot;
      return run_and_report(std::move(cfg));
    }
    if (probe->parsed()) {
      if (cfg.kind != ExperimentKind::layer_sweep) cfg.kind = ExperimentKind::probe;
      return run_and_report(std::move(cfg));
    }
    if (align->parsed()) {
      cfg.kind = ExperimentKind::align;
      return run_and_report(std::move(cfg));
    }
    if (bench->parsed()) {
      cfg.kind = ExperimentKind::bench_time;
      return run_and_report(std::move(cfg));
    }
    if (ablate->parsed()) {
      cfg.kind = ExperimentKind::grounding_ablation;
      return run_and_report(std::move(cfg));
    }
    throw config_error("no subcommand given");
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const training_error& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 3;
  } catch (const audit_error& e) {
    std::fprintf(stderr, "audit error: %s\n", e.what());
    return 4;
  } catch (const format_error& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 5;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
