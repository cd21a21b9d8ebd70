#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fuselab/harness.hpp"

using namespace fuselab;
namespace fs = std::filesystem;

namespace {

PretrainRecipe short_recipe() {
  PretrainRecipe r;
  r.id = "unit-short";
  r.vision_steps = 6;
  r.lm_steps = 12;
  r.batch = 4;
  return r;
}

FrozenBundle<float>& small_encdec() {
  static FrozenBundle<float> b =
      build_frozen_bundle<float>(31, FrozenConfig::small(LmKind::encoder_decoder), short_recipe());
  return b;
}

FrozenBundle<float>& small_deconly() {
  static FrozenBundle<float> b =
      build_frozen_bundle<float>(31, FrozenConfig::small(LmKind::decoder_only), short_recipe());
  return b;
}

// 30 scenes with the (square, red) combination held out; shared read-only.
const Dataset& shared_ds() {
  static const Dataset ds = [] {
    SplitSpec split;
    split.holdout = {{0, 1}};
    return gen_dataset(91, 30, split);
  }();
  return ds;
}

RunConfig quick_cfg(ExperimentKind kind) {
  RunConfig cfg;
  cfg.kind = kind;
  cfg.bundle.size = "small";
  cfg.bundle.seed = 31;
  cfg.qf_queries = 4;
  cfg.qf_dim = 32;
  cfg.qf_blocks = 2;
  cfg.qf_heads = 4;
  cfg.qf_ff = 64;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  cfg.max_gen_len = 8;
  cfg.dataset.seed = 91;
  cfg.dataset.n_scenes = 30;
  cfg.dataset.split.holdout = {{0, 1}};
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fuselab_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("experiment kind names round trip") {
  for (auto k : {ExperimentKind::single_task_caption, ExperimentKind::multitask,
                 ExperimentKind::zero_shot, ExperimentKind::bench_time,
                 ExperimentKind::grounding_ablation, ExperimentKind::layer_sweep}) {
    REQUIRE(experiment_kind_from(experiment_kind_name(k)) == k);
  }
  REQUIRE_THROWS_AS(experiment_kind_from("single-task"), config_error);
}

TEST_CASE("config json parsing applies defaults and rejects unknown fields") {
  auto cfg = config_from_json(nlohmann::json::object());
  REQUIRE(cfg.kind == ExperimentKind::single_task_caption);
  REQUIRE(cfg.epochs == 8);
  REQUIRE(cfg.batch_size == 16);
  REQUIRE(cfg.k_neighbors == 10);
  REQUIRE_FALSE(cfg.grounded);

  auto j = nlohmann::json::parse(R"({
    "kind": "multitask",
    "pipeline": "grounded",
    "bundle": {"kind": "decoder-only", "size": "small", "seed": 9},
    "qformer": {"num_queries": 4, "dim": 32, "num_blocks": 2, "num_heads": 4, "ff_dim": 64},
    "optimizer": {"kind": "adamw", "lr": 0.002, "weight_decay": 0.01},
    "epochs": 3, "epochs_phase2": 2, "batch_size": 4, "seed": 17,
    "dataset": {"seed": 5, "n_scenes": 40, "holdout": [[0, 1], [2, 3]], "val_every": 4},
    "injection_layer": 2
  })");
  cfg = config_from_json(j);
  REQUIRE(cfg.kind == ExperimentKind::multitask);
  REQUIRE(cfg.grounded);
  REQUIRE(cfg.bundle.kind == LmKind::decoder_only);
  REQUIRE(cfg.bundle.seed == 9);
  REQUIRE(cfg.qf_dim == 32);
  REQUIRE(cfg.optim.lr == 0.002);
  REQUIRE(cfg.optim.weight_decay == 0.01);
  REQUIRE(cfg.epochs_phase2 == 2);
  REQUIRE(cfg.dataset.split.holdout.size() == 2);
  REQUIRE(cfg.dataset.split.val_every == 4);
  REQUIRE(cfg.injection_layer == 2);

  SECTION("unknown top-level field") {
    j["typo_field"] = 1;
    REQUIRE_THROWS_AS(config_from_json(j), config_error);
  }
  SECTION("unknown nested field") {
    j["qformer"]["depth"] = 2;
    REQUIRE_THROWS_AS(config_from_json(j), config_error);
  }
  SECTION("bad pipeline name") {
    j["pipeline"] = "fused";
    REQUIRE_THROWS_AS(config_from_json(j), config_error);
  }
  SECTION("unsupported optimizer") {
    j["optimizer"]["kind"] = "sgd";
    REQUIRE_THROWS_AS(config_from_json(j), config_error);
  }
  SECTION("malformed holdout pair") {
    j["dataset"]["holdout"] = {{0, 1, 2}};
    REQUIRE_THROWS_AS(config_from_json(j), config_error);
  }
  SECTION("string forms for bundle and dataset references") {
    j["bundle"] = "some/bundle/dir";
    j["dataset"] = "some/data/dir";
    auto c = config_from_json(j);
    REQUIRE(c.bundle.path == "some/bundle/dir");
    REQUIRE(c.dataset.path == "some/data/dir");
  }
}

TEST_CASE("config validation enforces phase consistency") {
  auto cfg = quick_cfg(ExperimentKind::multitask);
  REQUIRE_THROWS_AS(cfg.validate(), config_error);  // two-phase kind, phase2 unset
  cfg.epochs_phase2 = 2;
  REQUIRE_NOTHROW(cfg.validate());

  auto single = quick_cfg(ExperimentKind::single_task_caption);
  single.epochs_phase2 = 1;
  REQUIRE_THROWS_AS(single.validate(), config_error);
  single.epochs_phase2 = 0;
  single.epochs = 0;
  REQUIRE_THROWS_AS(single.validate(), config_error);

  auto ablate = quick_cfg(ExperimentKind::grounding_ablation);
  REQUIRE_THROWS_AS(ablate.validate(), config_error);  // standard pipeline
  ablate.grounded = true;
  REQUIRE_NOTHROW(ablate.validate());

  auto bench = quick_cfg(ExperimentKind::bench_time);
  bench.bench_measured = 3;
  REQUIRE_THROWS_AS(bench.validate(), config_error);
}

TEST_CASE("config hash ignores out_dir and tracks the pipeline field") {
  auto a = quick_cfg(ExperimentKind::single_task_caption);
  auto b = a;
  b.out_dir = "elsewhere";
  REQUIRE(config_hash(a) == config_hash(b));

  auto c = a;
  c.grounded = true;
  REQUIRE(config_hash(a) != config_hash(c));

  auto round = config_from_json(config_to_json(a));
  REQUIRE(config_hash(round) == config_hash(a));
}

TEST_CASE("injection layer resolves to the deep sweep entry by default") {
  auto cfg = quick_cfg(ExperimentKind::single_task_caption);
  REQUIRE(resolve_injection_layer(cfg, 6) == 4);
  REQUIRE(resolve_injection_layer(cfg, 3) == 2);
  cfg.injection_layer = 0;
  REQUIRE(resolve_injection_layer(cfg, 3) == 0);
  cfg.injection_layer = 4;
  REQUIRE_THROWS_AS(resolve_injection_layer(cfg, 3), config_error);
}

TEST_CASE("metrics csv leaves empty cells for absent values") {
  EpochMetric train_row;
  train_row.epoch = 1;
  train_row.phase = 1;
  train_row.task = "caption";
  train_row.loss = 0.5;
  train_row.encoder_calls = 12;
  EpochMetric val_row;
  val_row.epoch = 2;
  val_row.phase = 2;
  val_row.task = "vqa";
  val_row.accuracy = 0.25;
  const auto dir = fresh_dir("metrics_csv");
  fs::create_directories(dir);
  const auto path = (dir / "metrics.csv").string();
  write_metrics_csv(path, {train_row, val_row});
  REQUIRE(slurp(path) ==
          "epoch,phase,task,loss,bleu4,accuracy,encoder_calls,seconds\n"
          "1,1,caption,0.5,,,12,\n"
          "2,2,vqa,,,0.25,,\n");
  fs::remove_all(dir);
}

TEST_CASE("summary lands atomically with no tmp residue") {
  const auto dir = fresh_dir("summary");
  write_summary_atomic(dir.string(), {{"ok", true}});
  REQUIRE(fs::exists(dir / "summary.json"));
  REQUIRE_FALSE(fs::exists(dir / "summary.json.tmp"));
  auto parsed = nlohmann::json::parse(slurp(dir / "summary.json"));
  REQUIRE(parsed.at("ok").get<bool>());
  fs::remove_all(dir);
}

TEST_CASE("single-task caption run trains, audits, and records per-epoch rows") {
  auto cfg = quick_cfg(ExperimentKind::single_task_caption);
  auto& bundle = small_encdec();
  const auto& ds = shared_ds();
  auto result = train_single_task(cfg, bundle, ds);
  const auto& record = result.record;

  REQUIRE(record.metrics.size() == cfg.epochs);
  double first_loss = 0.0, last_loss = 0.0;
  for (std::size_t e = 0; e < record.metrics.size(); ++e) {
    const auto& row = record.metrics[e];
    REQUIRE(row.epoch == e + 1);
    REQUIRE(row.phase == 1);
    REQUIRE(row.task == "caption");
    REQUIRE(row.loss.has_value());
    REQUIRE(row.bleu4.has_value());
    REQUIRE_FALSE(row.accuracy.has_value());
    REQUIRE_FALSE(row.seconds.has_value());  // wall time stays out by default
    REQUIRE(row.encoder_calls == ds.train.size());  // standard: one encode per sample
    if (e == 0) first_loss = *row.loss;
    last_loss = *row.loss;
  }
  REQUIRE(last_loss < first_loss);
  REQUIRE(record.fingerprint_before == record.fingerprint_after);
  REQUIRE(record.fingerprint_before == hex64(bundle.fingerprint));
  REQUIRE(record.config_hash == config_hash(cfg));

  // The summary's initial/final losses are dedicated eval passes around the
  // training loop, not running means. Recount the final one from the returned
  // weights with the same pinned-prompt protocol.
  double recount = 0.0;
  {
    autograd::NoGradGuard ng;
    const auto prompt = ds.vocab.tokenize(caption_prompts()[0], true);
    for (std::size_t idx : ds.train) {
      recount += static_cast<double>(standard_encdec_forward(bundle, result.qf, ds.images[idx],
                                                             prompt, ds.samples[idx].caption_ids)
                                         .loss.value());
    }
    recount /= static_cast<double>(ds.train.size());
  }
  REQUIRE(record.summary.at("final_train_loss").get<double>() == recount);
  REQUIRE(record.summary.at("initial_train_loss").get<double>() > 0.0);
  REQUIRE(result.touched_scenes.size() <= ds.train.size());
}

TEST_CASE("grounded caption run caches the prompt pool") {
  auto cfg = quick_cfg(ExperimentKind::single_task_caption);
  cfg.grounded = true;
  auto result = train_single_task(cfg, small_encdec(), shared_ds());
  for (const auto& row : result.record.metrics) {
    REQUIRE(*row.encoder_calls >= 1);
    REQUIRE(*row.encoder_calls <= caption_prompts().size());
  }
}

TEST_CASE("single-task vqa reports accuracy instead of bleu") {
  auto cfg = quick_cfg(ExperimentKind::single_task_vqa);
  cfg.grounded = true;
  auto result = train_single_task(cfg, small_encdec(), shared_ds());
  for (const auto& row : result.record.metrics) {
    REQUIRE(row.task == "vqa");
    REQUIRE(row.accuracy.has_value());
    REQUIRE_FALSE(row.bleu4.has_value());
    REQUIRE(*row.accuracy >= 0.0);
    REQUIRE(*row.accuracy <= 1.0);
  }
}

TEST_CASE("config pair differing only in pipeline yields paired records") {
  auto standard_cfg = quick_cfg(ExperimentKind::single_task_caption);
  standard_cfg.epochs = 1;
  auto grounded_cfg = standard_cfg;
  grounded_cfg.grounded = true;
  auto standard = train_single_task(standard_cfg, small_encdec(), shared_ds());
  auto grounded = train_single_task(grounded_cfg, small_encdec(), shared_ds());
  REQUIRE(standard.record.config_hash != grounded.record.config_hash);
  REQUIRE(standard.record.metrics.size() == grounded.record.metrics.size());
  REQUIRE(standard.record.summary.at("pipeline") == "standard-encdec");
  REQUIRE(grounded.record.summary.at("pipeline") == "grounded-encdec");
  // Matched seeds, matched data order.
  REQUIRE(standard.order_fingerprints == grounded.order_fingerprints);
}

TEST_CASE("multitask phases split at the configured boundary") {
  auto cfg = quick_cfg(ExperimentKind::multitask);
  cfg.epochs = 2;
  cfg.epochs_phase2 = 2;
  auto result = train_multitask(cfg, small_encdec(), shared_ds());
  const auto& rows = result.record.metrics;
  // Phase 1: one caption row per epoch. Phase 2: caption + vqa rows.
  REQUIRE(rows.size() == cfg.epochs + 2 * cfg.epochs_phase2);
  for (const auto& row : rows) {
    REQUIRE(row.phase == (row.epoch <= cfg.epochs ? 1u : 2u));
  }
  for (std::size_t e = cfg.epochs + 1; e <= cfg.epochs + cfg.epochs_phase2; ++e) {
    const auto cap = std::find_if(rows.begin(), rows.end(), [&](const EpochMetric& r) {
      return r.epoch == e && r.task == "caption";
    });
    const auto vqa = std::find_if(rows.begin(), rows.end(), [&](const EpochMetric& r) {
      return r.epoch == e && r.task == "vqa";
    });
    REQUIRE(cap != rows.end());
    REQUIRE(vqa != rows.end());
    REQUIRE(cap->bleu4.has_value());
    REQUIRE(cap->loss.has_value());
    REQUIRE(vqa->accuracy.has_value());
    REQUIRE(vqa->loss.has_value());
  }
  REQUIRE(result.record.summary.at("phase_boundary").get<std::size_t>() == cfg.epochs);
}

TEST_CASE("multitask reruns are bitwise deterministic") {
  auto cfg = quick_cfg(ExperimentKind::multitask);
  cfg.epochs = 1;
  cfg.epochs_phase2 = 1;
  auto a = train_multitask(cfg, small_encdec(), shared_ds());
  auto b = train_multitask(cfg, small_encdec(), shared_ds());
  REQUIRE(a.record.metrics.size() == b.record.metrics.size());
  for (std::size_t i = 0; i < a.record.metrics.size(); ++i) {
    const auto& ra = a.record.metrics[i];
    const auto& rb = b.record.metrics[i];
    REQUIRE(ra.loss == rb.loss);
    REQUIRE(ra.bleu4 == rb.bleu4);
    REQUIRE(ra.accuracy == rb.accuracy);
    REQUIRE(ra.encoder_calls == rb.encoder_calls);
  }
  REQUIRE(a.order_fingerprints == b.order_fingerprints);
}

TEST_CASE("zero-shot audit passes on sound splits and reports the counting baseline") {
  auto cfg = quick_cfg(ExperimentKind::zero_shot);
  cfg.epochs = 1;
  cfg.epochs_phase2 = 1;
  const auto& ds = shared_ds();
  REQUIRE_FALSE(ds.test.empty());
  auto result = zero_shot_eval(cfg, small_encdec(), ds);
  REQUIRE(result.accuracy >= 0.0);
  REQUIRE(result.accuracy <= 1.0);
  REQUIRE(result.test_questions >= ds.test.size());  // at least the counting question each

  // Independent recount of the answer vocabulary.
  std::set<std::vector<int>> answers;
  for (const auto& sample : ds.samples) {
    for (const auto& qa : sample.qa) answers.insert(qa.answer_ids);
  }
  REQUIRE(result.answer_vocab_size == answers.size());
  REQUIRE(result.random_baseline == 1.0 / static_cast<double>(answers.size()));
  REQUIRE(result.train.record.summary.at("zero_shot_accuracy").get<double>() == result.accuracy);
}

TEST_CASE("zero-shot rejects corrupted splits") {
  auto cfg = quick_cfg(ExperimentKind::zero_shot);
  cfg.epochs = 1;
  cfg.epochs_phase2 = 1;
  Dataset corrupted = shared_ds();
  REQUIRE_FALSE(corrupted.test.empty());
  corrupted.train.push_back(corrupted.test.front());  // leak a holdout scene into train
  REQUIRE_THROWS_AS(zero_shot_eval(cfg, small_encdec(), corrupted), audit_error);
}

TEST_CASE("provenance scan catches holdout scenes that reached training") {
  // Generate without a holdout rule, then declare one that train scenes hit.
  Dataset ds = gen_dataset(92, 12, {});
  std::pair<int, int> combo{-1, -1};
  for (std::size_t idx : ds.train) {
    for (const auto& obj : ds.scenes[idx].objects) {
      combo = {obj.shape, obj.color};
    }
  }
  REQUIRE(combo.first >= 0);
  ds.split.holdout = {combo};
  auto cfg = quick_cfg(ExperimentKind::single_task_caption);
  cfg.epochs = 1;
  REQUIRE_THROWS_AS(train_single_task(cfg, small_encdec(), ds), audit_error);
}

TEST_CASE("bench reports medians, call counts, and a self-ratio near one") {
  auto cfg = quick_cfg(ExperimentKind::bench_time);
  cfg.epochs = 1;
  auto& bundle = small_encdec();
  const auto& ds = shared_ds();
  auto result = bench_epoch_time(cfg, bundle, ds);
  REQUIRE(result.standard.encoder_calls_per_epoch == ds.train.size());
  REQUIRE(result.grounded.encoder_calls_per_epoch >= 1);
  REQUIRE(result.grounded.encoder_calls_per_epoch <= caption_prompts().size());
  REQUIRE(result.standard.epoch_seconds.size() == cfg.bench_measured);
  REQUIRE(result.standard.median_seconds >= 0.010);
  REQUIRE(result.grounded.median_seconds >= 0.010);
  REQUIRE(result.ratio > 0.0);
  REQUIRE(result.unique_prompts == caption_prompts().size());

  SECTION("identical pipelines time within noise of each other") {
    auto again = fuselab::detail::bench_arm(cfg, bundle, ds, false);
    const double self_ratio = again.median_seconds / result.standard.median_seconds;
    REQUIRE(self_ratio > 0.5);
    REQUIRE(self_ratio < 2.0);
  }
}

TEST_CASE("timer floor rejects sub-resolution benchmarks") {
  auto cfg = quick_cfg(ExperimentKind::bench_time);
  cfg.qf_dim = 8;
  cfg.qf_heads = 2;
  cfg.qf_ff = 16;
  cfg.qf_queries = 2;
  auto tiny = build_frozen_bundle<float>(31, FrozenConfig::tiny(LmKind::encoder_decoder),
                                         short_recipe());
  Dataset ds = gen_dataset(93, 10, {});
  REQUIRE_THROWS_AS(bench_epoch_time(cfg, tiny, ds), config_error);
}

TEST_CASE("ablation arms share data order and the empty arm reduces to the ungrounded forward") {
  auto cfg = quick_cfg(ExperimentKind::grounding_ablation);
  cfg.grounded = true;
  cfg.epochs = 2;
  auto& bundle = small_encdec();
  const auto& ds = shared_ds();
  auto result = grounding_ablation(cfg, bundle, ds);
  REQUIRE(result.curve_with.size() == cfg.epochs);
  REQUIRE(result.curve_without.size() == cfg.epochs);
  REQUIRE(result.with_grounding.order_fingerprints ==
          result.without_grounding.order_fingerprints);
  REQUIRE(result.with_grounding.record.summary.at("grounding") == "full");
  REQUIRE(result.without_grounding.record.summary.at("grounding") == "empty");

  SECTION("paired curve file carries both series") {
    const auto dir = fresh_dir("paired_curves");
    fs::create_directories(dir);
    const auto path = (dir / "paired_curves.csv").string();
    write_paired_curves_csv(path, result.curve_with, result.curve_without);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "epoch,vqa_accuracy_with_grounding,vqa_accuracy_without_grounding");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    REQUIRE(rows == cfg.epochs);
    fs::remove_all(dir);
  }

  SECTION("empty arm loss equals the grounded forward fed an empty block") {
    auto qc = resolve_qformer_config(cfg, bundle.cfg);
    Rng rng(5);
    auto qf = QFormerState<float>::init(qc, rng);
    const auto& sample = ds.samples[ds.train[0]];
    const auto prompt = ds.vocab.tokenize(caption_prompts()[0], true);
    EncoderCache<float> cache;
    auto arm = fuselab::detail::empty_arm_encdec_loss(bundle, qf, ds.images[sample.scene_index],
                                                      prompt, sample.caption_ids, cache);
    auto enc_prompt = lm_encode(bundle, prompt).states;
    auto feats = vision_encode(bundle, ds.images[sample.scene_index]).features;
    auto grounded =
        grounded_qformer_forward(qf, empty_grounding<float>(qf.cfg), feats, prompt);
    auto memory = concat_rows<float>({project_to_lm(qf, grounded), enc_prompt});
    const auto [prefix, labels] = teacher_pair(sample.caption_ids);
    auto direct = cross_entropy_with_ids(lm_decode(bundle, memory, prefix), labels);
    REQUIRE(arm.value() == direct.value());
  }
}

TEST_CASE("probe suite emits one entry per target") {
  auto cfg = quick_cfg(ExperimentKind::probe);
  cfg.probe_epochs = 40;
  cfg.probe_lr = 0.02;
  cfg.analysis_samples = 16;
  auto& bundle = small_encdec();
  auto result = run_probe_suite(cfg, bundle, shared_ds());
  REQUIRE_FALSE(result.has_fresh);
  REQUIRE(result.samples == 16);
  const auto depth = bundle.cfg.lm.num_layers;
  REQUIRE(result.report.entries.size() == 2);  // input embeddings and encoder output
  REQUIRE(result.report.entries[0].target_label == "lm layer 0 aggregate");
  REQUIRE(result.report.entries[1].target_label ==
          "lm layer " + std::to_string(depth) + " aggregate");
  for (const auto& entry : result.report.entries) {
    REQUIRE(entry.losses.size() == cfg.probe_epochs);
    REQUIRE(std::isfinite(entry.final_loss));
  }
}

TEST_CASE("layer sweep probes the scaled layer set of a decoder-only bundle") {
  auto cfg = quick_cfg(ExperimentKind::layer_sweep);
  cfg.probe_epochs = 30;
  cfg.probe_lr = 0.02;
  cfg.analysis_samples = 12;
  auto& bundle = small_deconly();
  auto result = run_probe_suite(cfg, bundle, shared_ds());
  const auto expected = layer_sweep_indices(bundle.cfg.lm.num_layers);
  REQUIRE(result.report.entries.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    REQUIRE(result.report.entries[i].target_label ==
            "lm layer " + std::to_string(expected[i]) + " aggregate");
  }
}

TEST_CASE("probe suite adds a fresh-weights arm when a checkpoint is configured") {
  auto cfg = quick_cfg(ExperimentKind::probe);
  cfg.probe_epochs = 20;
  cfg.probe_lr = 0.02;
  cfg.analysis_samples = 12;
  auto& bundle = small_encdec();

  // A checkpoint that differs from the seed init: train one short epoch.
  auto train_cfg = quick_cfg(ExperimentKind::single_task_caption);
  train_cfg.epochs = 1;
  auto trained = train_single_task(train_cfg, bundle, shared_ds());
  const auto dir = fresh_dir("probe_ckpt");
  save_qformer(dir.string(), trained.qf);

  cfg.qformer_checkpoint = dir.string();
  auto result = run_probe_suite(cfg, bundle, shared_ds());
  REQUIRE(result.has_fresh);
  REQUIRE(result.report.entries.size() == result.fresh_report.entries.size());
  bool any_difference = false;
  for (std::size_t i = 0; i < result.report.entries.size(); ++i) {
    any_difference = any_difference || result.report.entries[i].final_loss !=
                                           result.fresh_report.entries[i].final_loss;
  }
  REQUIRE(any_difference);  // training moved the source representations
  fs::remove_all(dir);
}

TEST_CASE("alignment heatmap spans every layer pair") {
  auto cfg = quick_cfg(ExperimentKind::align);
  cfg.analysis_samples = 20;
  cfg.k_neighbors = 5;
  auto& bundle = small_encdec();
  auto hm = run_alignment(cfg, bundle, shared_ds());
  REQUIRE(hm.scores.size() == bundle.cfg.lm.num_layers + 1);
  REQUIRE(hm.scores[0].size() == bundle.cfg.vision.num_layers + 1);
  REQUIRE(hm.k == 5);
  for (const auto& row : hm.scores) {
    for (double s : row) {
      REQUIRE(s >= 0.0);
      REQUIRE(s <= 1.0);
    }
  }
}

TEST_CASE("run_experiment persists artifacts and reruns bitwise") {
  // Point the config at a saved copy of the shared bundle so both runs load
  // identical weights without re-pretraining.
  const auto bundle_dir = fresh_dir("exp_bundle");
  save_bundle(bundle_dir.string(), small_encdec());

  auto cfg = quick_cfg(ExperimentKind::single_task_caption);
  cfg.bundle.path = bundle_dir.string();
  cfg.epochs = 1;
  const auto out_a = fresh_dir("exp_run_a");
  const auto out_b = fresh_dir("exp_run_b");
  cfg.out_dir = out_a.string();
  auto record_a = run_experiment(cfg);
  cfg.out_dir = out_b.string();
  auto record_b = run_experiment(cfg);

  REQUIRE(record_a.config_hash == record_b.config_hash);
  REQUIRE(fs::exists(out_a / "metrics.csv"));
  REQUIRE(fs::exists(out_a / "summary.json"));
  REQUIRE(fs::exists(out_a / "qformer" / "manifest.json"));
  REQUIRE(slurp(out_a / "metrics.csv") == slurp(out_b / "metrics.csv"));
  REQUIRE(slurp(out_a / "qformer" / "manifest.json") ==
          slurp(out_b / "qformer" / "manifest.json"));

  fs::remove_all(bundle_dir);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
}

TEST_CASE("run_experiment writes analysis artifacts for align and probe kinds") {
  const auto bundle_dir = fresh_dir("exp_bundle2");
  save_bundle(bundle_dir.string(), small_encdec());

  auto align_cfg = quick_cfg(ExperimentKind::align);
  align_cfg.bundle.path = bundle_dir.string();
  align_cfg.analysis_samples = 12;
  align_cfg.k_neighbors = 4;
  const auto align_out = fresh_dir("exp_align");
  align_cfg.out_dir = align_out.string();
  run_experiment(align_cfg);
  REQUIRE(fs::exists(align_out / "heatmap.csv"));
  auto sidecar = nlohmann::json::parse(slurp(align_out / "heatmap.json"));
  REQUIRE(sidecar.contains("argmax"));
  auto summary = nlohmann::json::parse(slurp(align_out / "summary.json"));
  REQUIRE(summary.at("k").get<std::size_t>() == 4);
  REQUIRE(summary.contains("argmax_row"));

  auto probe_cfg = quick_cfg(ExperimentKind::probe);
  probe_cfg.bundle.path = bundle_dir.string();
  probe_cfg.analysis_samples = 12;
  probe_cfg.probe_epochs = 10;
  probe_cfg.probe_lr = 0.02;
  const auto probe_out = fresh_dir("exp_probe");
  probe_cfg.out_dir = probe_out.string();
  run_experiment(probe_cfg);
  auto report = nlohmann::json::parse(slurp(probe_out / "probe_report.json"));
  REQUIRE(report.at("entries").size() == 2);
  REQUIRE(report.at("samples").get<std::size_t>() == 12);

  fs::remove_all(bundle_dir);
  fs::remove_all(align_out);
  fs::remove_all(probe_out);
}
