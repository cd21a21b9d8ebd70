#pragma once
// Experiment orchestration: config-driven training runs over the four fusion
// pipelines with persisted metrics, plus the measurement programs (zero-shot
// eval, epoch-timing benchmark, grounding ablation, probe and alignment
// exports). Everything here is a pure function of the RunConfig in
// single-threaded mode; wall-clock seconds are the one exception and stay out
// of the persisted metrics unless explicitly requested.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "analysis.hpp"
#include "dataworld.hpp"
#include "optim.hpp"
#include "pipelines.hpp"

namespace fuselab {

// ============================================================================
// Run configuration
// ============================================================================

enum class ExperimentKind {
  single_task_caption,
  single_task_vqa,
  multitask,
  zero_shot,
  probe,
  align,
  bench_time,
  grounding_ablation,
  layer_sweep,
};

inline std::string experiment_kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::single_task_caption: return "single-task-caption";
    case ExperimentKind::single_task_vqa: return "single-task-vqa";
    case ExperimentKind::multitask: return "multitask";
    case ExperimentKind::zero_shot: return "zero-shot";
    case ExperimentKind::probe: return "probe";
    case ExperimentKind::align: return "align";
    case ExperimentKind::bench_time: return "bench-time";
    case ExperimentKind::grounding_ablation: return "grounding-ablation";
    case ExperimentKind::layer_sweep: return "layer-sweep";
  }
  throw contract_error("unreachable experiment kind");
}

inline ExperimentKind experiment_kind_from(const std::string& s) {
  for (auto k : {ExperimentKind::single_task_caption, ExperimentKind::single_task_vqa,
                 ExperimentKind::multitask, ExperimentKind::zero_shot, ExperimentKind::probe,
                 ExperimentKind::align, ExperimentKind::bench_time,
                 ExperimentKind::grounding_ablation, ExperimentKind::layer_sweep}) {
    if (experiment_kind_name(k) == s) return k;
  }
  throw config_error("unknown experiment kind '" + s + "'");
}

inline LmKind lm_kind_from(const std::string& s) {
  if (s == "encoder-decoder") return LmKind::encoder_decoder;
  if (s == "decoder-only") return LmKind::decoder_only;
  throw config_error("unknown lm kind '" + s + "'");
}

// Where the frozen models come from: a saved directory, or an on-the-fly
// build described by (kind, size, seed).
struct BundleRef {
  std::string path;
  LmKind kind = LmKind::encoder_decoder;
  std::string size = "default";  // default | small | tiny
  std::uint64_t seed = 7;

  FrozenConfig config() const {
    if (size == "default") return FrozenConfig::defaults(kind);
    if (size == "small") return FrozenConfig::small(kind);
    if (size == "tiny") return FrozenConfig::tiny(kind);
    throw config_error("unknown bundle size '" + size + "' (want default/small/tiny)");
  }
};

struct DatasetRef {
  std::string path;
  std::uint64_t seed = 5;
  std::size_t n_scenes = 400;
  SplitSpec split;
};

struct RunConfig {
  ExperimentKind kind = ExperimentKind::single_task_caption;
  bool grounded = false;  // pipeline field: standard vs grounded
  BundleRef bundle;
  std::size_t qf_queries = 8;
  std::size_t qf_dim = 64;
  std::size_t qf_blocks = 4;
  std::size_t qf_heads = 4;
  std::size_t qf_ff = 256;
  OptimConfig optim;
  std::size_t epochs = 8;         // phase 1 (or the only phase)
  std::size_t epochs_phase2 = 0;  // multitask / zero-shot instruction phase
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  DatasetRef dataset;
  std::string out_dir = "run";
  std::int64_t injection_layer = -1;  // grounded decoder-only; -1 = auto
  std::size_t max_gen_len = 24;
  std::size_t k_neighbors = 10;
  NeighborMetric metric = NeighborMetric::cosine;
  std::size_t analysis_samples = 64;  // probe / align sample cap
  std::size_t probe_epochs = 300;
  double probe_lr = 0.05;
  std::string qformer_checkpoint;  // probe from a trained state when set
  std::size_t bench_measured = 5;
  std::size_t bench_warmup = 1;
  bool record_wall_time = false;

  void validate() const {
    if (epochs < 1) throw config_error("epochs must be >= 1");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (max_gen_len < 1) throw config_error("max_gen_len must be >= 1");
    if (k_neighbors < 1) throw config_error("k_neighbors must be >= 1");
    if (analysis_samples < 2) throw config_error("analysis_samples must be >= 2");
    const bool two_phase =
        kind == ExperimentKind::multitask || kind == ExperimentKind::zero_shot;
    if (two_phase && epochs_phase2 < 1) {
      throw config_error(experiment_kind_name(kind) + " needs epochs_phase2 >= 1");
    }
    if (!two_phase && epochs_phase2 != 0) {
      throw config_error(experiment_kind_name(kind) + " is single-phase; epochs_phase2 must be 0");
    }
    if (kind == ExperimentKind::grounding_ablation && !grounded) {
      throw config_error("grounding-ablation requires the grounded pipeline");
    }
    if (kind == ExperimentKind::bench_time) {
      if (bench_measured < 5) throw config_error("bench_measured must be >= 5");
      if (bench_warmup < 1) throw config_error("bench_warmup must be >= 1");
    }
    if (injection_layer < -1) throw config_error("injection_layer must be -1 (auto) or >= 0");
  }
};

inline PipelineKind resolve_pipeline(const RunConfig& cfg, LmKind bundle_kind) {
  if (bundle_kind == LmKind::encoder_decoder) {
    return cfg.grounded ? PipelineKind::grounded_encdec : PipelineKind::standard_encdec;
  }
  return cfg.grounded ? PipelineKind::grounded_deconly : PipelineKind::standard_deconly;
}

// Auto injection depth: the second-to-last entry of the scaled layer sweep,
// deep enough to count as intermediate while leaving layers above it.
inline std::size_t resolve_injection_layer(const RunConfig& cfg, std::size_t depth) {
  if (cfg.injection_layer >= 0) {
    const auto n = static_cast<std::size_t>(cfg.injection_layer);
    if (n > depth) {
      throw config_error("injection_layer " + std::to_string(n) + " outside [0, " +
                         std::to_string(depth) + "]");
    }
    return n;
  }
  return (2 * depth + 2) / 3;
}

// ============================================================================
// JSON schema (exact: unknown fields are rejected)
// ============================================================================

namespace detail {

inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const char* where) {
  if (!j.is_object()) throw config_error(std::string(where) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed) known = known || it.key() == a;
    if (!known) throw config_error(std::string(where) + ": unknown field '" + it.key() + "'");
  }
}

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  detail::require_keys(
      j,
      {"kind", "pipeline", "bundle", "qformer", "optimizer", "epochs", "epochs_phase2",
       "batch_size", "seed", "dataset", "out_dir", "injection_layer", "max_gen_len", "k_neighbors",
       "metric", "analysis_samples", "probe_epochs", "probe_lr", "qformer_checkpoint",
       "bench_measured", "bench_warmup", "record_wall_time"},
      "config");
  RunConfig cfg;
  if (j.contains("kind")) cfg.kind = experiment_kind_from(j.at("kind").get<std::string>());
  if (j.contains("pipeline")) {
    const auto p = j.at("pipeline").get<std::string>();
    if (p != "standard" && p != "grounded") {
      throw config_error("pipeline must be 'standard' or 'grounded', got '" + p + "'");
    }
    cfg.grounded = p == "grounded";
  }
  if (j.contains("bundle")) {
    const auto& b = j.at("bundle");
    if (b.is_string()) {
      cfg.bundle.path = b.get<std::string>();
    } else {
      detail::require_keys(b, {"path", "kind", "size", "seed"}, "config.bundle");
      detail::read_field(b, "path", cfg.bundle.path);
      if (b.contains("kind")) cfg.bundle.kind = lm_kind_from(b.at("kind").get<std::string>());
      detail::read_field(b, "size", cfg.bundle.size);
      detail::read_field(b, "seed", cfg.bundle.seed);
    }
  }
  if (j.contains("qformer")) {
    const auto& q = j.at("qformer");
    detail::require_keys(q, {"num_queries", "dim", "num_blocks", "num_heads", "ff_dim"},
                         "config.qformer");
    detail::read_field(q, "num_queries", cfg.qf_queries);
    detail::read_field(q, "dim", cfg.qf_dim);
    detail::read_field(q, "num_blocks", cfg.qf_blocks);
    detail::read_field(q, "num_heads", cfg.qf_heads);
    detail::read_field(q, "ff_dim", cfg.qf_ff);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::require_keys(o, {"kind", "lr", "beta1", "beta2", "weight_decay"}, "config.optimizer");
    if (o.contains("kind") && o.at("kind").get<std::string>() != "adamw") {
      throw config_error("optimizer kind '" + o.at("kind").get<std::string>() +
                         "' not supported (only adamw)");
    }
    detail::read_field(o, "lr", cfg.optim.lr);
    detail::read_field(o, "beta1", cfg.optim.beta1);
    detail::read_field(o, "beta2", cfg.optim.beta2);
    detail::read_field(o, "weight_decay", cfg.optim.weight_decay);
  }
  detail::read_field(j, "epochs", cfg.epochs);
  detail::read_field(j, "epochs_phase2", cfg.epochs_phase2);
  detail::read_field(j, "batch_size", cfg.batch_size);
  detail::read_field(j, "seed", cfg.seed);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.is_string()) {
      cfg.dataset.path = d.get<std::string>();
    } else {
      detail::require_keys(d, {"path", "seed", "n_scenes", "holdout", "val_every"},
                           "config.dataset");
      detail::read_field(d, "path", cfg.dataset.path);
      detail::read_field(d, "seed", cfg.dataset.seed);
      detail::read_field(d, "n_scenes", cfg.dataset.n_scenes);
      if (d.contains("holdout")) {
        for (const auto& pair : d.at("holdout")) {
          if (!pair.is_array() || pair.size() != 2) {
            throw config_error("dataset.holdout entries must be [shape, color] pairs");
          }
          cfg.dataset.split.holdout.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
        }
      }
      detail::read_field(d, "val_every", cfg.dataset.split.val_every);
    }
  }
  detail::read_field(j, "out_dir", cfg.out_dir);
  detail::read_field(j, "injection_layer", cfg.injection_layer);
  detail::read_field(j, "max_gen_len", cfg.max_gen_len);
  detail::read_field(j, "k_neighbors", cfg.k_neighbors);
  if (j.contains("metric")) cfg.metric = neighbor_metric_from(j.at("metric").get<std::string>());
  detail::read_field(j, "analysis_samples", cfg.analysis_samples);
  detail::read_field(j, "probe_epochs", cfg.probe_epochs);
  detail::read_field(j, "probe_lr", cfg.probe_lr);
  detail::read_field(j, "qformer_checkpoint", cfg.qformer_checkpoint);
  detail::read_field(j, "bench_measured", cfg.bench_measured);
  detail::read_field(j, "bench_warmup", cfg.bench_warmup);
  detail::read_field(j, "record_wall_time", cfg.record_wall_time);
  cfg.validate();
  return cfg;
}

// Canonical form: every field explicit, keys sorted by the json object. The
// config hash is the FNV-1a of this dump minus out_dir, so the same
// experiment pointed at two directories hashes identically.
inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["kind"] = experiment_kind_name(cfg.kind);
  j["pipeline"] = cfg.grounded ? "grounded" : "standard";
  j["bundle"] = {{"path", cfg.bundle.path},
                 {"kind", lm_kind_name(cfg.bundle.kind)},
                 {"size", cfg.bundle.size},
                 {"seed", cfg.bundle.seed}};
  j["qformer"] = {{"num_queries", cfg.qf_queries},
                  {"dim", cfg.qf_dim},
                  {"num_blocks", cfg.qf_blocks},
                  {"num_heads", cfg.qf_heads},
                  {"ff_dim", cfg.qf_ff}};
  j["optimizer"] = {{"kind", "adamw"},
                    {"lr", cfg.optim.lr},
                    {"beta1", cfg.optim.beta1},
                    {"beta2", cfg.optim.beta2},
                    {"weight_decay", cfg.optim.weight_decay}};
  j["epochs"] = cfg.epochs;
  j["epochs_phase2"] = cfg.epochs_phase2;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  nlohmann::json holdout = nlohmann::json::array();
  for (const auto& [s, c] : cfg.dataset.split.holdout) holdout.push_back({s, c});
  j["dataset"] = {{"path", cfg.dataset.path},
                  {"seed", cfg.dataset.seed},
                  {"n_scenes", cfg.dataset.n_scenes},
                  {"holdout", holdout},
                  {"val_every", cfg.dataset.split.val_every}};
  j["out_dir"] = cfg.out_dir;
  j["injection_layer"] = cfg.injection_layer;
  j["max_gen_len"] = cfg.max_gen_len;
  j["k_neighbors"] = cfg.k_neighbors;
  j["metric"] = neighbor_metric_name(cfg.metric);
  j["analysis_samples"] = cfg.analysis_samples;
  j["probe_epochs"] = cfg.probe_epochs;
  j["probe_lr"] = cfg.probe_lr;
  j["qformer_checkpoint"] = cfg.qformer_checkpoint;
  j["bench_measured"] = cfg.bench_measured;
  j["bench_warmup"] = cfg.bench_warmup;
  j["record_wall_time"] = cfg.record_wall_time;
  return j;
}

inline std::string config_hash(const RunConfig& cfg) {
  auto j = config_to_json(cfg);
  j.erase("out_dir");
  return hex64(detail::fnv1a64(j.dump()));
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error(path + ": " + e.what());
  }
  return config_from_json(j);
}

// ============================================================================
// Resolution of references
// ============================================================================

template <typename T>
FrozenBundle<T> resolve_bundle(const RunConfig& cfg) {
  if (!cfg.bundle.path.empty()) return load_bundle<T>(cfg.bundle.path);
  return build_frozen_bundle<T>(cfg.bundle.seed, cfg.bundle.config());
}

inline Dataset resolve_dataset(const RunConfig& cfg) {
  if (!cfg.dataset.path.empty()) return load_dataset(cfg.dataset.path);
  return gen_dataset(cfg.dataset.seed, cfg.dataset.n_scenes, cfg.dataset.split);
}

inline QFormerConfig resolve_qformer_config(const RunConfig& cfg, const FrozenConfig& bundle_cfg) {
  QFormerConfig qc = QFormerConfig::for_bundle(bundle_cfg);
  qc.num_queries = cfg.qf_queries;
  qc.dim = cfg.qf_dim;
  qc.num_blocks = cfg.qf_blocks;
  qc.num_heads = cfg.qf_heads;
  qc.ff_dim = cfg.qf_ff;
  qc.validate();
  return qc;
}

// ============================================================================
// Run records
// ============================================================================

struct EpochMetric {
  std::size_t epoch = 0;  // 1-based, global across phases
  std::size_t phase = 1;
  std::string task;  // caption | vqa
  std::optional<double> loss;
  std::optional<double> bleu4;
  std::optional<double> accuracy;
  std::optional<std::size_t> encoder_calls;
  std::optional<double> seconds;
};

struct RunRecord {
  std::vector<EpochMetric> metrics;
  nlohmann::json summary;
  std::string config_hash;
  std::string fingerprint_before;
  std::string fingerprint_after;
};

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetric>& rows) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path);
  out << "epoch,phase,task,loss,bleu4,accuracy,encoder_calls,seconds\n";
  auto cell = [&](const std::optional<double>& v) {
    if (v) out << fmt_g17(*v);
  };
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.phase << ',' << r.task << ',';
    cell(r.loss);
    out << ',';
    cell(r.bleu4);
    out << ',';
    cell(r.accuracy);
    out << ',';
    if (r.encoder_calls) out << *r.encoder_calls;
    out << ',';
    cell(r.seconds);
    out << '\n';
  }
}

// The summary doubles as the completed-run manifest, so it lands via atomic
// rename and is written after every other artifact.
inline void write_summary_atomic(const std::string& dir, const nlohmann::json& summary) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path tmp = fs::path(dir) / "summary.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw format_error("cannot write " + tmp.string());
    out << summary.dump(2) << '\n';
  }
  fs::rename(tmp, fs::path(dir) / "summary.json");
}

// ============================================================================
// Training loop
// ============================================================================

namespace detail {

struct TrainItem {
  std::size_t scene = 0;
  int qa = -1;  // >= 0 picks a question, < 0 the caption
};

inline std::vector<TrainItem> caption_items(const Dataset& ds) {
  std::vector<TrainItem> items;
  for (std::size_t i : ds.train) items.push_back({i, -1});
  return items;
}

inline std::vector<TrainItem> vqa_items(const Dataset& ds) {
  std::vector<TrainItem> items;
  for (std::size_t i : ds.train) {
    for (std::size_t q = 0; q < ds.samples[i].qa.size(); ++q) {
      items.push_back({i, static_cast<int>(q)});
    }
  }
  return items;
}

inline std::uint64_t order_fingerprint(const std::vector<TrainItem>& items) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const auto& it : items) {
    mix(it.scene);
    mix(static_cast<std::uint64_t>(it.qa) + 1);
  }
  return h;
}

// Prompt and target token ids for one item under a per-iteration prompt draw.
inline std::pair<std::vector<int>, std::vector<int>> item_text(const Dataset& ds,
                                                               const TrainItem& it,
                                                               Rng& prompt_rng) {
  const auto& sample = ds.samples[it.scene];
  if (it.qa < 0) {
    const auto& pool = caption_prompts();
    return {ds.vocab.tokenize(pool[prompt_rng.next_below(pool.size())], true),
            sample.caption_ids};
  }
  const auto& pool = vqa_prompt_prefixes();
  auto prompt = ds.vocab.tokenize(pool[prompt_rng.next_below(pool.size())], true);
  const auto& qa = sample.qa[static_cast<std::size_t>(it.qa)];
  prompt.insert(prompt.end(), qa.question_ids.begin(), qa.question_ids.end());
  return {prompt, qa.answer_ids};
}

// The ablation's no-grounding arms keep the grounded pipeline's structure
// (decoder memory layout, injection slot) but feed the QFormer its ungrounded
// forward, which is what an empty grounding block reduces to.
template <typename T>
Tensor<T> empty_arm_encdec_loss(const FrozenBundle<T>& bundle, const QFormerState<T>& qf,
                                const Tensor<float>& image, const std::vector<int>& prompt_ids,
                                const std::vector<int>& target_ids, EncoderCache<T>& cache) {
  auto enc_prompt =
      cache.get_or_compute(prompt_ids, [&] { return lm_encode(bundle, prompt_ids).states; });
  auto feats = vision_encode(bundle, image).features;
  auto projected = project_to_lm(qf, qformer_forward(qf, feats, prompt_ids));
  auto memory = concat_rows<T>({projected, enc_prompt});
  const auto [prefix, labels] = teacher_pair(target_ids);
  return cross_entropy_with_ids(lm_decode(bundle, memory, prefix), labels);
}

template <typename T>
Tensor<T> empty_arm_deconly_loss(const FrozenBundle<T>& bundle, const QFormerState<T>& qf,
                                 const Tensor<float>& image, const std::vector<int>& prompt_ids,
                                 const std::vector<int>& target_ids, std::size_t layer_n) {
  auto feats = vision_encode(bundle, image).features;
  auto projected = project_to_lm(qf, qformer_forward(qf, feats, prompt_ids));
  const auto [prefix, labels] = teacher_pair(target_ids);
  auto comp = lm_compose(bundle, {Segment<T>::tokens_of("p", prompt_ids),
                                  Segment<T>::tokens_of("tgt", prefix)});
  Injection<T> inject{layer_n, projected};
  auto states = lm_deconly_states(bundle, comp, &inject);
  auto tgt_states = slice_rows(states, comp.offset_of("tgt"), comp.total());
  return cross_entropy_with_ids(logits_from_states(tgt_states, bundle.lm_embed), labels);
}

template <typename T>
Tensor<T> pipeline_loss(PipelineKind kind, const FrozenBundle<T>& bundle,
                        const QFormerState<T>& qf, const Tensor<float>& image,
                        const std::vector<int>& prompt_ids, const std::vector<int>& target_ids,
                        EncoderCache<T>& cache, std::size_t layer_n, bool empty_grounding_arm) {
  switch (kind) {
    case PipelineKind::standard_encdec:
      return standard_encdec_forward(bundle, qf, image, prompt_ids, target_ids, &cache).loss;
    case PipelineKind::standard_deconly:
      return standard_deconly_forward(bundle, qf, image, prompt_ids, target_ids).loss;
    case PipelineKind::grounded_encdec:
      if (empty_grounding_arm) {
        return empty_arm_encdec_loss(bundle, qf, image, prompt_ids, target_ids, cache);
      }
      return grounded_encdec_forward(bundle, qf, image, prompt_ids, target_ids, cache).loss;
    case PipelineKind::grounded_deconly:
      if (empty_grounding_arm) {
        return empty_arm_deconly_loss(bundle, qf, image, prompt_ids, target_ids, layer_n);
      }
      return grounded_deconly_forward(bundle, qf, image, prompt_ids, target_ids, layer_n, &cache)
          .loss;
  }
  throw contract_error("unreachable pipeline kind");
}

// Greedy decoding for the no-grounding arms, mirroring generate().
template <typename T>
std::vector<int> empty_arm_generate(PipelineKind kind, const FrozenBundle<T>& bundle,
                                    const QFormerState<T>& qf, const Tensor<float>& image,
                                    const std::vector<int>& prompt_ids, std::size_t max_len,
                                    EncoderCache<T>& cache, std::size_t layer_n) {
  autograd::NoGradGuard ng;
  std::vector<int> generated;
  auto feats = vision_encode(bundle, image).features;
  auto projected = project_to_lm(qf, qformer_forward(qf, feats, prompt_ids));
  std::vector<int> prefix{Vocab::kStart};
  if (kind == PipelineKind::grounded_encdec) {
    auto enc_prompt =
        cache.get_or_compute(prompt_ids, [&] { return lm_encode(bundle, prompt_ids).states; });
    auto memory = concat_rows<T>({projected, enc_prompt});
    const std::size_t room = bundle.cfg.lm.max_seq_len - 1;
    while (generated.size() < std::min(max_len, room)) {
      const int next = greedy_pick(lm_decode(bundle, memory, prefix));
      if (next == Vocab::kEnd) break;
      generated.push_back(next);
      prefix.push_back(next);
    }
    return generated;
  }
  Injection<T> inject{layer_n, projected};
  const std::size_t base = prompt_ids.size() + 1;
  const std::size_t room =
      bundle.cfg.lm.max_seq_len > base ? bundle.cfg.lm.max_seq_len - base : 0;
  while (generated.size() < std::min(max_len, room)) {
    auto comp = lm_compose(bundle, {Segment<T>::tokens_of("p", prompt_ids),
                                    Segment<T>::tokens_of("tgt", prefix)});
    auto states = lm_deconly_states(bundle, comp, &inject);
    const int next =
        greedy_pick(logits_from_states(slice_rows(states, comp.offset_of("tgt"), comp.total()),
                                       bundle.lm_embed));
    if (next == Vocab::kEnd) break;
    generated.push_back(next);
    prefix.push_back(next);
  }
  return generated;
}

}  // namespace detail

// One run owns its QFormer, optimizer, and cache; the bundle and dataset are
// shared read-only.
template <typename T>
struct RunContext {
  const RunConfig* cfg = nullptr;
  FrozenBundle<T>* bundle = nullptr;
  const Dataset* ds = nullptr;
  PipelineKind pipeline = PipelineKind::standard_encdec;
  std::size_t layer_n = 0;
  bool empty_grounding_arm = false;
  QFormerState<T> qf;
  std::vector<Tensor<T>> opt_params;
  AdamW<T> opt;
  EncoderCache<T> cache;
  Rng root;
  std::set<std::size_t> touched_scenes;         // batch provenance for the leakage audit
  std::vector<std::uint64_t> order_fingerprints;  // one per epoch

  RunContext(const RunConfig& c, FrozenBundle<T>& b, const Dataset& d, bool empty_arm,
             QFormerState<T> state)
      : cfg(&c),
        bundle(&b),
        ds(&d),
        pipeline(resolve_pipeline(c, b.kind())),
        layer_n(b.kind() == LmKind::decoder_only ? resolve_injection_layer(c, b.cfg.lm.num_layers)
                                                 : 0),
        empty_grounding_arm(empty_arm),
        qf(std::move(state)),
        opt_params(qf.params()),
        opt(opt_params, c.optim),
        root(c.seed) {}
};

template <typename T>
RunContext<T> make_run_context(const RunConfig& cfg, FrozenBundle<T>& bundle, const Dataset& ds,
                               bool empty_grounding_arm = false) {
  const QFormerConfig qc = resolve_qformer_config(cfg, bundle.cfg);
  Rng init = Rng(cfg.seed).child(1);
  QFormerState<T> qf;
  if (!cfg.qformer_checkpoint.empty()) {
    qf = load_qformer<T>(cfg.qformer_checkpoint);
  } else {
    qf = QFormerState<T>::init(qc, init);
  }
  return RunContext<T>(cfg, bundle, ds, empty_grounding_arm, std::move(qf));
}

namespace detail {

struct EpochStats {
  double caption_loss = 0.0;  // per-task epoch means; NaN-free or we threw
  double vqa_loss = 0.0;
  std::size_t caption_n = 0;
  std::size_t vqa_n = 0;
  std::size_t encoder_calls = 0;

  double mean_loss() const {
    const std::size_t n = caption_n + vqa_n;
    return (caption_loss * static_cast<double>(caption_n) +
            vqa_loss * static_cast<double>(vqa_n)) /
           static_cast<double>(n);
  }
};

// One pass over the items in a seed-determined order: fresh cache, shuffled
// order, one optimizer step per batch of accumulated per-sample losses.
template <typename T>
EpochStats run_train_epoch(RunContext<T>& ctx, std::vector<TrainItem> items,
                           std::size_t global_epoch) {
  if (items.empty()) throw config_error("training epoch with no items (empty train split?)");
  ctx.cache.clear();
  ctx.cache.reset_counters();
  Rng order = ctx.root.child(100 + global_epoch);
  order.shuffle(items);
  ctx.order_fingerprints.push_back(order_fingerprint(items));
  Rng prompts = ctx.root.child(200 + global_epoch);

  EpochStats stats;
  double cap_sum = 0.0, vqa_sum = 0.0;
  for (std::size_t start = 0; start < items.size(); start += ctx.cfg->batch_size) {
    const std::size_t stop = std::min(items.size(), start + ctx.cfg->batch_size);
    Tensor<T> total;
    for (std::size_t i = start; i < stop; ++i) {
      const auto& it = items[i];
      auto [prompt, target] = item_text(*ctx.ds, it, prompts);
      auto loss = pipeline_loss(ctx.pipeline, *ctx.bundle, ctx.qf, ctx.ds->images[it.scene],
                                prompt, target, ctx.cache, ctx.layer_n, ctx.empty_grounding_arm);
      const double v = static_cast<double>(loss.value());
      if (!std::isfinite(v)) {
        throw training_error("training diverged at epoch " + std::to_string(global_epoch) +
                             " (non-finite loss)");
      }
      if (it.qa < 0) {
        cap_sum += v;
        ++stats.caption_n;
      } else {
        vqa_sum += v;
        ++stats.vqa_n;
      }
      ctx.touched_scenes.insert(it.scene);
      total = total.defined() ? add(total, loss) : loss;
    }
    auto batch_loss = scale(total, static_cast<T>(1.0 / static_cast<double>(stop - start)));
    backward(batch_loss);
    ctx.opt.step();
    ctx.opt.zero_grad();
  }
  if (stats.caption_n) stats.caption_loss = cap_sum / static_cast<double>(stats.caption_n);
  if (stats.vqa_n) stats.vqa_loss = vqa_sum / static_cast<double>(stats.vqa_n);
  stats.encoder_calls = ctx.cache.encoder_calls;
  return stats;
}

// Validation decoding runs on its own cache so training call counts stay
// clean. The prompt is pinned to the first pool entry.
template <typename T>
std::vector<int> eval_generate(RunContext<T>& ctx, const Tensor<float>& image,
                               const std::vector<int>& prompt, EncoderCache<T>& cache) {
  if (ctx.empty_grounding_arm) {
    return empty_arm_generate(ctx.pipeline, *ctx.bundle, ctx.qf, image, prompt,
                              ctx.cfg->max_gen_len, cache, ctx.layer_n);
  }
  return generate(ctx.pipeline, *ctx.bundle, ctx.qf, image, prompt, ctx.cfg->max_gen_len, &cache,
                  ctx.layer_n)
      .generated_ids;
}

template <typename T>
std::optional<double> eval_caption_bleu(RunContext<T>& ctx, const std::vector<std::size_t>& set) {
  if (set.empty()) return std::nullopt;
  const auto prompt = ctx.ds->vocab.tokenize(caption_prompts()[0], true);
  EncoderCache<T> cache;
  std::vector<std::vector<int>> cands, refs;
  for (std::size_t idx : set) {
    cands.push_back(eval_generate(ctx, ctx.ds->images[idx], prompt, cache));
    refs.push_back(ctx.ds->samples[idx].caption_ids);
  }
  return bleu4(cands, refs);
}

template <typename T>
std::optional<double> eval_vqa_accuracy(RunContext<T>& ctx, const std::vector<std::size_t>& set) {
  const auto prefix = ctx.ds->vocab.tokenize(vqa_prompt_prefixes()[0], true);
  EncoderCache<T> cache;
  std::vector<std::vector<int>> preds, answers;
  for (std::size_t idx : set) {
    for (const auto& qa : ctx.ds->samples[idx].qa) {
      auto prompt = prefix;
      prompt.insert(prompt.end(), qa.question_ids.begin(), qa.question_ids.end());
      preds.push_back(eval_generate(ctx, ctx.ds->images[idx], prompt, cache));
      answers.push_back(qa.answer_ids);
    }
  }
  if (preds.empty()) return std::nullopt;
  return exact_match_accuracy(preds, answers);
}

inline double elapsed_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Teacher-forced mean loss over the given items with the prompt pinned to the
// first pool entry; no updates, own cache. The summary's initial and final
// train losses are a pair of these passes bracketing the training loop, so
// they measure the model before and after rather than a running mean taken
// while the weights were moving.
template <typename T>
double eval_mean_train_loss(RunContext<T>& ctx, const std::vector<TrainItem>& items) {
  if (items.empty()) throw config_error("loss evaluation with no items (empty train split?)");
  autograd::NoGradGuard ng;
  EncoderCache<T> cache;
  const auto cap_prompt = ctx.ds->vocab.tokenize(caption_prompts()[0], true);
  const auto vqa_prefix = ctx.ds->vocab.tokenize(vqa_prompt_prefixes()[0], true);
  double sum = 0.0;
  for (const auto& it : items) {
    std::vector<int> prompt;
    const std::vector<int>* target = nullptr;
    if (it.qa < 0) {
      prompt = cap_prompt;
      target = &ctx.ds->samples[it.scene].caption_ids;
    } else {
      const auto& qa = ctx.ds->samples[it.scene].qa[static_cast<std::size_t>(it.qa)];
      prompt = vqa_prefix;
      prompt.insert(prompt.end(), qa.question_ids.begin(), qa.question_ids.end());
      target = &qa.answer_ids;
    }
    auto loss = pipeline_loss(ctx.pipeline, *ctx.bundle, ctx.qf, ctx.ds->images[it.scene], prompt,
                              *target, cache, ctx.layer_n, ctx.empty_grounding_arm);
    sum += static_cast<double>(loss.value());
  }
  return sum / static_cast<double>(items.size());
}

}  // namespace detail

// ============================================================================
// Audits
// ============================================================================

// Frozen contract, optimizer identity, and holdout leakage, run after every
// training op. Violations are audit errors, not soft warnings.
template <typename T>
void audit_run(RunContext<T>& ctx, const std::string& fingerprint_before) {
  const std::string after = hex64(ctx.bundle->compute_fingerprint());
  if (after != fingerprint_before) {
    throw audit_error("frozen bundle changed during training (" + fingerprint_before + " -> " +
                      after + ")");
  }
  if (!same_param_set(ctx.opt.params(), ctx.qf.params())) {
    throw audit_error("optimizer parameter set is not exactly the QFormer parameters");
  }
  if (param_overlap_count(ctx.opt.params(), ctx.bundle->params()) != 0) {
    throw audit_error("optimizer holds frozen bundle parameters");
  }
  for (std::size_t idx : ctx.touched_scenes) {
    for (const auto& [shape, color] : ctx.ds->split.holdout) {
      if (ctx.ds->scenes[idx].contains_combo(shape, color)) {
        throw audit_error("holdout combination (" + std::to_string(shape) + "," +
                          std::to_string(color) + ") reached a training batch via scene " +
                          std::to_string(idx));
      }
    }
  }
}

// ============================================================================
// Training experiments
// ============================================================================

template <typename T>
struct TrainResult {
  RunRecord record;
  QFormerState<T> qf;
  std::vector<double> epoch_seconds;
  std::vector<std::uint64_t> order_fingerprints;
  std::set<std::size_t> touched_scenes;
};

namespace detail {

inline void push_epoch_rows(const RunConfig& cfg, RunRecord& record, std::size_t epoch,
                            std::size_t phase, const EpochStats& stats,
                            std::optional<double> bleu, std::optional<double> acc, double seconds,
                            bool mixed) {
  const auto secs =
      cfg.record_wall_time ? std::optional<double>(seconds) : std::optional<double>();
  if (!mixed) {
    EpochMetric m;
    m.epoch = epoch;
    m.phase = phase;
    m.task = stats.vqa_n ? "vqa" : "caption";
    m.loss = stats.mean_loss();
    m.bleu4 = bleu;
    m.accuracy = acc;
    m.encoder_calls = stats.encoder_calls;
    m.seconds = secs;
    record.metrics.push_back(std::move(m));
    return;
  }
  EpochMetric cap;
  cap.epoch = epoch;
  cap.phase = phase;
  cap.task = "caption";
  cap.loss = stats.caption_loss;
  cap.bleu4 = bleu;
  cap.encoder_calls = stats.encoder_calls;  // epoch-level; the vqa row leaves it empty
  cap.seconds = secs;
  record.metrics.push_back(std::move(cap));
  EpochMetric vqa;
  vqa.epoch = epoch;
  vqa.phase = phase;
  vqa.task = "vqa";
  vqa.loss = stats.vqa_loss;
  vqa.accuracy = acc;
  record.metrics.push_back(std::move(vqa));
}

template <typename T>
TrainResult<T> finish_training(const RunConfig& cfg, RunContext<T>& ctx, RunRecord record,
                               const std::string& before, std::vector<double> seconds) {
  audit_run(ctx, before);
  record.config_hash = config_hash(cfg);
  record.fingerprint_before = before;
  record.fingerprint_after = hex64(ctx.bundle->compute_fingerprint());
  record.summary["experiment"] = experiment_kind_name(cfg.kind);
  record.summary["pipeline"] = pipeline_kind_name(ctx.pipeline);
  record.summary["config_hash"] = record.config_hash;
  record.summary["config"] = config_to_json(cfg);
  record.summary["fingerprint_before"] = record.fingerprint_before;
  record.summary["fingerprint_after"] = record.fingerprint_after;
  record.summary["optimizer_params_are_qformer_only"] = true;  // audited above
  if (cfg.record_wall_time) record.summary["epoch_seconds"] = seconds;
  TrainResult<T> result{std::move(record), std::move(ctx.qf), std::move(seconds),
                        std::move(ctx.order_fingerprints), std::move(ctx.touched_scenes)};
  return result;
}

}  // namespace detail

// One task, one pipeline, configured epochs; per-epoch validation metric and
// a best-epoch summary.
template <typename T>
TrainResult<T> train_single_task(const RunConfig& cfg, FrozenBundle<T>& bundle,
                                 const Dataset& ds) {
  if (cfg.kind != ExperimentKind::single_task_caption &&
      cfg.kind != ExperimentKind::single_task_vqa) {
    throw config_error("train_single_task wants a single-task-* config");
  }
  const bool captioning = cfg.kind == ExperimentKind::single_task_caption;
  auto ctx = make_run_context(cfg, bundle, ds);
  const std::string before = hex64(bundle.fingerprint);
  auto items = captioning ? detail::caption_items(ds) : detail::vqa_items(ds);

  RunRecord record;
  std::vector<double> seconds;
  const double initial_loss = detail::eval_mean_train_loss(ctx, items);
  std::size_t best_epoch = 0;
  double best_metric = -1.0;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    auto stats = detail::run_train_epoch(ctx, items, e);
    auto bleu = captioning ? detail::eval_caption_bleu(ctx, ds.val) : std::optional<double>();
    auto acc = captioning ? std::optional<double>() : detail::eval_vqa_accuracy(ctx, ds.val);
    seconds.push_back(detail::elapsed_seconds(t0));
    detail::push_epoch_rows(cfg, record, e, 1, stats, bleu, acc, seconds.back(), false);
    const auto metric = captioning ? bleu : acc;
    if (metric && *metric > best_metric) {
      best_metric = *metric;
      best_epoch = e;
    }
  }
  record.summary["task"] = captioning ? "caption" : "vqa";
  record.summary["epochs"] = cfg.epochs;
  record.summary["initial_train_loss"] = initial_loss;
  record.summary["final_train_loss"] = detail::eval_mean_train_loss(ctx, items);
  if (best_epoch) {
    record.summary["best_epoch"] = best_epoch;
    record.summary[captioning ? "best_bleu4" : "best_accuracy"] = best_metric;
  }
  return detail::finish_training(cfg, ctx, std::move(record), before, std::move(seconds));
}

// Phase 1: captioning only. Phase 2: shuffled caption+VQA union with
// per-iteration prompt sampling; both task metrics every phase-2 epoch.
template <typename T>
TrainResult<T> train_multitask(const RunConfig& cfg, FrozenBundle<T>& bundle, const Dataset& ds) {
  if (cfg.kind != ExperimentKind::multitask && cfg.kind != ExperimentKind::zero_shot) {
    throw config_error("train_multitask wants a multitask or zero-shot config");
  }
  auto ctx = make_run_context(cfg, bundle, ds);
  const std::string before = hex64(bundle.fingerprint);
  auto cap_items = detail::caption_items(ds);
  auto mixed_items = cap_items;
  for (const auto& it : detail::vqa_items(ds)) mixed_items.push_back(it);

  RunRecord record;
  std::vector<double> seconds;
  const double initial_loss = detail::eval_mean_train_loss(ctx, cap_items);
  double best_acc = -1.0;
  std::size_t best_epoch = 0;
  for (std::size_t e = 1; e <= cfg.epochs + cfg.epochs_phase2; ++e) {
    const bool phase2 = e > cfg.epochs;
    const auto t0 = std::chrono::steady_clock::now();
    auto stats = detail::run_train_epoch(ctx, phase2 ? mixed_items : cap_items, e);
    auto bleu = detail::eval_caption_bleu(ctx, ds.val);
    auto acc = phase2 ? detail::eval_vqa_accuracy(ctx, ds.val) : std::optional<double>();
    seconds.push_back(detail::elapsed_seconds(t0));
    detail::push_epoch_rows(cfg, record, e, phase2 ? 2 : 1, stats, bleu, acc, seconds.back(),
                            phase2);
    if (acc && *acc > best_acc) {
      best_acc = *acc;
      best_epoch = e;
    }
  }
  // Initial is measured on the phase-1 caption items, final on the mixed set
  // the last phase actually optimized.
  record.summary["initial_train_loss"] = initial_loss;
  record.summary["final_train_loss"] = detail::eval_mean_train_loss(ctx, mixed_items);
  record.summary["phase_boundary"] = cfg.epochs;
  record.summary["epochs_phase1"] = cfg.epochs;
  record.summary["epochs_phase2"] = cfg.epochs_phase2;
  if (best_epoch) {
    record.summary["best_epoch"] = best_epoch;
    record.summary["best_accuracy"] = best_acc;
  }
  return detail::finish_training(cfg, ctx, std::move(record), before, std::move(seconds));
}

// ============================================================================
// Zero-shot evaluation on held-out attribute combinations
// ============================================================================

template <typename T>
struct ZeroShotResult {
  TrainResult<T> train;
  double accuracy = 0.0;
  double random_baseline = 0.0;
  std::size_t answer_vocab_size = 0;
  std::size_t test_questions = 0;
};

template <typename T>
ZeroShotResult<T> zero_shot_eval(const RunConfig& cfg, FrozenBundle<T>& bundle,
                                 const Dataset& ds) {
  if (cfg.kind != ExperimentKind::zero_shot) {
    throw config_error("zero_shot_eval wants a zero-shot config");
  }
  if (ds.split.holdout.empty() || ds.test.empty()) {
    throw config_error("zero-shot needs a dataset with a nonempty holdout split");
  }
  const std::size_t leaks = holdout_violation_count(ds);
  if (leaks != 0) {
    throw audit_error("holdout leakage: " + std::to_string(leaks) +
                      " train/val scenes contain held-out combinations");
  }

  ZeroShotResult<T> result;
  result.train = train_multitask(cfg, bundle, ds);

  // Rebuild a context around the trained weights for decoding (the trainer's
  // context is consumed by finish_training).
  RunContext<T> ctx(cfg, bundle, ds, false, std::move(result.train.qf));
  auto acc = detail::eval_vqa_accuracy(ctx, ds.test);
  if (!acc) throw contract_error("holdout split produced no test questions");
  result.accuracy = *acc;
  result.test_questions = 0;
  for (std::size_t idx : ds.test) result.test_questions += ds.samples[idx].qa.size();

  std::set<std::vector<int>> answers;
  for (const auto& sample : ds.samples) {
    for (const auto& qa : sample.qa) answers.insert(qa.answer_ids);
  }
  result.answer_vocab_size = answers.size();
  result.random_baseline = 1.0 / static_cast<double>(answers.size());

  auto& summary = result.train.record.summary;
  summary["zero_shot_accuracy"] = result.accuracy;
  summary["zero_shot_questions"] = result.test_questions;
  summary["random_baseline"] = result.random_baseline;
  summary["answer_vocab_size"] = result.answer_vocab_size;
  result.train.qf = std::move(ctx.qf);
  return result;
}

// ============================================================================
// Epoch-timing benchmark
// ============================================================================

struct BenchArm {
  std::string pipeline;
  std::vector<double> epoch_seconds;  // measured epochs only
  double median_seconds = 0.0;
  std::size_t encoder_calls_per_epoch = 0;
};

struct BenchResult {
  BenchArm standard;
  BenchArm grounded;
  double ratio = 0.0;  // grounded / standard
  std::size_t samples_per_epoch = 0;
  std::size_t unique_prompts = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename T>
BenchArm bench_arm(const RunConfig& cfg, FrozenBundle<T>& bundle, const Dataset& ds,
                   bool grounded) {
  RunConfig arm_cfg = cfg;
  arm_cfg.grounded = grounded;
  auto ctx = make_run_context(arm_cfg, bundle, ds);
  auto items = caption_items(ds);
  BenchArm arm;
  arm.pipeline = pipeline_kind_name(ctx.pipeline);
  for (std::size_t e = 1; e <= cfg.bench_warmup + cfg.bench_measured; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    auto stats = run_train_epoch(ctx, items, e);
    const double secs = elapsed_seconds(t0);
    if (e > cfg.bench_warmup) {
      arm.epoch_seconds.push_back(secs);
      arm.encoder_calls_per_epoch = stats.encoder_calls;
    }
  }
  arm.median_seconds = median(arm.epoch_seconds);
  if (arm.median_seconds < 0.010) {
    throw config_error("median epoch time " + fmt_g17(arm.median_seconds * 1000.0) +
                       " ms is under the 10 ms timer floor; increase dataset.n_scenes");
  }
  return arm;
}

}  // namespace detail

// Same config, both pipelines, captioning items only. Warmup epochs run and
// are discarded; the reported number is the median measured epoch.
template <typename T>
BenchResult bench_epoch_time(const RunConfig& cfg, FrozenBundle<T>& bundle, const Dataset& ds) {
  if (cfg.kind != ExperimentKind::bench_time) {
    throw config_error("bench_epoch_time wants a bench-time config");
  }
  BenchResult result;
  result.samples_per_epoch = ds.train.size();
  std::set<std::string> prompts(caption_prompts().begin(), caption_prompts().end());
  result.unique_prompts = prompts.size();
  result.standard = detail::bench_arm(cfg, bundle, ds, false);
  result.grounded = detail::bench_arm(cfg, bundle, ds, true);
  result.ratio = result.grounded.median_seconds / result.standard.median_seconds;
  return result;
}

inline nlohmann::json bench_report_json(const RunConfig& cfg, const BenchResult& r) {
  auto arm = [](const BenchArm& a) {
    return nlohmann::json{{"pipeline", a.pipeline},
                          {"median_seconds", a.median_seconds},
                          {"epoch_seconds", a.epoch_seconds},
                          {"encoder_calls_per_epoch", a.encoder_calls_per_epoch}};
  };
  return nlohmann::json{{"config_hash", config_hash(cfg)},
                        {"standard", arm(r.standard)},
                        {"grounded", arm(r.grounded)},
                        {"ratio_grounded_over_standard", r.ratio},
                        {"samples_per_epoch", r.samples_per_epoch},
                        {"unique_prompts", r.unique_prompts}};
}

// ============================================================================
// Grounding ablation
// ============================================================================

template <typename T>
struct AblationResult {
  TrainResult<T> with_grounding;
  TrainResult<T> without_grounding;
  std::vector<double> curve_with;     // per-epoch VQA accuracy
  std::vector<double> curve_without;
};

namespace detail {

// One mixed caption+VQA phase; VQA accuracy recorded every epoch.
template <typename T>
TrainResult<T> ablation_arm(const RunConfig& cfg, FrozenBundle<T>& bundle, const Dataset& ds,
                            bool empty_arm, std::vector<double>& curve) {
  auto ctx = make_run_context(cfg, bundle, ds, empty_arm);
  const std::string before = hex64(bundle.fingerprint);
  auto items = caption_items(ds);
  for (const auto& it : vqa_items(ds)) items.push_back(it);
  RunRecord record;
  std::vector<double> seconds;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    auto stats = run_train_epoch(ctx, items, e);
    auto bleu = eval_caption_bleu(ctx, ds.val);
    auto acc = eval_vqa_accuracy(ctx, ds.val);
    seconds.push_back(elapsed_seconds(t0));
    push_epoch_rows(cfg, record, e, 1, stats, bleu, acc, seconds.back(), true);
    curve.push_back(acc ? *acc : 0.0);
  }
  record.summary["grounding"] = empty_arm ? "empty" : "full";
  return finish_training(cfg, ctx, std::move(record), before, std::move(seconds));
}

}  // namespace detail

// The grounded pipeline run twice from matched seeds: once as configured,
// once with the grounding input blanked. Identical data order is audited,
// not assumed.
template <typename T>
AblationResult<T> grounding_ablation(const RunConfig& cfg, FrozenBundle<T>& bundle,
                                     const Dataset& ds) {
  if (cfg.kind != ExperimentKind::grounding_ablation) {
    throw config_error("grounding_ablation wants a grounding-ablation config");
  }
  AblationResult<T> result;
  result.with_grounding = detail::ablation_arm(cfg, bundle, ds, false, result.curve_with);
  result.without_grounding = detail::ablation_arm(cfg, bundle, ds, true, result.curve_without);
  if (result.with_grounding.order_fingerprints != result.without_grounding.order_fingerprints) {
    throw audit_error("ablation arms saw different data orders despite matched seeds");
  }
  auto& summary = result.with_grounding.record.summary;
  summary["ablation_final_with_grounding"] = result.curve_with.back();
  summary["ablation_final_without_grounding"] = result.curve_without.back();
  return result;
}

inline void write_paired_curves_csv(const std::string& path, const std::vector<double>& with_g,
                                    const std::vector<double>& without_g) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path);
  out << "epoch,vqa_accuracy_with_grounding,vqa_accuracy_without_grounding\n";
  for (std::size_t e = 0; e < with_g.size(); ++e) {
    out << (e + 1) << ',' << fmt_g17(with_g[e]) << ',' << fmt_g17(without_g[e]) << '\n';
  }
}

// ============================================================================
// Probe suite and alignment
// ============================================================================

template <typename T>
struct ProbeSuiteResult {
  ProbeReport report;        // the configured QFormer (trained when a checkpoint is set)
  ProbeReport fresh_report;  // seed-initialized comparison arm; empty unless checkpoint set
  bool has_fresh = false;
  std::string source_label;
  std::size_t samples = 0;
};

namespace detail {

// Mean-pooled ungrounded QFormer outputs under the first caption prompt, one
// row per scene. Ungrounded on purpose: feeding LM states into the source
// would contaminate the "how well can it model LM layers" question.
template <typename T>
RepresentationSet<T> probe_source(const FrozenBundle<T>& bundle, const QFormerState<T>& qf,
                                  const Dataset& ds, std::size_t n) {
  autograd::NoGradGuard ng;
  const auto prompt = ds.vocab.tokenize(caption_prompts()[0], true);
  const std::size_t d = qf.cfg.dim;
  std::vector<T> rows(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    auto feats = vision_encode(bundle, ds.images[i]).features;
    auto out = qformer_forward(qf, feats, prompt);
    const std::size_t nq = out.dim(0);
    for (std::size_t c = 0; c < d; ++c) {
      double sum = 0.0;
      for (std::size_t r = 0; r < nq; ++r) {
        sum += static_cast<double>(out.values()[r * d + c]);
      }
      rows[i * d + c] = static_cast<T>(sum / static_cast<double>(nq));
    }
  }
  return {Tensor<T>::from_values({n, d}, std::move(rows)), "qformer queries (mean pooled)"};
}

template <typename T>
std::vector<LayerStates<T>> caption_layer_states(const FrozenBundle<T>& bundle, const Dataset& ds,
                                                 std::size_t n) {
  autograd::NoGradGuard ng;
  std::vector<LayerStates<T>> per_sample;
  for (std::size_t i = 0; i < n; ++i) {
    per_sample.push_back(lm_layer_states(bundle, ds.samples[i].caption_ids));
  }
  return per_sample;
}

inline nlohmann::json probe_report_json(const ProbeReport& report) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"target", e.target_label},
                       {"final_loss", e.final_loss},
                       {"floored_dims", e.stats.floored_dims},
                       {"losses", e.losses}});
  }
  return nlohmann::json{{"epochs", report.epochs}, {"lr", report.lr}, {"entries", entries}};
}

}  // namespace detail

// Linear probes from QFormer outputs to LM layer aggregates over the scene
// corpus. `probe` targets the two ends {0, depth}; `layer-sweep` targets the
// scaled intermediate set. With a checkpoint configured, a seed-initialized
// QFormer runs the same probes for comparison.
template <typename T>
ProbeSuiteResult<T> run_probe_suite(const RunConfig& cfg, FrozenBundle<T>& bundle,
                                    const Dataset& ds) {
  if (cfg.kind != ExperimentKind::probe && cfg.kind != ExperimentKind::layer_sweep) {
    throw config_error("run_probe_suite wants a probe or layer-sweep config");
  }
  const std::size_t n = std::min(cfg.analysis_samples, ds.scenes.size());
  const std::size_t depth = bundle.cfg.lm.num_layers;
  std::vector<std::size_t> targets = cfg.kind == ExperimentKind::probe
                                         ? std::vector<std::size_t>{0, depth}
                                         : layer_sweep_indices(depth);
  auto lm_states = detail::caption_layer_states(bundle, ds, n);
  const Rng probe_rng = Rng(cfg.seed).child(3);

  ProbeSuiteResult<T> result;
  result.samples = n;
  const QFormerConfig qc = resolve_qformer_config(cfg, bundle.cfg);
  Rng init = Rng(cfg.seed).child(1);
  auto fresh = QFormerState<T>::init(qc, init);
  if (!cfg.qformer_checkpoint.empty()) {
    auto trained = load_qformer<T>(cfg.qformer_checkpoint);
    auto source = detail::probe_source(bundle, trained, ds, n);
    result.source_label = source.label;
    result.report =
        layer_target_sweep(source, lm_states, targets, cfg.probe_epochs, cfg.probe_lr, probe_rng);
    auto fresh_source = detail::probe_source(bundle, fresh, ds, n);
    result.fresh_report = layer_target_sweep(fresh_source, lm_states, targets, cfg.probe_epochs,
                                             cfg.probe_lr, probe_rng);
    result.has_fresh = true;
  } else {
    auto source = detail::probe_source(bundle, fresh, ds, n);
    result.source_label = source.label;
    result.report =
        layer_target_sweep(source, lm_states, targets, cfg.probe_epochs, cfg.probe_lr, probe_rng);
  }
  return result;
}

// Mutual-KNN heatmap over (LM layer, vision layer) aggregates of the scene
// corpus: captions through the LM, images through the vision encoder.
template <typename T>
AlignmentHeatmap run_alignment(const RunConfig& cfg, FrozenBundle<T>& bundle, const Dataset& ds) {
  if (cfg.kind != ExperimentKind::align) {
    throw config_error("run_alignment wants an align config");
  }
  const std::size_t n = std::min(cfg.analysis_samples, ds.scenes.size());
  auto lm_states = detail::caption_layer_states(bundle, ds, n);
  autograd::NoGradGuard ng;
  std::vector<LayerStates<T>> vit_states;
  for (std::size_t i = 0; i < n; ++i) {
    vit_states.push_back(vision_encode(bundle, ds.images[i]).states);
  }
  return alignment_heatmap(lm_states, vit_states, cfg.k_neighbors, cfg.metric);
}

// ============================================================================
// Dispatcher: run one experiment, persist its artifacts
// ============================================================================

inline RunRecord run_experiment(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  auto bundle = resolve_bundle<float>(cfg);
  auto ds = resolve_dataset(cfg);
  fs::create_directories(cfg.out_dir);
  const std::string before = hex64(bundle.fingerprint);

  auto finish_train = [&](TrainResult<float> result) {
    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), result.record.metrics);
    save_qformer((fs::path(cfg.out_dir) / "qformer").string(), result.qf);
    write_summary_atomic(cfg.out_dir, result.record.summary);
    return std::move(result.record);
  };

  switch (cfg.kind) {
    case ExperimentKind::single_task_caption:
    case ExperimentKind::single_task_vqa:
      return finish_train(train_single_task(cfg, bundle, ds));
    case ExperimentKind::multitask:
      return finish_train(train_multitask(cfg, bundle, ds));
    case ExperimentKind::zero_shot:
      return finish_train(std::move(zero_shot_eval(cfg, bundle, ds).train));
    case ExperimentKind::grounding_ablation: {
      auto result = grounding_ablation(cfg, bundle, ds);
      write_paired_curves_csv((fs::path(cfg.out_dir) / "paired_curves.csv").string(),
                              result.curve_with, result.curve_without);
      return finish_train(std::move(result.with_grounding));
    }
    case ExperimentKind::bench_time: {
      auto result = bench_epoch_time(cfg, bundle, ds);
      auto report = bench_report_json(cfg, result);
      {
        std::ofstream out(fs::path(cfg.out_dir) / "timing_report.json");
        if (!out) throw format_error("cannot write timing_report.json");
        out << report.dump(2) << '\n';
      }
      RunRecord record;
      record.config_hash = config_hash(cfg);
      record.fingerprint_before = before;
      record.fingerprint_after = hex64(bundle.compute_fingerprint());
      record.summary = report;
      record.summary["experiment"] = experiment_kind_name(cfg.kind);
      record.summary["config"] = config_to_json(cfg);
      write_summary_atomic(cfg.out_dir, record.summary);
      return record;
    }
    case ExperimentKind::probe:
    case ExperimentKind::layer_sweep: {
      auto result = run_probe_suite(cfg, bundle, ds);
      RunRecord record;
      record.config_hash = config_hash(cfg);
      record.fingerprint_before = before;
      record.fingerprint_after = hex64(bundle.compute_fingerprint());
      auto report = detail::probe_report_json(result.report);
      report["config_hash"] = record.config_hash;
      report["source"] = result.source_label;
      report["samples"] = result.samples;
      {
        std::ofstream out(fs::path(cfg.out_dir) / "probe_report.json");
        if (!out) throw format_error("cannot write probe_report.json");
        out << report.dump(2) << '\n';
      }
      if (result.has_fresh) {
        auto fresh = detail::probe_report_json(result.fresh_report);
        fresh["config_hash"] = record.config_hash;
        std::ofstream out(fs::path(cfg.out_dir) / "probe_report_fresh.json");
        if (!out) throw format_error("cannot write probe_report_fresh.json");
        out << fresh.dump(2) << '\n';
      }
      record.summary = {{"experiment", experiment_kind_name(cfg.kind)},
                        {"config_hash", record.config_hash},
                        {"config", config_to_json(cfg)},
                        {"probe", report}};
      write_summary_atomic(cfg.out_dir, record.summary);
      return record;
    }
    case ExperimentKind::align: {
      auto hm = run_alignment(cfg, bundle, ds);
      RunRecord record;
      record.config_hash = config_hash(cfg);
      record.fingerprint_before = before;
      record.fingerprint_after = hex64(bundle.compute_fingerprint());
      save_heatmap_csv((fs::path(cfg.out_dir) / "heatmap.csv").string(), hm);
      save_heatmap_json((fs::path(cfg.out_dir) / "heatmap.json").string(), hm);
      record.summary = {{"experiment", experiment_kind_name(cfg.kind)},
                        {"config_hash", record.config_hash},
                        {"config", config_to_json(cfg)},
                        {"k", hm.k},
                        {"metric", neighbor_metric_name(hm.metric)},
                        {"argmax_row", hm.argmax_row},
                        {"argmax_col", hm.argmax_col}};
      write_summary_atomic(cfg.out_dir, record.summary);
      return record;
    }
  }
  throw contract_error("unreachable experiment kind");
}

}  // namespace fuselab
