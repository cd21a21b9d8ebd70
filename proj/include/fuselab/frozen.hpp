#pragma once
// Frozen model bundles: a patch-based vision encoder and a small language
// model (encoder-decoder or decoder-only) that are deterministically
// initialized, briefly pretrained on the synthetic world, then frozen and
// fingerprinted. Downstream training must never change a bundle; the
// fingerprint plus optimizer identity audits enforce that.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dataworld.hpp"
#include "json.hpp"
#include "nn.hpp"
#include "optim.hpp"

namespace fuselab {

enum class LmKind { encoder_decoder, decoder_only };

inline std::string lm_kind_name(LmKind k) {
  return k == LmKind::encoder_decoder ? "encoder-decoder" : "decoder-only";
}

struct FrozenConfig {
  LmKind kind = LmKind::encoder_decoder;
  BlockConfig vision;  // vocab_size stays 0; model_dim is d_v
  BlockConfig lm;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;

  std::size_t num_patches() const {
    const std::size_t per_side = image_size / patch_size;
    return per_side * per_side;
  }

  void validate() const {
    vision.validate();
    lm.validate();
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw config_error("image_size " + std::to_string(image_size) +
                         " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (vision.max_seq_len < num_patches() + 1) {
      throw config_error("vision max_seq_len too small for " + std::to_string(num_patches()) +
                         " patches plus the aggregate token");
    }
    if (lm.vocab_size < 4) throw config_error("lm vocab must cover the reserved tokens");
  }

  // Default toy scale: large enough for layered structure, minutes-scale runs.
  static FrozenConfig defaults(LmKind kind) {
    FrozenConfig c;
    c.kind = kind;
    c.vision = {64, 4, 256, 4, 32, 0};
    c.lm = {64, 4, 256, 6, 64, Vocab::build().size()};
    return c;
  }

  // Smaller bundle for timing benchmarks: same structure, less arithmetic.
  static FrozenConfig small(LmKind kind) {
    FrozenConfig c;
    c.kind = kind;
    c.vision = {32, 4, 128, 2, 32, 0};
    c.lm = {32, 4, 128, 3, 64, Vocab::build().size()};
    return c;
  }

  // Minimal configuration for 64-bit finite-difference verification.
  static FrozenConfig tiny(LmKind kind) {
    FrozenConfig c;
    c.kind = kind;
    c.vision = {8, 2, 16, 1, 8, 0};
    c.lm = {8, 2, 16, 2, 32, Vocab::build().size()};
    c.patch_size = 16;  // 4 patches + aggregate = 5 rows
    return c;
  }
};

struct PretrainRecipe {
  std::string id = "toy-v2";
  std::size_t vision_steps = 40;
  std::size_t lm_steps = 800;
  std::size_t batch = 8;
  double vision_lr = 1e-3;
  double lm_lr = 1e-3;
};

template <typename T>
struct VisionEncoder {
  LinearParams<T> patch_embed;  // [channels*P*P, d_v]
  Tensor<T> aggregate_token;    // [1, d_v], prepended before the patches
  std::vector<SelfBlockParams<T>> layers;

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    patch_embed.visit(prefix + ".patch_embed", fn);
    fn(prefix + ".aggregate", aggregate_token);
    visit_layers(prefix + ".enc", layers, fn);
  }
};

template <typename T>
struct FrozenBundle {
  FrozenConfig cfg;
  VisionEncoder<T> vision;
  EmbeddingParams<T> lm_embed;                 // shared by encoder and decoder
  std::vector<SelfBlockParams<T>> lm_encoder;  // encoder-decoder kind
  std::vector<CrossBlockParams<T>> lm_decoder;
  std::vector<SelfBlockParams<T>> lm_deconly;  // decoder-only kind
  std::uint64_t seed = 0;
  std::string recipe_id;
  std::uint64_t fingerprint = 0;

  LmKind kind() const { return cfg.kind; }

  template <typename Fn>
  void visit(Fn&& fn) {
    vision.visit("vision", fn);
    lm_embed.visit("lm.embed", fn);
    visit_layers("lm.enc", lm_encoder, fn);
    visit_layers("lm.dec", lm_decoder, fn);
    visit_layers("lm.deconly", lm_deconly, fn);
  }

  std::vector<Tensor<T>> params() {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::uint64_t compute_fingerprint() { return fingerprint_tensors(params()); }

  void freeze() {
    for (auto& p : params()) p.set_requires_grad(false);
    fingerprint = compute_fingerprint();
  }

  bool all_params_finite() {
    for (const auto& p : params()) {
      if (!p.all_finite()) return false;
    }
    return true;
  }
};

// ============================================================================
// Construction and pretraining
// ============================================================================

template <typename T>
FrozenBundle<T> init_bundle(std::uint64_t seed, const FrozenConfig& cfg) {
  cfg.validate();
  FrozenBundle<T> b;
  b.cfg = cfg;
  b.seed = seed;
  Rng root(seed);
  Rng vr = root.child(1);
  const std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
  b.vision.patch_embed = LinearParams<T>::init(patch_dim, cfg.vision.model_dim, vr);
  b.vision.aggregate_token = Tensor<T>::normal({1, cfg.vision.model_dim}, 0.0, 0.02, vr, true);
  for (std::size_t i = 0; i < cfg.vision.num_layers; ++i) {
    b.vision.layers.push_back(SelfBlockParams<T>::init(cfg.vision, vr));
  }
  Rng lr = root.child(2);
  b.lm_embed = EmbeddingParams<T>::init(cfg.lm.vocab_size, cfg.lm.model_dim, lr);
  if (cfg.kind == LmKind::encoder_decoder) {
    for (std::size_t i = 0; i < cfg.lm.num_layers; ++i) {
      b.lm_encoder.push_back(SelfBlockParams<T>::init(cfg.lm, lr));
    }
    for (std::size_t i = 0; i < cfg.lm.num_layers; ++i) {
      b.lm_decoder.push_back(CrossBlockParams<T>::init(cfg.lm, cfg.lm.model_dim, lr));
    }
  } else {
    for (std::size_t i = 0; i < cfg.lm.num_layers; ++i) {
      b.lm_deconly.push_back(SelfBlockParams<T>::init(cfg.lm, lr));
    }
  }
  return b;
}

// ============================================================================
// Forward surfaces
// ============================================================================

template <typename T>
struct VisionOut {
  Tensor<T> features;  // [num_patches+1, d_v]; row 0 is the aggregate token
  LayerStates<T> states;
};

// Patchify channel-major, embed linearly, prepend the aggregate token, add
// positions, run the bidirectional stack with per-layer capture.
template <typename T>
VisionOut<T> vision_encode(const FrozenBundle<T>& bundle, const Tensor<float>& image) {
  const auto& cfg = bundle.cfg;
  if (image.rank() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size) {
    throw shape_error("vision_encode: image must be [" + std::to_string(cfg.channels) + "," +
                      std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                      "], got " + shape_str(image.shape()));
  }
  const std::size_t P = cfg.patch_size;
  const std::size_t per_side = cfg.image_size / P;
  const std::size_t np = per_side * per_side;
  const std::size_t patch_dim = cfg.channels * P * P;
  std::vector<T> patches(np * patch_dim);
  const std::size_t plane = cfg.image_size * cfg.image_size;
  std::size_t out = 0;
  for (std::size_t pr = 0; pr < per_side; ++pr) {
    for (std::size_t pc = 0; pc < per_side; ++pc) {
      for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
        for (std::size_t py = 0; py < P; ++py) {
          for (std::size_t px = 0; px < P; ++px) {
            const std::size_t y = pr * P + py, x = pc * P + px;
            patches[out++] = static_cast<T>(image.values()[ch * plane + y * cfg.image_size + x]);
          }
        }
      }
    }
  }
  auto embedded =
      bundle.vision.patch_embed.apply(Tensor<T>::from_values({np, patch_dim}, std::move(patches)));
  auto x = concat_rows<T>({bundle.vision.aggregate_token, embedded});
  std::vector<std::size_t> positions(np + 1);
  for (std::size_t i = 0; i <= np; ++i) positions[i] = i;
  x = add(x, position_encoding<T>(positions, cfg.vision.model_dim));
  VisionOut<T> result;
  result.features = encoder_forward(x, bundle.vision.layers, &result.states);
  return result;
}

template <typename T>
struct EncodeOut {
  Tensor<T> states;  // [n, model_dim]; final row is the aggregate
  std::vector<SegmentInfo> parts;
  LayerStates<T> layer_states;
};

inline void require_kind(LmKind have, LmKind want, const char* op) {
  if (have != want) {
    throw kind_error(std::string(op) + " requires a " + lm_kind_name(want) + " bundle, got " +
                     lm_kind_name(have));
  }
}

// Bidirectional LM encoder over composed segments (token and state pieces).
template <typename T>
EncodeOut<T> lm_encode_segments(const FrozenBundle<T>& bundle,
                                const std::vector<Segment<T>>& segments) {
  require_kind(bundle.kind(), LmKind::encoder_decoder, "lm_encode");
  auto comp = compose_segments(segments, bundle.lm_embed, bundle.cfg.lm);
  EncodeOut<T> out;
  out.states = encoder_forward(comp.x, bundle.lm_encoder, &out.layer_states);
  out.parts = std::move(comp.parts);
  return out;
}

template <typename T>
EncodeOut<T> lm_encode(const FrozenBundle<T>& bundle, const std::vector<int>& ids) {
  return lm_encode_segments(bundle, {Segment<T>::tokens_of("p", ids)});
}

// Decoder of the encoder-decoder LM: embeds the prefix, cross-attends into
// memory, returns vocabulary logits per prefix position.
template <typename T>
Tensor<T> lm_decode(const FrozenBundle<T>& bundle, const Tensor<T>& memory,
                    const std::vector<int>& prefix_ids) {
  require_kind(bundle.kind(), LmKind::encoder_decoder, "lm_decode");
  auto x = embed_tokens(bundle.lm_embed, prefix_ids, bundle.cfg.lm);
  auto states = decoder_forward(x, memory, bundle.lm_decoder);
  return logits_from_states(states, bundle.lm_embed);
}

// Decoder-only forward over composed segments with optional state injection;
// returns final states (use logits_from_states for the readout).
template <typename T>
Tensor<T> lm_deconly_states(const FrozenBundle<T>& bundle, const Composed<T>& comp,
                            const Injection<T>* inject = nullptr,
                            LayerStates<T>* capture = nullptr) {
  require_kind(bundle.kind(), LmKind::decoder_only, "decoder-only forward");
  return decoder_only_forward(comp, bundle.lm_deconly, inject, capture);
}

template <typename T>
Composed<T> lm_compose(const FrozenBundle<T>& bundle, const std::vector<Segment<T>>& segments) {
  return compose_segments(segments, bundle.lm_embed, bundle.cfg.lm);
}

// Per-layer hidden states of the LM on plain token input: encoder layers for
// the encoder-decoder kind, the full stack for decoder-only. Entry 0 is the
// input embedding.
template <typename T>
LayerStates<T> lm_layer_states(const FrozenBundle<T>& bundle, const std::vector<int>& ids) {
  LayerStates<T> states;
  auto x = embed_tokens(bundle.lm_embed, ids, bundle.cfg.lm);
  if (bundle.kind() == LmKind::encoder_decoder) {
    encoder_forward(x, bundle.lm_encoder, &states);
  } else {
    Composed<T> comp{x, {{"p", ids.size()}}};
    decoder_only_forward(comp, bundle.lm_deconly, static_cast<const Injection<T>*>(nullptr),
                         &states);
  }
  return states;
}

// Scales the reference depth-24 sweep {0, 8, 16, 24} to a toy depth D as
// {0, ceil(D/3), ceil(2D/3), D}, deduplicated.
inline std::vector<std::size_t> layer_sweep_indices(std::size_t depth) {
  std::vector<std::size_t> idx{0, (depth + 2) / 3, (2 * depth + 2) / 3, depth};
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

// ============================================================================
// Pretraining
// ============================================================================

namespace detail {

template <typename T>
void check_pretrain_loss(const Tensor<T>& loss, const char* phase, std::size_t step) {
  // A mean cross-entropy over this vocabulary sits in the single digits; 1e12
  // only happens when the optimizer has blown the weights up, and in double
  // precision that explosion can stay finite for a while.
  if (!loss.all_finite() || std::fabs(static_cast<double>(loss.value())) > 1e12) {
    throw training_error(std::string(phase) + " pretraining diverged at step " +
                         std::to_string(step) + " (loss " +
                         std::to_string(static_cast<double>(loss.value())) + ")");
  }
}

}  // namespace detail

// Vision: (shape,color) 12-way classification on single-object scenes via a
// throwaway head on the aggregate token. LM: denoising (encoder-decoder) or
// next-token (decoder-only) on sampled captions. Deterministic in
// (bundle.seed, recipe).
template <typename T>
void pretrain_bundle(FrozenBundle<T>& bundle, const PretrainRecipe& recipe) {
  const Vocab vocab = Vocab::build();
  Rng root = Rng(bundle.seed).child(3);

  {  // vision phase
    Rng data = root.child(1);
    Rng init = root.child(2);
    auto head = LinearParams<T>::init(bundle.cfg.vision.model_dim, 12, init);
    std::vector<Tensor<T>> params;
    bundle.vision.visit("v", [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    params.push_back(head.w);
    params.push_back(head.b);
    OptimConfig oc;
    oc.lr = recipe.vision_lr;
    AdamW<T> opt(params, oc);
    for (std::size_t step = 0; step < recipe.vision_steps; ++step) {
      opt.zero_grad();
      Tensor<T> total = Tensor<T>::zeros({1});
      for (std::size_t b = 0; b < recipe.batch; ++b) {
        Scene s;
        s.objects.push_back({static_cast<int>(data.next_below(3)),
                             static_cast<int>(data.next_below(4)),
                             static_cast<int>(data.next_below(4)),
                             static_cast<int>(data.next_below(4))});
        auto img = render_scene(s);
        auto feats = vision_encode(bundle, img).features;
        auto logits = head.apply(slice_rows(feats, 0, 1));
        const int label = s.objects[0].shape * 4 + s.objects[0].color;
        total = add(total, cross_entropy_with_ids(logits, {label}));
      }
      total = scale(total, static_cast<T>(1.0 / recipe.batch));
      detail::check_pretrain_loss(total, "vision", step);
      backward(total);
      opt.step();
    }
  }

  {  // language phase
    Rng data = root.child(10);
    std::vector<Tensor<T>> params;
    bundle.lm_embed.visit("e", [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    visit_layers("enc", bundle.lm_encoder,
                 [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    visit_layers("dec", bundle.lm_decoder,
                 [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    visit_layers("d", bundle.lm_deconly,
                 [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    OptimConfig oc;
    oc.lr = recipe.lm_lr;
    AdamW<T> opt(params, oc);
    for (std::size_t step = 0; step < recipe.lm_steps; ++step) {
      opt.zero_grad();
      Tensor<T> total = Tensor<T>::zeros({1});
      for (std::size_t b = 0; b < recipe.batch; ++b) {
        const Scene s = sample_scene(data.next_u64());
        const std::vector<int> caption = vocab.tokenize(scene_caption(s), true);
        Tensor<T> loss;
        if (bundle.kind() == LmKind::encoder_decoder) {
          // Denoising: corrupt 15% of tokens to unk, reconstruct the original.
          std::vector<int> corrupted = caption;
          for (int& t : corrupted) {
            if (data.next_uniform() < 0.15) t = Vocab::kUnk;
          }
          auto memory = lm_encode(bundle, corrupted).states;
          std::vector<int> prefix{Vocab::kStart};
          prefix.insert(prefix.end(), caption.begin(), caption.end());
          std::vector<int> labels = caption;
          labels.push_back(Vocab::kEnd);
          loss = cross_entropy_with_ids(lm_decode(bundle, memory, prefix), labels);
        } else {
          std::vector<int> seq{Vocab::kStart};
          seq.insert(seq.end(), caption.begin(), caption.end());
          seq.push_back(Vocab::kEnd);
          const std::vector<int> input(seq.begin(), seq.end() - 1);
          const std::vector<int> labels(seq.begin() + 1, seq.end());
          auto comp = lm_compose(bundle, {Segment<T>::tokens_of("p", input)});
          auto states = lm_deconly_states(bundle, comp);
          loss = cross_entropy_with_ids(logits_from_states(states, bundle.lm_embed), labels);
        }
        total = add(total, loss);
      }
      total = scale(total, static_cast<T>(1.0 / recipe.batch));
      detail::check_pretrain_loss(total, "language", step);
      backward(total);
      opt.step();
    }
  }
}

template <typename T>
FrozenBundle<T> build_frozen_bundle(std::uint64_t seed, const FrozenConfig& cfg,
                                    const PretrainRecipe& recipe = {}) {
  FrozenBundle<T> bundle = init_bundle<T>(seed, cfg);
  pretrain_bundle(bundle, recipe);
  if (!bundle.all_params_finite()) {
    throw training_error("pretraining produced non-finite parameters");
  }
  bundle.recipe_id = recipe.id;
  bundle.freeze();
  return bundle;
}

// ============================================================================
// Persistence (directory of TNSR files + JSON manifest)
// ============================================================================

template <typename T>
void save_bundle(const std::string& dir, FrozenBundle<T>& bundle) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["kind"] = lm_kind_name(bundle.kind());
  manifest["seed"] = bundle.seed;
  manifest["recipe_id"] = bundle.recipe_id;
  manifest["fingerprint"] = hex64(bundle.fingerprint);
  manifest["dtype"] = std::is_same_v<T, float> ? "f32" : "f64";
  manifest["image_size"] = bundle.cfg.image_size;
  manifest["patch_size"] = bundle.cfg.patch_size;
  manifest["channels"] = bundle.cfg.channels;
  const auto block_json = [](const BlockConfig& b) {
    return nlohmann::json{{"model_dim", b.model_dim}, {"num_heads", b.num_heads},
                          {"ff_dim", b.ff_dim},       {"num_layers", b.num_layers},
                          {"max_seq_len", b.max_seq_len}, {"vocab_size", b.vocab_size}};
  };
  manifest["vision"] = block_json(bundle.cfg.vision);
  manifest["lm"] = block_json(bundle.cfg.lm);
  manifest["tensors"] = nlohmann::json::array();
  for (auto& [name, tensor] : bundle.named_params()) {
    manifest["tensors"].push_back(name);
    save_tnsr((fs::path(dir) / (name + ".tnsr")).string(), tensor);
  }
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw format_error(dir + "/manifest.json: write failed");
}

template <typename T>
FrozenBundle<T> load_bundle(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw format_error(dir + "/manifest.json: cannot open");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(dir + "/manifest.json: " + e.what());
  }
  FrozenConfig cfg;
  std::uint64_t seed = 0;
  std::string recipe_id, stored_print;
  try {
    seed = manifest.at("seed").get<std::uint64_t>();
    recipe_id = manifest.at("recipe_id").get<std::string>();
    stored_print = manifest.at("fingerprint").get<std::string>();
    cfg.kind = manifest.at("kind").get<std::string>() == "encoder-decoder"
                   ? LmKind::encoder_decoder
                   : LmKind::decoder_only;
    cfg.image_size = manifest.at("image_size").get<std::size_t>();
    cfg.patch_size = manifest.at("patch_size").get<std::size_t>();
    cfg.channels = manifest.at("channels").get<std::size_t>();
    const auto block_from = [&](const nlohmann::json& j) {
      BlockConfig b;
      b.model_dim = j.at("model_dim").get<std::size_t>();
      b.num_heads = j.at("num_heads").get<std::size_t>();
      b.ff_dim = j.at("ff_dim").get<std::size_t>();
      b.num_layers = j.at("num_layers").get<std::size_t>();
      b.max_seq_len = j.at("max_seq_len").get<std::size_t>();
      b.vocab_size = j.at("vocab_size").get<std::size_t>();
      return b;
    };
    cfg.vision = block_from(manifest.at("vision"));
    cfg.lm = block_from(manifest.at("lm"));
  } catch (const nlohmann::json::exception& e) {
    throw format_error(dir + "/manifest.json: " + e.what());
  }
  FrozenBundle<T> bundle = init_bundle<T>(seed, cfg);
  bundle.recipe_id = recipe_id;
  for (auto& [name, tensor] : bundle.named_params()) {
    const fs::path file = fs::path(dir) / (name + ".tnsr");
    auto loaded = load_tnsr<T>(file.string());
    if (loaded.shape() != tensor.shape()) {
      throw format_error(file.string() + ": shape " + shape_str(loaded.shape()) +
                         " does not match bundle layout " + shape_str(tensor.shape()));
    }
    tensor.values() = loaded.values();
  }
  for (auto& p : bundle.params()) p.set_requires_grad(false);
  bundle.fingerprint = bundle.compute_fingerprint();
  if (hex64(bundle.fingerprint) != stored_print) {
    throw format_error(dir + ": fingerprint mismatch (stored " + stored_print + ", recomputed " +
                       hex64(bundle.fingerprint) + ")");
  }
  return bundle;
}

}  // namespace fuselab
