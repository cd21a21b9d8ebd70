#pragma once
// The trainable bridge between a frozen vision encoder and a frozen LM:
// learned query tokens plus a small transformer that mixes queries, optional
// grounding states, and prompt text, with cross-attention into the image on
// every even-indexed block. Also owns the adapters in and out of LM space.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "frozen.hpp"
#include "json.hpp"
#include "nn.hpp"

namespace fuselab {

struct QFormerConfig {
  std::size_t num_queries = 8;
  std::size_t dim = 64;  // query width d_q
  std::size_t num_blocks = 4;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t vision_dim = 0;  // d_v of the paired bundle
  std::size_t lm_dim = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;

  void validate() const {
    if (num_queries == 0) throw config_error("num_queries must be >= 1");
    if (dim == 0 || ff_dim == 0 || num_blocks == 0) {
      throw config_error("qformer dims and block count must be >= 1");
    }
    if (num_heads == 0 || dim % num_heads != 0) {
      throw config_error("qformer dim " + std::to_string(dim) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
    }
    if (vision_dim == 0 || lm_dim == 0) {
      throw config_error("qformer must be paired with a bundle (vision_dim/lm_dim unset)");
    }
    if (vocab_size < 4) throw config_error("qformer vocab must cover the reserved tokens");
    if (max_seq_len < num_queries) {
      throw config_error("max_seq_len smaller than the query block");
    }
  }

  static QFormerConfig for_bundle(const FrozenConfig& b) {
    QFormerConfig c;
    c.vision_dim = b.vision.model_dim;
    c.lm_dim = b.lm.model_dim;
    c.vocab_size = b.lm.vocab_size;
    c.max_seq_len = b.lm.max_seq_len;
    return c;
  }

  BlockConfig as_block() const { return {dim, num_heads, ff_dim, num_blocks, max_seq_len, 0}; }
};

// Cross-attention sits on even block indices, self-only blocks on odd ones.
inline bool qformer_block_has_cross(std::size_t index) { return index % 2 == 0; }

template <typename T>
struct QFormerState {
  QFormerConfig cfg;
  Tensor<T> query_tokens;           // [n_q, d_q]
  EmbeddingParams<T> prompt_embed;  // the QFormer's own vocabulary table
  std::vector<CrossBlockParams<T>> cross_blocks;  // blocks 0, 2, ...
  std::vector<SelfBlockParams<T>> self_blocks;    // blocks 1, 3, ...
  LinearParams<T> grounding_adapter;  // lm_dim -> d_q
  LinearParams<T> out_projection;     // d_q -> lm_dim

  static QFormerState init(const QFormerConfig& cfg, Rng& rng) {
    cfg.validate();
    QFormerState s;
    s.cfg = cfg;
    s.query_tokens = Tensor<T>::normal({cfg.num_queries, cfg.dim}, 0.0, 0.02, rng, true);
    s.prompt_embed = EmbeddingParams<T>::init(cfg.vocab_size, cfg.dim, rng);
    const BlockConfig blk = cfg.as_block();
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
      if (qformer_block_has_cross(i)) {
        s.cross_blocks.push_back(CrossBlockParams<T>::init(blk, cfg.vision_dim, rng));
      } else {
        s.self_blocks.push_back(SelfBlockParams<T>::init(blk, rng));
      }
    }
    s.grounding_adapter = LinearParams<T>::init(cfg.lm_dim, cfg.dim, rng);
    s.out_projection = LinearParams<T>::init(cfg.dim, cfg.lm_dim, rng);
    return s;
  }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn(std::string("queries"), query_tokens);
    prompt_embed.visit("prompt_embed", fn);
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
      const std::string prefix = "block" + std::to_string(i);
      if (qformer_block_has_cross(i)) {
        cross_blocks[i / 2].visit(prefix, fn);
      } else {
        self_blocks[i / 2].visit(prefix, fn);
      }
    }
    grounding_adapter.visit("grounding_adapter", fn);
    out_projection.visit("out_projection", fn);
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
};

namespace detail {

// One QFormer block. Self-attention mixes the full sequence; on cross blocks
// only the first n_q rows (the queries) attend into the image features, other
// rows pass through the cross sublayer unchanged.
template <typename T>
Tensor<T> qformer_cross_block(const CrossBlockParams<T>& blk, const Tensor<T>& x,
                              const Tensor<T>& image_feats, std::size_t n_q) {
  auto n1 = blk.ln1.apply(x);
  auto h = add(x, blk.self_attn.apply(n1, n1, BoolMask::full(x.dim(0), x.dim(0))));
  auto q = slice_rows(h, 0, n_q);
  auto attended = blk.cross_attn.apply(blk.ln2.apply(q), image_feats,
                                       BoolMask::full(n_q, image_feats.dim(0)));
  auto q2 = add(q, attended);
  if (h.dim(0) > n_q) {
    h = concat_rows<T>({q2, slice_rows(h, n_q, h.dim(0))});
  } else {
    h = q2;
  }
  return add(h, blk.ff.apply(blk.ln3.apply(h)));
}

template <typename T>
Tensor<T> qformer_stack(const QFormerState<T>& s, const Tensor<T>& x,
                        const Tensor<T>& image_feats) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < s.cfg.num_blocks; ++i) {
    if (qformer_block_has_cross(i)) {
      h = qformer_cross_block(s.cross_blocks[i / 2], h, image_feats, s.cfg.num_queries);
    } else {
      h = s.self_blocks[i / 2].apply(h, BoolMask::full(h.dim(0), h.dim(0)));
    }
  }
  return slice_rows(h, 0, s.cfg.num_queries);
}

template <typename T>
void check_image_feats(const QFormerConfig& cfg, const Tensor<T>& image_feats) {
  if (image_feats.rank() != 2 || image_feats.dim(1) != cfg.vision_dim) {
    throw shape_error("image features must be [m, " + std::to_string(cfg.vision_dim) +
                      "], got " + shape_str(image_feats.shape()));
  }
  if (image_feats.dim(0) == 0) throw shape_error("image features must have at least one row");
}

}  // namespace detail

// Standard forward: [queries; embedded prompt] through the blocks, returning
// the n_q query rows. Prompt tokens get the QFormer's own embeddings and
// positions; queries carry none.
template <typename T>
Tensor<T> qformer_forward(const QFormerState<T>& state, const Tensor<T>& image_feats,
                          const std::vector<int>& prompt_ids) {
  detail::check_image_feats(state.cfg, image_feats);
  auto comp = compose_segments<T>({Segment<T>::states_of("q", state.query_tokens),
                                   Segment<T>::tokens_of("p", prompt_ids)},
                                  state.prompt_embed, state.cfg.as_block());
  return detail::qformer_stack(state, comp.x, image_feats);
}

// Grounded forward: the grounding states (LM encoder representations of the
// prompt) are adapted into query width and spliced between the queries and
// the prompt text. Empty grounding reduces exactly to the standard forward.
template <typename T>
Tensor<T> grounded_qformer_forward(const QFormerState<T>& state, const Tensor<T>& grounding,
                                   const Tensor<T>& image_feats,
                                   const std::vector<int>& prompt_ids) {
  detail::check_image_feats(state.cfg, image_feats);
  if (grounding.rank() != 2 || grounding.dim(1) != state.cfg.lm_dim) {
    throw shape_error("grounding states must be [l, " + std::to_string(state.cfg.lm_dim) +
                      "], got " + shape_str(grounding.shape()));
  }
  auto adapted = state.grounding_adapter.apply(grounding);
  auto comp = compose_segments<T>({Segment<T>::states_of("q", state.query_tokens),
                                   Segment<T>::states_of("g", adapted),
                                   Segment<T>::tokens_of("p", prompt_ids)},
                                  state.prompt_embed, state.cfg.as_block());
  return detail::qformer_stack(state, comp.x, image_feats);
}

template <typename T>
Tensor<T> empty_grounding(const QFormerConfig& cfg) {
  return Tensor<T>::wrap({0, cfg.lm_dim}, {}, false);
}

// The trainable fully-connected map from query width into LM space.
template <typename T>
Tensor<T> project_to_lm(const QFormerState<T>& state, const Tensor<T>& t) {
  if (t.rank() != 2 || t.dim(1) != state.cfg.dim) {
    throw shape_error("project_to_lm expects [n, " + std::to_string(state.cfg.dim) + "], got " +
                      shape_str(t.shape()));
  }
  return state.out_projection.apply(t);
}

// ============================================================================
// Checkpoint persistence (same directory format as frozen bundles)
// ============================================================================

template <typename T>
void save_qformer(const std::string& dir, QFormerState<T>& state) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["dtype"] = std::is_same_v<T, float> ? "f32" : "f64";
  manifest["fingerprint"] = hex64(state.compute_fingerprint());
  manifest["config"] = {{"num_queries", state.cfg.num_queries},
                        {"dim", state.cfg.dim},
                        {"num_blocks", state.cfg.num_blocks},
                        {"num_heads", state.cfg.num_heads},
                        {"ff_dim", state.cfg.ff_dim},
                        {"vision_dim", state.cfg.vision_dim},
                        {"lm_dim", state.cfg.lm_dim},
                        {"vocab_size", state.cfg.vocab_size},
                        {"max_seq_len", state.cfg.max_seq_len}};
  manifest["tensors"] = nlohmann::json::array();
  for (auto& [name, tensor] : state.named_params()) {
    manifest["tensors"].push_back(name);
    save_tnsr((fs::path(dir) / (name + ".tnsr")).string(), tensor);
  }
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw format_error(dir + "/manifest.json: write failed");
}

template <typename T>
QFormerState<T> load_qformer(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw format_error(dir + "/manifest.json: cannot open");
  nlohmann::json manifest;
  QFormerConfig cfg;
  std::string stored_print;
  try {
    mf >> manifest;
    stored_print = manifest.at("fingerprint").get<std::string>();
    const auto& j = manifest.at("config");
    cfg.num_queries = j.at("num_queries").get<std::size_t>();
    cfg.dim = j.at("dim").get<std::size_t>();
    cfg.num_blocks = j.at("num_blocks").get<std::size_t>();
    cfg.num_heads = j.at("num_heads").get<std::size_t>();
    cfg.ff_dim = j.at("ff_dim").get<std::size_t>();
    cfg.vision_dim = j.at("vision_dim").get<std::size_t>();
    cfg.lm_dim = j.at("lm_dim").get<std::size_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(dir + "/manifest.json: " + e.what());
  }
  Rng scratch(0);
  QFormerState<T> state = QFormerState<T>::init(cfg, scratch);
  for (auto& [name, tensor] : state.named_params()) {
    const fs::path file = fs::path(dir) / (name + ".tnsr");
    auto loaded = load_tnsr<T>(file.string());
    if (loaded.shape() != tensor.shape()) {
      throw format_error(file.string() + ": shape " + shape_str(loaded.shape()) +
                         " does not match checkpoint layout " + shape_str(tensor.shape()));
    }
    tensor.values() = loaded.values();
  }
  if (hex64(state.compute_fingerprint()) != stored_print) {
    throw format_error(dir + ": fingerprint mismatch (stored " + stored_print + ")");
  }
  return state;
}

}  // namespace fuselab
