#pragma once
// Transformer building blocks over Tensor<T>: linear/attention/feed-forward
// parameter structs, pre-norm encoder and decoder layers, sinusoidal
// positions, token embedding, and sequence composition from mixed
// token/state segments. Every param struct exposes
// visit(prefix, fn(name, Tensor&)) for enumeration, checkpointing and
// optimizer plumbing.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace fuselab {

struct BlockConfig {
  std::size_t model_dim = 0;
  std::size_t num_heads = 1;
  std::size_t ff_dim = 0;
  std::size_t num_layers = 0;  // zero layers = identity stack
  std::size_t max_seq_len = 0;
  std::size_t vocab_size = 0;  // zero for stacks without token embeddings

  void validate() const {
    if (model_dim < 1 || ff_dim < 1 || max_seq_len < 1 || num_heads < 1) {
      throw config_error("block config: dims/heads/max_seq_len must be >= 1");
    }
    if (model_dim % num_heads != 0) {
      throw config_error("block config: model_dim " + std::to_string(model_dim) +
                         " not divisible by num_heads " + std::to_string(num_heads));
    }
  }
};

// Captured activations for one stack: states[j] is the input to layer j,
// states[num_layers] the final output.
template <typename T>
struct LayerStates {
  std::vector<Tensor<T>> states;
};

template <typename T>
struct LinearParams {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  static LinearParams init(std::size_t in, std::size_t out, Rng& rng) {
    LinearParams p;
    p.w = Tensor<T>::normal({in, out}, 0.0, 0.02, rng, true);
    p.b = Tensor<T>::zeros({out}, true);
    return p;
  }
  Tensor<T> apply(const Tensor<T>& x) const { return add(matmul(x, w), b); }
  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

template <typename T>
struct NormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  static NormParams init(std::size_t dim) {
    NormParams p;
    p.gain = Tensor<T>::ones({dim}, true);
    p.bias = Tensor<T>::zeros({dim}, true);
    return p;
  }
  Tensor<T> apply(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".gain", gain);
    fn(prefix + ".bias", bias);
  }
};

// Multi-head scaled dot-product attention. Queries come from a [n, query_dim]
// input, keys/values from a [m, kv_dim] input (identical for self-attention).
template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, o;
  std::size_t num_heads = 1;

  static AttentionParams init(std::size_t query_dim, std::size_t kv_dim, std::size_t num_heads,
                              Rng& rng) {
    if (query_dim % num_heads != 0) {
      throw config_error("attention: dim " + std::to_string(query_dim) +
                         " not divisible by " + std::to_string(num_heads) + " heads");
    }
    AttentionParams p;
    p.q = LinearParams<T>::init(query_dim, query_dim, rng);
    p.k = LinearParams<T>::init(kv_dim, query_dim, rng);
    p.v = LinearParams<T>::init(kv_dim, query_dim, rng);
    p.o = LinearParams<T>::init(query_dim, query_dim, rng);
    p.num_heads = num_heads;
    return p;
  }

  Tensor<T> apply(const Tensor<T>& x_q, const Tensor<T>& x_kv, const BoolMask& mask) const {
    const Tensor<T> Q = q.apply(x_q);
    const Tensor<T> K = k.apply(x_kv);
    const Tensor<T> V = v.apply(x_kv);
    const std::size_t d = Q.dim(1);
    const std::size_t hd = d / num_heads;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Tensor<T>> heads;
    heads.reserve(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
      auto Qh = slice_cols(Q, h * hd, (h + 1) * hd);
      auto Kh = slice_cols(K, h * hd, (h + 1) * hd);
      auto Vh = slice_cols(V, h * hd, (h + 1) * hd);
      auto att = masked_softmax(scale(matmul(Qh, transpose(Kh)), inv_sqrt), mask);
      heads.push_back(matmul(att, Vh));
    }
    return o.apply(concat_cols(heads));
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    o.visit(prefix + ".o", fn);
  }
};

template <typename T>
struct FeedForwardParams {
  LinearParams<T> in, out;

  static FeedForwardParams init(std::size_t dim, std::size_t ff_dim, Rng& rng) {
    FeedForwardParams p;
    p.in = LinearParams<T>::init(dim, ff_dim, rng);
    p.out = LinearParams<T>::init(ff_dim, dim, rng);
    return p;
  }
  Tensor<T> apply(const Tensor<T>& x) const { return out.apply(gelu(in.apply(x))); }
  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    in.visit(prefix + ".in", fn);
    out.visit(prefix + ".out", fn);
  }
};

// Pre-norm self-attention block: x + attn(ln1(x)), then h + ff(ln2(h)).
template <typename T>
struct SelfBlockParams {
  NormParams<T> ln1;
  AttentionParams<T> attn;
  NormParams<T> ln2;
  FeedForwardParams<T> ff;

  static SelfBlockParams init(const BlockConfig& cfg, Rng& rng) {
    SelfBlockParams p;
    p.ln1 = NormParams<T>::init(cfg.model_dim);
    p.attn = AttentionParams<T>::init(cfg.model_dim, cfg.model_dim, cfg.num_heads, rng);
    p.ln2 = NormParams<T>::init(cfg.model_dim);
    p.ff = FeedForwardParams<T>::init(cfg.model_dim, cfg.ff_dim, rng);
    return p;
  }

  Tensor<T> apply(const Tensor<T>& x, const BoolMask& mask) const {
    auto n1 = ln1.apply(x);
    auto h = add(x, attn.apply(n1, n1, mask));
    return add(h, ff.apply(ln2.apply(h)));
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    ln1.visit(prefix + ".ln1", fn);
    attn.visit(prefix + ".attn", fn);
    ln2.visit(prefix + ".ln2", fn);
    ff.visit(prefix + ".ff", fn);
  }
};

// Pre-norm decoder block: causal self-attention, unmasked cross-attention
// into an encoder memory, then feed-forward.
template <typename T>
struct CrossBlockParams {
  NormParams<T> ln1;
  AttentionParams<T> self_attn;
  NormParams<T> ln2;
  AttentionParams<T> cross_attn;
  NormParams<T> ln3;
  FeedForwardParams<T> ff;

  static CrossBlockParams init(const BlockConfig& cfg, std::size_t memory_dim, Rng& rng) {
    CrossBlockParams p;
    p.ln1 = NormParams<T>::init(cfg.model_dim);
    p.self_attn = AttentionParams<T>::init(cfg.model_dim, cfg.model_dim, cfg.num_heads, rng);
    p.ln2 = NormParams<T>::init(cfg.model_dim);
    p.cross_attn = AttentionParams<T>::init(cfg.model_dim, memory_dim, cfg.num_heads, rng);
    p.ln3 = NormParams<T>::init(cfg.model_dim);
    p.ff = FeedForwardParams<T>::init(cfg.model_dim, cfg.ff_dim, rng);
    return p;
  }

  Tensor<T> apply(const Tensor<T>& x, const Tensor<T>& memory, const BoolMask& self_mask) const {
    auto n1 = ln1.apply(x);
    auto h = add(x, self_attn.apply(n1, n1, self_mask));
    h = add(h, cross_attn.apply(ln2.apply(h), memory, BoolMask::full(h.dim(0), memory.dim(0))));
    return add(h, ff.apply(ln3.apply(h)));
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    ln1.visit(prefix + ".ln1", fn);
    self_attn.visit(prefix + ".self", fn);
    ln2.visit(prefix + ".ln2", fn);
    cross_attn.visit(prefix + ".cross", fn);
    ln3.visit(prefix + ".ln3", fn);
    ff.visit(prefix + ".ff", fn);
  }
};

template <typename T>
struct EmbeddingParams {
  Tensor<T> table;  // [vocab, dim]

  static EmbeddingParams init(std::size_t vocab, std::size_t dim, Rng& rng) {
    EmbeddingParams p;
    p.table = Tensor<T>::normal({vocab, dim}, 0.0, 0.02, rng, true);
    return p;
  }
  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".table", table);
  }
};

template <typename Layer, typename Fn>
void visit_layers(const std::string& prefix, std::vector<Layer>& layers, Fn&& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].visit(prefix + ".layer" + std::to_string(i), fn);
  }
}

// ============================================================================
// Positions, embedding, composition
// ============================================================================

// Classic sinusoidal encoding: dimension pair 2i uses frequency
// 10000^(-2i/dim); even index sine, odd index cosine.
template <typename T>
Tensor<T> position_encoding(const std::vector<std::size_t>& positions, std::size_t dim) {
  std::vector<T> out(positions.size() * dim);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const double p = static_cast<double>(positions[i]);
    for (std::size_t j = 0; j < dim; ++j) {
      const double pair = static_cast<double>(j / 2 * 2);
      const double angle = p * std::exp(-std::log(10000.0) * pair / static_cast<double>(dim));
      out[i * dim + j] = static_cast<T>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor<T>::wrap({positions.size(), dim}, std::move(out));
}

// Token embedding plus sinusoidal positions starting at pos_offset. An empty
// id list yields a [0, dim] tensor.
template <typename T>
Tensor<T> embed_tokens(const EmbeddingParams<T>& emb, const std::vector<int>& ids,
                       const BlockConfig& cfg, std::size_t pos_offset = 0) {
  const std::size_t vocab = emb.table.dim(0);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw vocab_error("token id " + std::to_string(id) + " outside vocab of " +
                        std::to_string(vocab));
    }
  }
  if (ids.size() > cfg.max_seq_len) {
    throw length_error("sequence of " + std::to_string(ids.size()) + " tokens exceeds max " +
                       std::to_string(cfg.max_seq_len));
  }
  auto x = select_rows(emb.table, ids);
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = pos_offset + i;
  return add(x, position_encoding<T>(positions, emb.table.dim(1)));
}

// Tied readout: logits = states x table^T.
template <typename T>
Tensor<T> logits_from_states(const Tensor<T>& states, const EmbeddingParams<T>& emb) {
  return matmul(states, transpose(emb.table));
}

enum class SegKind { tokens, states };

// A sequence piece: either token ids (embedded with positions) or
// precomputed continuous states (spliced in untouched, no positions).
template <typename T>
struct Segment {
  SegKind kind = SegKind::tokens;
  std::string label;
  std::vector<int> ids;
  Tensor<T> states;

  static Segment tokens_of(std::string label, std::vector<int> ids) {
    Segment s;
    s.kind = SegKind::tokens;
    s.label = std::move(label);
    s.ids = std::move(ids);
    return s;
  }
  static Segment states_of(std::string label, Tensor<T> states) {
    Segment s;
    s.kind = SegKind::states;
    s.label = std::move(label);
    s.states = std::move(states);
    return s;
  }
  std::size_t length() const {
    return kind == SegKind::tokens ? ids.size() : states.dim(0);
  }
};

// Order-and-length record of how a sequence was assembled; carried alongside
// model outputs so callers can assert on composition structure.
struct SegmentInfo {
  std::string label;
  std::size_t length = 0;

  bool operator==(const SegmentInfo&) const = default;
};

template <typename T>
struct Composed {
  Tensor<T> x;  // [total, dim]
  std::vector<SegmentInfo> parts;

  std::size_t total() const { return x.dim(0); }
  std::size_t offset_of(const std::string& label) const {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.label == label) return off;
      off += p.length;
    }
    throw contract_error("composition has no segment labeled '" + label + "'");
  }
  std::size_t length_of(const std::string& label) const {
    for (const auto& p : parts) {
      if (p.label == label) return p.length;
    }
    throw contract_error("composition has no segment labeled '" + label + "'");
  }
};

// Splices segments in the given order. Token positions run 0,1,... counted
// across token segments only; state segments occupy rows without consuming
// position indices. Zero-length segments are recorded but contribute no rows.
template <typename T>
Composed<T> compose_segments(const std::vector<Segment<T>>& segments,
                             const EmbeddingParams<T>& emb, const BlockConfig& cfg) {
  if (segments.empty()) throw contract_error("compose_segments: no segments");
  std::vector<Tensor<T>> pieces;
  std::vector<SegmentInfo> parts;
  std::size_t token_pos = 0;
  std::size_t total = 0;
  const std::size_t dim = emb.table.dim(1);
  for (const auto& seg : segments) {
    if (seg.kind == SegKind::tokens) {
      pieces.push_back(embed_tokens(emb, seg.ids, cfg, token_pos));
      token_pos += seg.ids.size();
    } else {
      if (!seg.states.defined() || seg.states.rank() != 2 || seg.states.dim(1) != dim) {
        throw shape_error("compose_segments: state segment '" + seg.label +
                          "' must be [n," + std::to_string(dim) + "]");
      }
      pieces.push_back(seg.states);
    }
    parts.push_back({seg.label, seg.length()});
    total += seg.length();
  }
  if (total > cfg.max_seq_len) {
    throw length_error("composed sequence of " + std::to_string(total) + " rows exceeds max " +
                       std::to_string(cfg.max_seq_len));
  }
  if (total == 0) throw contract_error("compose_segments: all segments empty");
  return Composed<T>{concat_rows(pieces), std::move(parts)};
}

// ============================================================================
// Stack forwards
// ============================================================================

// Bidirectional pre-norm encoder. With capture, states[j] is the layer-j
// input and states.back() the final output; zero layers pass x through.
template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& x, const std::vector<SelfBlockParams<T>>& layers,
                          LayerStates<T>* capture = nullptr) {
  if (!x.defined() || x.rank() != 2) throw shape_error("encoder_forward: expected [n, dim] input");
  Tensor<T> h = x;
  const BoolMask mask = BoolMask::full(x.dim(0), x.dim(0));
  for (const auto& layer : layers) {
    if (capture) capture->states.push_back(h);
    h = layer.apply(h, mask);
  }
  if (capture) capture->states.push_back(h);
  return h;
}

// Encoder-decoder decoder: causal self-attention over the embedded prefix,
// cross-attention into memory at every layer.
template <typename T>
Tensor<T> decoder_forward(const Tensor<T>& x, const Tensor<T>& memory,
                          const std::vector<CrossBlockParams<T>>& layers) {
  if (!x.defined() || x.rank() != 2 || x.dim(0) == 0) {
    throw contract_error("decoder_forward: prefix must have at least one row");
  }
  if (!memory.defined() || memory.rank() != 2 || memory.dim(0) == 0) {
    throw contract_error("decoder_forward: memory must have at least one row");
  }
  Tensor<T> h = x;
  const BoolMask mask = BoolMask::causal(x.dim(0));
  for (const auto& layer : layers) h = layer.apply(h, memory, mask);
  return h;
}

// Continuous prefix spliced in front of all rows once layer `layer` is
// reached (0 = before the first block, num_layers = after the last).
template <typename T>
struct Injection {
  std::size_t layer = 0;
  Tensor<T> prefix_states;  // [p, dim]
};

// Causal decoder-only forward over a composed sequence, with optional
// mid-stack state injection. Returns final states for the composed rows only;
// injected prefix rows are dropped. Captured states likewise exclude the
// prefix.
template <typename T>
Tensor<T> decoder_only_forward(const Composed<T>& input,
                               const std::vector<SelfBlockParams<T>>& layers,
                               const Injection<T>* inject = nullptr,
                               LayerStates<T>* capture = nullptr) {
  const std::size_t L = layers.size();
  if (inject) {
    if (inject->layer > L) {
      throw contract_error("injection layer " + std::to_string(inject->layer) +
                           " beyond stack of " + std::to_string(L) + " layers");
    }
    if (!inject->prefix_states.defined() || inject->prefix_states.rank() != 2 ||
        inject->prefix_states.dim(1) != input.x.dim(1)) {
      throw shape_error("injection prefix must be [p, dim] matching the sequence width");
    }
  }
  if (input.total() == 0) throw contract_error("decoder_only_forward: empty sequence");
  Tensor<T> h = input.x;
  std::size_t prefix_rows = 0;
  for (std::size_t j = 0; j < L; ++j) {
    if (capture) capture->states.push_back(slice_rows(h, prefix_rows, h.dim(0)));
    if (inject && inject->layer == j && inject->prefix_states.dim(0) > 0) {
      h = concat_rows<T>({inject->prefix_states, h});
      prefix_rows = inject->prefix_states.dim(0);
    }
    h = layers[j].apply(h, BoolMask::causal(h.dim(0)));
  }
  if (inject && inject->layer == L && inject->prefix_states.dim(0) > 0) {
    h = concat_rows<T>({inject->prefix_states, h});
    prefix_rows = inject->prefix_states.dim(0);
  }
  Tensor<T> out = slice_rows(h, prefix_rows, h.dim(0));
  if (capture) capture->states.push_back(out);
  return out;
}

}  // namespace fuselab
