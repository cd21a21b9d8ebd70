#pragma once
// End-to-end fusion graphs over a frozen bundle and a trainable QFormer:
// standard encoder-decoder (queries before the prompt, both through the LM
// encoder), standard decoder-only (prompt then queries, causal), grounded
// encoder-decoder (precomputed prompt encodings as decoder memory), and the
// experimental grounded decoder-only variant (query injection at layer n).
// Plus greedy generation and the encoder cache with invocation accounting.

#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "frozen.hpp"
#include "qformer.hpp"

namespace fuselab {

enum class PipelineKind {
  standard_encdec,
  standard_deconly,
  grounded_encdec,
  grounded_deconly,
};

inline std::string pipeline_kind_name(PipelineKind k) {
  switch (k) {
    case PipelineKind::standard_encdec: return "standard-encdec";
    case PipelineKind::standard_deconly: return "standard-deconly";
    case PipelineKind::grounded_encdec: return "grounded-encdec";
    default: return "grounded-deconly";
  }
}

inline PipelineKind pipeline_kind_from(const std::string& s) {
  if (s == "standard-encdec") return PipelineKind::standard_encdec;
  if (s == "standard-deconly") return PipelineKind::standard_deconly;
  if (s == "grounded-encdec") return PipelineKind::grounded_encdec;
  if (s == "grounded-deconly") return PipelineKind::grounded_deconly;
  throw config_error("unknown pipeline kind '" + s + "'");
}

inline bool pipeline_is_grounded(PipelineKind k) {
  return k == PipelineKind::grounded_encdec || k == PipelineKind::grounded_deconly;
}

inline LmKind pipeline_lm_kind(PipelineKind k) {
  return (k == PipelineKind::standard_encdec || k == PipelineKind::grounded_encdec)
             ? LmKind::encoder_decoder
             : LmKind::decoder_only;
}

// Memoizes frozen-LM prompt encodings keyed on the exact token-id sequence.
// Every frozen-encoder invocation, cached or not, goes through the counters;
// with the cache enabled, encoder_calls == cache_misses always.
template <typename T>
struct EncoderCache {
  bool enabled = true;
  std::map<std::vector<int>, Tensor<T>> entries;
  std::size_t encoder_calls = 0;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;

  void reset_counters() { encoder_calls = cache_hits = cache_misses = 0; }

  void clear() {
    entries.clear();
    reset_counters();
  }

  // An encoder run whose input cannot be cached (it embeds trainable state).
  void note_uncached_call() {
    ++encoder_calls;
    ++cache_misses;
  }

  template <typename Fn>
  Tensor<T> get_or_compute(const std::vector<int>& key, Fn&& compute) {
    if (enabled) {
      auto it = entries.find(key);
      if (it != entries.end()) {
        ++cache_hits;
        return it->second;
      }
    }
    ++encoder_calls;
    ++cache_misses;
    Tensor<T> value = compute();
    if (enabled) entries.emplace(key, value);
    return value;
  }
};

template <typename T>
struct PipelineOutput {
  Tensor<T> logits;  // [labels, vocab] under teacher forcing
  Tensor<T> loss;    // defined when targets were given
  std::vector<int> generated_ids;
  std::vector<SegmentInfo> composition;  // structural order of the fused sequence
};

// Teacher forcing: the decoder sees [start] + target and is scored against
// target + [end], one label per input position.
inline std::pair<std::vector<int>, std::vector<int>> teacher_pair(
    const std::vector<int>& target_ids) {
  std::vector<int> prefix{Vocab::kStart};
  prefix.insert(prefix.end(), target_ids.begin(), target_ids.end());
  std::vector<int> labels = target_ids;
  labels.push_back(Vocab::kEnd);
  return {prefix, labels};
}

namespace detail {

template <typename T>
Tensor<T> projected_queries(const FrozenBundle<T>& bundle, const QFormerState<T>& qf,
                            const Tensor<float>& image, const std::vector<int>& prompt_ids) {
  auto feats = vision_encode(bundle, image).features;
  return project_to_lm(qf, qformer_forward(qf, feats, prompt_ids));
}

template <typename T>
void check_logits(const Tensor<T>& logits) {
  if (!logits.all_finite()) throw numeric_error("pipeline produced non-finite logits");
}

}  // namespace detail

// Standard encoder-decoder: the projected queries are concatenated before the
// prompt and the pair runs through the LM encoder, so the encoder executes on
// every call; the optional cache argument only keeps the invocation ledger.
template <typename T>
PipelineOutput<T> standard_encdec_forward(const FrozenBundle<T>& bundle, const QFormerState<T>& qf,
                                          const Tensor<float>& image,
                                          const std::vector<int>& prompt_ids,
                                          const std::vector<int>& target_ids,
                                          EncoderCache<T>* counter = nullptr) {
  require_kind(bundle.kind(), LmKind::encoder_decoder, "standard encoder-decoder pipeline");
  auto projected = detail::projected_queries(bundle, qf, image, prompt_ids);
  auto enc = lm_encode_segments(bundle, {Segment<T>::states_of("t_qv", projected),
                                         Segment<T>::tokens_of("p", prompt_ids)});
  if (counter) counter->note_uncached_call();
  const auto [prefix, labels] = teacher_pair(target_ids);
  PipelineOutput<T> out;
  out.logits = lm_decode(bundle, enc.states, prefix);
  detail::check_logits(out.logits);
  out.loss = cross_entropy_with_ids(out.logits, labels);
  out.composition = enc.parts;
  return out;
}

// Standard decoder-only: causal sequence [prompt, projected queries, target],
// scored on the target block. No encoder exists in this variant.
template <typename T>
PipelineOutput<T> standard_deconly_forward(const FrozenBundle<T>& bundle,
                                           const QFormerState<T>& qf, const Tensor<float>& image,
                                           const std::vector<int>& prompt_ids,
                                           const std::vector<int>& target_ids) {
  require_kind(bundle.kind(), LmKind::decoder_only, "standard decoder-only pipeline");
  auto projected = detail::projected_queries(bundle, qf, image, prompt_ids);
  const auto [prefix, labels] = teacher_pair(target_ids);
  auto comp = lm_compose(bundle, {Segment<T>::tokens_of("p", prompt_ids),
                                  Segment<T>::states_of("t_qv", projected),
                                  Segment<T>::tokens_of("tgt", prefix)});
  auto states = lm_deconly_states(bundle, comp);
  auto tgt_states = slice_rows(states, comp.offset_of("tgt"), comp.total());
  PipelineOutput<T> out;
  out.logits = logits_from_states(tgt_states, bundle.lm_embed);
  detail::check_logits(out.logits);
  out.loss = cross_entropy_with_ids(out.logits, labels);
  out.composition = comp.parts;
  return out;
}

// Grounded encoder-decoder: the prompt encoding is pure (no trainable rows),
// so it is served from the cache; the decoder memory is the projected
// grounded queries followed by that encoding. The LM encoder never sees
// query-bearing input here.
template <typename T>
PipelineOutput<T> grounded_encdec_forward(const FrozenBundle<T>& bundle, const QFormerState<T>& qf,
                                          const Tensor<float>& image,
                                          const std::vector<int>& prompt_ids,
                                          const std::vector<int>& target_ids,
                                          EncoderCache<T>& cache) {
  require_kind(bundle.kind(), LmKind::encoder_decoder, "grounded encoder-decoder pipeline");
  auto enc_prompt =
      cache.get_or_compute(prompt_ids, [&] { return lm_encode(bundle, prompt_ids).states; });
  auto feats = vision_encode(bundle, image).features;
  auto grounded = grounded_qformer_forward(qf, enc_prompt, feats, prompt_ids);
  auto projected = project_to_lm(qf, grounded);
  auto memory = concat_rows<T>({projected, enc_prompt});
  const auto [prefix, labels] = teacher_pair(target_ids);
  PipelineOutput<T> out;
  out.logits = lm_decode(bundle, memory, prefix);
  detail::check_logits(out.logits);
  out.loss = cross_entropy_with_ids(out.logits, labels);
  out.composition = {{"t_qv_g", qf.cfg.num_queries}, {"l_e(p)", prompt_ids.size()}};
  return out;
}

// Grounded decoder-only (experimental): queries are grounded in the prompt's
// layer-n hidden states and injected into the causal stack at layer n. The
// prompt states are prompt-pure, so they go through the cache as well.
template <typename T>
PipelineOutput<T> grounded_deconly_forward(const FrozenBundle<T>& bundle,
                                           const QFormerState<T>& qf, const Tensor<float>& image,
                                           const std::vector<int>& prompt_ids,
                                           const std::vector<int>& target_ids, std::size_t layer_n,
                                           std::type_identity_t<EncoderCache<T>*> cache = nullptr) {
  require_kind(bundle.kind(), LmKind::decoder_only, "grounded decoder-only pipeline");
  const std::size_t depth = bundle.cfg.lm.num_layers;
  if (layer_n > depth) {
    throw range_error("injection layer " + std::to_string(layer_n) + " outside [0, " +
                      std::to_string(depth) + "]");
  }
  auto compute = [&] { return lm_layer_states(bundle, prompt_ids).states[layer_n]; };
  Tensor<T> grounding = cache ? cache->get_or_compute(prompt_ids, compute) : compute();
  auto feats = vision_encode(bundle, image).features;
  auto projected = project_to_lm(qf, grounded_qformer_forward(qf, grounding, feats, prompt_ids));
  const auto [prefix, labels] = teacher_pair(target_ids);
  auto comp = lm_compose(bundle, {Segment<T>::tokens_of("p", prompt_ids),
                                  Segment<T>::tokens_of("tgt", prefix)});
  Injection<T> inject{layer_n, projected};
  auto states = lm_deconly_states(bundle, comp, &inject);
  auto tgt_states = slice_rows(states, comp.offset_of("tgt"), comp.total());
  PipelineOutput<T> out;
  out.logits = logits_from_states(tgt_states, bundle.lm_embed);
  detail::check_logits(out.logits);
  out.loss = cross_entropy_with_ids(out.logits, labels);
  out.composition = {{"t_qv_g", qf.cfg.num_queries}, {"p", prompt_ids.size()},
                     {"tgt", prefix.size()}};
  return out;
}

namespace detail {

template <typename T>
int greedy_pick(const Tensor<T>& logits) {
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  const T* row = logits.values().data() + (rows - 1) * vocab;
  int best = 0;
  for (std::size_t j = 1; j < vocab; ++j) {
    if (row[j] > row[best]) best = static_cast<int>(j);  // ties keep the lowest id
  }
  return best;
}

}  // namespace detail

// Greedy decoding from the start token until the end token or max_len new
// tokens. Conditioning (vision, queries, encoder memory) is computed once;
// the decoder itself is re-run per step. Running out of LM context truncates
// the output rather than failing.
template <typename T>
PipelineOutput<T> generate(PipelineKind kind, const FrozenBundle<T>& bundle,
                           const QFormerState<T>& qf, const Tensor<float>& image,
                           const std::vector<int>& prompt_ids, std::size_t max_len,
                           std::type_identity_t<EncoderCache<T>*> cache = nullptr,
                           std::size_t layer_n = 0) {
  if (max_len == 0) throw contract_error("generate: max_len must be >= 1");
  autograd::NoGradGuard ng;
  require_kind(bundle.kind(), pipeline_lm_kind(kind), "generation pipeline");
  PipelineOutput<T> out;

  if (bundle.kind() == LmKind::encoder_decoder) {
    Tensor<T> memory;
    if (kind == PipelineKind::standard_encdec) {
      auto projected = detail::projected_queries(bundle, qf, image, prompt_ids);
      auto enc = lm_encode_segments(bundle, {Segment<T>::states_of("t_qv", projected),
                                             Segment<T>::tokens_of("p", prompt_ids)});
      if (cache) cache->note_uncached_call();
      memory = enc.states;
      out.composition = enc.parts;
    } else {
      EncoderCache<T> local;
      EncoderCache<T>& c = cache ? *cache : local;
      auto enc_prompt =
          c.get_or_compute(prompt_ids, [&] { return lm_encode(bundle, prompt_ids).states; });
      auto feats = vision_encode(bundle, image).features;
      auto grounded = grounded_qformer_forward(qf, enc_prompt, feats, prompt_ids);
      memory = concat_rows<T>({project_to_lm(qf, grounded), enc_prompt});
      out.composition = {{"t_qv_g", qf.cfg.num_queries}, {"l_e(p)", prompt_ids.size()}};
    }
    std::vector<int> prefix{Vocab::kStart};
    const std::size_t room = bundle.cfg.lm.max_seq_len - 1;
    while (out.generated_ids.size() < std::min(max_len, room)) {
      out.logits = lm_decode(bundle, memory, prefix);
      const int next = detail::greedy_pick(out.logits);
      if (next == Vocab::kEnd) break;
      out.generated_ids.push_back(next);
      prefix.push_back(next);
    }
    return out;
  }

  const std::size_t depth = bundle.cfg.lm.num_layers;
  if (kind == PipelineKind::grounded_deconly && layer_n > depth) {
    throw range_error("injection layer " + std::to_string(layer_n) + " outside [0, " +
                      std::to_string(depth) + "]");
  }
  auto feats = vision_encode(bundle, image).features;
  Tensor<T> projected;
  Injection<T> inject;
  bool injected = false;
  if (kind == PipelineKind::standard_deconly) {
    projected = project_to_lm(qf, qformer_forward(qf, feats, prompt_ids));
  } else {
    auto compute = [&] { return lm_layer_states(bundle, prompt_ids).states[layer_n]; };
    Tensor<T> grounding = cache ? cache->get_or_compute(prompt_ids, compute) : compute();
    projected = project_to_lm(qf, grounded_qformer_forward(qf, grounding, feats, prompt_ids));
    inject = {layer_n, projected};
    injected = true;
  }
  const std::size_t base =
      prompt_ids.size() + (injected ? 0 : qf.cfg.num_queries) + 1;  // plus the start token
  const std::size_t room =
      bundle.cfg.lm.max_seq_len > base ? bundle.cfg.lm.max_seq_len - base : 0;
  std::vector<int> prefix{Vocab::kStart};
  while (out.generated_ids.size() < std::min(max_len, room)) {
    std::vector<Segment<T>> segments;
    if (injected) {
      segments = {Segment<T>::tokens_of("p", prompt_ids), Segment<T>::tokens_of("tgt", prefix)};
    } else {
      segments = {Segment<T>::tokens_of("p", prompt_ids), Segment<T>::states_of("t_qv", projected),
                  Segment<T>::tokens_of("tgt", prefix)};
    }
    auto comp = lm_compose(bundle, segments);
    out.composition = comp.parts;
    auto states = lm_deconly_states(bundle, comp, injected ? &inject : nullptr);
    out.logits = logits_from_states(slice_rows(states, comp.offset_of("tgt"), comp.total()),
                                    bundle.lm_embed);
    const int next = detail::greedy_pick(out.logits);
    if (next == Vocab::kEnd) break;
    out.generated_ids.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

}  // namespace fuselab
