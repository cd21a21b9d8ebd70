#pragma once
// Synthetic vision-language world: colored shapes on a 4x4 grid rendered to
// 3x32x32 images, templated captions and QA pairs over a closed word-level
// vocabulary, deterministic dataset generation with compositional
// (shape,color) holdout splits, and the task metrics (corpus BLEU-4,
// exact-match accuracy). Everything is a pure function of seeds.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "tensor.hpp"

namespace fuselab {

// ============================================================================
// Vocabulary
// ============================================================================

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v{"circle", "square", "triangle"};
  return v;
}

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v{"red", "green", "blue", "yellow"};
  return v;
}

// Word-level closed vocabulary. Reserved ids: pad=0, start=1, end=2, unk=3.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;

  static Vocab build() {
    Vocab v;
    v.add("<pad>");
    v.add("<start>");
    v.add("<end>");
    v.add("<unk>");
    for (const auto& w : shape_names()) v.add(w);
    for (const auto& w : color_names()) v.add(w);
    for (const char* w : {"a", "above", "left", "of", "and", "describe", "caption", "the",
                          "image", "what", "does", "show", "answer", "question", "how", "many",
                          "objects", "are", "there", "is", "color", "shape", "object", "one",
                          "two", "three"}) {
      v.add(w);
    }
    return v;
  }

  std::size_t size() const { return words_.size(); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw vocab_error("word '" + w + "' not in vocabulary");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
      throw range_error("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(words_.size()));
    }
    return words_[static_cast<std::size_t>(id)];
  }

  // Whitespace word split. Unknown words map to unk when strict is off and
  // raise when it is on. Empty input gives an empty sequence.
  std::vector<int> tokenize(const std::string& text, bool strict = false) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && text[i] == ' ') ++i;
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      if (j > i) {
        const std::string w = text.substr(i, j - i);
        auto it = index_.find(w);
        if (it != index_.end()) {
          ids.push_back(it->second);
        } else if (strict) {
          throw vocab_error("word '" + w + "' not in vocabulary");
        } else {
          ids.push_back(kUnk);
        }
      }
      i = j;
    }
    return ids;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  void add(const std::string& w) {
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// Drops pad/start/end; unk stays (it is real, if degenerate, content).
inline std::vector<int> strip_special(const std::vector<int>& ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id != Vocab::kPad && id != Vocab::kStart && id != Vocab::kEnd) out.push_back(id);
  }
  return out;
}

// ============================================================================
// Scenes and rendering
// ============================================================================

struct SceneObject {
  int shape = 0;  // index into shape_names()
  int color = 0;  // index into color_names()
  int row = 0;    // 4x4 grid cell
  int col = 0;
};

struct Scene {
  std::vector<SceneObject> objects;  // sorted by (row, col), distinct cells
  std::uint64_t provenance_seed = 0;

  bool contains_combo(int shape, int color) const {
    for (const auto& o : objects) {
      if (o.shape == shape && o.color == color) return true;
    }
    return false;
  }
};

// 1-3 objects on distinct cells, attributes uniform, cells in reading order.
inline Scene sample_scene(std::uint64_t scene_seed) {
  Rng rng(scene_seed);
  Scene s;
  s.provenance_seed = scene_seed;
  const std::size_t n = 1 + rng.next_below(3);
  std::vector<int> cells(16);
  for (int i = 0; i < 16; ++i) cells[static_cast<std::size_t>(i)] = i;
  rng.shuffle(cells);
  cells.resize(n);
  std::sort(cells.begin(), cells.end());
  for (int cell : cells) {
    SceneObject o;
    o.shape = static_cast<int>(rng.next_below(3));
    o.color = static_cast<int>(rng.next_below(4));
    o.row = cell / 4;
    o.col = cell % 4;
    s.objects.push_back(o);
  }
  return s;
}

namespace detail {

inline bool shape_covers_pixel(int shape, int ly, int lx) {
  switch (shape) {
    case 0: {  // filled circle, center of the 8x8 cell, radius 3.5
      const double dy = ly - 3.5, dx = lx - 3.5;
      return dy * dy + dx * dx <= 12.25;
    }
    case 1:  // filled square with a 1-pixel margin
      return ly >= 1 && ly <= 6 && lx >= 1 && lx <= 6;
    default: {  // upward triangle widening toward the base
      const double hw = 0.5 * ly + 0.51;
      return std::abs(lx - 3.5) <= hw;
    }
  }
}

inline const float* color_rgb(int color) {
  static const float table[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
  return table[color];
}

}  // namespace detail

// Bit-exact rasterization: black background, filled primitives inside their
// 8x8 grid cell, channel-major [3, 32, 32] in [0,1].
inline Tensor<float> render_scene(const Scene& s) {
  std::vector<float> px(3 * 32 * 32, 0.0f);
  for (const auto& o : s.objects) {
    const float* rgb = detail::color_rgb(o.color);
    for (int ly = 0; ly < 8; ++ly) {
      for (int lx = 0; lx < 8; ++lx) {
        if (!detail::shape_covers_pixel(o.shape, ly, lx)) continue;
        const int y = o.row * 8 + ly, x = o.col * 8 + lx;
        for (int ch = 0; ch < 3; ++ch) px[static_cast<std::size_t>(ch * 1024 + y * 32 + x)] = rgb[ch];
      }
    }
  }
  return Tensor<float>::from_values({3, 32, 32}, std::move(px));
}

// ============================================================================
// Captions, questions, prompts
// ============================================================================

inline std::string object_phrase(const SceneObject& o) {
  return "a " + color_names()[static_cast<std::size_t>(o.color)] + " " +
         shape_names()[static_cast<std::size_t>(o.shape)];
}

// Objects are in reading order, so for two objects the first is the upper one
// (different rows -> "above") or the left one (same row -> "left of").
inline std::string scene_caption(const Scene& s) {
  const auto& ob = s.objects;
  if (ob.size() == 1) return object_phrase(ob[0]);
  if (ob.size() == 2) {
    const std::string rel = (ob[0].row == ob[1].row) ? " left of " : " above ";
    return object_phrase(ob[0]) + rel + object_phrase(ob[1]);
  }
  return object_phrase(ob[0]) + " and " + object_phrase(ob[1]) + " and " + object_phrase(ob[2]);
}

struct QaPair {
  std::string question;
  std::string answer;
};

// 1-3 QA pairs: up to two attribute questions about uniquely identified
// objects, then the always-answerable counting question.
inline std::vector<QaPair> scene_questions(const Scene& s) {
  std::vector<QaPair> attr;
  for (int shape = 0; shape < 3; ++shape) {
    const SceneObject* found = nullptr;
    int count = 0;
    for (const auto& o : s.objects) {
      if (o.shape == shape) {
        ++count;
        found = &o;
      }
    }
    if (count == 1) {
      attr.push_back({"what color is the " + shape_names()[static_cast<std::size_t>(shape)],
                      color_names()[static_cast<std::size_t>(found->color)]});
    }
  }
  for (int color = 0; color < 4; ++color) {
    const SceneObject* found = nullptr;
    int count = 0;
    for (const auto& o : s.objects) {
      if (o.color == color) {
        ++count;
        found = &o;
      }
    }
    if (count == 1) {
      attr.push_back({"what shape is the " + color_names()[static_cast<std::size_t>(color)] +
                          " object",
                      shape_names()[static_cast<std::size_t>(found->shape)]});
    }
  }
  if (attr.size() > 2) attr.resize(2);
  static const char* numbers[] = {"one", "two", "three"};
  attr.push_back({"how many objects are there", numbers[s.objects.size() - 1]});
  return attr;
}

// Fixed task prompt pools; training draws one per iteration.
inline const std::vector<std::string>& caption_prompts() {
  static const std::vector<std::string> v{"describe the image", "caption the image",
                                          "what does the image show"};
  return v;
}

inline const std::vector<std::string>& vqa_prompt_prefixes() {
  static const std::vector<std::string> v{"answer the question", "question"};
  return v;
}

// ============================================================================
// Dataset generation and splits
// ============================================================================

struct TokenizedQa {
  std::vector<int> question_ids;
  std::vector<int> answer_ids;
};

struct Sample {
  std::size_t scene_index = 0;
  std::vector<int> caption_ids;  // no special tokens
  std::vector<TokenizedQa> qa;
};

// Holdout: any scene containing one of these (shape,color) combinations on a
// single object belongs to test, never train or val.
struct SplitSpec {
  std::vector<std::pair<int, int>> holdout;
  std::size_t val_every = 5;  // every k-th non-holdout scene goes to val; 0 disables val

  void validate() const {
    for (const auto& [shape, color] : holdout) {
      if (shape < 0 || shape >= 3 || color < 0 || color >= 4) {
        throw config_error("holdout combo (" + std::to_string(shape) + "," +
                           std::to_string(color) + ") out of range");
      }
    }
  }
};

struct Dataset {
  Vocab vocab;
  std::vector<Scene> scenes;
  std::vector<Tensor<float>> images;   // parallel to scenes
  std::vector<Sample> samples;         // parallel to scenes
  std::vector<std::size_t> train, val, test;  // disjoint index sets
  std::uint64_t seed = 0;
  SplitSpec split;
};

inline Dataset gen_dataset(std::uint64_t seed, std::size_t n_scenes, SplitSpec split = {}) {
  if (n_scenes < 10) {
    throw config_error("n_scenes must be >= 10, got " + std::to_string(n_scenes));
  }
  split.validate();
  Dataset ds;
  ds.vocab = Vocab::build();
  ds.seed = seed;
  ds.split = split;
  const Rng root(seed);
  std::size_t non_holdout_seen = 0;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    Scene scene = sample_scene(root.child(i).seed());
    Sample sample;
    sample.scene_index = i;
    sample.caption_ids = ds.vocab.tokenize(scene_caption(scene), true);
    for (const auto& qa : scene_questions(scene)) {
      sample.qa.push_back(
          {ds.vocab.tokenize(qa.question, true), ds.vocab.tokenize(qa.answer, true)});
    }
    bool held = false;
    for (const auto& [shape, color] : split.holdout) {
      held = held || scene.contains_combo(shape, color);
    }
    if (held) {
      ds.test.push_back(i);
    } else {
      ++non_holdout_seen;
      if (split.val_every > 0 && non_holdout_seen % split.val_every == 0) {
        ds.val.push_back(i);
      } else {
        ds.train.push_back(i);
      }
    }
    ds.images.push_back(render_scene(scene));
    ds.scenes.push_back(std::move(scene));
    ds.samples.push_back(std::move(sample));
  }
  if (ds.train.empty()) {
    throw config_error("holdout rule excludes all scenes from training");
  }
  return ds;
}

// Train/val must never contain a holdout (shape,color) combination; returns
// the number of offending samples (0 = sound).
inline std::size_t holdout_violation_count(const Dataset& ds) {
  std::size_t bad = 0;
  for (const auto& idx_set : {ds.train, ds.val}) {
    for (std::size_t i : idx_set) {
      for (const auto& [shape, color] : ds.split.holdout) {
        if (ds.scenes[i].contains_combo(shape, color)) {
          ++bad;
          break;
        }
      }
    }
  }
  return bad;
}

// ============================================================================
// Metrics
// ============================================================================

// Corpus-level BLEU-4: clipped n-gram counts pooled over the corpus, uniform
// weights over the n-gram orders that have a nonzero denominator (candidates
// shorter than n contribute no order-n grams), brevity penalty
// exp(1 - r/c) when c < r, no smoothing.
inline double bleu4(const std::vector<std::vector<int>>& candidates,
                    const std::vector<std::vector<int>>& references) {
  if (candidates.empty()) throw contract_error("bleu4: empty candidate list");
  if (candidates.size() != references.size()) {
    throw contract_error("bleu4: " + std::to_string(candidates.size()) + " candidates vs " +
                         std::to_string(references.size()) + " references");
  }
  std::size_t c_len = 0, r_len = 0;
  std::size_t clipped[4] = {0, 0, 0, 0};
  std::size_t total[4] = {0, 0, 0, 0};
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    const auto& ref = references[s];
    if (ref.empty()) throw contract_error("bleu4: empty reference at index " + std::to_string(s));
    c_len += cand.size();
    r_len += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (cand.size() < n) continue;
      std::map<std::vector<int>, std::size_t> cand_counts, ref_counts;
      for (std::size_t i = 0; i + n <= cand.size(); ++i) {
        ++cand_counts[std::vector<int>(cand.begin() + i, cand.begin() + i + n)];
      }
      for (std::size_t i = 0; i + n <= ref.size(); ++i) {
        ++ref_counts[std::vector<int>(ref.begin() + i, ref.begin() + i + n)];
      }
      for (const auto& [gram, count] : cand_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) clipped[n - 1] += std::min(count, it->second);
      }
      total[n - 1] += cand.size() - n + 1;
    }
  }
  if (c_len == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t included = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (total[n] == 0) continue;
    if (clipped[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped[n]) / static_cast<double>(total[n]));
    ++included;
  }
  if (included == 0) return 0.0;
  const double geo = std::exp(log_sum / static_cast<double>(included));
  const double bp =
      c_len >= r_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return bp * geo;
}

// Mean exact token-sequence equality after stripping pad/start/end.
inline double exact_match_accuracy(const std::vector<std::vector<int>>& predictions,
                                   const std::vector<std::vector<int>>& answers) {
  if (predictions.size() != answers.size()) {
    throw contract_error("exact_match_accuracy: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(answers.size()) + " answers");
  }
  if (predictions.empty()) throw contract_error("exact_match_accuracy: empty lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (strip_special(predictions[i]) == strip_special(answers[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// ============================================================================
// Persistence: one directory per split, TNSR images + JSONL records
// ============================================================================

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["seed"] = ds.seed;
  manifest["n_scenes"] = ds.scenes.size();
  manifest["val_every"] = ds.split.val_every;
  manifest["holdout"] = nlohmann::json::array();
  for (const auto& [shape, color] : ds.split.holdout) {
    manifest["holdout"].push_back({shape, color});
  }
  const std::vector<std::pair<std::string, const std::vector<std::size_t>*>> splits = {
      {"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
  for (const auto& [name, indices] : splits) {
    const fs::path sub = fs::path(dir) / name;
    fs::create_directories(sub);
    std::ofstream records(sub / "records.jsonl", std::ios::trunc);
    if (!records) throw format_error((sub / "records.jsonl").string() + ": cannot open");
    for (std::size_t idx : *indices) {
      const Scene& scene = ds.scenes[idx];
      char img_name[32];
      std::snprintf(img_name, sizeof img_name, "img_%05zu.tnsr", idx);
      save_tnsr((sub / img_name).string(), ds.images[idx]);
      nlohmann::json rec;
      rec["index"] = idx;
      rec["provenance_seed"] = scene.provenance_seed;
      rec["objects"] = nlohmann::json::array();
      for (const auto& o : scene.objects) {
        rec["objects"].push_back({{"shape", o.shape}, {"color", o.color}, {"row", o.row},
                                  {"col", o.col}});
      }
      rec["caption"] = scene_caption(scene);
      rec["qa"] = nlohmann::json::array();
      for (const auto& qa : scene_questions(scene)) {
        rec["qa"].push_back({{"q", qa.question}, {"a", qa.answer}});
      }
      rec["image"] = img_name;
      records << rec.dump() << "\n";
    }
    manifest["counts"][name] = indices->size();
  }
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw format_error(dir + "/manifest.json: write failed");
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  if (!mf) throw format_error((root / "manifest.json").string() + ": cannot open");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw format_error((root / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  ds.vocab = Vocab::build();
  try {
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.split.val_every = manifest.at("val_every").get<std::size_t>();
    for (const auto& pair : manifest.at("holdout")) {
      ds.split.holdout.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
    }
    const std::size_t n = manifest.at("n_scenes").get<std::size_t>();
    ds.scenes.resize(n);
    ds.images.resize(n);
    ds.samples.resize(n);
  } catch (const nlohmann::json::exception& e) {
    throw format_error((root / "manifest.json").string() + ": " + e.what());
  }
  for (const char* name : {"train", "val", "test"}) {
    const fs::path sub = root / name;
    std::ifstream records(sub / "records.jsonl");
    if (!records) throw format_error((sub / "records.jsonl").string() + ": cannot open");
    std::string line;
    std::vector<std::size_t>& indices =
        std::string(name) == "train" ? ds.train : (std::string(name) == "val" ? ds.val : ds.test);
    while (std::getline(records, line)) {
      if (line.empty()) continue;
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
        const std::size_t idx = rec.at("index").get<std::size_t>();
        if (idx >= ds.scenes.size()) {
          throw format_error((sub / "records.jsonl").string() + ": scene index " +
                             std::to_string(idx) + " out of range");
        }
        Scene scene;
        scene.provenance_seed = rec.at("provenance_seed").get<std::uint64_t>();
        for (const auto& jo : rec.at("objects")) {
          scene.objects.push_back({jo.at("shape").get<int>(), jo.at("color").get<int>(),
                                   jo.at("row").get<int>(), jo.at("col").get<int>()});
        }
        Sample sample;
        sample.scene_index = idx;
        sample.caption_ids = ds.vocab.tokenize(rec.at("caption").get<std::string>(), true);
        for (const auto& jq : rec.at("qa")) {
          sample.qa.push_back({ds.vocab.tokenize(jq.at("q").get<std::string>(), true),
                               ds.vocab.tokenize(jq.at("a").get<std::string>(), true)});
        }
        ds.images[idx] = load_tnsr<float>((sub / rec.at("image").get<std::string>()).string());
        ds.scenes[idx] = std::move(scene);
        ds.samples[idx] = std::move(sample);
        indices.push_back(idx);
      } catch (const nlohmann::json::exception& e) {
        throw format_error((sub / "records.jsonl").string() + ": " + e.what());
      }
    }
  }
  return ds;
}

}  // namespace fuselab
