#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>
#include <set>

#include "fuselab/dataworld.hpp"

using namespace fuselab;
using Catch::Matchers::WithinAbs;

namespace {

// Independent BLEU reference: per-order pooled clipped counts via explicit
// string-keyed maps, precisions combined with pow/products rather than log
// sums. Structured deliberately unlike the library implementation.
double naive_bleu4(const std::vector<std::vector<int>>& cands,
                   const std::vector<std::vector<int>>& refs) {
  double c_total = 0.0, r_total = 0.0;
  double precisions[4];
  int used = 0;
  double product = 1.0;
  for (int n = 1; n <= 4; ++n) {
    double match = 0.0, denom = 0.0;
    for (std::size_t s = 0; s < cands.size(); ++s) {
      std::map<std::string, int> cc, rc;
      const auto key = [](const std::vector<int>& seq, std::size_t at, int len) {
        std::string k;
        for (int t = 0; t < len; ++t) k += std::to_string(seq[at + t]) + ",";
        return k;
      };
      if (cands[s].size() >= static_cast<std::size_t>(n)) {
        for (std::size_t i = 0; i + n <= cands[s].size(); ++i) cc[key(cands[s], i, n)]++;
      }
      if (refs[s].size() >= static_cast<std::size_t>(n)) {
        for (std::size_t i = 0; i + n <= refs[s].size(); ++i) rc[key(refs[s], i, n)]++;
      }
      for (const auto& [k, v] : cc) {
        match += std::min(v, rc.count(k) ? rc[k] : 0);
        denom += v;
      }
    }
    if (denom > 0) {
      precisions[used++] = match / denom;
    }
  }
  for (std::size_t s = 0; s < cands.size(); ++s) {
    c_total += static_cast<double>(cands[s].size());
    r_total += static_cast<double>(refs[s].size());
  }
  if (c_total == 0.0 || used == 0) return 0.0;
  for (int i = 0; i < used; ++i) {
    if (precisions[i] == 0.0) return 0.0;
    product *= precisions[i];
  }
  const double geo = std::pow(product, 1.0 / used);
  const double bp = (c_total >= r_total) ? 1.0 : std::exp(1.0 - r_total / c_total);
  return bp * geo;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("vocabulary round trips and reserved ids") {
  Vocab v = Vocab::build();
  REQUIRE(v.size() == 37);
  REQUIRE(v.id("<pad>") == 0);
  REQUIRE(v.id("<start>") == 1);
  REQUIRE(v.id("<end>") == 2);
  REQUIRE(v.id("<unk>") == 3);

  const std::string s = "a red circle above a blue square";
  REQUIRE(v.detokenize(v.tokenize(s)) == s);
  REQUIRE(v.tokenize("").empty());
  REQUIRE(v.tokenize("  red   blue ") == std::vector<int>{v.id("red"), v.id("blue")});

  REQUIRE(v.tokenize("xyzzy red") == std::vector<int>{Vocab::kUnk, v.id("red")});
  REQUIRE_THROWS_AS(v.tokenize("xyzzy", true), vocab_error);
  REQUIRE_THROWS_AS(v.id("xyzzy"), vocab_error);
  REQUIRE_THROWS_AS(v.word(99), range_error);

  REQUIRE(strip_special({1, 5, 0, 6, 2}) == std::vector<int>{5, 6});
  REQUIRE(strip_special({1, 3, 2}) == std::vector<int>{3});  // unk is kept
}

TEST_CASE("scene sampling is deterministic and well formed") {
  auto s1 = sample_scene(42);
  auto s2 = sample_scene(42);
  auto s3 = sample_scene(43);
  REQUIRE(s1.objects.size() == s2.objects.size());
  for (std::size_t i = 0; i < s1.objects.size(); ++i) {
    REQUIRE(s1.objects[i].shape == s2.objects[i].shape);
    REQUIRE(s1.objects[i].color == s2.objects[i].color);
    REQUIRE(s1.objects[i].row == s2.objects[i].row);
    REQUIRE(s1.objects[i].col == s2.objects[i].col);
  }
  (void)s3;

  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto s = sample_scene(seed);
    REQUIRE(s.objects.size() >= 1);
    REQUIRE(s.objects.size() <= 3);
    std::set<int> cells;
    int prev = -1;
    for (const auto& o : s.objects) {
      const int cell = o.row * 4 + o.col;
      REQUIRE(o.row >= 0);
      REQUIRE(o.row < 4);
      REQUIRE(o.col >= 0);
      REQUIRE(o.col < 4);
      REQUIRE(cells.insert(cell).second);  // distinct cells
      REQUIRE(cell > prev);                // reading order
      prev = cell;
    }
  }
}

TEST_CASE("rendering is bit-exact with localized color mass") {
  Scene s;
  s.objects.push_back({0, 0, 0, 0});  // red circle at cell (0,0)
  auto img = render_scene(s);
  REQUIRE(img.shape() == Shape{3, 32, 32});
  auto img2 = render_scene(s);
  REQUIRE(img.values() == img2.values());

  // All red mass inside the top-left 8x8 block; zero elsewhere, zero in
  // green/blue channels.
  double in_block = 0.0, outside = 0.0, other_channels = 0.0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const float r = img.values()[static_cast<std::size_t>(0 * 1024 + y * 32 + x)];
      if (y < 8 && x < 8) {
        in_block += r;
      } else {
        outside += r;
      }
      other_channels += img.values()[static_cast<std::size_t>(1 * 1024 + y * 32 + x)] +
                        img.values()[static_cast<std::size_t>(2 * 1024 + y * 32 + x)];
    }
  }
  REQUIRE(in_block > 0.0);
  REQUIRE(outside == 0.0);
  REQUIRE(other_channels == 0.0);

  // Empty-adjacent cells stay exactly background.
  Scene two;
  two.objects.push_back({1, 3, 1, 1});  // yellow square at (1,1)
  auto y_img = render_scene(two);
  for (int y = 16; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int ch = 0; ch < 3; ++ch)
        REQUIRE(y_img.values()[static_cast<std::size_t>(ch * 1024 + y * 32 + x)] == 0.0f);
  // Yellow = red + green, no blue.
  double red_mass = 0.0, blue_mass = 0.0;
  for (int i = 0; i < 1024; ++i) {
    red_mass += y_img.values()[static_cast<std::size_t>(i)];
    blue_mass += y_img.values()[static_cast<std::size_t>(2 * 1024 + i)];
  }
  REQUIRE(red_mass > 0.0);
  REQUIRE(blue_mass == 0.0);

  // The three shapes cover different pixel counts (distinguishable).
  std::set<int> areas;
  for (int shape = 0; shape < 3; ++shape) {
    int area = 0;
    for (int ly = 0; ly < 8; ++ly)
      for (int lx = 0; lx < 8; ++lx) area += detail::shape_covers_pixel(shape, ly, lx) ? 1 : 0;
    areas.insert(area);
  }
  REQUIRE(areas.size() == 3);
}

TEST_CASE("captions follow the spatial templates") {
  Scene one;
  one.objects.push_back({0, 0, 2, 1});
  REQUIRE(scene_caption(one) == "a red circle");

  Scene above;
  above.objects.push_back({0, 0, 0, 3});  // red circle row 0
  above.objects.push_back({1, 2, 2, 0});  // blue square row 2
  REQUIRE(scene_caption(above) == "a red circle above a blue square");

  Scene beside;
  beside.objects.push_back({2, 3, 1, 0});  // yellow triangle (1,0)
  beside.objects.push_back({0, 1, 1, 2});  // green circle (1,2)
  REQUIRE(scene_caption(beside) == "a yellow triangle left of a green circle");

  Scene three;
  three.objects.push_back({0, 0, 0, 0});
  three.objects.push_back({1, 1, 1, 1});
  three.objects.push_back({2, 2, 2, 2});
  REQUIRE(scene_caption(three) == "a red circle and a green square and a blue triangle");
}

TEST_CASE("questions are answerable from the scene record") {
  Scene s;
  s.objects.push_back({0, 0, 0, 0});  // red circle
  s.objects.push_back({1, 2, 1, 1});  // blue square
  auto qa = scene_questions(s);
  REQUIRE(qa.size() == 3);  // two attribute questions capped, plus counting
  REQUIRE(qa[0].question == "what color is the circle");
  REQUIRE(qa[0].answer == "red");
  REQUIRE(qa[1].question == "what color is the square");
  REQUIRE(qa[1].answer == "blue");
  REQUIRE(qa[2].question == "how many objects are there");
  REQUIRE(qa[2].answer == "two");

  Scene dup;  // two red circles: no unique shape or color
  dup.objects.push_back({0, 0, 0, 0});
  dup.objects.push_back({0, 0, 3, 3});
  auto qa2 = scene_questions(dup);
  REQUIRE(qa2.size() == 1);
  REQUIRE(qa2[0].answer == "two");

  // Every generated question stays within the 1..3 bound and tokenizes
  // strictly; answers are single tokens.
  Vocab v = Vocab::build();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto scene = sample_scene(seed);
    auto qs = scene_questions(scene);
    REQUIRE(qs.size() >= 1);
    REQUIRE(qs.size() <= 3);
    for (const auto& p : qs) {
      REQUIRE_NOTHROW(v.tokenize(p.question, true));
      REQUIRE(v.tokenize(p.answer, true).size() == 1);
    }
    REQUIRE_NOTHROW(v.tokenize(scene_caption(scene), true));
  }
}

TEST_CASE("dataset generation, determinism, and splits") {
  SplitSpec split;
  split.holdout = {{0, 0}};  // hold out red circles
  auto ds = gen_dataset(7, 60, split);
  REQUIRE(ds.scenes.size() == 60);
  REQUIRE(ds.train.size() + ds.val.size() + ds.test.size() == 60);
  REQUIRE(!ds.train.empty());
  REQUIRE(!ds.test.empty());

  // Disjoint index sets.
  std::set<std::size_t> all;
  for (const auto* v : {&ds.train, &ds.val, &ds.test}) {
    for (std::size_t i : *v) REQUIRE(all.insert(i).second);
  }

  // Holdout soundness: no train/val scene contains a red circle.
  REQUIRE(holdout_violation_count(ds) == 0);
  for (std::size_t i : ds.test) REQUIRE(ds.scenes[i].contains_combo(0, 0));

  // No train caption mentions red and circle for one object: audit via scene.
  for (std::size_t i : ds.train) {
    REQUIRE_FALSE(ds.scenes[i].contains_combo(0, 0));
  }

  // Bitwise determinism.
  auto ds2 = gen_dataset(7, 60, split);
  REQUIRE(ds.train == ds2.train);
  REQUIRE(ds.test == ds2.test);
  for (std::size_t i = 0; i < 60; ++i) {
    REQUIRE(ds.images[i].values() == ds2.images[i].values());
    REQUIRE(ds.samples[i].caption_ids == ds2.samples[i].caption_ids);
  }
  auto ds3 = gen_dataset(8, 60, split);
  bool any_diff = false;
  for (std::size_t i = 0; i < 60; ++i) {
    any_diff = any_diff || ds.samples[i].caption_ids != ds3.samples[i].caption_ids;
  }
  REQUIRE(any_diff);

  REQUIRE_THROWS_AS(gen_dataset(7, 5, {}), config_error);
  SplitSpec bad;
  bad.holdout = {{9, 9}};
  REQUIRE_THROWS_AS(gen_dataset(7, 20, bad), config_error);

  // Holding out every combination starves the train split.
  SplitSpec all_out;
  for (int sh = 0; sh < 3; ++sh)
    for (int c = 0; c < 4; ++c) all_out.holdout.emplace_back(sh, c);
  REQUIRE_THROWS_AS(gen_dataset(7, 20, all_out), config_error);
}

TEST_CASE("bleu4 worked examples") {
  Vocab v = Vocab::build();
  // Stand-in ids; BLEU only sees token identity, not meaning.
  const auto ids = [&](std::initializer_list<const char*> ws) {
    std::vector<int> out;
    for (const char* w : ws) out.push_back(v.id(w));
    return out;
  };
  // Vocabulary for the worked sentence: map words onto existing tokens
  // 1:1 ("the cat sat on the mat" -> the=the, cat=circle, sat=square,
  // on=of, mat=image, is=is, here=there).
  const auto cand1 = ids({"the", "circle", "square", "of", "the", "image"});
  const auto ref = ids({"the", "circle", "is", "of", "the", "image"});
  // p1=5/6, p2=3/5, p3=1/4, p4=0/3 -> unsmoothed score 0.
  REQUIRE(bleu4({cand1}, {ref}) == 0.0);

  // Candidate "the cat is on the mat here" vs same reference:
  // p1=6/7, p2=5/6, p3=4/5, p4=3/4, c=7>r=6 -> BP=1,
  // score = (6/7 * 5/6 * 4/5 * 3/4)^(1/4) = (3/7)^(1/4).
  const auto cand2 = ids({"the", "circle", "is", "of", "the", "image", "there"});
  REQUIRE_THAT(bleu4({cand2}, {ref}), WithinAbs(std::pow(3.0 / 7.0, 0.25), 1e-12));

  // Perfect match -> 1.0, even for captions shorter than four tokens
  // (orders with no n-grams are excluded from the geometric mean).
  REQUIRE(bleu4({ref}, {ref}) == 1.0);
  const auto short_cap = ids({"a", "red", "circle"});
  REQUIRE(bleu4({short_cap}, {short_cap}) == 1.0);

  // No shared unigram -> 0.
  REQUIRE(bleu4({ids({"red", "blue"})}, {ids({"green", "yellow"})}) == 0.0);

  // Brevity penalty: candidate strictly contained in a longer reference.
  const auto long_ref = ids({"a", "red", "circle", "above", "a", "blue", "square"});
  const auto prefix = ids({"a", "red", "circle", "above", "a"});
  const double expected_bp = std::exp(1.0 - 7.0 / 5.0);
  REQUIRE_THAT(bleu4({prefix}, {long_ref}), WithinAbs(expected_bp, 1e-12));

  REQUIRE_THROWS_AS(bleu4({}, {}), contract_error);
  REQUIRE_THROWS_AS(bleu4({cand1}, {ref, ref}), contract_error);
  REQUIRE_THROWS_AS(bleu4({cand1}, {std::vector<int>{}}), contract_error);

  // Empty candidates with nonempty references score 0, not NaN.
  REQUIRE(bleu4({std::vector<int>{}}, {ref}) == 0.0);
}

TEST_CASE("bleu4 agrees with a naive reference on 100 random corpora") {
  Rng rng(2024);
  for (int corpus = 0; corpus < 100; ++corpus) {
    const std::size_t n_pairs = 1 + rng.next_below(8);
    std::vector<std::vector<int>> cands, refs;
    for (std::size_t s = 0; s < n_pairs; ++s) {
      const std::size_t cl = 1 + rng.next_below(10);
      const std::size_t rl = 1 + rng.next_below(10);
      std::vector<int> cand(cl), ref(rl);
      // Small alphabet to force n-gram collisions and clipping.
      for (auto& t : cand) t = static_cast<int>(rng.next_below(5));
      for (auto& t : ref) t = static_cast<int>(rng.next_below(5));
      cands.push_back(std::move(cand));
      refs.push_back(std::move(ref));
    }
    REQUIRE_THAT(bleu4(cands, refs), WithinAbs(naive_bleu4(cands, refs), 1e-9));
  }
}

TEST_CASE("exact match accuracy counts stripped-sequence equality") {
  REQUIRE(exact_match_accuracy({{5}, {6}}, {{5}, {6}}) == 1.0);
  REQUIRE(exact_match_accuracy({{5}, {6}}, {{7}, {8}}) == 0.0);
  REQUIRE(exact_match_accuracy({{5}, {6}, {7}, {8}}, {{5}, {6}, {7}, {9}}) == 0.75);
  // Specials are stripped before comparison.
  REQUIRE(exact_match_accuracy({{1, 5, 2}}, {{5}}) == 1.0);
  REQUIRE_THROWS_AS(exact_match_accuracy({{5}}, {{5}, {6}}), contract_error);
  REQUIRE_THROWS_AS(exact_match_accuracy({}, {}), contract_error);
}

TEST_CASE("dataset save and load round trip") {
  const auto dir = temp_dir("fuselab_ds");
  SplitSpec split;
  split.holdout = {{2, 3}};
  auto ds = gen_dataset(11, 24, split);
  save_dataset(dir.string(), ds);

  auto loaded = load_dataset(dir.string());
  REQUIRE(loaded.seed == ds.seed);
  REQUIRE(loaded.split.holdout == ds.split.holdout);
  REQUIRE(loaded.train == ds.train);
  REQUIRE(loaded.val == ds.val);
  REQUIRE(loaded.test == ds.test);
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    REQUIRE(loaded.images[i].values() == ds.images[i].values());
    REQUIRE(loaded.samples[i].caption_ids == ds.samples[i].caption_ids);
    REQUIRE(loaded.samples[i].qa.size() == ds.samples[i].qa.size());
    for (std::size_t q = 0; q < ds.samples[i].qa.size(); ++q) {
      REQUIRE(loaded.samples[i].qa[q].question_ids == ds.samples[i].qa[q].question_ids);
      REQUIRE(loaded.samples[i].qa[q].answer_ids == ds.samples[i].qa[q].answer_ids);
    }
  }

  REQUIRE_THROWS_AS(load_dataset((dir / "nope").string()), format_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("prompt pools are small and in vocabulary") {
  Vocab v = Vocab::build();
  for (const auto& p : caption_prompts()) REQUIRE_NOTHROW(v.tokenize(p, true));
  for (const auto& p : vqa_prompt_prefixes()) REQUIRE_NOTHROW(v.tokenize(p, true));
  REQUIRE(caption_prompts().size() == 3);
  REQUIRE(vqa_prompt_prefixes().size() == 2);
}
