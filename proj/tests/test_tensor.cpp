#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fuselab/tensor.hpp"

using namespace fuselab;
using Catch::Matchers::WithinAbs;

namespace {

// Scalarizes a tensor with fixed pseudo-random weights so every element
// contributes a distinct gradient signal.
Tensor<double> weighted_sum(const Tensor<double>& t, std::uint64_t salt) {
  Rng rng(salt);
  std::vector<double> w(t.numel());
  for (double& v : w) v = rng.next_normal(0.0, 1.0);
  return sum_all(mul(t, Tensor<double>::from_values(t.shape(), std::move(w))));
}

Tensor<double> rand_param(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<double>::normal(std::move(shape), 0.0, 1.0, rng, /*requires_grad=*/true);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("tensor creation and validation") {
  auto z = Tensor<float>::zeros({2, 3});
  REQUIRE(z.shape() == Shape{2, 3});
  REQUIRE(z.numel() == 6);
  for (float v : z.values()) REQUIRE(v == 0.0f);

  auto o = Tensor<float>::ones({4});
  for (float v : o.values()) REQUIRE(v == 1.0f);

  REQUIRE_THROWS_AS(Tensor<float>::zeros({}), shape_error);
  REQUIRE_THROWS_AS(Tensor<float>::zeros({2, 0}), shape_error);
  REQUIRE_THROWS_AS(Tensor<float>::from_values({2}, {1.0f, 2.0f, 3.0f}), shape_error);

  // The unchecked builder is the one place zero-row tensors come from.
  auto e = Tensor<float>::wrap({0, 5}, {});
  REQUIRE(e.numel() == 0);
  REQUIRE(e.dim(0) == 0);

  Rng rng(7);
  auto n = Tensor<double>::normal({100, 10}, 0.0, 1.0, rng);
  double mean = 0.0;
  for (double v : n.values()) mean += v;
  mean /= static_cast<double>(n.numel());
  REQUIRE(std::abs(mean) < 0.1);
}

TEST_CASE("elementwise ops") {
  auto a = Tensor<double>::from_values({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_values({2, 2}, {10, 20, 30, 40});

  REQUIRE(add(a, b).values() == std::vector<double>{11, 22, 33, 44});
  REQUIRE(sub(b, a).values() == std::vector<double>{9, 18, 27, 36});
  REQUIRE(mul(a, b).values() == std::vector<double>{10, 40, 90, 160});
  REQUIRE(scale(a, 2.0).values() == std::vector<double>{2, 4, 6, 8});

  auto bias = Tensor<double>::from_values({2}, {100, 200});
  REQUIRE(add(a, bias).values() == std::vector<double>{101, 202, 103, 204});

  auto c = Tensor<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE_THROWS_AS(add(a, c), shape_error);
  REQUIRE_THROWS_AS(sub(a, c), shape_error);
  REQUIRE_THROWS_AS(mul(a, c), shape_error);
}

TEST_CASE("matmul matches hand-computed product") {
  auto a = Tensor<double>::from_values({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_values({2, 1}, {5, 6});
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 1});
  REQUIRE(c.values() == std::vector<double>{17, 39});

  REQUIRE_THROWS_AS(matmul(a, Tensor<double>::zeros({3, 2})), shape_error);
  REQUIRE_THROWS_AS(matmul(a, Tensor<double>::zeros({2})), shape_error);
}

TEMPLATE_TEST_CASE("matmul is bitwise identical to a naive triple loop", "", float, double) {
  using T = TestType;
  Rng rng(42);
  const std::size_t m = 8, k = 8, n = 8;
  auto a = Tensor<T>::normal({m, k}, 0.0, 1.0, rng);
  auto b = Tensor<T>::normal({k, n}, 0.0, 1.0, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t kk = 0; kk < k; ++kk) s += a.at(i, kk) * b.at(kk, j);
      REQUIRE(c.at(i, j) == s);
    }
  }
}

TEST_CASE("transpose, concat, slice") {
  auto a = Tensor<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = transpose(a);
  REQUIRE(t.shape() == Shape{3, 2});
  REQUIRE(t.values() == std::vector<double>{1, 4, 2, 5, 3, 6});

  auto b = Tensor<double>::from_values({1, 3}, {7, 8, 9});
  auto cr = concat_rows<double>({a, b});
  REQUIRE(cr.shape() == Shape{3, 3});
  REQUIRE(cr.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});

  auto s = slice_rows(cr, 1, 3);
  REQUIRE(s.values() == std::vector<double>{4, 5, 6, 7, 8, 9});
  REQUIRE_THROWS_AS(slice_rows(cr, 2, 4), range_error);

  auto cc = concat_cols<double>({a, a});
  REQUIRE(cc.shape() == Shape{2, 6});
  REQUIRE(cc.values() == std::vector<double>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6});

  auto sc = slice_cols(a, 1, 3);
  REQUIRE(sc.values() == std::vector<double>{2, 3, 5, 6});
  REQUIRE_THROWS_AS(slice_cols(a, 1, 4), range_error);

  // Zero-row pieces pass through concat untouched.
  auto empty = Tensor<double>::wrap({0, 3}, {});
  auto with_empty = concat_rows<double>({empty, a});
  REQUIRE(with_empty.values() == a.values());

  REQUIRE_THROWS_AS(concat_rows<double>({}), contract_error);
  REQUIRE_THROWS_AS(concat_rows<double>({a, Tensor<double>::zeros({2, 2})}), shape_error);
}

TEST_CASE("softmax matches hand values") {
  // exp(0)=1, exp(ln 2)=2, so softmax([0, ln 2]) = [1/3, 2/3].
  auto x = Tensor<double>::from_values({1, 2}, {0.0, std::log(2.0)});
  auto y = softmax(x, 1);
  REQUIRE_THAT(y.values()[0], WithinAbs(1.0 / 3.0, 1e-12));
  REQUIRE_THAT(y.values()[1], WithinAbs(2.0 / 3.0, 1e-12));

  auto col = softmax(Tensor<double>::from_values({2, 1}, {0.0, std::log(2.0)}), 0);
  REQUIRE_THAT(col.values()[0], WithinAbs(1.0 / 3.0, 1e-12));
  REQUIRE_THAT(col.values()[1], WithinAbs(2.0 / 3.0, 1e-12));

  // Shift invariance: softmax(x + c) == softmax(x) up to rounding.
  auto shifted = softmax(Tensor<double>::from_values({1, 2}, {1000.0, 1000.0 + std::log(2.0)}), 1);
  REQUIRE_THAT(shifted.values()[0], WithinAbs(1.0 / 3.0, 1e-12));

  REQUIRE_THROWS_AS(softmax(x, 2), shape_error);
}

TEST_CASE("masked softmax zeroes disallowed positions") {
  auto x = Tensor<double>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  const BoolMask mask{2, 3, {1, 0, 0, 1, 1, 0}};
  auto y = masked_softmax(x, mask);
  // Row 0 may only see column 0.
  REQUIRE(y.at(0, 0) == 1.0);
  REQUIRE(y.at(0, 1) == 0.0);
  REQUIRE(y.at(0, 2) == 0.0);
  // Row 1 sees columns 0 and 1; exp gap of 1.
  const double e = std::exp(1.0);
  REQUIRE_THAT(y.at(1, 1), WithinAbs(e / (1.0 + e), 1e-12));
  REQUIRE(y.at(1, 2) == 0.0);
  double row_sum = y.at(1, 0) + y.at(1, 1);
  REQUIRE_THAT(row_sum, WithinAbs(1.0, 1e-12));

  // A full mask reduces to plain softmax.
  auto full = masked_softmax(x, BoolMask::full(2, 3));
  auto plain = softmax(x, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    REQUIRE_THAT(full.values()[i], WithinAbs(plain.values()[i], 1e-15));
  }

  BoolMask dead = BoolMask::full(2, 3);
  for (std::size_t j = 0; j < 3; ++j) dead.allowed[1 * 3 + j] = 0;
  REQUIRE_THROWS_AS(masked_softmax(x, dead), contract_error);
}

TEST_CASE("layer norm matches hand values") {
  // Row [1,3]: mean 2, population variance 1; with eps=0 the output is [-1,1].
  auto x = Tensor<double>::from_values({1, 2}, {1.0, 3.0});
  auto gain = Tensor<double>::ones({2});
  auto bias = Tensor<double>::zeros({2});
  auto y = layer_norm(x, gain, bias, 0.0);
  REQUIRE_THAT(y.values()[0], WithinAbs(-1.0, 1e-12));
  REQUIRE_THAT(y.values()[1], WithinAbs(1.0, 1e-12));

  auto g2 = Tensor<double>::from_values({2}, {2.0, 2.0});
  auto b2 = Tensor<double>::from_values({2}, {10.0, 10.0});
  auto y2 = layer_norm(x, g2, b2, 0.0);
  REQUIRE_THAT(y2.values()[0], WithinAbs(8.0, 1e-12));
  REQUIRE_THAT(y2.values()[1], WithinAbs(12.0, 1e-12));

  REQUIRE_THROWS_AS(layer_norm(x, Tensor<double>::ones({3}), bias), shape_error);
}

TEST_CASE("gelu basics") {
  auto x = Tensor<double>::from_values({3}, {-5.0, 0.0, 5.0});
  auto y = gelu(x);
  REQUIRE(y.values()[1] == 0.0);
  REQUIRE_THAT(y.values()[2], WithinAbs(5.0, 1e-4));  // saturates to identity
  // gelu(x) - gelu(-x) == x for the tanh form.
  REQUIRE_THAT(y.values()[2] - y.values()[0], WithinAbs(5.0, 1e-12));
}

TEST_CASE("reductions and gathers") {
  auto a = Tensor<double>::from_values({2, 2}, {1, 2, 3, 4});
  REQUIRE(sum_all(a).value() == 10.0);
  REQUIRE(mean_all(a).value() == 2.5);

  auto table = Tensor<double>::from_values({3, 2}, {0, 1, 10, 11, 20, 21});
  auto rows = select_rows(table, {2, 0, 2});
  REQUIRE(rows.shape() == Shape{3, 2});
  REQUIRE(rows.values() == std::vector<double>{20, 21, 0, 1, 20, 21});
  REQUIRE_THROWS_AS(select_rows(table, {3}), range_error);
  REQUIRE_THROWS_AS(select_rows(table, {-1}), range_error);
}

TEST_CASE("cross entropy matches hand values") {
  // Uniform logits over 4 classes: loss = ln 4 regardless of target.
  auto logits = Tensor<double>::zeros({2, 4});
  auto loss = cross_entropy_with_ids(logits, {0, 3});
  REQUIRE_THAT(loss.value(), WithinAbs(std::log(4.0), 1e-12));

  // A strongly peaked correct logit drives the loss toward zero.
  auto peaked = Tensor<double>::from_values({1, 3}, {20.0, 0.0, 0.0});
  REQUIRE(cross_entropy_with_ids(peaked, {0}).value() < 1e-6);

  REQUIRE_THROWS_AS(cross_entropy_with_ids(logits, {0}), shape_error);
  REQUIRE_THROWS_AS(cross_entropy_with_ids(logits, {0, 4}), range_error);
  REQUIRE_THROWS_AS(cross_entropy_with_ids(Tensor<double>::wrap({0, 4}, {}), {}), contract_error);
}

TEST_CASE("backward on simple graph with hand gradients") {
  // f(x) = sum(x*x) at x=[3, -2]: df/dx = 2x = [6, -4].
  auto x = Tensor<double>::from_values({2}, {3.0, -2.0}, true);
  auto loss = sum_all(mul(x, x));
  REQUIRE(loss.value() == 13.0);
  backward(loss);
  REQUIRE(x.grad() == std::vector<double>{6.0, -4.0});

  // Grads accumulate across a second forward/backward until cleared.
  backward(sum_all(mul(x, x)));
  REQUIRE(x.grad() == std::vector<double>{12.0, -8.0});
  x.clear_grad();
  REQUIRE_FALSE(x.has_grad());

  REQUIRE_THROWS_AS(backward(x), contract_error);  // non-scalar root
}

TEST_CASE("diamond-shaped graph accumulates both paths") {
  // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x=3.
  auto x = Tensor<double>::from_values({1}, {3.0}, true);
  auto y = add(mul(x, x), x);
  backward(y);
  REQUIRE(x.grad() == std::vector<double>{7.0});
}

TEST_CASE("no-grad guard suppresses recording") {
  auto x = Tensor<double>::from_values({1}, {2.0}, true);
  {
    autograd::NoGradGuard ng;
    auto y = mul(x, x);
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(y.is_leaf());
  }
  auto y = mul(x, x);
  REQUIRE(y.requires_grad());
  REQUIRE_FALSE(y.is_leaf());
}

TEST_CASE("set_requires_grad freezes leaves only") {
  auto x = Tensor<double>::from_values({1}, {2.0}, true);
  auto y = mul(x, x);
  REQUIRE_THROWS_AS(y.set_requires_grad(false), contract_error);
  x.set_requires_grad(false);
  auto z = mul(x, x);
  REQUIRE_FALSE(z.requires_grad());
}

TEST_CASE("gradient check on every op") {
  const double tol = 1e-7;  // double-precision central differences are tight

  SECTION("square") {
    auto x = rand_param({3}, 1);
    REQUIRE(grad_check([&] { return sum_all(mul(x, x)); }, {x}) < tol);
  }
  SECTION("add with row broadcast") {
    auto a = rand_param({3, 4}, 2);
    auto b = rand_param({4}, 3);
    REQUIRE(grad_check([&] { return weighted_sum(add(a, b), 90); }, {a, b}) < tol);
  }
  SECTION("sub and scale") {
    auto a = rand_param({2, 3}, 4);
    auto b = rand_param({2, 3}, 5);
    REQUIRE(grad_check([&] { return weighted_sum(sub(scale(a, 1.7), b), 91); }, {a, b}) < tol);
  }
  SECTION("matmul") {
    auto a = rand_param({3, 4}, 6);
    auto b = rand_param({4, 2}, 7);
    REQUIRE(grad_check([&] { return weighted_sum(matmul(a, b), 92); }, {a, b}) < tol);
  }
  SECTION("transpose") {
    auto a = rand_param({3, 4}, 8);
    REQUIRE(grad_check([&] { return weighted_sum(transpose(a), 93); }, {a}) < tol);
  }
  SECTION("concat and slice rows") {
    auto a = rand_param({2, 3}, 9);
    auto b = rand_param({3, 3}, 10);
    REQUIRE(grad_check(
                [&] { return weighted_sum(slice_rows(concat_rows<double>({a, b}), 1, 4), 94); },
                {a, b}) < tol);
  }
  SECTION("concat and slice cols") {
    auto a = rand_param({2, 3}, 11);
    auto b = rand_param({2, 2}, 12);
    REQUIRE(grad_check(
                [&] { return weighted_sum(slice_cols(concat_cols<double>({a, b}), 2, 5), 95); },
                {a, b}) < tol);
  }
  SECTION("softmax") {
    auto a = rand_param({3, 5}, 13);
    REQUIRE(grad_check([&] { return weighted_sum(softmax(a, 1), 96); }, {a}) < tol);
    REQUIRE(grad_check([&] { return weighted_sum(softmax(a, 0), 97); }, {a}) < tol);
  }
  SECTION("masked softmax") {
    auto a = rand_param({4, 4}, 14);
    const BoolMask mask = BoolMask::causal(4);
    REQUIRE(grad_check([&] { return weighted_sum(masked_softmax(a, mask), 98); }, {a}) < tol);
  }
  SECTION("layer norm") {
    auto x = rand_param({3, 6}, 15);
    auto g = rand_param({6}, 16);
    auto b = rand_param({6}, 17);
    REQUIRE(grad_check([&] { return weighted_sum(layer_norm(x, g, b), 99); }, {x, g, b}) < tol);
  }
  SECTION("gelu") {
    auto a = rand_param({10}, 18);
    REQUIRE(grad_check([&] { return weighted_sum(gelu(a), 100); }, {a}) < tol);
  }
  SECTION("mean") {
    auto a = rand_param({4, 4}, 19);
    REQUIRE(grad_check([&] { return mean_all(a); }, {a}) < tol);
  }
  SECTION("select rows with repeats") {
    auto t = rand_param({5, 3}, 20);
    const std::vector<int> ids{4, 1, 4, 0};
    REQUIRE(grad_check([&] { return weighted_sum(select_rows(t, ids), 101); }, {t}) < tol);
  }
  SECTION("cross entropy") {
    auto logits = rand_param({4, 6}, 21);
    const std::vector<int> ids{0, 5, 2, 2};
    REQUIRE(grad_check([&] { return cross_entropy_with_ids(logits, ids); }, {logits}) < tol);
  }
  SECTION("composite chain") {
    auto x = rand_param({4, 6}, 22);
    auto w = rand_param({6, 6}, 23);
    auto b = rand_param({6}, 24);
    auto g = rand_param({6}, 25);
    auto bb = rand_param({6}, 26);
    auto f = [&] {
      auto h = gelu(add(matmul(x, w), b));
      auto nrm = layer_norm(h, g, bb);
      return cross_entropy_with_ids(nrm, {1, 2, 3, 4});
    };
    REQUIRE(grad_check(f, {x, w, b, g, bb}) < 1e-6);
  }
}

TEST_CASE("grad_check flags non-finite losses") {
  auto x = Tensor<double>::from_values({1}, {0.0}, true);
  auto f = [&] {
    auto y = Tensor<double>::from_values(
        {1}, {1.0 / x.values()[0]});  // constant w.r.t. graph, inf at 0
    return add(y, mul(x, x));
  };
  REQUIRE_THROWS_AS(grad_check(f, {x}), numeric_error);
}

TEST_CASE("tensor file round trip") {
  const auto p32 = temp_file("fuselab_t32.tnsr");
  const auto p64 = temp_file("fuselab_t64.tnsr");
  Rng rng(99);
  auto a = Tensor<float>::normal({3, 4, 2}, 0.0, 2.0, rng);
  save_tnsr(p32.string(), a);
  auto a2 = load_tnsr<float>(p32.string());
  REQUIRE(a2.shape() == a.shape());
  REQUIRE(a2.values() == a.values());

  auto d = Tensor<double>::normal({5}, 0.0, 1.0, rng);
  save_tnsr(p64.string(), d);
  auto d2 = load_tnsr<double>(p64.string());
  REQUIRE(d2.values() == d.values());

  // Widening f32 -> f64 is exact; narrowing is refused.
  auto widened = load_tnsr<double>(p32.string());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    REQUIRE(widened.values()[i] == static_cast<double>(a.values()[i]));
  }
  REQUIRE_THROWS_AS(load_tnsr<float>(p64.string()), format_error);

  std::filesystem::remove(p32);
  std::filesystem::remove(p64);
}

TEST_CASE("tensor file format errors carry byte offsets") {
  const auto path = temp_file("fuselab_bad.tnsr");
  {
    std::ofstream os(path, std::ios::binary);
    os.write("JUNK", 4);
  }
  REQUIRE_THROWS_WITH(load_tnsr<float>(path.string()),
                      Catch::Matchers::ContainsSubstring("byte offset 0"));
  {
    auto t = Tensor<float>::ones({4, 4});
    save_tnsr(path.string(), t);
    std::filesystem::resize_file(path, 30);  // cut into the dims block
  }
  try {
    load_tnsr<float>(path.string());
    FAIL("expected format_error");
  } catch (const format_error& e) {
    REQUIRE(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("fingerprints react to values and shapes") {
  auto a = Tensor<float>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<float>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto c = Tensor<float>::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
  REQUIRE(fingerprint_tensors<float>({a}) == fingerprint_tensors<float>({b}));
  REQUIRE(fingerprint_tensors<float>({a}) != fingerprint_tensors<float>({c}));
  b.values()[0] = 1.5f;
  REQUIRE(fingerprint_tensors<float>({a}) != fingerprint_tensors<float>({b}));
  REQUIRE(hex64(0xdeadbeefull) == "00000000deadbeef");
}

TEST_CASE("rng is deterministic and splittable") {
  Rng a(123), b(123), c(124);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  bool differs = false;
  Rng a2(123);
  for (int i = 0; i < 100; ++i) differs = differs || (a2.next_u64() != c.next_u64());
  REQUIRE(differs);

  Rng parent(5);
  Rng c1 = parent.child(1), c1b = Rng(5).child(1), c2 = parent.child(2);
  REQUIRE(c1.next_u64() == c1b.next_u64());
  REQUIRE(Rng(5).child(1).next_u64() != c2.next_u64());

  Rng u(77);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.next_uniform();
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
  }
  double mean = 0.0, m2 = 0.0;
  Rng g(88);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = g.next_normal(0.0, 1.0);
    mean += v;
    m2 += v * v;
  }
  mean /= n;
  REQUIRE(std::abs(mean) < 0.05);
  REQUIRE(std::abs(m2 / n - 1.0) < 0.05);
}
