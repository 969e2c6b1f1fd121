// Oracle tests for the tensor engine: op-level examples evaluated by hand or
// with an independent high-precision tool, plus the structural guarantees the
// rest of the project relies on (gradient accumulation, no-grad mode, Adam).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "grsn/adam.hpp"
#include "grsn/errors.hpp"
#include "grsn/rng.hpp"
#include "grsn/tensor.hpp"

using namespace grsn;

namespace {

Tensor<double> randt(std::vector<int> shape, std::uint64_t seed, bool rg = true) {
  Tensor<double> t(shape, rg);
  Rng rng(seed);
  double* d = t.data();
  for (int i = 0; i < t.numel(); ++i) d[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("construction and shape bookkeeping") {
  auto z = Tensor<float>::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.ndim() == 2);
  for (int i = 0; i < 6; ++i) CHECK(z.data()[i] == 0.f);

  auto f = Tensor<float>::full({4}, 2.5f);
  for (int i = 0; i < 4; ++i) CHECK(f.data()[i] == 2.5f);

  auto v = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  CHECK(v.data()[3] == 4.f);
  CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("matmul oracles") {
  SUBCASE("identity times A returns A") {
    auto I = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto A = Tensor<double>::from({2, 2}, {3, -1, 2, 7});
    auto out = matmul(I, A);
    for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(A.data()[i]).epsilon(1e-12));
  }
  SUBCASE("hand-evaluated product") {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from({2, 1}, {1, 1});
    auto out = matmul(a, b);
    CHECK(out.dim(0) == 2);
    CHECK(out.dim(1) == 1);
    CHECK(out.data()[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(out.data()[1] == doctest::Approx(7.0).epsilon(1e-12));
  }
  SUBCASE("zero matrix annihilates") {
    auto z = Tensor<double>::zeros({2, 3});
    auto a = randt({3, 4}, 11, false);
    auto out = matmul(z, a);
    for (int i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);
  }
  SUBCASE("shape mismatch names both shapes") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    try {
      matmul(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2,3]") != std::string::npos);
      CHECK(msg.find("[4,2]") != std::string::npos);
    }
  }
  SUBCASE("matmul_nt equals matmul with explicit transpose") {
    auto a = randt({3, 5}, 21, false);
    auto b = randt({4, 5}, 22, false);
    auto direct = matmul_nt(a, b);
    auto ref = matmul(a, transpose2d(b));
    REQUIRE(direct.shape() == ref.shape());
    for (int i = 0; i < direct.numel(); ++i)
      CHECK(direct.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("elementwise op oracles") {
  auto a = Tensor<double>::from({4}, {1, -2, 3, 0});
  auto b = Tensor<double>::from({4}, {2, 2, -1, 5});
  auto s = add(a, b);
  auto d = sub(a, b);
  auto m = mul(a, b);
  auto c = scale(a, 3.0);
  const double se[] = {3, 0, 2, 5}, de[] = {-1, -4, 4, -5}, me[] = {2, -4, -3, 0}, ce[] = {3, -6, 9, 0};
  for (int i = 0; i < 4; ++i) {
    CHECK(s.data()[i] == se[i]);
    CHECK(d.data()[i] == de[i]);
    CHECK(m.data()[i] == me[i]);
    CHECK(c.data()[i] == ce[i]);
  }
  CHECK_THROWS_AS(add(a, Tensor<double>::zeros({3})), ShapeError);

  auto r = relu(Tensor<double>::from({2}, {-1, 2}));
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 2.0);

  auto lr = leaky_relu(Tensor<double>::from({2}, {-10, 4}), 0.1);
  CHECK(lr.data()[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(lr.data()[1] == 4.0);

  auto sg = sigmoid(Tensor<double>::from({3}, {0, 100, -100}));
  CHECK(sg.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sg.data()[1] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(sg.data()[2] == doctest::Approx(0.0).epsilon(1e-9));

  auto ab = add_bias(Tensor<double>::from({2, 2}, {1, 2, 3, 4}), Tensor<double>::from({2}, {10, 20}));
  CHECK(ab.data()[0] == 11.0);
  CHECK(ab.data()[1] == 22.0);
  CHECK(ab.data()[2] == 13.0);
  CHECK(ab.data()[3] == 24.0);
}

TEST_CASE("softmax_rows oracles and invariants") {
  SUBCASE("symmetric row") {
    auto out = softmax_rows(Tensor<double>::from({1, 2}, {0, 0}));
    CHECK(out.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("row [1,0] matches e/(e+1)") {
    auto out = softmax_rows(Tensor<double>::from({1, 2}, {1, 0}));
    CHECK(out.data()[0] == doctest::Approx(0.73105857863).epsilon(1e-10));
    CHECK(out.data()[1] == doctest::Approx(0.26894142137).epsilon(1e-10));
  }
  SUBCASE("huge logits do not overflow") {
    auto out = softmax_rows(Tensor<double>::from({1, 2}, {1000, 0}));
    CHECK(std::isfinite(out.data()[0]));
    CHECK(out.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.data()[1] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("rows sum to one and shifting a row changes nothing") {
    auto x = randt({5, 7}, 33, false);
    auto p = softmax_rows(x);
    for (int i = 0; i < 5; ++i) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += p.data()[i * 7 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto shifted = x.clone();
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 7; ++j) shifted.data()[i * 7 + j] += 13.5;
    auto p2 = softmax_rows(shifted);
    for (int i = 0; i < p.numel(); ++i)
      CHECK(p2.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-12));
  }
  SUBCASE("NaN input raises a numeric error") {
    auto x = Tensor<double>::from({1, 2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(softmax_rows(x), NumericError);
  }
}

TEST_CASE("layer_norm oracles") {
  auto gamma1 = Tensor<double>::full({2}, 1.0);
  auto beta0 = Tensor<double>::zeros({2});
  SUBCASE("x=[1,3] normalises to +-1 (damped by eps)") {
    auto out = layer_norm(Tensor<double>::from({1, 2}, {1, 3}), gamma1, beta0, 1e-5);
    CHECK(out.data()[0] == doctest::Approx(-0.99999).epsilon(1e-4));
    CHECK(out.data()[1] == doctest::Approx(0.99999).epsilon(1e-4));
  }
  SUBCASE("constant row collapses to zero") {
    auto out = layer_norm(Tensor<double>::from({1, 2}, {4, 4}), gamma1, beta0, 1e-5);
    CHECK(std::abs(out.data()[0]) < 1e-3);
    CHECK(std::abs(out.data()[1]) < 1e-3);
  }
  SUBCASE("gamma=0 overrides everything with beta") {
    auto out = layer_norm(randt({3, 2}, 9, false), Tensor<double>::zeros({2}),
                          Tensor<double>::full({2}, 7.0), 1e-5);
    for (int i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == doctest::Approx(7.0).epsilon(1e-12));
  }
  SUBCASE("rows have zero mean and unit variance before the affine map") {
    auto out = layer_norm(randt({4, 16}, 10, false), Tensor<double>::full({16}, 1.0),
                          Tensor<double>::zeros({16}), 1e-8);
    for (int i = 0; i < 4; ++i) {
      double m = 0, v = 0;
      for (int j = 0; j < 16; ++j) m += out.data()[i * 16 + j];
      m /= 16;
      for (int j = 0; j < 16; ++j) v += (out.data()[i * 16 + j] - m) * (out.data()[i * 16 + j] - m);
      v /= 16;
      CHECK(std::abs(m) < 1e-10);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("affine width mismatch is a shape error") {
    CHECK_THROWS_AS(layer_norm(Tensor<double>::zeros({1, 4}), gamma1, beta0, 1e-5), ShapeError);
  }
}

TEST_CASE("shape surgery round trips exactly") {
  auto x = randt({3, 4}, 44, false);
  SUBCASE("reshape is an exact identity composition") {
    auto back = reshape(reshape(x, {2, 6}), {3, 4});
    CHECK(std::memcmp(back.data(), x.data(), sizeof(double) * 12) == 0);
    CHECK_THROWS_AS(reshape(x, {5, 2}), ShapeError);
  }
  SUBCASE("transpose twice is an exact identity") {
    auto back = transpose2d(transpose2d(x));
    CHECK(std::memcmp(back.data(), x.data(), sizeof(double) * 12) == 0);
  }
  SUBCASE("concat then slice recovers both halves exactly") {
    auto y = randt({3, 2}, 45, false);
    auto cat = concat_lastdim(x, y);
    CHECK(cat.dim(0) == 3);
    CHECK(cat.dim(1) == 6);
    auto xs = slice_lastdim(cat, 0, 4);
    auto ys = slice_lastdim(cat, 4, 2);
    CHECK(std::memcmp(xs.data(), x.data(), sizeof(double) * 12) == 0);
    CHECK(std::memcmp(ys.data(), y.data(), sizeof(double) * 6) == 0);
    CHECK_THROWS_AS(slice_lastdim(cat, 5, 4), ShapeError);
  }
  SUBCASE("gather_rows picks rows in order") {
    auto g = gather_rows(x, {2, 0});
    for (int j = 0; j < 4; ++j) {
      CHECK(g.data()[j] == x.data()[2 * 4 + j]);
      CHECK(g.data()[4 + j] == x.data()[j]);
    }
    CHECK_THROWS_AS(gather_rows(x, {3}), UsageError);
  }
  SUBCASE("flatten_grid and rearrange_grid invert each other bit-exactly") {
    auto grid = randt({5, 2, 3}, 46, false);
    auto seq = flatten_grid(grid);
    CHECK(seq.dim(0) == 6);
    CHECK(seq.dim(1) == 5);
    // Cell (y=1,x=2) of channel 4 must land in row 5, column 4.
    CHECK(seq.data()[5 * 5 + 4] == grid.data()[4 * 6 + 5]);
    auto back = rearrange_grid(seq, 2, 3);
    CHECK(std::memcmp(back.data(), grid.data(), sizeof(double) * 30) == 0);
    CHECK_THROWS_AS(rearrange_grid(seq, 3, 3), ShapeError);
  }
  SUBCASE("concat_channels stacks grids") {
    auto a = randt({2, 2, 2}, 47, false);
    auto b = randt({3, 2, 2}, 48, false);
    auto cat = concat_channels(a, b);
    CHECK(cat.dim(0) == 5);
    CHECK(std::memcmp(cat.data(), a.data(), sizeof(double) * 8) == 0);
    CHECK(std::memcmp(cat.data() + 8, b.data(), sizeof(double) * 12) == 0);
  }
  SUBCASE("upsample_nearest2x repeats each cell") {
    auto a = Tensor<double>::from({1, 2, 2}, {1, 2, 3, 4});
    auto up = upsample_nearest2x(a);
    const double expect[] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    REQUIRE(up.numel() == 16);
    for (int i = 0; i < 16; ++i) CHECK(up.data()[i] == expect[i]);
  }
}

TEST_CASE("loss reduction oracles") {
  SUBCASE("sum and mean") {
    auto x = Tensor<double>::from({4}, {1, 2, 3, 4});
    CHECK(sum(x).item() == 10.0);
    CHECK(mean(x).item() == 2.5);
  }
  SUBCASE("binary cross-entropy on logits") {
    // logit 0 gives -log(0.5) = ln 2 regardless of target.
    auto x = Tensor<double>::from({2}, {0, 0});
    auto loss = bce_logits_mean(x, std::vector<double>{1.0, 0.0});
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // Strong correct logits drive the loss to zero.
    auto good = bce_logits_mean(Tensor<double>::from({2}, {50, -50}), std::vector<double>{1.0, 0.0});
    CHECK(good.item() < 1e-12);
    // Extreme logits stay finite (softplus form).
    auto hostile = bce_logits_mean(Tensor<double>::from({2}, {5000, -5000}), std::vector<double>{0.0, 1.0});
    CHECK(std::isfinite(hostile.item()));
    CHECK_THROWS_AS(bce_logits_mean(x, std::vector<double>{1.0}), ShapeError);
  }
  SUBCASE("softmax cross-entropy over rows") {
    // Both rows have margin 1 toward the true class: loss = ln(1+e^-1).
    auto x = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto loss = ce_rows_mean(x, {0, 1});
    CHECK(loss.item() == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
    CHECK_THROWS_AS(ce_rows_mean(x, {0}), ShapeError);
    CHECK_THROWS_AS(ce_rows_mean(x, {0, 2}), UsageError);
  }
}

TEST_CASE("backward mechanics") {
  SUBCASE("root = sum(x) gives all-ones gradient") {
    auto x = randt({3, 2}, 50);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("root = sum(x*x) at [1,2] gives [2,4]") {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
  }
  SUBCASE("non-scalar root is a usage error") {
    auto x = randt({2}, 51);
    CHECK_THROWS_AS(backward(add(x, x)), UsageError);
  }
  SUBCASE("untracked root is a usage error") {
    auto x = randt({2}, 52, false);
    CHECK_THROWS_AS(backward(sum(x)), UsageError);
  }
  SUBCASE("gradients accumulate across backward calls until cleared") {
    auto x = Tensor<double>::from({2}, {3, -1}, true);
    backward(sum(x));
    backward(sum(x));
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    backward(sum(x));
    CHECK(x.grad()[0] == 1.0);
  }
  SUBCASE("a tensor used twice receives the sum of both paths") {
    auto x = Tensor<double>::from({1}, {3}, true);
    // f = x*x + 2x -> f' = 2x + 2 = 8.
    backward(sum(add(mul(x, x), scale(x, 2.0))));
    CHECK(x.grad()[0] == doctest::Approx(8.0).epsilon(1e-12));
  }
  SUBCASE("NoGradGuard detaches every op") {
    auto x = randt({2, 2}, 53);
    NoGradGuard off;
    auto y = matmul(x, x);
    CHECK_FALSE(y.requires_grad());
    auto s = sum(relu(y));
    CHECK_FALSE(s.requires_grad());
  }
}

TEST_CASE("Adam optimizer oracles") {
  SUBCASE("first step from p=1,g=1 moves by about lr") {
    auto p = Tensor<float>::from({1}, {1.0f}, true);
    backward(sum(p));  // gradient exactly 1
    AdamOptimizer<float> opt({p});
    opt.step();
    // hat m = 1, hat v = 1 -> update = lr / (1 + eps); hand value 0.999.
    CHECK(p.data()[0] == doctest::Approx(0.999f).epsilon(1e-6));
    CHECK(opt.step_count() == 1);
  }
  SUBCASE("zero gradient with zero moments is a fixed point") {
    auto p = Tensor<float>::from({2}, {5.0f, -3.0f}, true);
    backward(sum(scale(p, 0.0f)));  // gradient exactly 0
    AdamOptimizer<float> opt({p});
    opt.step();
    CHECK(p.data()[0] == 5.0f);
    CHECK(p.data()[1] == -3.0f);
  }
  SUBCASE("beta1=beta2=0 degenerates to sign SGD") {
    auto p = Tensor<double>::from({2}, {0.0, 0.0}, true);
    backward(sum(mul(p, Tensor<double>::from({2}, {7.0, -0.03}))));
    AdamOptimizer<double> opt({p}, 0.001, 0.0, 0.0);
    opt.step();
    // update = lr * g / (|g| + eps) = lr * sign(g) within eps effects.
    CHECK(p.data()[0] == doctest::Approx(-0.001).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(0.001).epsilon(1e-4));
  }
  SUBCASE("two runs from equal seeds produce bitwise-identical parameters") {
    auto run = [](std::uint64_t seed) {
      Tensor<float> p({4, 4}, true);
      Rng rng(seed);
      for (int i = 0; i < 16; ++i) p.data()[i] = static_cast<float>(rng.normal());
      AdamOptimizer<float> opt({p});
      for (int it = 0; it < 5; ++it) {
        opt.zero_grad();
        backward(sum(mul(p, p)));
        opt.step();
      }
      return std::vector<float>(p.values());
    };
    auto a = run(77), b = run(77);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }
  SUBCASE("one step decreases a quadratic loss across seeds") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      auto p = randt({6}, seed * 131);
      auto target = randt({6}, seed * 131 + 1, false);
      auto loss_of = [&] {
        auto d = sub(p, target);
        return sum(mul(d, d));
      };
      auto before = loss_of();
      backward(before);
      AdamOptimizer<double> opt({p});
      opt.step();
      NoGradGuard off;
      CHECK(loss_of().item() < before.item());
    }
  }
  SUBCASE("step before any gradient is a usage error") {
    auto p = Tensor<float>::from({1}, {1.0f}, true);
    AdamOptimizer<float> opt({p});
    CHECK_THROWS_AS(opt.step(), UsageError);
    CHECK_THROWS_AS(AdamOptimizer<float>({}), UsageError);
  }
}
