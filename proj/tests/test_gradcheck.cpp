// Finite-difference validation of every differentiable op.  Each case builds
// a scalar loss from randomized inputs, runs the reverse pass, then compares
// each input partial against a central difference computed in 64-bit
// precision.  A final 32-bit case differentiates the full detection loss
// through the whole model.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "grsn/data.hpp"
#include "grsn/detector.hpp"
#include "grsn/reasoning.hpp"
#include "grsn/rng.hpp"
#include "grsn/tensor.hpp"

using namespace grsn;

namespace {

template <typename T>
Tensor<T> randt(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape, true);
  for (int i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Keeps values away from the relu/leaky kink so the central difference stays
// on one side of it.
template <typename T>
Tensor<T> randt_off_kink(std::vector<int> shape, Rng& rng) {
  auto t = randt<T>(shape, rng);
  for (int i = 0; i < t.numel(); ++i) {
    T& v = t.data()[i];
    if (std::abs(v) < T(0.05)) v = (v < 0 ? v - T(0.05) : v + T(0.05));
  }
  return t;
}

// Fixed random weights turn a tensor-valued function into a scalar one
// without hiding sign errors behind a plain sum.
template <typename T>
Tensor<T> weigh(const Tensor<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> r(y.shape());
  for (int i = 0; i < r.numel(); ++i)
    r.data()[i] = static_cast<T>(rng.uniform(0.5, 1.5) * (rng.bernoulli(0.5) ? 1 : -1));
  return sum(mul(y, r));
}

// Max relative error between reverse-mode and central-difference gradients
// over every element of every listed input.
template <typename T>
double fd_max_rel(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> inputs, double h,
                  double floor) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<T>> grads;
  grads.reserve(inputs.size());
  for (auto& t : inputs) grads.push_back(t.has_grad() ? t.grad() : std::vector<T>(t.numel(), T(0)));

  double worst = 0.0;
  NoGradGuard off;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    for (int i = 0; i < t.numel(); ++i) {
      const T orig = t.data()[i];
      t.data()[i] = static_cast<T>(orig + h);
      const double lp = static_cast<double>(loss_fn().item());
      t.data()[i] = static_cast<T>(orig - h);
      const double lm = static_cast<double>(loss_fn().item());
      t.data()[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double g = static_cast<double>(grads[ti][static_cast<std::size_t>(i)]);
      const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

constexpr double kTol = 1e-4;
int g_cases = 0;

void run_case(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> inputs) {
  ++g_cases;
  CHECK(fd_max_rel<double>(loss_fn, std::move(inputs), 1e-5, 0.01) < kTol);
}

// 32-bit variant: the step is widened and the tolerance loosened to sit above
// single-precision rounding in the forward evaluations.
void run_case32(const std::function<Tensor<float>()>& loss_fn, std::vector<Tensor<float>> inputs) {
  CHECK(fd_max_rel<float>(loss_fn, std::move(inputs), 1e-2, 0.05) < 1e-2);
}

}  // namespace

TEST_CASE("matmul family") {
  Rng shapes(101);
  for (int c = 0; c < 12; ++c) {
    const int m = static_cast<int>(shapes.uniform_int(1, 4));
    const int k = static_cast<int>(shapes.uniform_int(1, 4));
    const int n = static_cast<int>(shapes.uniform_int(1, 4));
    Rng rng(200 + static_cast<std::uint64_t>(c));
    auto a = randt<double>({m, k}, rng);
    auto b = randt<double>({k, n}, rng);
    run_case([&] { return weigh(matmul(a, b), 7); }, {a, b});
  }
  for (int c = 0; c < 5; ++c) {
    Rng rng(300 + static_cast<std::uint64_t>(c));
    auto a = randt<double>({2 + c % 2, 3}, rng);
    auto b = randt<double>({4, 3}, rng);
    run_case([&] { return weigh(matmul_nt(a, b), 8); }, {a, b});
  }
}

TEST_CASE("shape ops") {
  for (int c = 0; c < 3; ++c) {
    Rng rng(400 + static_cast<std::uint64_t>(c));
    auto x = randt<double>({3, 4}, rng);
    run_case([&] { return weigh(transpose2d(x), 9); }, {x});
    run_case([&] { return weigh(reshape(x, {2, 6}), 10); }, {x});
  }
  for (int c = 0; c < 3; ++c) {
    Rng rng(420 + static_cast<std::uint64_t>(c));
    auto a = randt<double>({2, 3}, rng);
    auto b = randt<double>({2, 2}, rng);
    run_case([&] { return weigh(concat_lastdim(a, b), 11); }, {a, b});
    auto x = randt<double>({3, 5}, rng);
    run_case([&] { return weigh(slice_lastdim(x, 1, 3), 12); }, {x});
    auto g = randt<double>({4, 3}, rng);
    // Duplicated index exercises gradient accumulation into one source row.
    run_case([&] { return weigh(gather_rows(g, {2, 0, 2}), 13); }, {g});
  }
  for (int c = 0; c < 3; ++c) {
    Rng rng(440 + static_cast<std::uint64_t>(c));
    auto grid = randt<double>({3, 2, 4}, rng);
    run_case([&] { return weigh(flatten_grid(grid), 14); }, {grid});
    auto seq = randt<double>({6, 3}, rng);
    run_case([&] { return weigh(rearrange_grid(seq, 2, 3), 15); }, {seq});
  }
  for (int c = 0; c < 2; ++c) {
    Rng rng(460 + static_cast<std::uint64_t>(c));
    auto a = randt<double>({2, 3, 3}, rng);
    auto b = randt<double>({1, 3, 3}, rng);
    run_case([&] { return weigh(concat_channels(a, b), 16); }, {a, b});
    auto u = randt<double>({2, 2, 2}, rng);
    run_case([&] { return weigh(upsample_nearest2x(u), 17); }, {u});
  }
}

TEST_CASE("elementwise and activations") {
  for (int c = 0; c < 3; ++c) {
    Rng rng(500 + static_cast<std::uint64_t>(c));
    auto a = randt<double>({2, 4}, rng);
    auto b = randt<double>({2, 4}, rng);
    run_case([&] { return weigh(add(a, b), 18); }, {a, b});
    run_case([&] { return weigh(sub(a, b), 19); }, {a, b});
    run_case([&] { return weigh(mul(a, b), 20); }, {a, b});
    run_case([&] { return weigh(scale(a, -1.7), 21); }, {a});
    auto bias = randt<double>({4}, rng);
    run_case([&] { return weigh(add_bias(a, bias), 22); }, {a, bias});
  }
  for (int c = 0; c < 3; ++c) {
    Rng rng(520 + static_cast<std::uint64_t>(c));
    auto x = randt_off_kink<double>({3, 4}, rng);
    run_case([&] { return weigh(relu(x), 23); }, {x});
    run_case([&] { return weigh(leaky_relu(x, 0.1), 24); }, {x});
    auto s = randt<double>({3, 4}, rng);
    run_case([&] { return weigh(sigmoid(s), 25); }, {s});
  }
}

TEST_CASE("normalisations and reductions") {
  for (int c = 0; c < 5; ++c) {
    Rng rng(600 + static_cast<std::uint64_t>(c));
    auto x = randt<double>({3, 5}, rng);
    run_case([&] { return weigh(softmax_rows(x), 26); }, {x});
  }
  for (int c = 0; c < 5; ++c) {
    Rng rng(620 + static_cast<std::uint64_t>(c));
    auto x = randt<double>({3, 4}, rng);
    auto gamma = randt<double>({4}, rng, 0.5, 1.5);
    auto beta = randt<double>({4}, rng);
    run_case([&] { return weigh(layer_norm(x, gamma, beta, 1e-5), 27); }, {x, gamma, beta});
  }
  {
    Rng rng(640);
    auto x = randt<double>({2, 3}, rng);
    run_case([&] { return sum(mul(sum(x), sum(x))); }, {x});
    run_case([&] { return mean(mul(x, x)); }, {x});
  }
  for (int c = 0; c < 3; ++c) {
    Rng rng(650 + static_cast<std::uint64_t>(c));
    auto x = randt<double>({5}, rng, -2.0, 2.0);
    std::vector<double> targets;
    for (int i = 0; i < 5; ++i) targets.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
    run_case([&] { return bce_logits_mean(x, targets); }, {x});
    auto logits = randt<double>({3, 4}, rng, -2.0, 2.0);
    std::vector<int> labels{0, 3, 1};
    run_case([&] { return ce_rows_mean(logits, labels); }, {logits});
  }
}

TEST_CASE("convolutions") {
  struct ConvCase {
    int cin, cout, hw, k, stride, pad;
  };
  const ConvCase cases[] = {
      {2, 3, 6, 3, 1, 1}, {1, 2, 8, 3, 2, 1}, {3, 2, 5, 1, 1, 0},
      {2, 2, 4, 3, 2, 1}, {1, 1, 7, 3, 1, 1}, {2, 4, 4, 3, 1, 0},
  };
  int idx = 0;
  for (const auto& cc : cases) {
    Rng rng(700 + static_cast<std::uint64_t>(idx++));
    auto x = randt<double>({cc.cin, cc.hw, cc.hw}, rng);
    auto w = randt<double>({cc.cout, cc.cin, cc.k, cc.k}, rng);
    auto b = randt<double>({cc.cout}, rng);
    run_case([&] { return weigh(conv2d(x, w, b, cc.stride, cc.pad), 28); }, {x, w, b});
  }
  for (int c = 0; c < 4; ++c) {
    Rng rng(720 + static_cast<std::uint64_t>(c));
    auto x = randt<double>({3, 4, 4}, rng);
    auto w = randt<double>({2, 3}, rng);
    auto b = randt<double>({2}, rng);
    run_case([&] { return weigh(conv1x1(x, w, b), 29); }, {x, w, b});
  }
}

TEST_CASE("attention and the full reasoning block") {
  for (int heads : {1, 2, 4}) {
    Rng rng(800 + static_cast<std::uint64_t>(heads));
    const int n = 3, d = 4;
    AttentionParams<double> p;
    p.wq = randt<double>({d, d}, rng);
    p.bq = randt<double>({d}, rng);
    p.wk = randt<double>({d, d}, rng);
    p.bk = randt<double>({d}, rng);
    p.wv = randt<double>({d, d}, rng);
    p.bv = randt<double>({d}, rng);
    p.wo = randt<double>({d, d}, rng);
    p.bo = randt<double>({d}, rng);
    auto x = randt<double>({n, d}, rng);
    run_case([&] { return weigh(multi_head_attention(x, p, heads), 30); },
             {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo});
  }
  for (int c = 0; c < 2; ++c) {
    Rng rng(820 + static_cast<std::uint64_t>(c));
    MlpParams<double> p;
    p.w1 = randt<double>({3, 6}, rng);
    p.b1 = randt_off_kink<double>({6}, rng);
    p.w2 = randt<double>({6, 3}, rng);
    p.b2 = randt<double>({3}, rng);
    auto x = randt<double>({4, 3}, rng);
    run_case([&] { return weigh(mlp_forward(x, p), 31); }, {x, p.w1, p.b1, p.w2, p.b2});
  }
  // The whole block on a 2x2 grid of depth 4, with and without positions.
  for (bool use_pe : {true, false}) {
    std::vector<std::pair<std::string, Tensor<double>>> reg;
    auto p = make_reasoning_params<double>(4, 2, 1e-5, use_pe, 4, 99, "r", reg);
    Rng rng(use_pe ? 840 : 841);
    auto grid = randt<double>({4, 2, 2}, rng);
    std::vector<Tensor<double>> inputs{grid};
    for (auto& [name, t] : reg) inputs.push_back(t);
    run_case([&] { return weigh(reasoning_forward(grid, p), 32); }, inputs);
  }
}

TEST_CASE("case count meets the randomized-coverage floor") {
  CHECK(g_cases >= 100);
  MESSAGE("gradient cases run: " << g_cases);
}

TEST_CASE("32-bit spot checks stay within single-precision tolerance") {
  for (int c = 0; c < 3; ++c) {
    Rng rng(900 + static_cast<std::uint64_t>(c));
    auto a = randt<float>({3, 4}, rng);
    auto b = randt<float>({4, 2}, rng);
    run_case32([&] { return weigh(matmul(a, b), 40); }, {a, b});
    auto x = randt<float>({2, 5, 5}, rng);
    auto w = randt<float>({3, 2, 3, 3}, rng);
    auto bias = randt<float>({3}, rng);
    run_case32([&] { return weigh(conv2d(x, w, bias, 2, 1), 41); }, {x, w, bias});
    auto s = randt<float>({3, 4}, rng);
    run_case32([&] { return weigh(softmax_rows(s), 42); }, {s});
    auto ln = randt<float>({2, 4}, rng);
    auto gamma = randt<float>({4}, rng, 0.5, 1.5);
    auto beta = randt<float>({4}, rng);
    run_case32([&] { return weigh(layer_norm(ln, gamma, beta, 1e-5f), 43); }, {ln, gamma, beta});
  }
}

TEST_CASE("end-to-end detection loss gradient through the whole model") {
  // 64-bit instantiation of the full network: finite differences through
  // roughly half a million accumulated operations are only a meaningful
  // oracle in double precision.
  ModelConfig cfg;
  cfg.image_size = 32;
  DetectorModel<double> model(cfg, Variant::kReasoner2, 5);

  Scenario sc;
  sc.image_size = 32;
  sc.channels = 3;
  Rng rng(4242);
  sc.image.resize(3 * 32 * 32);
  for (auto& v : sc.image) v = static_cast<float>(rng.uniform(0.0, 1.0));
  sc.objects.push_back({kClassCircle, Box{6, 6, 18, 18}});
  sc.objects.push_back({kClassSquare, Box{20, 18, 30, 30}});

  auto image = scenario_image_tensor<double>(sc);
  auto loss_fn = [&] { return detection_loss(model.forward(image), sc, cfg).total; };

  for (auto& [name, t] : model.named_params()) const_cast<Tensor<double>&>(t).zero_grad();
  backward(loss_fn());

  // Probe a spread of parameters rather than every element; exhaustive
  // differencing of 10^5 parameters would dominate the suite's runtime
  // without testing anything new.
  double worst = 0.0;
  int probes = 0;
  NoGradGuard off;
  Rng pick(31337);
  const auto& params = model.named_params();
  for (std::size_t pi = 0; pi < params.size(); pi += 3) {
    auto& t = const_cast<Tensor<double>&>(params[pi].second);
    if (!t.has_grad()) continue;
    for (int rep = 0; rep < 2; ++rep) {
      const int i = static_cast<int>(pick.uniform_int(0, t.numel() - 1));
      const double orig = t.data()[i];
      const double h = 1e-5;
      t.data()[i] = orig + h;
      const double lp = loss_fn().item();
      t.data()[i] = orig - h;
      const double lm = loss_fn().item();
      t.data()[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double g = t.grad()[static_cast<std::size_t>(i)];
      const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 0.01});
      if (rel > kTol) {
        MESSAGE("probe " << params[pi].first << "[" << i << "]  fd=" << fd << "  g=" << g
                         << "  rel=" << rel);
      }
      worst = std::max(worst, rel);
      ++probes;
    }
  }
  CHECK(probes >= 20);
  CHECK(worst < kTol);
  MESSAGE("e2e probes: " << probes << "  worst rel: " << worst);
}
