// Detector-level tests: backbone/neck shapes, box encode/decode round trips,
// NMS behaviour, target assignment, the loss's documented properties, and
// model configuration validation.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "grsn/adam.hpp"
#include "grsn/boxes.hpp"
#include "grsn/detector.hpp"
#include "grsn/errors.hpp"
#include "grsn/rng.hpp"

using namespace grsn;

namespace {

Tensor<float> rand_image(int size, std::uint64_t seed) {
  Tensor<float> img({3, size, size});
  Rng rng(seed);
  for (int i = 0; i < img.numel(); ++i) img.data()[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  return img;
}

// A head map holding "background everywhere" logits: strongly negative
// objectness, neutral box and class channels.
Tensor<float> background_head(const ScaleConfig& sc, int n_classes, float obj_logit = -12.f) {
  Tensor<float> head({kClassChannelStart + n_classes, sc.grid_h, sc.grid_w});
  const int hw = sc.grid_h * sc.grid_w;
  for (int cell = 0; cell < hw; ++cell) head.data()[kObjChannel * hw + cell] = obj_logit;
  return head;
}

}  // namespace

TEST_CASE("backbone and neck output shapes") {
  ModelConfig cfg;
  DetectorModel<float> model(cfg, Variant::kBaseline, 1);
  auto grids = model.backbone_neck_forward(rand_image(64, 1));
  REQUIRE(static_cast<int>(grids.size()) == cfg.n_scales());
  CHECK(grids[0].shape() == std::vector<int>{16, 8, 8});
  CHECK(grids[1].shape() == std::vector<int>{32, 4, 4});

  auto heads = model.forward(rand_image(64, 2));
  CHECK(heads[0].shape() == std::vector<int>{5 + cfg.n_classes, 8, 8});
  CHECK(heads[1].shape() == std::vector<int>{5 + cfg.n_classes, 4, 4});

  SUBCASE("a 32px input shrinks the grids accordingly") {
    ModelConfig small = cfg;
    small.image_size = 32;
    DetectorModel<float> m32(small, Variant::kBaseline, 1);
    auto g32 = m32.backbone_neck_forward(rand_image(32, 3));
    CHECK(g32[0].shape() == std::vector<int>{16, 4, 4});
    CHECK(g32[1].shape() == std::vector<int>{32, 2, 2});
  }
  SUBCASE("wrong image shape is rejected") {
    CHECK_THROWS_AS(model.backbone_neck_forward(rand_image(32, 4)), ShapeError);
  }
  SUBCASE("zero image with zeroed biases produces zero feature grids") {
    DetectorModel<float> m(cfg, Variant::kBaseline, 5);
    for (auto& [name, t] : m.named_params()) {
      if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
        auto& mut = const_cast<Tensor<float>&>(t);
        std::fill(mut.data(), mut.data() + mut.numel(), 0.f);
      }
    }
    auto zeros = Tensor<float>::zeros({3, 64, 64});
    for (auto& g : m.backbone_neck_forward(zeros)) {
      for (int i = 0; i < g.numel(); ++i) CHECK(g.data()[i] == 0.f);
    }
  }
}

TEST_CASE("head decoding oracles") {
  ModelConfig cfg;
  const auto sc = cfg.scale(0);  // stride 8, prior 16, 8x8 grid
  const int hw = sc.grid_h * sc.grid_w;

  SUBCASE("zero offsets decode to the cell center at prior size") {
    auto head = background_head(sc, cfg.n_classes);
    // cell (y=2, x=3): raise objectness, make class 1 the argmax.
    const int cell = 2 * sc.grid_w + 3;
    head.data()[kObjChannel * hw + cell] = 4.f;
    head.data()[(kClassChannelStart + 1) * hw + cell] = 3.f;
    auto dets = head_decode(head, sc, cfg.n_classes, 0.25);
    REQUIRE(dets.size() == 1);
    const auto& d = dets[0];
    CHECK(d.class_id == 1);
    CHECK(d.box.center_x() == doctest::Approx((3 + 0.5) * 8).epsilon(1e-5));
    CHECK(d.box.center_y() == doctest::Approx((2 + 0.5) * 8).epsilon(1e-5));
    CHECK(d.box.width() == doctest::Approx(16.0).epsilon(1e-5));
    CHECK(d.box.height() == doctest::Approx(16.0).epsilon(1e-5));
    // score = sigmoid(4) * softmax over class logits [0,3,0,0] at index 1.
    const double cls_p = std::exp(3.0) / (std::exp(3.0) + 3.0);
    CHECK(d.score == doctest::Approx(1.0 / (1.0 + std::exp(-4.0)) * cls_p).epsilon(1e-5));
  }
  SUBCASE("decode inverts encode within 1e-4 px on random boxes") {
    Rng rng(99);
    for (int rep = 0; rep < 25; ++rep) {
      const int s = rep % 2;
      const auto scale = cfg.scale(s);
      const double w = rng.uniform(8.0, 44.0), h = rng.uniform(8.0, 44.0);
      const double cx = rng.uniform(w / 2 + 0.5, 64 - w / 2 - 0.5);
      const double cy = rng.uniform(h / 2 + 0.5, 64 - h / 2 - 0.5);
      Box box{static_cast<float>(cx - w / 2), static_cast<float>(cy - h / 2),
              static_cast<float>(cx + w / 2), static_cast<float>(cy + h / 2)};
      auto e = encode_box<float>(box, scale);
      auto head = background_head(scale, cfg.n_classes);
      const int shw = scale.grid_h * scale.grid_w;
      head.data()[0 * shw + e.cell] = e.tx;
      head.data()[1 * shw + e.cell] = e.ty;
      head.data()[2 * shw + e.cell] = e.tw;
      head.data()[3 * shw + e.cell] = e.th;
      head.data()[kObjChannel * shw + e.cell] = 10.f;
      head.data()[kClassChannelStart * shw + e.cell] = 10.f;
      auto dets = head_decode(head, scale, cfg.n_classes, 0.5);
      REQUIRE(dets.size() == 1);
      CHECK(std::abs(dets[0].box.x_min - box.x_min) < 1e-4);
      CHECK(std::abs(dets[0].box.y_min - box.y_min) < 1e-4);
      CHECK(std::abs(dets[0].box.x_max - box.x_max) < 1e-4);
      CHECK(std::abs(dets[0].box.y_max - box.y_max) < 1e-4);
    }
  }
  SUBCASE("shape mismatch is rejected") {
    auto head = background_head(cfg.scale(1), cfg.n_classes);
    CHECK_THROWS_AS(head_decode(head, sc, cfg.n_classes, 0.25), ShapeError);
  }
}

TEST_CASE("IoU and NMS oracles") {
  SUBCASE("hand-computed IoU of offset unit squares") {
    CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-6));
    CHECK(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}) == 0.f);
    CHECK(iou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("identical boxes of one class collapse to the top score") {
    std::vector<Detection> dets{{Box{0, 0, 4, 4}, 2, 0.9f, 0}, {Box{0, 0, 4, 4}, 2, 0.6f, 0}};
    auto kept = nms(dets, 0.45f);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9f);
  }
  SUBCASE("different classes are never suppressed by each other") {
    std::vector<Detection> dets{{Box{0, 0, 4, 4}, 0, 0.9f, 0}, {Box{0, 0, 4, 4}, 1, 0.6f, 0}};
    CHECK(nms(dets, 0.45f).size() == 2);
  }
  SUBCASE("boxes at IoU 1/7 survive a 0.45 threshold") {
    std::vector<Detection> dets{{Box{0, 0, 2, 2}, 0, 0.9f, 0}, {Box{1, 1, 3, 3}, 0, 0.8f, 0}};
    CHECK(nms(dets, 0.45f).size() == 2);
    CHECK(nms(dets, 0.1f).size() == 1);
  }
  SUBCASE("result is independent of input order") {
    Rng rng(123);
    std::vector<Detection> dets;
    for (int i = 0; i < 40; ++i) {
      const float x = static_cast<float>(rng.uniform(0, 56));
      const float y = static_cast<float>(rng.uniform(0, 56));
      const float w = static_cast<float>(rng.uniform(4, 12));
      dets.push_back({Box{x, y, x + w, y + w}, static_cast<int>(rng.uniform_int(0, 3)),
                      static_cast<float>(rng.uniform(0.1, 1.0)), 0});
    }
    auto baseline = nms(dets, 0.45f);
    for (int rep = 0; rep < 5; ++rep) {
      rng.shuffle(dets);
      auto shuffled = nms(dets, 0.45f);
      REQUIRE(shuffled.size() == baseline.size());
      for (std::size_t i = 0; i < baseline.size(); ++i) {
        CHECK(shuffled[i].score == baseline[i].score);
        CHECK(shuffled[i].class_id == baseline[i].class_id);
        CHECK(shuffled[i].box.x_min == baseline[i].box.x_min);
      }
    }
  }
}

TEST_CASE("target assignment") {
  ModelConfig cfg;
  SUBCASE("objects go to the scale whose prior best matches their size") {
    Scenario sc;
    sc.objects.push_back({0, Box{10, 10, 26, 26}});  // 16px -> prior 16 (scale 0)
    sc.objects.push_back({1, Box{20, 20, 60, 60}});  // 40px -> prior 40 (scale 1)
    auto t = assign_targets<float>(sc, cfg);
    REQUIRE(t[0].cells.size() == 1);
    REQUIRE(t[1].cells.size() == 1);
    CHECK(t[0].classes[0] == 0);
    CHECK(t[1].classes[0] == 1);
    // 16px box centered at (18,18): cell (2,2) at stride 8, center fraction 0.25.
    CHECK(t[0].cells[0] == 2 * 8 + 2);
    CHECK(t[0].fx[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(t[0].tw[0] == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("a collision at the best scale falls back to the other scale") {
    Scenario sc;
    // Two 16px boxes whose centers share the stride-8 cell (2,2).
    sc.objects.push_back({0, Box{9, 9, 25, 25}});
    sc.objects.push_back({1, Box{11, 11, 27, 27}});
    auto t = assign_targets<float>(sc, cfg);
    CHECK(t[0].cells.size() == 1);
    CHECK(t[1].cells.size() == 1);
    CHECK(t[0].classes[0] == 0);  // first object claims the best cell
    CHECK(t[1].classes[0] == 1);  // second falls back to the coarse scale
  }
  SUBCASE("center outside the image is a data error") {
    Scenario sc;
    sc.objects.push_back({0, Box{60, 60, 76, 76}});
    CHECK_THROWS_AS(assign_targets<float>(sc, cfg), FormatError);
  }
}

TEST_CASE("detection loss properties") {
  ModelConfig cfg;
  SUBCASE("perfect prediction drives the loss below 1e-3") {
    Scenario sc;
    sc.objects.push_back({2, Box{10, 10, 26, 26}});
    sc.objects.push_back({1, Box{20, 20, 58, 58}});
    auto targets = assign_targets<float>(sc, cfg);
    std::vector<Tensor<float>> heads;
    for (int s = 0; s < cfg.n_scales(); ++s) {
      const auto scale = cfg.scale(s);
      auto head = background_head(scale, cfg.n_classes, -40.f);
      const int hw = scale.grid_h * scale.grid_w;
      const auto& tg = targets[static_cast<std::size_t>(s)];
      for (std::size_t i = 0; i < tg.cells.size(); ++i) {
        const int cell = tg.cells[i];
        head.data()[0 * hw + cell] = detail::logit(tg.fx[i]);
        head.data()[1 * hw + cell] = detail::logit(tg.fy[i]);
        head.data()[2 * hw + cell] = tg.tw[i];
        head.data()[3 * hw + cell] = tg.th[i];
        head.data()[kObjChannel * hw + cell] = 40.f;
        head.data()[(kClassChannelStart + tg.classes[i]) * hw + cell] = 60.f;
      }
      heads.push_back(head);
    }
    auto bundle = detection_loss(heads, sc, cfg);
    CHECK(bundle.total.item() < 1e-3);
    CHECK(bundle.n_assigned == 2);
  }
  SUBCASE("empty scene: pushing objectness logits down always helps") {
    Scenario sc;  // no objects
    double prev = 1e30;
    for (float logit : {2.f, 0.f, -2.f, -5.f, -9.f}) {
      std::vector<Tensor<float>> heads;
      for (int s = 0; s < cfg.n_scales(); ++s)
        heads.push_back(background_head(cfg.scale(s), cfg.n_classes, logit));
      const double loss = detection_loss(heads, sc, cfg).total.item();
      CHECK(loss < prev);
      CHECK(loss >= 0.0);
      prev = loss;
    }
  }
  SUBCASE("loss is non-negative on random predictions") {
    Rng rng(321);
    for (int rep = 0; rep < 10; ++rep) {
      Scenario sc;
      if (rep % 3 != 0) sc.objects.push_back({static_cast<int>(rng.uniform_int(0, 3)), Box{12, 12, 28, 28}});
      std::vector<Tensor<float>> heads;
      for (int s = 0; s < cfg.n_scales(); ++s) {
        const auto scale = cfg.scale(s);
        Tensor<float> head({5 + cfg.n_classes, scale.grid_h, scale.grid_w});
        for (int i = 0; i < head.numel(); ++i) head.data()[i] = static_cast<float>(rng.uniform(-3, 3));
        heads.push_back(head);
      }
      CHECK(detection_loss(heads, sc, cfg).total.item() >= 0.0);
    }
  }
  SUBCASE("one optimizer step on a fixed scenario decreases the loss across seeds") {
    Scenario sc;
    sc.image_size = 64;
    Rng rng(55);
    sc.image.resize(3 * 64 * 64);
    for (auto& v : sc.image) v = static_cast<float>(rng.uniform(0.0, 1.0));
    sc.objects.push_back({0, Box{8, 8, 24, 24}});
    sc.objects.push_back({3, Box{30, 28, 50, 48}});
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      DetectorModel<float> model(ModelConfig{}, Variant::kBaseline, seed);
      auto image = scenario_image_tensor<float>(sc);
      auto params = model.trainable_params();
      AdamOptimizer<float> opt(params, 1e-3f);
      for (auto& p : params) p.zero_grad();
      auto before = detection_loss(model.forward(image), sc, model.config());
      backward(before.total);
      opt.step();
      NoGradGuard off;
      auto after = detection_loss(model.forward(image), sc, model.config());
      CHECK(after.total.item() < before.total.item());
    }
  }
}

TEST_CASE("variant forward passes and detect()") {
  ModelConfig cfg;
  for (auto variant : {Variant::kBaseline, Variant::kReasoner1, Variant::kReasoner2}) {
    DetectorModel<float> model(cfg, variant, 9);
    auto dets = detect(model, rand_image(64, 10), 0.05, 0.45);
    for (const auto& d : dets) {
      CHECK(d.score >= 0.05f);
      CHECK(d.score <= 1.0f);
      CHECK(d.class_id >= 0);
      CHECK(d.class_id < cfg.n_classes);
      CHECK(d.box.x_max > d.box.x_min);
      CHECK(d.box.y_max > d.box.y_min);
    }
  }
  SUBCASE("attention captures are produced only by reasoning variants") {
    std::vector<AttentionCapture<float>> caps;
    DetectorModel<float> r2(cfg, Variant::kReasoner2, 9);
    r2.forward(rand_image(64, 11), &caps);
    REQUIRE(static_cast<int>(caps.size()) == cfg.n_scales());
    CHECK(caps[0].n == 64);
    CHECK(caps[0].n_heads == 1);
    CHECK(caps[1].n == 16);
    CHECK(caps[1].n_heads == 2);

    DetectorModel<float> base(cfg, Variant::kBaseline, 9);
    base.forward(rand_image(64, 11), &caps);
    CHECK(caps[0].n == 0);
    CHECK_THROWS_AS(base.reasoning_at(0), UsageError);
  }
}

TEST_CASE("model config validation") {
  auto expect_usage = [](ModelConfig cfg) { CHECK_THROWS_AS(cfg.validate(), UsageError); };
  ModelConfig bad;

  bad = ModelConfig{};
  bad.image_size = 40;  // not a multiple of 16
  expect_usage(bad);

  bad = ModelConfig{};
  bad.scale_channels = {16};  // length mismatch with strides
  expect_usage(bad);

  bad = ModelConfig{};
  bad.scale_channels = {15, 32};  // not divisible by head width
  expect_usage(bad);

  bad = ModelConfig{};
  bad.scale_strides = {8, 32};  // strides must double
  expect_usage(bad);

  bad = ModelConfig{};
  bad.scale_strides = {32, 64};  // no backbone tap
  bad.scale_channels = {16, 32};
  expect_usage(bad);

  bad = ModelConfig{};
  bad.priors = {16.0, -1.0};
  expect_usage(bad);

  bad = ModelConfig{};
  bad.n_classes = 0;
  expect_usage(bad);

  ModelConfig good;
  CHECK_NOTHROW(good.validate());
}
