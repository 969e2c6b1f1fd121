#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "grsn/boxes.hpp"
#include "grsn/errors.hpp"
#include "grsn/fusion.hpp"
#include "grsn/init.hpp"
#include "grsn/reasoning.hpp"
#include "grsn/tensor.hpp"

namespace grsn {

// Toy one-stage grid detector: conv backbone -> top-down neck -> optional
// reasoning/fusion stage -> pointwise prediction heads, one per scale.
// Every scale predicts, per cell, box offsets (tx,ty,tw,th), an objectness
// logit, and class logits, laid out channel-major in that order.

constexpr int kBoxChannels = 4;
constexpr int kObjChannel = 4;
constexpr int kClassChannelStart = 5;

// Objectness starts biased negative so untrained models are not wall-to-wall
// detections.
constexpr double kObjBiasInit = -2.0;

// The prediction head starts near zero so initial boxes sit at the cell
// centre with prior size; full-scale head weights make the squared box error
// steep enough that the first optimiser steps at the default learning rate
// overshoot instead of descending.
constexpr double kHeadInitScale = 0.01;

struct ScaleConfig {
  int scale_id = 0;
  int grid_h = 0, grid_w = 0;
  int stride = 0;
  double prior = 0.0;
  int d_feature = 0;
  int n_heads = 0;
};

struct ModelConfig {
  int image_size = 64;
  int n_classes = 4;
  // Four stride-2 3x3 stages; the deepest stage is refined by a 1x1 pair
  // (last stage channels -> deep_width -> back).  The 1x1 pair deepens the
  // network without growing the receptive field, which must stay local for
  // the relational benchmark to be meaningful.
  std::vector<int> backbone_channels = {16, 32, 64, 128};
  int deep_width = 160;
  std::vector<int> scale_strides = {8, 16};    // finest first, each 2x the last
  std::vector<int> scale_channels = {16, 32};  // d_feature per scale
  std::vector<double> priors = {16.0, 40.0};   // box size prior per scale, px
  int head_width = 16;                         // per-head embedding width rule
  int mlp_mult = 2;                            // reasoning hidden = mlp_mult * d
  double leaky_slope = 0.1;
  double ln_eps = 1e-5;
  bool use_positional_encoding = true;
  double w_obj = 1.0, w_cls = 1.0, w_box = 5.0;

  int n_scales() const { return static_cast<int>(scale_strides.size()); }

  int n_heads_at(int s) const { return scale_channels[static_cast<std::size_t>(s)] / head_width; }

  ScaleConfig scale(int s) const {
    ScaleConfig sc;
    sc.scale_id = s;
    sc.stride = scale_strides[static_cast<std::size_t>(s)];
    sc.grid_h = sc.grid_w = image_size / sc.stride;
    sc.prior = priors[static_cast<std::size_t>(s)];
    sc.d_feature = scale_channels[static_cast<std::size_t>(s)];
    sc.n_heads = n_heads_at(s);
    return sc;
  }

  void validate() const {
    if (image_size < 32 || image_size % 16 != 0) {
      throw UsageError("model config: image_size must be a multiple of 16 and at least 32, got " +
                       std::to_string(image_size));
    }
    if (n_classes < 1) throw UsageError("model config: n_classes must be positive");
    if (backbone_channels.size() != 4) {
      throw UsageError("model config: expected 4 backbone stage channel counts, got " +
                       std::to_string(backbone_channels.size()));
    }
    for (int c : backbone_channels) {
      if (c < 1) throw UsageError("model config: backbone channels must be positive");
    }
    if (deep_width < 1) throw UsageError("model config: deep_width must be positive");
    if (scale_strides.empty() || scale_strides.size() > 3) {
      throw UsageError("model config: 1 to 3 scales supported, got " + std::to_string(scale_strides.size()));
    }
    if (scale_channels.size() != scale_strides.size() || priors.size() != scale_strides.size()) {
      throw UsageError("model config: scale_strides, scale_channels and priors must have equal length");
    }
    for (std::size_t s = 0; s < scale_strides.size(); ++s) {
      const int stride = scale_strides[s];
      if (stride != 4 && stride != 8 && stride != 16) {
        throw UsageError("model config: stride " + std::to_string(stride) + " has no backbone tap (use 4, 8 or 16)");
      }
      if (s + 1 < scale_strides.size() && scale_strides[s + 1] != 2 * stride) {
        throw UsageError("model config: scale strides must double, got " + std::to_string(stride) + " then " +
                         std::to_string(scale_strides[s + 1]));
      }
      if (image_size % stride != 0) {
        throw UsageError("model config: image_size not divisible by stride " + std::to_string(stride));
      }
      const int d = scale_channels[s];
      if (d < 1 || d % head_width != 0) {
        throw UsageError("model config: scale " + std::to_string(s) + " channels " + std::to_string(d) +
                         " not divisible by per-head width " + std::to_string(head_width));
      }
      if (priors[s] <= 0.0) throw UsageError("model config: priors must be positive");
    }
    if (head_width < 1) throw UsageError("model config: head_width must be positive");
    if (mlp_mult < 1) throw UsageError("model config: mlp_mult must be positive");
    if (w_obj < 0 || w_cls < 0 || w_box < 0) throw UsageError("model config: loss weights must be non-negative");
  }
};

// Ground truth for one image.
struct ObjectLabel {
  int class_id = 0;
  Box box;
};

struct Scenario {
  std::uint64_t seed = 0;
  bool val_split = false;
  int image_size = 64;
  int channels = 3;
  std::vector<ObjectLabel> objects;
  std::vector<float> image;  // channel-major, channels*size*size, values in [0,1]
};

template <typename T>
Tensor<T> scenario_image_tensor(const Scenario& sc, bool requires_grad = false) {
  Tensor<T> img({sc.channels, sc.image_size, sc.image_size}, requires_grad);
  T* d = img.data();
  for (std::size_t i = 0; i < sc.image.size(); ++i) d[i] = static_cast<T>(sc.image[i]);
  return img;
}

// ---------------------------------------------------------------------------
// Target assignment and box encoding

template <typename T>
struct ScaleTargets {
  std::vector<int> cells;      // row-major cell index per assigned object
  std::vector<int> classes;    // class label per assigned object
  std::vector<T> fx, fy;       // center position within cell, in (0,1)
  std::vector<T> tw, th;       // log(size / prior) targets
};

// Assigns each object to the cell containing its center at the scale whose
// prior best matches sqrt(w*h); falls back to the next-best scale when the
// cell is taken, and drops the object if every scale's cell is taken.
template <typename T>
std::vector<ScaleTargets<T>> assign_targets(const Scenario& sc, const ModelConfig& cfg) {
  const int ns = cfg.n_scales();
  std::vector<ScaleTargets<T>> out(static_cast<std::size_t>(ns));
  std::vector<std::vector<char>> taken(static_cast<std::size_t>(ns));
  for (int s = 0; s < ns; ++s) {
    const auto scale = cfg.scale(s);
    taken[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(scale.grid_h * scale.grid_w), 0);
  }
  for (const auto& obj : sc.objects) {
    const double cx = obj.box.center_x();
    const double cy = obj.box.center_y();
    if (cx < 0 || cx >= cfg.image_size || cy < 0 || cy >= cfg.image_size) {
      throw FormatError("target assignment: object center (" + std::to_string(cx) + "," + std::to_string(cy) +
                        ") outside " + std::to_string(cfg.image_size) + "px image");
    }
    const double w = obj.box.width(), h = obj.box.height();
    const double size = std::sqrt(std::max(1e-6, w * h));
    std::vector<int> order(static_cast<std::size_t>(ns));
    for (int s = 0; s < ns; ++s) order[static_cast<std::size_t>(s)] = s;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return std::abs(std::log(size / cfg.priors[static_cast<std::size_t>(a)])) <
             std::abs(std::log(size / cfg.priors[static_cast<std::size_t>(b)]));
    });
    for (int s : order) {
      const auto scale = cfg.scale(s);
      const int cxi = std::min(scale.grid_w - 1, static_cast<int>(cx / scale.stride));
      const int cyi = std::min(scale.grid_h - 1, static_cast<int>(cy / scale.stride));
      const int cell = cyi * scale.grid_w + cxi;
      if (taken[static_cast<std::size_t>(s)][static_cast<std::size_t>(cell)]) continue;
      taken[static_cast<std::size_t>(s)][static_cast<std::size_t>(cell)] = 1;
      auto& t = out[static_cast<std::size_t>(s)];
      t.cells.push_back(cell);
      t.classes.push_back(obj.class_id);
      t.fx.push_back(static_cast<T>(cx / scale.stride - cxi));
      t.fy.push_back(static_cast<T>(cy / scale.stride - cyi));
      t.tw.push_back(static_cast<T>(std::log(w / scale.prior)));
      t.th.push_back(static_cast<T>(std::log(h / scale.prior)));
      break;
    }
  }
  return out;
}

namespace detail {
template <typename T>
inline T logit(T p) {
  return std::log(p / (T(1) - p));
}
}  // namespace detail

// Inverse of head decoding for one object: produces the raw head activations
// a perfect predictor would emit for its assigned cell.
template <typename T>
struct EncodedBox {
  int cell = 0;
  T tx = 0, ty = 0, tw = 0, th = 0;
};

template <typename T>
EncodedBox<T> encode_box(const Box& box, const ScaleConfig& scale) {
  EncodedBox<T> e;
  const double cx = box.center_x(), cy = box.center_y();
  const int cxi = std::min(scale.grid_w - 1, static_cast<int>(cx / scale.stride));
  const int cyi = std::min(scale.grid_h - 1, static_cast<int>(cy / scale.stride));
  e.cell = cyi * scale.grid_w + cxi;
  e.tx = detail::logit(static_cast<T>(cx / scale.stride - cxi));
  e.ty = detail::logit(static_cast<T>(cy / scale.stride - cyi));
  e.tw = static_cast<T>(std::log(box.width() / scale.prior));
  e.th = static_cast<T>(std::log(box.height() / scale.prior));
  return e;
}

// ---------------------------------------------------------------------------
// Decoding

template <typename T>
std::vector<Detection> head_decode(const Tensor<T>& head, const ScaleConfig& scale, int n_classes,
                                   double conf_threshold) {
  if (head.ndim() != 3 || head.dim(0) != kClassChannelStart + n_classes || head.dim(1) != scale.grid_h ||
      head.dim(2) != scale.grid_w) {
    throw ShapeError("head_decode: prediction " + detail::shape_str(head.shape()) + " does not match scale grid " +
                     std::to_string(scale.grid_h) + "x" + std::to_string(scale.grid_w) + " with " +
                     std::to_string(n_classes) + " classes");
  }
  const int hw = scale.grid_h * scale.grid_w;
  const T* d = head.data();
  auto at = [&](int ch, int cell) { return d[static_cast<std::size_t>(ch) * hw + cell]; };
  std::vector<Detection> dets;
  std::vector<double> probs(static_cast<std::size_t>(n_classes));
  for (int cell = 0; cell < hw; ++cell) {
    const double obj = detail::sigmoid_stable(static_cast<double>(at(kObjChannel, cell)));
    double mx = -1e30;
    for (int c = 0; c < n_classes; ++c) mx = std::max(mx, static_cast<double>(at(kClassChannelStart + c, cell)));
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      probs[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(at(kClassChannelStart + c, cell)) - mx);
      sum += probs[static_cast<std::size_t>(c)];
    }
    int best = 0;
    for (int c = 1; c < n_classes; ++c) {
      if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(best)]) best = c;
    }
    const double score = obj * probs[static_cast<std::size_t>(best)] / sum;
    if (score < conf_threshold) continue;
    const int cyi = cell / scale.grid_w, cxi = cell % scale.grid_w;
    const double cx = (cxi + detail::sigmoid_stable(static_cast<double>(at(0, cell)))) * scale.stride;
    const double cy = (cyi + detail::sigmoid_stable(static_cast<double>(at(1, cell)))) * scale.stride;
    const double bw = scale.prior * std::exp(static_cast<double>(at(2, cell)));
    const double bh = scale.prior * std::exp(static_cast<double>(at(3, cell)));
    Detection det;
    det.box = {static_cast<float>(cx - bw / 2), static_cast<float>(cy - bh / 2), static_cast<float>(cx + bw / 2),
               static_cast<float>(cy + bh / 2)};
    det.class_id = best;
    det.score = static_cast<float>(score);
    det.scale_id = scale.scale_id;
    if (!std::isfinite(det.box.x_min) || !std::isfinite(det.box.y_max)) continue;
    dets.push_back(det);
  }
  return dets;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
class DetectorModel {
 public:
  DetectorModel(ModelConfig cfg, Variant variant, std::uint64_t seed)
      : cfg_(std::move(cfg)), variant_(variant), seed_(seed) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  Variant variant() const { return variant_; }
  std::uint64_t seed() const { return seed_; }

  const std::vector<std::pair<std::string, Tensor<T>>>& named_params() const { return params_; }

  long param_count() const {
    long n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  std::vector<Tensor<T>> trainable_params(const std::vector<std::string>& exclude_prefixes = {}) const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : params_) {
      bool excluded = false;
      for (const auto& p : exclude_prefixes) excluded = excluded || name.rfind(p, 0) == 0;
      if (!excluded) out.push_back(t);
    }
    return out;
  }

  Tensor<T> find_param(const std::string& name) const {
    for (const auto& [n, t] : params_) {
      if (n == name) return t;
    }
    throw UsageError("no parameter named '" + name + "'");
  }

  ScaleConfig scale_config(int s) const { return cfg_.scale(s); }

  const ReasoningParams<T>& reasoning_at(int s) const {
    if (variant_ == Variant::kBaseline) throw UsageError("baseline variant has no reasoning parameters");
    return reasoning_[static_cast<std::size_t>(s)];
  }

  const FuseParams<T>& fuse_at(int s) const {
    if (variant_ == Variant::kBaseline) throw UsageError("baseline variant has no fuse parameters");
    return fuse_[static_cast<std::size_t>(s)];
  }

  // Neck feature grids, finest scale first.
  std::vector<Tensor<T>> backbone_neck_forward(const Tensor<T>& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
        image.dim(2) != cfg_.image_size) {
      throw ShapeError("backbone: expected [3," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + "] image, got " + detail::shape_str(image.shape()));
    }
    const T slope = static_cast<T>(cfg_.leaky_slope);
    Tensor<T> x = image;
    std::vector<Tensor<T>> taps(3);  // stride 4, 8, 16
    for (std::size_t i = 0; i < backbone_.size(); ++i) {
      const auto& c = backbone_[i];
      x = (c.pointwise) ? conv1x1(x, c.w, c.b) : conv2d(x, c.w, c.b, c.stride, 1);
      x = leaky_relu(x, slope);
      if (i == 1) taps[0] = x;
      if (i == 2) taps[1] = x;
      if (i == 5) taps[2] = x;
    }
    const int ns = cfg_.n_scales();
    std::vector<Tensor<T>> grids(static_cast<std::size_t>(ns));
    for (int s = ns - 1; s >= 0; --s) {
      auto lat = conv1x1(taps[tap_index(s)], lat_[static_cast<std::size_t>(s)].w, lat_[static_cast<std::size_t>(s)].b);
      if (s == ns - 1) {
        grids[static_cast<std::size_t>(s)] = lat;
      } else {
        auto merged = concat_channels(lat, upsample_nearest2x(grids[static_cast<std::size_t>(s + 1)]));
        grids[static_cast<std::size_t>(s)] = leaky_relu(
            conv1x1(merged, mix_[static_cast<std::size_t>(s)].w, mix_[static_cast<std::size_t>(s)].b), slope);
      }
    }
    return grids;
  }

  // Raw per-scale head maps [(5+n_classes), H, W], finest scale first.
  // When captures is non-null it is resized to n_scales; entries are filled
  // for variants with a reasoning stage.
  std::vector<Tensor<T>> forward(const Tensor<T>& image,
                                 std::vector<AttentionCapture<T>>* captures = nullptr) const {
    auto grids = backbone_neck_forward(image);
    if (captures) {
      captures->clear();
      captures->resize(grids.size());
    }
    std::vector<Tensor<T>> outs;
    outs.reserve(grids.size());
    for (std::size_t s = 0; s < grids.size(); ++s) {
      Tensor<T> x = grids[s];
      AttentionCapture<T>* cap = captures ? &(*captures)[s] : nullptr;
      if (variant_ == Variant::kReasoner1) {
        x = reasoner1_forward(x, reasoning_[s], fuse_[s], cap);
      } else if (variant_ == Variant::kReasoner2) {
        x = reasoner2_forward(x, reasoning_[s], fuse_[s], cap);
      }
      outs.push_back(conv1x1(x, head_[s].w, head_[s].b));
    }
    return outs;
  }

 private:
  struct ConvLayer {
    Tensor<T> w, b;
    int stride = 1;
    bool pointwise = false;
  };
  struct PointwiseLayer {
    Tensor<T> w, b;
  };

  int tap_index(int s) const {
    switch (cfg_.scale_strides[static_cast<std::size_t>(s)]) {
      case 4: return 0;
      case 8: return 1;
      default: return 2;
    }
  }

  int tap_channels(int s) const {
    switch (cfg_.scale_strides[static_cast<std::size_t>(s)]) {
      case 4: return cfg_.backbone_channels[1];
      case 8: return cfg_.backbone_channels[2];
      default: return cfg_.backbone_channels[3];
    }
  }

  Tensor<T> reg(const std::string& name, Tensor<T> t) {
    params_.emplace_back(name, t);
    return t;
  }

  ConvLayer make_conv(const std::string& name, int ci, int co, int k, int stride) {
    ConvLayer c;
    c.stride = stride;
    c.pointwise = (k == 1);
    if (c.pointwise) {
      c.w = Tensor<T>({co, ci}, true);
    } else {
      c.w = Tensor<T>({co, ci, k, k}, true);
    }
    init_he_uniform(c.w, ci * k * k, seed_, name + ".w");
    c.b = Tensor<T>({co}, true);
    reg(name + ".w", c.w);
    reg(name + ".b", c.b);
    return c;
  }

  PointwiseLayer make_pointwise(const std::string& name, int ci, int co, bool rectified) {
    PointwiseLayer p;
    p.w = Tensor<T>({co, ci}, true);
    if (rectified) {
      init_he_uniform(p.w, ci, seed_, name + ".w");
    } else {
      init_xavier_uniform(p.w, ci, co, seed_, name + ".w");
    }
    p.b = Tensor<T>({co}, true);
    reg(name + ".w", p.w);
    reg(name + ".b", p.b);
    return p;
  }

  void build() {
    const auto& bc = cfg_.backbone_channels;
    backbone_.push_back(make_conv("backbone.conv0", 3, bc[0], 3, 2));
    backbone_.push_back(make_conv("backbone.conv1", bc[0], bc[1], 3, 2));
    backbone_.push_back(make_conv("backbone.conv2", bc[1], bc[2], 3, 2));
    backbone_.push_back(make_conv("backbone.conv3", bc[2], bc[3], 3, 2));
    backbone_.push_back(make_conv("backbone.conv4", bc[3], cfg_.deep_width, 1, 1));
    backbone_.push_back(make_conv("backbone.conv5", cfg_.deep_width, bc[3], 1, 1));

    const int ns = cfg_.n_scales();
    lat_.resize(static_cast<std::size_t>(ns));
    mix_.resize(static_cast<std::size_t>(ns));
    for (int s = 0; s < ns; ++s) {
      const std::string tag = ".s" + std::to_string(s);
      lat_[static_cast<std::size_t>(s)] =
          make_pointwise("neck.lat" + tag, tap_channels(s), cfg_.scale_channels[static_cast<std::size_t>(s)], false);
      if (s + 1 < ns) {
        const int ci = cfg_.scale_channels[static_cast<std::size_t>(s)] +
                       cfg_.scale_channels[static_cast<std::size_t>(s + 1)];
        mix_[static_cast<std::size_t>(s)] =
            make_pointwise("neck.mix" + tag, ci, cfg_.scale_channels[static_cast<std::size_t>(s)], true);
      }
    }

    if (variant_ != Variant::kBaseline) {
      reasoning_.reserve(static_cast<std::size_t>(ns));
      fuse_.reserve(static_cast<std::size_t>(ns));
      for (int s = 0; s < ns; ++s) {
        const auto sc = cfg_.scale(s);
        const std::string tag = "s" + std::to_string(s);
        reasoning_.push_back(make_reasoning_params<T>(sc.d_feature, sc.n_heads, static_cast<T>(cfg_.ln_eps),
                                                      cfg_.use_positional_encoding, sc.grid_h * sc.grid_w, seed_,
                                                      "reason." + tag, params_));
        const int fuse_in = (variant_ == Variant::kReasoner2) ? 2 * sc.d_feature : sc.d_feature;
        fuse_.push_back(make_fuse_params<T>(fuse_in, sc.d_feature, seed_, "fuse." + tag, params_));
      }
    }

    head_.resize(static_cast<std::size_t>(ns));
    for (int s = 0; s < ns; ++s) {
      const int d = cfg_.scale_channels[static_cast<std::size_t>(s)];
      auto& h = head_[static_cast<std::size_t>(s)];
      h = make_pointwise("head.s" + std::to_string(s), d, kClassChannelStart + cfg_.n_classes, false);
      for (int i = 0; i < h.w.numel(); ++i) h.w.data()[i] *= static_cast<T>(kHeadInitScale);
      h.b.data()[kObjChannel] = static_cast<T>(kObjBiasInit);
    }
  }

  ModelConfig cfg_;
  Variant variant_;
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<ConvLayer> backbone_;
  std::vector<PointwiseLayer> lat_, mix_, head_;
  std::vector<ReasoningParams<T>> reasoning_;
  std::vector<FuseParams<T>> fuse_;
};

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossBundle {
  Tensor<T> total;
  double obj = 0, cls = 0, box = 0;
  int n_assigned = 0;
};

// Weighted sum of mean objectness BCE over every cell of every scale, mean
// class cross-entropy over assigned cells, and mean squared box-offset error
// over assigned cells.
template <typename T>
LossBundle<T> detection_loss(const std::vector<Tensor<T>>& head_maps, const Scenario& sc,
                             const ModelConfig& cfg) {
  if (static_cast<int>(head_maps.size()) != cfg.n_scales()) {
    throw ShapeError("detection_loss: " + std::to_string(head_maps.size()) + " head maps for " +
                     std::to_string(cfg.n_scales()) + " scales");
  }
  auto targets = assign_targets<T>(sc, cfg);

  LossBundle<T> out;
  Tensor<T> obj_logits;       // [1, total_cells]
  std::vector<int> pos_cells;  // indices into the concatenated cell axis
  int total_cells = 0;
  Tensor<T> cls_weighted;     // sum over scales of k_s * CE_s
  int cls_rows = 0;
  Tensor<T> box_sq_sum;       // accumulated squared error
  int box_rows = 0;

  for (int s = 0; s < cfg.n_scales(); ++s) {
    const auto& head = head_maps[static_cast<std::size_t>(s)];
    const auto scfg = cfg.scale(s);
    const int hw = scfg.grid_h * scfg.grid_w;
    auto flat = flatten_grid(head);  // [hw, 5+nc]

    auto obj_col = reshape(slice_lastdim(flat, kObjChannel, 1), {1, hw});
    obj_logits = (s == 0) ? obj_col : concat_lastdim(obj_logits, obj_col);
    const auto& tg = targets[static_cast<std::size_t>(s)];
    for (int c : tg.cells) pos_cells.push_back(total_cells + c);
    total_cells += hw;

    const int k = static_cast<int>(tg.cells.size());
    if (k == 0) continue;
    auto rows = gather_rows(flat, tg.cells);  // [k, 5+nc]

    auto cls_term = scale(ce_rows_mean(slice_lastdim(rows, kClassChannelStart, cfg.n_classes), tg.classes),
                          static_cast<T>(k));
    cls_weighted = (cls_rows == 0) ? cls_term : add(cls_weighted, cls_term);
    cls_rows += k;

    std::vector<T> txy_t(static_cast<std::size_t>(2 * k)), twh_t(static_cast<std::size_t>(2 * k));
    for (int i = 0; i < k; ++i) {
      txy_t[static_cast<std::size_t>(2 * i)] = tg.fx[static_cast<std::size_t>(i)];
      txy_t[static_cast<std::size_t>(2 * i) + 1] = tg.fy[static_cast<std::size_t>(i)];
      twh_t[static_cast<std::size_t>(2 * i)] = tg.tw[static_cast<std::size_t>(i)];
      twh_t[static_cast<std::size_t>(2 * i) + 1] = tg.th[static_cast<std::size_t>(i)];
    }
    auto dxy = sub(sigmoid(slice_lastdim(rows, 0, 2)), Tensor<T>::from({k, 2}, std::move(txy_t)));
    auto dwh = sub(slice_lastdim(rows, 2, 2), Tensor<T>::from({k, 2}, std::move(twh_t)));
    auto sq = add(sum(mul(dxy, dxy)), sum(mul(dwh, dwh)));
    box_sq_sum = (box_rows == 0) ? sq : add(box_sq_sum, sq);
    box_rows += k;
  }

  // Balanced objectness: with only a handful of occupied cells per image, a
  // plain mean over all cells starves the positive gradient, so the positive
  // and negative cell populations contribute equal halves.
  std::sort(pos_cells.begin(), pos_cells.end());
  std::vector<int> neg_cells;
  neg_cells.reserve(static_cast<std::size_t>(total_cells) - pos_cells.size());
  for (int c = 0, p = 0; c < total_cells; ++c) {
    if (p < static_cast<int>(pos_cells.size()) && pos_cells[static_cast<std::size_t>(p)] == c) {
      ++p;
    } else {
      neg_cells.push_back(c);
    }
  }
  auto obj_rows = reshape(obj_logits, {total_cells, 1});
  Tensor<T> obj_loss;
  if (pos_cells.empty()) {
    obj_loss = bce_logits_mean(obj_rows, std::vector<T>(static_cast<std::size_t>(total_cells), T(0)));
  } else if (neg_cells.empty()) {
    obj_loss = bce_logits_mean(obj_rows, std::vector<T>(static_cast<std::size_t>(total_cells), T(1)));
  } else {
    auto pos_loss = bce_logits_mean(gather_rows(obj_rows, pos_cells),
                                    std::vector<T>(pos_cells.size(), T(1)));
    auto neg_loss = bce_logits_mean(gather_rows(obj_rows, neg_cells),
                                    std::vector<T>(neg_cells.size(), T(0)));
    obj_loss = scale(add(pos_loss, neg_loss), T(0.5));
  }
  out.obj = static_cast<double>(obj_loss.item());
  out.n_assigned = box_rows;

  auto total = scale(obj_loss, static_cast<T>(cfg.w_obj));
  if (cls_rows > 0) {
    auto cls_loss = scale(cls_weighted, T(1) / static_cast<T>(cls_rows));
    out.cls = static_cast<double>(cls_loss.item());
    total = add(total, scale(cls_loss, static_cast<T>(cfg.w_cls)));
  }
  if (box_rows > 0) {
    auto box_loss = scale(box_sq_sum, T(1) / static_cast<T>(box_rows));
    out.box = static_cast<double>(box_loss.item());
    total = add(total, scale(box_loss, static_cast<T>(cfg.w_box)));
  }
  out.total = total;
  return out;
}

// Decoded, confidence-filtered, NMS-suppressed detections for one image.
template <typename T>
std::vector<Detection> detect(const DetectorModel<T>& model, const Tensor<T>& image, double conf_threshold,
                              double nms_iou) {
  NoGradGuard ng;
  auto maps = model.forward(image);
  std::vector<Detection> dets;
  for (int s = 0; s < model.config().n_scales(); ++s) {
    auto scale_dets = head_decode(maps[static_cast<std::size_t>(s)], model.scale_config(s),
                                  model.config().n_classes, conf_threshold);
    dets.insert(dets.end(), scale_dets.begin(), scale_dets.end());
  }
  return nms(std::move(dets), static_cast<float>(nms_iou));
}

}  // namespace grsn
