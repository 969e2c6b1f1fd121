#include "grsn/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <tuple>

#include "grsn/data.hpp"
#include "grsn/errors.hpp"
#include "grsn/rng.hpp"
#include "grsn/threading.hpp"
#include "json.hpp"

namespace grsn {

namespace {

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double average_precision(std::vector<ScoredBox> dets, const std::vector<TruthBox>& truths,
                         double iou_thresh) {
  if (truths.empty()) throw UsageError("average_precision: no ground truth for class");
  std::sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) {
    return std::tie(b.score, a.image_id, a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max) <
           std::tie(a.score, b.image_id, b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max);
  });
  std::vector<char> matched(truths.size(), 0);
  const int n = static_cast<int>(dets.size());
  std::vector<double> precision(static_cast<std::size_t>(n)), recall(static_cast<std::size_t>(n));
  int tp = 0;
  for (int i = 0; i < n; ++i) {
    int best = -1;
    float best_iou = 0.f;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (matched[t] || truths[t].image_id != dets[static_cast<std::size_t>(i)].image_id) continue;
      const float v = iou(dets[static_cast<std::size_t>(i)].box, truths[t].box);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0) {
      matched[static_cast<std::size_t>(best)] = 1;
      ++tp;
    }
    precision[static_cast<std::size_t>(i)] = static_cast<double>(tp) / (i + 1);
    recall[static_cast<std::size_t>(i)] = static_cast<double>(tp) / static_cast<double>(truths.size());
  }
  // Area under the exact step PR curve with the standard precision envelope.
  double ap = 0.0, env = 0.0, prev_recall = 0.0;
  std::vector<double> envelope(static_cast<std::size_t>(n));
  for (int i = n - 1; i >= 0; --i) {
    env = std::max(env, precision[static_cast<std::size_t>(i)]);
    envelope[static_cast<std::size_t>(i)] = env;
  }
  for (int i = 0; i < n; ++i) {
    ap += (recall[static_cast<std::size_t>(i)] - prev_recall) * envelope[static_cast<std::size_t>(i)];
    prev_recall = recall[static_cast<std::size_t>(i)];
  }
  return ap;
}

EvalReport evaluate(const DetectorModel<float>& model, const std::vector<Scenario>& scenes,
                    const EvalConfig& cfg) {
  if (scenes.empty()) throw UsageError("evaluate: empty dataset");
  NoGradGuard ng;
  const int nc = model.config().n_classes;
  std::vector<std::vector<ScoredBox>> dets(static_cast<std::size_t>(nc));
  std::vector<std::vector<TruthBox>> truths(static_cast<std::size_t>(nc));
  int n_detections = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& sc = scenes[i];
    for (const auto& obj : sc.objects) {
      if (obj.class_id < 0 || obj.class_id >= nc) {
        throw FormatError("evaluate: object class " + std::to_string(obj.class_id) + " out of range");
      }
      truths[static_cast<std::size_t>(obj.class_id)].push_back({obj.box, static_cast<int>(i)});
    }
    auto image = scenario_image_tensor<float>(sc);
    auto kept = detect(model, image, cfg.conf_threshold, cfg.nms_iou);
    n_detections += static_cast<int>(kept.size());
    for (const auto& d : kept) {
      if (d.class_id < nc) dets[static_cast<std::size_t>(d.class_id)].push_back({d.box, d.score, static_cast<int>(i)});
    }
  }
  EvalReport report;
  report.variant = variant_name(model.variant());
  report.seed = model.seed();
  report.n_images = static_cast<int>(scenes.size());
  report.n_detections = n_detections;
  double ap_sum = 0.0;
  int present = 0;
  for (int c = 0; c < nc; ++c) {
    if (truths[static_cast<std::size_t>(c)].empty()) continue;  // class absent from truth: excluded
    const double ap = average_precision(dets[static_cast<std::size_t>(c)], truths[static_cast<std::size_t>(c)], 0.5);
    report.per_class_ap[c] = ap;
    ap_sum += ap;
    ++present;
  }
  report.map50 = present > 0 ? ap_sum / present : 0.0;
  return report;
}

void write_eval_report_json(const std::string& path, const EvalReport& report) {
  nlohmann::json j;
  j["variant"] = report.variant;
  j["seed"] = report.seed;
  j["map50"] = report.map50;
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [cls, ap] : report.per_class_ap) pc[std::to_string(cls)] = ap;
  j["per_class_ap"] = pc;
  j["n_images"] = report.n_images;
  j["n_detections"] = report.n_detections;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("eval report: cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

EvalReport read_eval_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("eval report: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("eval report: invalid JSON in '" + path + "': " + e.what());
  }
  EvalReport report;
  try {
    report.variant = j.at("variant").get<std::string>();
    report.seed = j.at("seed").get<std::uint64_t>();
    report.map50 = j.at("map50").get<double>();
    for (const auto& [key, value] : j.at("per_class_ap").items()) {
      report.per_class_ap[std::stoi(key)] = value.get<double>();
    }
    report.n_images = j.value("n_images", 0);
    report.n_detections = j.value("n_detections", 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("eval report: missing field in '" + path + "': " + e.what());
  }
  return report;
}

std::vector<ApDeltaRow> ap_delta_report(const EvalReport& a, const EvalReport& b) {
  if (a.per_class_ap.size() != b.per_class_ap.size()) {
    throw UsageError("ap_delta_report: class sets differ (" + std::to_string(a.per_class_ap.size()) + " vs " +
                     std::to_string(b.per_class_ap.size()) + " classes)");
  }
  std::vector<ApDeltaRow> rows;
  for (const auto& [cls, ap_a] : a.per_class_ap) {
    auto it = b.per_class_ap.find(cls);
    if (it == b.per_class_ap.end()) {
      throw UsageError("ap_delta_report: class " + std::to_string(cls) + " missing from second report");
    }
    ApDeltaRow row;
    row.class_id = cls;
    row.class_name = (cls >= 0 && cls < static_cast<int>(kClassNames.size())) ? kClassNames[static_cast<std::size_t>(cls)]
                                                                              : "class_" + std::to_string(cls);
    row.ap_base = ap_a;
    row.ap_variant = it->second;
    row.delta = it->second - ap_a;
    rows.push_back(row);
  }
  // std::map iteration is already class_id ascending; keep it explicit.
  std::sort(rows.begin(), rows.end(), [](const ApDeltaRow& x, const ApDeltaRow& y) { return x.class_id < y.class_id; });
  return rows;
}

void write_ap_delta_csv(const std::string& path, const std::vector<ApDeltaRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("ap_delta: cannot open '" + path + "' for writing");
  out << "class_id,class_name,ap_base,ap_variant,delta\n";
  for (const auto& r : rows) {
    out << r.class_id << ',' << r.class_name << ',' << format_real(r.ap_base) << ',' << format_real(r.ap_variant)
        << ',' << format_real(r.delta) << "\n";
  }
}

AdamOptimizer<float> make_optimizer(const DetectorModel<float>& model, const TrainOptions& opts) {
  return AdamOptimizer<float>(model.trainable_params(opts.freeze_prefixes), static_cast<float>(opts.lr),
                              static_cast<float>(opts.beta1), static_cast<float>(opts.beta2),
                              static_cast<float>(opts.eps));
}

TrainLog train(const DetectorModel<float>& model, AdamOptimizer<float>& opt,
               const std::vector<Scenario>& scenes, const TrainOptions& opts) {
  if (scenes.empty()) throw UsageError("train: empty dataset");
  if (opts.epochs < 1 || opts.batch < 1) throw UsageError("train: epochs and batch must be positive");
  TrainLog log;
  std::vector<int> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(splitmix64(opts.seed) + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double sum_total = 0, sum_obj = 0, sum_cls = 0, sum_box = 0;
    int steps_this_epoch = 0;
    const int n = static_cast<int>(scenes.size());
    for (int start = 0; start < n; start += opts.batch) {
      const int bs = std::min(opts.batch, n - start);
      opt.zero_grad();
      Tensor<float> batch_total;
      double obj = 0, cls = 0, box = 0;
      for (int b = 0; b < bs; ++b) {
        const auto& sc = scenes[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        auto image = scenario_image_tensor<float>(sc);
        auto maps = model.forward(image);
        auto loss = detection_loss(maps, sc, model.config());
        batch_total = (b == 0) ? loss.total : add(batch_total, loss.total);
        obj += loss.obj;
        cls += loss.cls;
        box += loss.box;
      }
      batch_total = scale(batch_total, 1.f / static_cast<float>(bs));
      const double step_loss = static_cast<double>(batch_total.item());
      if (!std::isfinite(step_loss)) {
        throw NumericError("training aborted: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps_this_epoch + 1) + " (optimizer step " +
                           std::to_string(opt.step_count() + 1) + ")");
      }
      backward(batch_total);
      opt.step();
      ++steps_this_epoch;
      ++log.steps;
      sum_total += step_loss;
      sum_obj += obj / bs;
      sum_cls += cls / bs;
      sum_box += box / bs;
    }

    EpochStats st;
    st.epoch = epoch;
    st.loss_total = sum_total / steps_this_epoch;
    st.loss_obj = sum_obj / steps_this_epoch;
    st.loss_cls = sum_cls / steps_this_epoch;
    st.loss_box = sum_box / steps_this_epoch;
    st.lr = opts.lr;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(st);
    if (opts.progress) {
      (*opts.progress) << "epoch " << epoch << "/" << opts.epochs << "  loss " << format_real(st.loss_total)
                       << "  obj " << format_real(st.loss_obj) << "  cls " << format_real(st.loss_cls) << "  box "
                       << format_real(st.loss_box) << "  (" << format_real(st.seconds) << "s)\n";
      opts.progress->flush();
    }
  }
  return log;
}

void write_train_log_csv(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("train log: cannot open '" + path + "' for writing");
  out << "epoch,loss_total,loss_obj,loss_cls,loss_box,seconds\n";
  for (const auto& e : log.epochs) {
    out << e.epoch << ',' << format_real(e.loss_total) << ',' << format_real(e.loss_obj) << ','
        << format_real(e.loss_cls) << ',' << format_real(e.loss_box) << ',' << format_real(e.seconds) << "\n";
  }
}

BenchResult throughput_bench(const DetectorModel<float>& model, int n_images, int warmup, int repeats) {
  if (n_images <= warmup) throw UsageError("throughput_bench: n_images must exceed warmup");
  if (repeats < 1) throw UsageError("throughput_bench: repeats must be positive");
  threading::ThreadCapGuard single(1);
  NoGradGuard ng;

  // A small pool of synthetic images, cycled; content is irrelevant to
  // timing but fixed for reproducibility.
  const int pool = 16;
  const int s = model.config().image_size;
  std::vector<Tensor<float>> images;
  Rng rng(0x42656e6368ULL);
  for (int i = 0; i < pool; ++i) {
    Tensor<float> img({3, s, s});
    float* d = img.data();
    for (int j = 0; j < img.numel(); ++j) d[j] = static_cast<float>(rng.uniform());
    images.push_back(img);
  }

  auto run_one = [&](int index) {
    const auto& img = images[static_cast<std::size_t>(index % pool)];
    auto maps = model.forward(img);
    std::vector<Detection> dets;
    for (int sc = 0; sc < model.config().n_scales(); ++sc) {
      auto d = head_decode(maps[static_cast<std::size_t>(sc)], model.scale_config(sc), model.config().n_classes,
                           0.25);
      dets.insert(dets.end(), d.begin(), d.end());
    }
    return nms(std::move(dets), 0.45f).size();
  };

  BenchResult res;
  res.n_images = n_images;
  res.warmup = warmup;
  std::size_t sink = 0;
  for (int rep = 0; rep < repeats; ++rep) {
    for (int i = 0; i < warmup; ++i) sink += run_one(i);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < n_images; ++i) sink += run_one(i);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.rates.push_back(n_images / std::max(1e-9, dt));
  }
  if (sink == static_cast<std::size_t>(-1)) res.rates.clear();  // keep the work observable

  double sum = 0;
  for (double r : res.rates) sum += r;
  res.mean = sum / res.rates.size();
  double var = 0;
  for (double r : res.rates) var += (r - res.mean) * (r - res.mean);
  res.stddev = std::sqrt(var / res.rates.size());
  res.median = median_of(res.rates);
  return res;
}

}  // namespace grsn
