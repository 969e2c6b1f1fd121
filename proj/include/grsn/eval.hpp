#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "grsn/adam.hpp"
#include "grsn/boxes.hpp"
#include "grsn/detector.hpp"

namespace grsn {

// Training loop, mAP@0.5 evaluation, per-class AP deltas, and the
// single-threaded throughput benchmark.

struct ScoredBox {
  Box box;
  float score = 0.f;
  int image_id = 0;
};

struct TruthBox {
  Box box;
  int image_id = 0;
};

// All-point interpolated average precision for one class at the given IoU
// match threshold.  Detections are sorted internally; each truth can match
// at most one detection (greedy in score order, best IoU first).
double average_precision(std::vector<ScoredBox> dets, const std::vector<TruthBox>& truths,
                         double iou_thresh = 0.5);

struct EvalConfig {
  double conf_threshold = 0.25;
  double nms_iou = 0.45;
};

struct EvalReport {
  std::string variant;
  std::uint64_t seed = 0;
  double map50 = 0.0;  // mean of per_class_ap over classes present in truth
  std::map<int, double> per_class_ap;
  int n_images = 0;
  int n_detections = 0;
};

EvalReport evaluate(const DetectorModel<float>& model, const std::vector<Scenario>& scenes,
                    const EvalConfig& cfg);

void write_eval_report_json(const std::string& path, const EvalReport& report);
EvalReport read_eval_report_json(const std::string& path);

struct ApDeltaRow {
  int class_id = 0;
  std::string class_name;
  double ap_base = 0.0;
  double ap_variant = 0.0;
  double delta = 0.0;
};

// Per-class AP(b) - AP(a), sorted by class_id.
std::vector<ApDeltaRow> ap_delta_report(const EvalReport& a, const EvalReport& b);
void write_ap_delta_csv(const std::string& path, const std::vector<ApDeltaRow>& rows);

struct TrainOptions {
  int epochs = 30;
  int batch = 8;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;  // shuffle order
  std::vector<std::string> freeze_prefixes;  // parameters excluded from updates
  std::ostream* progress = nullptr;
};

struct EpochStats {
  int epoch = 0;
  double loss_total = 0, loss_obj = 0, loss_cls = 0, loss_box = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  long steps = 0;
  std::string checkpoint_path;  // filled by callers that persist the model
};

AdamOptimizer<float> make_optimizer(const DetectorModel<float>& model, const TrainOptions& opts);

// Mini-batch training over the scenes; deterministic given (model seed,
// options seed, scenes).  Throws NumericError naming the failing step if the
// loss stops being finite.
TrainLog train(const DetectorModel<float>& model, AdamOptimizer<float>& opt,
               const std::vector<Scenario>& scenes, const TrainOptions& opts);

void write_train_log_csv(const std::string& path, const TrainLog& log);

struct BenchResult {
  std::vector<double> rates;  // images/sec per repeat
  double mean = 0, stddev = 0, median = 0;
  int n_images = 0, warmup = 0;
};

// Wall-clock inference rate over synthetic images, pinned to one thread.
// Each repeat times n_images forward+decode passes after `warmup` untimed
// iterations.
BenchResult throughput_bench(const DetectorModel<float>& model, int n_images, int warmup, int repeats = 3);

}  // namespace grsn
