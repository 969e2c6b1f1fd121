#include "grsn/config.hpp"

#include <fstream>
#include <sstream>

#include "grsn/errors.hpp"
#include "grsn/rng.hpp"
#include "json.hpp"

namespace grsn {

namespace {

using nlohmann::json;

// Pull a field if present, enforcing its JSON type.
template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& origin) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw UsageError("config " + origin + ": field '" + key + "' has the wrong type");
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& origin,
                    const std::string& section) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* k : known) {
      if (key == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw UsageError("config " + origin + ": unknown key '" + key + "' in " + section);
    }
  }
}

json model_to_json(const ModelConfig& mc) {
  json j;
  j["image_size"] = mc.image_size;
  j["n_classes"] = mc.n_classes;
  j["backbone_channels"] = mc.backbone_channels;
  j["deep_width"] = mc.deep_width;
  j["scale_strides"] = mc.scale_strides;
  j["scale_channels"] = mc.scale_channels;
  j["priors"] = mc.priors;
  j["head_width"] = mc.head_width;
  j["mlp_mult"] = mc.mlp_mult;
  j["leaky_slope"] = mc.leaky_slope;
  j["ln_eps"] = mc.ln_eps;
  j["use_positional_encoding"] = mc.use_positional_encoding;
  j["w_obj"] = mc.w_obj;
  j["w_cls"] = mc.w_cls;
  j["w_box"] = mc.w_box;
  return j;
}

void model_from_json(const json& j, ModelConfig& mc, const std::string& origin) {
  reject_unknown(j,
                 {"image_size", "n_classes", "backbone_channels", "deep_width", "scale_strides",
                  "scale_channels", "priors", "head_width", "mlp_mult", "leaky_slope", "ln_eps",
                  "use_positional_encoding", "w_obj", "w_cls", "w_box"},
                 origin, "model");
  read_field(j, "image_size", mc.image_size, origin);
  read_field(j, "n_classes", mc.n_classes, origin);
  read_field(j, "backbone_channels", mc.backbone_channels, origin);
  read_field(j, "deep_width", mc.deep_width, origin);
  read_field(j, "scale_strides", mc.scale_strides, origin);
  read_field(j, "scale_channels", mc.scale_channels, origin);
  read_field(j, "priors", mc.priors, origin);
  read_field(j, "head_width", mc.head_width, origin);
  read_field(j, "mlp_mult", mc.mlp_mult, origin);
  read_field(j, "leaky_slope", mc.leaky_slope, origin);
  read_field(j, "ln_eps", mc.ln_eps, origin);
  read_field(j, "use_positional_encoding", mc.use_positional_encoding, origin);
  read_field(j, "w_obj", mc.w_obj, origin);
  read_field(j, "w_cls", mc.w_cls, origin);
  read_field(j, "w_box", mc.w_box, origin);
}

}  // namespace

Variant parse_variant(const std::string& name) {
  if (name == "baseline") return Variant::kBaseline;
  if (name == "reasoner1") return Variant::kReasoner1;
  if (name == "reasoner2") return Variant::kReasoner2;
  throw UsageError("unknown variant '" + name + "' (expected baseline, reasoner1 or reasoner2)");
}

void RunConfig::validate() const {
  model.validate();
  if (train.epochs < 1) throw UsageError("config: train.epochs must be positive");
  if (train.batch < 1) throw UsageError("config: train.batch must be positive");
  if (train.lr <= 0) throw UsageError("config: train.lr must be positive");
  if (eval.conf_threshold < 0 || eval.conf_threshold > 1) {
    throw UsageError("config: eval.conf_threshold must lie in [0, 1]");
  }
  if (eval.nms_iou < 0 || eval.nms_iou > 1) throw UsageError("config: eval.nms_iou must lie in [0, 1]");
  if (bench.n_images <= bench.warmup) throw UsageError("config: bench.n_images must exceed bench.warmup");
  if (bench.repeats < 1) throw UsageError("config: bench.repeats must be positive");
  if (compare_seeds.empty()) throw UsageError("config: compare.seeds must not be empty");
  if (gen.image_size != model.image_size) {
    throw UsageError("config: gen.image_size " + std::to_string(gen.image_size) +
                     " differs from model.image_size " + std::to_string(model.image_size));
  }
}

RunConfig parse_run_config_json(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError("config " + origin + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + origin + ": top level must be a JSON object");
  reject_unknown(j, {"variant", "seed", "dataset", "out_dir", "model", "train", "eval", "bench", "gen", "compare"},
                 origin, "the top level");

  RunConfig rc;
  if (j.contains("variant")) {
    std::string name;
    read_field(j, "variant", name, origin);
    rc.variant = parse_variant(name);
  }
  read_field(j, "seed", rc.seed, origin);
  read_field(j, "dataset", rc.dataset, origin);
  read_field(j, "out_dir", rc.out_dir, origin);

  if (j.contains("model")) model_from_json(j.at("model"), rc.model, origin);

  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t, {"epochs", "batch", "lr", "beta1", "beta2", "eps"}, origin, "train");
    read_field(t, "epochs", rc.train.epochs, origin);
    read_field(t, "batch", rc.train.batch, origin);
    read_field(t, "lr", rc.train.lr, origin);
    read_field(t, "beta1", rc.train.beta1, origin);
    read_field(t, "beta2", rc.train.beta2, origin);
    read_field(t, "eps", rc.train.eps, origin);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown(e, {"conf_threshold", "nms_iou"}, origin, "eval");
    read_field(e, "conf_threshold", rc.eval.conf_threshold, origin);
    read_field(e, "nms_iou", rc.eval.nms_iou, origin);
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    reject_unknown(b, {"n_images", "warmup", "repeats"}, origin, "bench");
    read_field(b, "n_images", rc.bench.n_images, origin);
    read_field(b, "warmup", rc.bench.warmup, origin);
    read_field(b, "repeats", rc.bench.repeats, origin);
  }
  if (j.contains("gen")) {
    const json& g = j.at("gen");
    reject_unknown(g,
                   {"image_size", "fine_stride", "chebyshev_floor", "noise_sigma", "max_objects",
                    "p_triangle_scene", "p_second_triangle", "p_circle_given_triangle", "max_box_overlap",
                    "max_scene_retries"},
                   origin, "gen");
    read_field(g, "image_size", rc.gen.image_size, origin);
    read_field(g, "fine_stride", rc.gen.fine_stride, origin);
    read_field(g, "chebyshev_floor", rc.gen.chebyshev_floor, origin);
    read_field(g, "noise_sigma", rc.gen.noise_sigma, origin);
    read_field(g, "max_objects", rc.gen.max_objects, origin);
    read_field(g, "p_triangle_scene", rc.gen.p_triangle_scene, origin);
    read_field(g, "p_second_triangle", rc.gen.p_second_triangle, origin);
    read_field(g, "p_circle_given_triangle", rc.gen.p_circle_given_triangle, origin);
    read_field(g, "max_box_overlap", rc.gen.max_box_overlap, origin);
    read_field(g, "max_scene_retries", rc.gen.max_scene_retries, origin);
  }
  if (j.contains("compare")) {
    const json& c = j.at("compare");
    reject_unknown(c, {"seeds"}, origin, "compare");
    read_field(c, "seeds", rc.compare_seeds, origin);
  }

  rc.train.seed = rc.seed;
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config_json(ss.str(), "'" + path + "'");
}

std::string canonical_model_json(const ModelConfig& mc) { return model_to_json(mc).dump(); }

std::uint64_t config_hash(const ModelConfig& mc) { return fnv1a64(canonical_model_json(mc)); }

std::string run_config_to_json(const RunConfig& rc) {
  json j;
  j["variant"] = variant_name(rc.variant);
  j["seed"] = rc.seed;
  j["dataset"] = rc.dataset;
  j["out_dir"] = rc.out_dir;
  j["model"] = model_to_json(rc.model);
  j["train"] = {{"epochs", rc.train.epochs}, {"batch", rc.train.batch},     {"lr", rc.train.lr},
                {"beta1", rc.train.beta1},   {"beta2", rc.train.beta2},     {"eps", rc.train.eps}};
  j["eval"] = {{"conf_threshold", rc.eval.conf_threshold}, {"nms_iou", rc.eval.nms_iou}};
  j["bench"] = {{"n_images", rc.bench.n_images}, {"warmup", rc.bench.warmup}, {"repeats", rc.bench.repeats}};
  j["gen"] = {{"image_size", rc.gen.image_size},
              {"fine_stride", rc.gen.fine_stride},
              {"chebyshev_floor", rc.gen.chebyshev_floor},
              {"noise_sigma", rc.gen.noise_sigma},
              {"max_objects", rc.gen.max_objects},
              {"p_triangle_scene", rc.gen.p_triangle_scene},
              {"p_second_triangle", rc.gen.p_second_triangle},
              {"p_circle_given_triangle", rc.gen.p_circle_given_triangle},
              {"max_box_overlap", rc.gen.max_box_overlap},
              {"max_scene_retries", rc.gen.max_scene_retries}};
  j["compare"] = {{"seeds", rc.compare_seeds}};
  return j.dump(2);
}

}  // namespace grsn
