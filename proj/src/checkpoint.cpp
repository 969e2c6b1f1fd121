#include "grsn/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "grsn/errors.hpp"
#include "json.hpp"

namespace grsn {

namespace {

constexpr char kMagic[4] = {'G', 'R', 'S', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw FormatError(std::string("checkpoint: truncated while reading ") + what + " at byte " +
                        std::to_string(pos));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

std::int64_t record_numel(const TensorRecord& t) {
  std::int64_t n = 1;
  for (int d : t.shape) n *= d;
  return n;
}

}  // namespace

Checkpoint make_checkpoint(const DetectorModel<float>& model, AdamOptimizer<float>* opt,
                           std::uint64_t config_hash) {
  Checkpoint ck;
  ck.variant = variant_name(model.variant());
  ck.config_hash = config_hash;
  ck.model_seed = model.seed();
  ck.step_count = opt ? opt->step_count() : 0;

  std::uint64_t offset = 0;
  auto push = [&](const std::string& name, std::vector<int> shape, const float* src, std::int64_t n) {
    TensorRecord rec;
    rec.name = name;
    rec.shape = std::move(shape);
    rec.offset = offset;
    rec.data.assign(src, src + n);
    offset += static_cast<std::uint64_t>(n);
    ck.tensors.push_back(std::move(rec));
  };

  const auto& named = model.named_params();
  for (const auto& [name, p] : named) push(name, p.shape(), p.data(), p.numel());

  if (opt) {
    // Optimizer slots are matched to names through the shared tensor nodes.
    std::unordered_map<const void*, std::string> node_name;
    for (const auto& [name, p] : named) node_name[p.node_ptr().get()] = name;
    for (std::size_t i = 0; i < opt->size(); ++i) {
      const auto it = node_name.find(opt->param(i).node_ptr().get());
      if (it == node_name.end()) {
        throw UsageError("checkpoint: optimizer holds a parameter unknown to the model");
      }
      const auto& shape = opt->param(i).shape();
      const auto n = opt->param(i).numel();
      push("opt.m." + it->second, shape, opt->first_moment(i).data(), n);
      push("opt.v." + it->second, shape, opt->second_moment(i).data(), n);
    }
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json meta;
  meta["variant"] = ck.variant;
  meta["config_hash"] = ck.config_hash;
  meta["model_seed"] = ck.model_seed;
  meta["step_count"] = ck.step_count;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& t : ck.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  }
  meta["tensors"] = manifest;
  const std::string meta_str = meta.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, ck.version);
  put_u64(out, meta_str.size());
  out += meta_str;
  for (const auto& t : ck.tensors) {
    for (float v : t.data) put_f32(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic in '" + path + "'");
  r.pos = 4;
  Checkpoint ck;
  ck.version = r.u32("version");
  if (ck.version != kVersion) {
    throw FormatError("checkpoint: version " + std::to_string(ck.version) + ", expected " +
                      std::to_string(kVersion));
  }
  const std::uint64_t meta_len = r.u64("metadata length");
  r.need(meta_len, "metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(buf.substr(r.pos, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: invalid metadata JSON: ") + e.what());
  }
  r.pos += meta_len;

  try {
    ck.variant = meta.at("variant").get<std::string>();
    ck.config_hash = meta.at("config_hash").get<std::uint64_t>();
    ck.model_seed = meta.at("model_seed").get<std::uint64_t>();
    ck.step_count = meta.at("step_count").get<long>();
    for (const auto& t : meta.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      rec.shape = t.at("shape").get<std::vector<int>>();
      rec.offset = t.at("offset").get<std::uint64_t>();
      ck.tensors.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: metadata missing field: ") + e.what());
  }

  std::uint64_t expected = 0;
  for (auto& t : ck.tensors) {
    if (t.offset != expected) {
      throw FormatError("checkpoint: tensor '" + t.name + "' offset " + std::to_string(t.offset) +
                        ", expected " + std::to_string(expected));
    }
    const std::int64_t n = record_numel(t);
    if (n < 0) throw FormatError("checkpoint: tensor '" + t.name + "' has negative extent");
    expected += static_cast<std::uint64_t>(n);
  }
  if (buf.size() - r.pos != expected * 4) {
    throw FormatError("checkpoint: payload holds " + std::to_string((buf.size() - r.pos) / 4) +
                      " values, manifest expects " + std::to_string(expected));
  }
  for (auto& t : ck.tensors) {
    const std::int64_t n = record_numel(t);
    t.data.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i)] = r.f32("payload");
  }
  return ck;
}

void restore_checkpoint(const DetectorModel<float>& model, AdamOptimizer<float>* opt,
                        const Checkpoint& ck, std::uint64_t expected_config_hash) {
  if (ck.version != kVersion) {
    throw FormatError("checkpoint: version " + std::to_string(ck.version) + ", expected " +
                      std::to_string(kVersion));
  }
  if (ck.config_hash != expected_config_hash) {
    throw FormatError("checkpoint: config hash " + std::to_string(ck.config_hash) +
                      " does not match current config hash " + std::to_string(expected_config_hash));
  }
  if (ck.variant != variant_name(model.variant())) {
    throw FormatError("checkpoint: stores variant '" + ck.variant + "', model is '" +
                      variant_name(model.variant()) + "'");
  }

  std::unordered_map<std::string, const TensorRecord*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;

  auto fetch = [&](const std::string& name, const std::vector<int>& shape) -> const TensorRecord* {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape != shape) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(shape));
    }
    return it->second;
  };

  const auto& named = model.named_params();
  for (const auto& [name, p] : named) {
    const TensorRecord* rec = fetch(name, p.shape());
    std::copy(rec->data.begin(), rec->data.end(), p.node_ptr()->value.begin());
  }

  if (opt) {
    std::unordered_map<const void*, std::string> node_name;
    for (const auto& [name, p] : named) node_name[p.node_ptr().get()] = name;
    for (std::size_t i = 0; i < opt->size(); ++i) {
      const auto it = node_name.find(opt->param(i).node_ptr().get());
      if (it == node_name.end()) {
        throw UsageError("checkpoint: optimizer holds a parameter unknown to the model");
      }
      const auto& shape = opt->param(i).shape();
      const TensorRecord* m = fetch("opt.m." + it->second, shape);
      const TensorRecord* v = fetch("opt.v." + it->second, shape);
      std::copy(m->data.begin(), m->data.end(), opt->first_moment(i).begin());
      std::copy(v->data.begin(), v->data.end(), opt->second_moment(i).begin());
    }
    opt->set_step_count(ck.step_count);
  }
}

}  // namespace grsn
