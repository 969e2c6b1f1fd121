#include "grsn/data.hpp"

#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "grsn/errors.hpp"
#include "grsn/rng.hpp"
#include "grsn/threading.hpp"

namespace grsn {

namespace {

constexpr char kMagic[4] = {'G', 'R', 'S', 'D'};
constexpr std::uint32_t kVersion = 1;

enum ShapeType { kSquare, kCircle, kTriangle };

struct PlacedShape {
  ShapeType type = kSquare;
  double cx = 0, cy = 0;  // center, px
  double w = 0, h = 0;    // bounding box extents, px
  std::array<float, 3> color{};
};

Box shape_box(const PlacedShape& s) {
  return {static_cast<float>(s.cx - s.w / 2), static_cast<float>(s.cy - s.h / 2),
          static_cast<float>(s.cx + s.w / 2), static_cast<float>(s.cy + s.h / 2)};
}

int fine_cell(const PlacedShape& s, const GenSpec& spec) {
  const int g = spec.image_size / spec.fine_stride;
  const int cx = std::min(g - 1, static_cast<int>(s.cx / spec.fine_stride));
  const int cy = std::min(g - 1, static_cast<int>(s.cy / spec.fine_stride));
  return cy * g + cx;
}

std::array<float, 3> draw_color(Rng& rng, const std::array<float, 3>& bg) {
  std::array<float, 3> c{};
  for (int attempt = 0; attempt < 16; ++attempt) {
    float dist = 0.f;
    for (int i = 0; i < 3; ++i) {
      c[static_cast<std::size_t>(i)] = static_cast<float>(rng.uniform());
      dist = std::max(dist, std::abs(c[static_cast<std::size_t>(i)] - bg[static_cast<std::size_t>(i)]));
    }
    if (dist >= 0.25f) break;
  }
  return c;
}

bool overlaps_existing(const PlacedShape& cand, const std::vector<PlacedShape>& placed, double max_iou) {
  const Box cb = shape_box(cand);
  for (const auto& p : placed) {
    if (iou(cb, shape_box(p)) > max_iou) return true;
  }
  return false;
}

bool cell_free(const PlacedShape& cand, const std::vector<PlacedShape>& placed, const GenSpec& spec) {
  const int cell = fine_cell(cand, spec);
  for (const auto& p : placed) {
    if (fine_cell(p, spec) == cell) return false;
  }
  return true;
}

// Samples a center uniformly such that the shape's box keeps a half-pixel
// margin from the image border.
bool sample_center(Rng& rng, double w, double h, const GenSpec& spec, double& cx, double& cy) {
  const double mx = w / 2 + 0.5, my = h / 2 + 0.5;
  if (mx * 2 >= spec.image_size || my * 2 >= spec.image_size) return false;
  cx = rng.uniform(mx, spec.image_size - mx);
  cy = rng.uniform(my, spec.image_size - my);
  return true;
}

// Places a shape by rejection sampling against cell uniqueness and the
// box-overlap cap.  Returns false if no placement was found.
bool place_free(Rng& rng, PlacedShape& s, const std::vector<PlacedShape>& placed, const GenSpec& spec) {
  for (int attempt = 0; attempt < 40; ++attempt) {
    if (!sample_center(rng, s.w, s.h, spec, s.cx, s.cy)) return false;
    if (!cell_free(s, placed, spec)) continue;
    if (overlaps_existing(s, placed, spec.max_box_overlap)) continue;
    return true;
  }
  return false;
}

int chebyshev(int cell_a, int cell_b, int grid_w) {
  const int ax = cell_a % grid_w, ay = cell_a / grid_w;
  const int bx = cell_b % grid_w, by = cell_b / grid_w;
  return std::max(std::abs(ax - bx), std::abs(ay - by));
}

// Cells where a circle of radius r can sit while honoring the relational
// distance floor to every triangle, cell uniqueness, and the image border.
std::vector<int> deciding_circle_cells(double r, const std::vector<PlacedShape>& placed,
                                       const std::vector<int>& triangle_cells, const GenSpec& spec) {
  const int g = spec.image_size / spec.fine_stride;
  std::vector<int> candidates;
  for (int cell = 0; cell < g * g; ++cell) {
    bool far_enough = true;
    for (int tc : triangle_cells) {
      if (chebyshev(cell, tc, g) < spec.chebyshev_floor) {
        far_enough = false;
        break;
      }
    }
    if (!far_enough) continue;
    bool taken = false;
    for (const auto& p : placed) taken = taken || fine_cell(p, spec) == cell;
    if (taken) continue;
    const double lo_x = std::max(static_cast<double>((cell % g) * spec.fine_stride), r + 0.5);
    const double hi_x = std::min(static_cast<double>((cell % g + 1) * spec.fine_stride), spec.image_size - r - 0.5);
    const double lo_y = std::max(static_cast<double>((cell / g) * spec.fine_stride), r + 0.5);
    const double hi_y = std::min(static_cast<double>((cell / g + 1) * spec.fine_stride), spec.image_size - r - 0.5);
    if (lo_x >= hi_x || lo_y >= hi_y) continue;
    candidates.push_back(cell);
  }
  return candidates;
}

void rasterize(const PlacedShape& s, std::vector<float>& image, int size) {
  const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.w / 2)));
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(s.cx + s.w / 2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.h / 2)));
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(s.cy + s.h / 2)));
  const double top = s.cy - s.h / 2;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      switch (s.type) {
        case kSquare:
          inside = std::abs(px - s.cx) <= s.w / 2 && std::abs(py - s.cy) <= s.h / 2;
          break;
        case kCircle: {
          const double r = s.w / 2;
          inside = (px - s.cx) * (px - s.cx) + (py - s.cy) * (py - s.cy) <= r * r;
          break;
        }
        case kTriangle: {
          // Filled isosceles triangle, apex up.
          const double t = (py - top) / s.h;
          inside = t >= 0.0 && t <= 1.0 && std::abs(px - s.cx) <= t * s.w / 2;
          break;
        }
      }
      if (!inside) continue;
      for (int c = 0; c < 3; ++c)
        image[(static_cast<std::size_t>(c) * size + y) * size + x] = s.color[static_cast<std::size_t>(c)];
    }
  }
}

Scenario make_scene(std::uint64_t scene_seed, const GenSpec& spec, bool val_split) {
  Rng rng(scene_seed);
  const int size = spec.image_size;

  for (int attempt = 0; attempt < spec.max_scene_retries; ++attempt) {
    std::array<float, 3> bg{};
    for (auto& v : bg) v = static_cast<float>(rng.uniform());

    std::vector<PlacedShape> placed;
    const bool has_triangle = rng.bernoulli(spec.p_triangle_scene);
    bool failed = false;

    std::vector<int> triangle_cells;
    if (has_triangle) {
      const int n_tri = 1 + (rng.bernoulli(spec.p_second_triangle) ? 1 : 0);
      for (int i = 0; i < n_tri && !failed; ++i) {
        PlacedShape t;
        t.type = kTriangle;
        t.w = rng.uniform(10.0, 18.0);
        t.h = rng.uniform(10.0, 18.0);
        t.color = draw_color(rng, bg);
        if (!place_free(rng, t, placed, spec)) {
          failed = true;
          break;
        }
        placed.push_back(t);
        triangle_cells.push_back(fine_cell(t, spec));
      }
      if (failed) continue;

      // The deciding circle.  Feasibility is established before the coin is
      // tossed so retries cannot skew triangle placement between the two
      // label outcomes.  Circles near triangles stay in the small size tier.
      const double r = rng.uniform(5.0, 9.0);
      auto candidates = deciding_circle_cells(r, placed, triangle_cells, spec);
      if (candidates.empty()) continue;
      const bool with_circle = rng.bernoulli(spec.p_circle_given_triangle);
      if (with_circle) {
        const int g = size / spec.fine_stride;
        bool ok = false;
        for (int tries = 0; tries < 10 && !ok; ++tries) {
          const int cell = candidates[static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
          PlacedShape c;
          c.type = kCircle;
          c.w = c.h = 2 * r;
          const double lo_x = std::max(static_cast<double>((cell % g) * spec.fine_stride), r + 0.5);
          const double hi_x = std::min(static_cast<double>((cell % g + 1) * spec.fine_stride), size - r - 0.5);
          const double lo_y = std::max(static_cast<double>((cell / g) * spec.fine_stride), r + 0.5);
          const double hi_y = std::min(static_cast<double>((cell / g + 1) * spec.fine_stride), size - r - 0.5);
          c.cx = rng.uniform(lo_x, hi_x);
          c.cy = rng.uniform(lo_y, hi_y);
          c.color = draw_color(rng, bg);
          if (overlaps_existing(c, placed, spec.max_box_overlap)) continue;
          placed.push_back(c);
          ok = true;
        }
        if (!ok) continue;
      }

      // Context clutter in triangle scenes is squares only, so the deciding
      // circle is the single relational difference between the two labels.
      const int n_extra = static_cast<int>(rng.uniform_int(0, 2));
      for (int i = 0; i < n_extra && static_cast<int>(placed.size()) < spec.max_objects; ++i) {
        PlacedShape sq;
        sq.type = kSquare;
        const bool large = rng.bernoulli(0.5);
        sq.w = sq.h = large ? rng.uniform(28.0, 44.0) : rng.uniform(10.0, 18.0);
        sq.color = draw_color(rng, bg);
        if (place_free(rng, sq, placed, spec)) placed.push_back(sq);
      }
    } else {
      const int n_objects = 1 + static_cast<int>(rng.uniform_int(0, 3));
      for (int i = 0; i < n_objects && static_cast<int>(placed.size()) < spec.max_objects; ++i) {
        PlacedShape s;
        s.type = rng.bernoulli(0.5) ? kCircle : kSquare;
        const bool large = rng.bernoulli(0.5);
        const double extent = large ? rng.uniform(28.0, 44.0) : rng.uniform(10.0, 18.0);
        s.w = s.h = extent;
        s.color = draw_color(rng, bg);
        if (place_free(rng, s, placed, spec)) placed.push_back(s);
      }
      if (placed.empty()) continue;
    }

    bool any_circle = false;
    for (const auto& p : placed) any_circle = any_circle || p.type == kCircle;

    Scenario sc;
    sc.seed = scene_seed;
    sc.val_split = val_split;
    sc.image_size = size;
    sc.channels = 3;
    sc.image.assign(static_cast<std::size_t>(3) * size * size, 0.f);
    for (int c = 0; c < 3; ++c)
      std::fill(sc.image.begin() + static_cast<std::size_t>(c) * size * size,
                sc.image.begin() + static_cast<std::size_t>(c + 1) * size * size, bg[static_cast<std::size_t>(c)]);
    for (const auto& p : placed) {
      rasterize(p, sc.image, size);
      ObjectLabel obj;
      obj.box = shape_box(p);
      switch (p.type) {
        case kSquare: obj.class_id = kClassSquare; break;
        case kCircle: obj.class_id = kClassCircle; break;
        case kTriangle: obj.class_id = any_circle ? kClassTriangleA : kClassTriangleB; break;
      }
      sc.objects.push_back(obj);
    }
    for (auto& v : sc.image) {
      v = std::clamp(v + static_cast<float>(rng.normal(0.0, spec.noise_sigma)), 0.f, 1.f);
    }
    return sc;
  }
  throw FormatError("generation: no valid placement after " + std::to_string(spec.max_scene_retries) +
                    " scene retries (seed " + std::to_string(scene_seed) + ")");
}

// --- binary IO helpers (explicit little-endian) ---

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw FormatError("dataset: truncated reading " + std::string(what) + " at byte " + std::to_string(pos));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

}  // namespace

std::vector<Scenario> generate(std::uint64_t seed, int n, const GenSpec& spec, bool val_split,
                               std::uint64_t index_offset) {
  if (n <= 0) throw UsageError("generate: scenario count must be positive, got " + std::to_string(n));
  if (spec.image_size % spec.fine_stride != 0) {
    throw UsageError("generate: image size not divisible by the finest stride");
  }
  std::vector<Scenario> scenes(static_cast<std::size_t>(n));
  const int nt = threading::thread_cap();
  // Exceptions may not escape the parallel region; carry the first one out.
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16) num_threads(nt) if (nt > 1)
  for (int i = 0; i < n; ++i) {
    try {
      const std::uint64_t scene_seed = splitmix64(splitmix64(seed) + index_offset + static_cast<std::uint64_t>(i));
      scenes[static_cast<std::size_t>(i)] = make_scene(scene_seed, spec, val_split);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return scenes;
}

std::vector<Scenario> generate_dataset(std::uint64_t seed, int n_train, int n_val, const GenSpec& spec) {
  if (n_val < 0) throw UsageError("generate_dataset: negative validation count");
  auto scenes = generate(seed, n_train, spec, false, 0);
  if (n_val > 0) {
    auto val = generate(seed, n_val, spec, true, static_cast<std::uint64_t>(n_train));
    scenes.insert(scenes.end(), val.begin(), val.end());
  }
  return scenes;
}

void save_dataset(const std::string& path, const std::vector<Scenario>& scenes) {
  const int image_size = scenes.empty() ? 64 : scenes.front().image_size;
  const int channels = scenes.empty() ? 3 : scenes.front().channels;
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(image_size));
  put_u32(buf, static_cast<std::uint32_t>(channels));
  put_u64(buf, scenes.size());
  for (const auto& sc : scenes) {
    if (sc.image_size != image_size || sc.channels != channels) {
      throw UsageError("save_dataset: scenarios with mixed image geometry");
    }
    put_u64(buf, sc.seed);
    buf.push_back(sc.val_split ? 1 : 0);
    put_u32(buf, static_cast<std::uint32_t>(sc.objects.size()));
    for (const auto& obj : sc.objects) {
      put_u32(buf, static_cast<std::uint32_t>(obj.class_id));
      put_f32(buf, obj.box.x_min);
      put_f32(buf, obj.box.y_min);
      put_f32(buf, obj.box.x_max);
      put_f32(buf, obj.box.y_max);
    }
    for (float v : sc.image) put_f32(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("save_dataset: cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("save_dataset: write failed for '" + path + "'");
}

std::vector<Scenario> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_dataset: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("dataset: bad magic at byte 0");
  r.pos = 4;
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw FormatError("dataset: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  }
  const std::uint32_t image_size = r.u32("image size");
  const std::uint32_t channels = r.u32("channel count");
  if (image_size < 8 || image_size > 4096 || channels < 1 || channels > 16) {
    throw FormatError("dataset: implausible geometry " + std::to_string(channels) + "x" +
                      std::to_string(image_size) + " at byte 8");
  }
  const std::uint64_t count = r.u64("scenario count");
  std::vector<Scenario> scenes;
  scenes.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Scenario sc;
    sc.image_size = static_cast<int>(image_size);
    sc.channels = static_cast<int>(channels);
    sc.seed = r.u64("scenario seed");
    sc.val_split = r.u8("split flag") != 0;
    const std::uint32_t n_objects = r.u32("object count");
    if (n_objects > 1000) {
      throw FormatError("dataset: implausible object count " + std::to_string(n_objects) + " at byte " +
                        std::to_string(r.pos - 4));
    }
    sc.objects.resize(n_objects);
    for (auto& obj : sc.objects) {
      obj.class_id = static_cast<int>(r.u32("object class"));
      obj.box.x_min = r.f32("box x_min");
      obj.box.y_min = r.f32("box y_min");
      obj.box.x_max = r.f32("box x_max");
      obj.box.y_max = r.f32("box y_max");
    }
    const std::size_t pixels = static_cast<std::size_t>(channels) * image_size * image_size;
    sc.image.resize(pixels);
    for (auto& v : sc.image) v = r.f32("image payload");
    scenes.push_back(std::move(sc));
  }
  if (r.pos != buf.size()) {
    throw FormatError("dataset: " + std::to_string(buf.size() - r.pos) + " trailing bytes at byte " +
                      std::to_string(r.pos));
  }
  return scenes;
}

}  // namespace grsn
