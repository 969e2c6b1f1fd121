#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "grsn/detector.hpp"

namespace grsn {

// Relational-shapes dataset.  Squares and circles are context-free classes;
// a triangle's class depends on whether any circle exists anywhere in the
// image (class triangle_a) or not (triangle_b).  The generator keeps every
// circle at least `chebyshev_floor` cells away from every triangle at the
// finest detection scale, so no local patch around a triangle can reveal its
// class - resolving it requires relating distant regions.

inline constexpr std::array<const char*, 4> kClassNames = {"square", "circle", "triangle_a", "triangle_b"};
inline constexpr int kClassSquare = 0;
inline constexpr int kClassCircle = 1;
inline constexpr int kClassTriangleA = 2;
inline constexpr int kClassTriangleB = 3;

struct GenSpec {
  int image_size = 64;
  int fine_stride = 8;        // finest detection scale; cell uniqueness is enforced here
  int chebyshev_floor = 3;    // min circle-triangle cell distance (validity condition)
  double noise_sigma = 0.02;
  int max_objects = 5;
  double p_triangle_scene = 0.7;    // scenes containing triangles
  double p_second_triangle = 0.5;
  double p_circle_given_triangle = 0.5;  // the relational coin
  double max_box_overlap = 0.2;     // IoU cap between rendered boxes
  int max_scene_retries = 20;
};

// Deterministic generation: scenario i of a dataset depends only on
// (seed, i), so any prefix of a dataset is stable under n changes.
std::vector<Scenario> generate(std::uint64_t seed, int n, const GenSpec& spec, bool val_split = false,
                               std::uint64_t index_offset = 0);

// Train scenes followed by val scenes, with split flags set.
std::vector<Scenario> generate_dataset(std::uint64_t seed, int n_train, int n_val, const GenSpec& spec);

void save_dataset(const std::string& path, const std::vector<Scenario>& scenes);
std::vector<Scenario> load_dataset(const std::string& path);

}  // namespace grsn
