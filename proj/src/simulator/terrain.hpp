#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nlimb::sim {

enum class TerrainKind { flat, gaps, walls };

const char* to_string(TerrainKind k);
std::optional<TerrainKind> terrain_kind_from_string(const std::string& s);

struct GroundSegment {
  double x0 = 0.0;
  double x1 = 0.0;
  double height = 0.0;
  friend bool operator==(const GroundSegment&, const GroundSegment&) = default;
};

struct Wall {
  double x = 0.0;  // left face
  double thickness = 0.0;
  double height = 0.0;  // above the ground it stands on
  friend bool operator==(const Wall&, const Wall&) = default;
};

struct TerrainConfig {
  double course_start = -5.0;
  double course_end = 100.0;
  double spawn_half_width = 1.0;  // [-w, w] is always flat solid ground
  double gap_min = 0.1;
  double gap_max = 0.5;
  double spacing_min = 1.5;
  double spacing_max = 3.0;
  double wall_min = 0.1;
  double wall_max = 0.4;
  double wall_thickness = 0.2;
  double gap_depth = 1.0;  // height-field value reported inside a gap is -gap_depth
  friend bool operator==(const TerrainConfig&, const TerrainConfig&) = default;
};

// Solid ground pieces in x order; missing intervals are bottomless gaps.
struct TerrainSpec {
  TerrainKind kind = TerrainKind::flat;
  std::uint64_t seed = 0;
  std::vector<GroundSegment> segments;
  std::vector<Wall> walls;
  double gap_depth = 1.0;
  friend bool operator==(const TerrainSpec&, const TerrainSpec&) = default;
};

struct Box {
  double x0, x1, z0, z1;
};

TerrainSpec generate_terrain(TerrainKind kind, std::uint64_t seed, const TerrainConfig& cfg = {});

// Top surface height at x; -gap_depth over a gap.
double ground_height(const TerrainSpec& t, double x);
// Solid boxes (ground pieces and walls) sorted by x0.
std::vector<Box> terrain_boxes(const TerrainSpec& t);
// Throws InvalidArgument if segments overlap or are out of order.
void validate_terrain(const TerrainSpec& t);

std::string terrain_to_json(const TerrainSpec& t);
TerrainSpec terrain_from_json(const std::string& text);

}  // namespace nlimb::sim
