#include "simulator/terrain.hpp"

#include <algorithm>

#include <json.hpp>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace nlimb::sim {

const char* to_string(TerrainKind k) {
  switch (k) {
    case TerrainKind::flat: return "flat";
    case TerrainKind::gaps: return "gaps";
    case TerrainKind::walls: return "walls";
  }
  return "?";
}

std::optional<TerrainKind> terrain_kind_from_string(const std::string& s) {
  if (s == "flat") return TerrainKind::flat;
  if (s == "gaps") return TerrainKind::gaps;
  if (s == "walls") return TerrainKind::walls;
  return std::nullopt;
}

TerrainSpec generate_terrain(TerrainKind kind, std::uint64_t seed, const TerrainConfig& cfg) {
  if (!(cfg.course_start <= -cfg.spawn_half_width && cfg.course_end > cfg.spawn_half_width)) {
    throw ConfigError("terrain course must contain the spawn region");
  }
  if (!(cfg.gap_min > 0 && cfg.gap_min <= cfg.gap_max && cfg.spacing_min > 0 && cfg.spacing_min <= cfg.spacing_max &&
        cfg.wall_min >= 0 && cfg.wall_min <= cfg.wall_max && cfg.wall_thickness > 0)) {
    throw ConfigError("terrain ranges must be positive and ordered");
  }
  TerrainSpec t;
  t.kind = kind;
  t.seed = seed;
  t.gap_depth = cfg.gap_depth;
  Rng rng(derive_seed(seed, 0x7e88a1));
  switch (kind) {
    case TerrainKind::flat:
      t.segments.push_back({cfg.course_start, cfg.course_end, 0.0});
      break;
    case TerrainKind::gaps: {
      double x0 = cfg.course_start;
      double pos = cfg.spawn_half_width + rng.uniform(cfg.spacing_min, cfg.spacing_max) - cfg.spacing_min;
      for (;;) {
        const double width = rng.uniform(cfg.gap_min, cfg.gap_max);
        if (pos + width >= cfg.course_end) break;
        t.segments.push_back({x0, pos, 0.0});
        x0 = pos + width;
        pos = x0 + rng.uniform(cfg.spacing_min, cfg.spacing_max);
      }
      t.segments.push_back({x0, cfg.course_end, 0.0});
      break;
    }
    case TerrainKind::walls: {
      t.segments.push_back({cfg.course_start, cfg.course_end, 0.0});
      double pos = cfg.spawn_half_width + rng.uniform(cfg.spacing_min, cfg.spacing_max) - cfg.spacing_min;
      while (pos + cfg.wall_thickness < cfg.course_end) {
        t.walls.push_back({pos, cfg.wall_thickness, rng.uniform(cfg.wall_min, cfg.wall_max)});
        pos += cfg.wall_thickness + rng.uniform(cfg.spacing_min, cfg.spacing_max);
      }
      break;
    }
  }
  return t;
}

void validate_terrain(const TerrainSpec& t) {
  for (std::size_t i = 0; i < t.segments.size(); ++i) {
    const auto& s = t.segments[i];
    if (!(s.x0 < s.x1)) throw InvalidArgument("terrain segment " + std::to_string(i) + " is empty or reversed");
    if (i > 0 && s.x0 < t.segments[i - 1].x1) throw InvalidArgument("terrain segments overlap at " + std::to_string(i));
  }
  for (std::size_t i = 0; i < t.walls.size(); ++i) {
    if (!(t.walls[i].thickness > 0 && t.walls[i].height >= 0)) throw InvalidArgument("bad wall " + std::to_string(i));
    if (i > 0 && t.walls[i].x < t.walls[i - 1].x + t.walls[i - 1].thickness) {
      throw InvalidArgument("walls overlap at " + std::to_string(i));
    }
  }
}

double ground_height(const TerrainSpec& t, double x) {
  auto it = std::upper_bound(t.segments.begin(), t.segments.end(), x,
                             [](double v, const GroundSegment& s) { return v < s.x1; });
  if (it == t.segments.end() || x < it->x0) return -t.gap_depth;
  double h = it->height;
  auto w = std::upper_bound(t.walls.begin(), t.walls.end(), x,
                            [](double v, const Wall& wall) { return v < wall.x + wall.thickness; });
  if (w != t.walls.end() && x >= w->x) h += w->height;
  return h;
}

std::vector<Box> terrain_boxes(const TerrainSpec& t) {
  constexpr double kDepth = 10.0;
  std::vector<Box> boxes;
  for (const auto& s : t.segments) boxes.push_back({s.x0, s.x1, s.height - kDepth, s.height});
  for (const auto& w : t.walls) {
    const double base = ground_height(TerrainSpec{t.kind, t.seed, t.segments, {}, t.gap_depth}, w.x);
    boxes.push_back({w.x, w.x + w.thickness, base - kDepth, base + w.height});
  }
  std::sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) { return a.x0 < b.x0; });
  return boxes;
}

std::string terrain_to_json(const TerrainSpec& t) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(t.kind);
  j["seed"] = t.seed;
  j["gap_depth"] = t.gap_depth;
  j["segments"] = nlohmann::ordered_json::array();
  for (const auto& s : t.segments) j["segments"].push_back({{"x0", s.x0}, {"x1", s.x1}, {"height", s.height}});
  j["walls"] = nlohmann::ordered_json::array();
  for (const auto& w : t.walls) j["walls"].push_back({{"x", w.x}, {"thickness", w.thickness}, {"height", w.height}});
  return j.dump(2) + "\n";
}

TerrainSpec terrain_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TerrainSpec t;
    auto kind = terrain_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) throw InvalidArgument("unknown terrain kind");
    t.kind = *kind;
    t.seed = j.at("seed").get<std::uint64_t>();
    t.gap_depth = j.at("gap_depth").get<double>();
    for (const auto& s : j.at("segments")) {
      t.segments.push_back({s.at("x0").get<double>(), s.at("x1").get<double>(), s.at("height").get<double>()});
    }
    for (const auto& w : j.at("walls")) {
      t.walls.push_back({w.at("x").get<double>(), w.at("thickness").get<double>(), w.at("height").get<double>()});
    }
    validate_terrain(t);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("terrain document: ") + e.what());
  }
}

}  // namespace nlimb::sim
