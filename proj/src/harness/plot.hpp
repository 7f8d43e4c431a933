#pragma once

#include <limits>
#include <string>
#include <vector>

#include "trainer/trainer.hpp"

namespace nlimb::harness {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> spread;  // optional +-band, same length as y
};

struct ChartSpec {
  std::string title, x_label, y_label;
  double y_reference = std::numeric_limits<double>::quiet_NaN();  // dashed horizontal line when finite
};

// Static SVG line chart. Non-finite points are skipped.
std::string line_chart_svg(const ChartSpec& spec, const std::vector<Series>& series);

struct RunMetrics {
  std::string label;
  std::vector<train::IterationMetrics> records;
};

// Mean return of sampled designs with a +-std band against env steps.
// Throws InvalidArgument when a run has no iterations.
std::string reward_svg(const std::vector<RunMetrics>& runs);

struct GeneralizationCurve {
  std::string label;
  std::vector<double> T;
  std::vector<double> fraction;
};

std::string generalization_svg(const std::vector<GeneralizationCurve>& curves);

}  // namespace nlimb::harness
