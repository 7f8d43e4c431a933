#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "trainer/trainer.hpp"

namespace nlimb::harness {

// One JSON object per line; doubles written with 17 significant digits so
// they read back bit-exact.
std::string metrics_to_line(const train::IterationMetrics& m);
train::IterationMetrics metrics_from_line(const std::string& line);  // throws ParseError (column only)

class MetricsWriter {
 public:
  // Appends to `path`, creating it if needed.
  explicit MetricsWriter(const std::string& path);
  void write(const train::IterationMetrics& m);

 private:
  std::ofstream out_;
};

struct MetricsLog {
  std::vector<train::IterationMetrics> records;
  std::vector<std::string> warnings;  // e.g. a torn final line that was dropped
};

// A malformed final line without a newline is treated as a torn write and
// dropped with a warning; any other malformed line fails with its line number.
MetricsLog read_metrics(const std::string& path);

// Keeps the first `records` complete lines (used when resuming from a checkpoint).
void truncate_metrics(const std::string& path, std::size_t records);

}  // namespace nlimb::harness
