#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "ctrack/training.hpp"

namespace ctrack {

/// One JSON object per line with named fields.
std::string metrics_to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const std::string& line);

/// Appends and flushes one line per record, so a crashed run leaves a
/// parseable prefix.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void write(const MetricsRecord& r);

 private:
  std::ofstream out_;
};

/// Reads every complete line; a trailing partial line is ignored.
std::vector<MetricsRecord> read_metrics(const std::string& path);

}  // namespace ctrack
