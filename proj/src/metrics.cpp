#include "ctrack/metrics.hpp"

#include <json.hpp>
#include <sstream>
#include <stdexcept>

namespace ctrack {

std::string metrics_to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["p"] = r.p;
  j["l_track"] = r.l_track;
  j["l_pred"] = r.l_pred;
  j["l_feat"] = r.l_feat;
  j["l_total"] = r.l_total;
  j["eval_accuracy"] = r.eval_accuracy;
  j["eval_offset_error"] = r.eval_offset_error;
  j["wall_seconds"] = r.wall_seconds;
  return j.dump();
}

MetricsRecord metrics_from_json(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.p = j.at("p").get<double>();
  r.l_track = j.at("l_track").get<double>();
  r.l_pred = j.at("l_pred").get<double>();
  r.l_feat = j.at("l_feat").get<double>();
  r.l_total = j.at("l_total").get<double>();
  r.eval_accuracy = j.at("eval_accuracy").get<double>();
  r.eval_offset_error = j.at("eval_offset_error").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

MetricsWriter::MetricsWriter(const std::string& path) : out_(path, std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot write metrics file " + path);
}

void MetricsWriter::write(const MetricsRecord& r) {
  out_ << metrics_to_json(r) << '\n';
  out_.flush();
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read metrics file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<MetricsRecord> out;
  std::size_t pos = 0;
  for (;;) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;
    out.push_back(metrics_from_json(text.substr(pos, nl - pos)));
    pos = nl + 1;
  }
  return out;
}

}  // namespace ctrack
