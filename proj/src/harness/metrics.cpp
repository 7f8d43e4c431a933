#include "harness/metrics.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "common/error.hpp"
#include "json.hpp"

namespace nlimb::harness {

using nlohmann::json;

namespace {

std::string num(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "\"nan\"" : (v > 0 ? "\"inf\"" : "\"-inf\"");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double read_num(const json& j, const char* key) {
  const json& v = j.at(key);
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw std::runtime_error(std::string("field '") + key + "' is not a number");
  }
  return v.get<double>();
}

}  // namespace

std::string metrics_to_line(const train::IterationMetrics& m) {
  std::ostringstream os;
  os << "{\"iteration\":" << m.iteration << ",\"T\":" << m.T << ",\"mean_return\":" << num(m.mean_return)
     << ",\"std_return\":" << num(m.std_return) << ",\"phi_entropy\":" << num(m.phi_entropy)
     << ",\"grad_norm_theta\":" << num(m.grad_norm_theta) << ",\"grad_norm_phi\":" << num(m.grad_norm_phi)
     << ",\"phi_updated\":" << (m.phi_updated ? "true" : "false") << ",\"policy_loss\":" << num(m.policy_loss)
     << ",\"value_loss\":" << num(m.value_loss) << ",\"entropy\":" << num(m.entropy)
     << ",\"approx_kl\":" << num(m.approx_kl) << ",\"clip_fraction\":" << num(m.clip_fraction)
     << ",\"ppo_aborted\":" << (m.ppo_aborted ? "true" : "false") << ",\"flagged_designs\":" << m.flagged_designs
     << ",\"divergences\":" << m.divergences << ",\"wall_clock\":" << num(m.wall_clock);
  if (!m.histogram.empty()) {
    os << ",\"histogram\":{";
    bool first = true;
    for (const auto& [k, n] : m.histogram) {
      os << (first ? "" : ",") << json(k).dump() << ":" << n;
      first = false;
    }
    os << "}";
  }
  os << "}";
  return os.str();
}

train::IterationMetrics metrics_from_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(e.what(), 1, static_cast<int>(e.byte));
  }
  train::IterationMetrics m;
  try {
    m.iteration = j.at("iteration").get<std::uint64_t>();
    m.T = j.at("T").get<std::uint64_t>();
    m.mean_return = read_num(j, "mean_return");
    m.std_return = read_num(j, "std_return");
    m.phi_entropy = read_num(j, "phi_entropy");
    m.grad_norm_theta = read_num(j, "grad_norm_theta");
    m.grad_norm_phi = read_num(j, "grad_norm_phi");
    m.phi_updated = j.at("phi_updated").get<bool>();
    m.policy_loss = read_num(j, "policy_loss");
    m.value_loss = read_num(j, "value_loss");
    m.entropy = read_num(j, "entropy");
    m.approx_kl = read_num(j, "approx_kl");
    m.clip_fraction = read_num(j, "clip_fraction");
    m.ppo_aborted = j.at("ppo_aborted").get<bool>();
    m.flagged_designs = j.at("flagged_designs").get<int>();
    m.divergences = j.at("divergences").get<int>();
    m.wall_clock = read_num(j, "wall_clock");
    if (j.contains("histogram")) {
      for (const auto& [k, v] : j.at("histogram").items()) m.histogram[k] = v.get<int>();
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad metrics record: ") + e.what(), 1, 1);
  } catch (const std::runtime_error& e) {
    throw ParseError(std::string("bad metrics record: ") + e.what(), 1, 1);
  }
  return m;
}

MetricsWriter::MetricsWriter(const std::string& path) : out_(path, std::ios::app | std::ios::binary) {
  if (!out_) throw IoError("cannot open metrics log '" + path + "' for appending");
}

void MetricsWriter::write(const train::IterationMetrics& m) {
  out_ << metrics_to_line(m) << '\n';
  out_.flush();
  if (!out_) throw IoError("metrics write failed");
}

MetricsLog read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open metrics log '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  MetricsLog log;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    const std::size_t nl = text.find('\n', pos);
    const bool last = nl == std::string::npos;
    const std::string line = text.substr(pos, last ? std::string::npos : nl - pos);
    pos = last ? text.size() : nl + 1;
    if (line.empty()) continue;
    try {
      log.records.push_back(metrics_from_line(line));
    } catch (const ParseError& e) {
      if (last) {
        log.warnings.push_back(path + ":" + std::to_string(line_no) + ": dropped torn final record");
        break;
      }
      throw ParseError("corrupt metrics record: " + e.message(), line_no, e.column());
    }
  }
  return log;
}

void truncate_metrics(const std::string& path, std::size_t records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return;
  std::string keep, line;
  std::size_t n = 0;
  while (n < records && std::getline(in, line)) {
    if (line.empty()) continue;
    keep += line + '\n';
    ++n;
  }
  in.close();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << keep;
    if (!out) throw IoError("cannot rewrite metrics log '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace nlimb::harness
