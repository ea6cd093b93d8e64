#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bofi/bench.hpp"
#include "bofi/error.hpp"

namespace bofi {

using ojson = nlohmann::ordered_json;

std::string report_json(std::span<const BenchReport> reports) {
  ojson arr = ojson::array();
  for (const auto& r : reports) {
    ojson j;
    j["manner"] = r.manner;
    j["metrics"] = {{"bleu1", r.metrics.bleu1}, {"bleu4", r.metrics.bleu4}, {"cider", r.metrics.cider}};
    j["latency_ns"] = {{"mean", r.latency_mean_ns}, {"median", r.latency_median_ns}};
    j["model_calls"] = {{"bounding", r.calls_bounding}, {"filling", r.calls_filling}};
    j["speedup_wall"] = r.speedup_wall;
    j["speedup_calls"] = r.speedup_calls;
    j["hardware"] = r.hardware;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<BenchReport> parse_report_json(const std::string& text) {
  std::vector<BenchReport> out;
  try {
    for (const auto& j : ojson::parse(text)) {
      BenchReport r;
      r.manner = j.at("manner").get<std::string>();
      r.metrics.bleu1 = j.at("metrics").at("bleu1").get<double>();
      r.metrics.bleu4 = j.at("metrics").at("bleu4").get<double>();
      r.metrics.cider = j.at("metrics").at("cider").get<double>();
      r.latency_mean_ns = j.at("latency_ns").at("mean").get<std::int64_t>();
      r.latency_median_ns = j.at("latency_ns").at("median").get<std::int64_t>();
      r.calls_bounding = j.at("model_calls").at("bounding").get<double>();
      r.calls_filling = j.at("model_calls").at("filling").get<double>();
      r.speedup_wall = j.at("speedup_wall").get<double>();
      r.speedup_calls = j.at("speedup_calls").get<double>();
      r.hardware = j.at("hardware").get<std::string>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return out;
}

std::string report_text(std::span<const BenchReport> reports) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-6s %7s %7s %8s %14s %14s %9s %9s %9s %9s\n", "manner", "bleu1", "bleu4",
                "cider", "lat_mean_ns", "lat_median_ns", "calls_bd", "calls_fl", "spd_wall", "spd_call");
  out << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-6s %7.4f %7.4f %8.4f %14lld %14lld %9.3f %9.3f %9.3f %9.3f\n",
                  r.manner.c_str(), r.metrics.bleu1, r.metrics.bleu4, r.metrics.cider,
                  static_cast<long long>(r.latency_mean_ns), static_cast<long long>(r.latency_median_ns),
                  r.calls_bounding, r.calls_filling, r.speedup_wall, r.speedup_calls);
    out << line;
  }
  if (!reports.empty()) out << "hardware: " << reports.front().hardware << '\n';
  return out.str();
}

void emit_report(std::span<const BenchReport> reports, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report " + path.string());
  out << (format == ReportFormat::Json ? report_json(reports) : report_text(reports));
  if (!out) throw DataError("failed writing report " + path.string());
}

}  // namespace bofi
