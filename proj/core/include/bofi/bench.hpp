#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bofi/decode.hpp"
#include "bofi/metrics.hpp"
#include "bofi/train.hpp"

namespace bofi {

struct BenchOptions {
  std::vector<Manner> manners{Manner::AR, Manner::NA, Manner::SA};
  int baseline_beam = 3;  // AR rows run with this beam; it is also the baseline
  int warmup = 1;
  int iters = 3;
  /// When false no clock is read: latencies and wall speedups are reported as 0.
  bool timing = true;
  std::string hardware = "cpu, single thread, batch 1";
};

struct BenchReport {
  std::string manner;
  MetricReport metrics;
  std::int64_t latency_mean_ns = 0;
  std::int64_t latency_median_ns = 0;
  double calls_bounding = 0.0;  // mean per image
  double calls_filling = 0.0;
  double speedup_wall = 0.0;
  double speedup_calls = 0.0;
  std::string hardware;

  friend bool operator==(const BenchReport&, const BenchReport&) = default;
};

/// Times generate() per image for each manner and for the AR baseline, which
/// is always measured first. Captions come from the first timed iteration.
std::vector<BenchReport> benchmark(const StepModel& model, const Vocab& vocab, std::span<const Example> examples,
                                   const BenchOptions& options);

enum class ReportFormat { Json, Text };

std::string report_json(std::span<const BenchReport> reports);
std::string report_text(std::span<const BenchReport> reports);
std::vector<BenchReport> parse_report_json(const std::string& text);
void emit_report(std::span<const BenchReport> reports, const std::filesystem::path& path, ReportFormat format);

}  // namespace bofi
