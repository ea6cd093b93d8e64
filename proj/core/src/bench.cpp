#include "bofi/bench.hpp"

#include <algorithm>

#include "bofi/error.hpp"
#include "bofi/log.hpp"

namespace bofi {

namespace {

struct Measured {
  BenchReport report;
  double mean_ns = 0.0;
  double mean_calls = 0.0;
};

std::int64_t median(std::vector<std::int64_t> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

Measured measure(const StepModel& model, const Vocab& vocab, std::span<const Example> examples,
                 const GenerateOptions& gen, const BenchOptions& options) {
  Measured out;
  std::vector<std::int64_t> latencies;
  std::vector<Sentence> captions;
  std::vector<RefSet> refs;
  long bounding = 0, filling = 0;
  for (const auto& ex : examples) {
    for (int w = 0; w < options.warmup; ++w) generate(model, ex.regions, gen);
    std::int64_t ns = 0;
    DecodeTrace first;
    for (int i = 0; i < options.iters; ++i) {
      DecodeTrace t = generate(model, ex.regions, gen);
      ns += t.wall_time_ns;
      if (i == 0) first = std::move(t);
    }
    latencies.push_back(options.timing ? ns / options.iters : 0);
    bounding += first.model_calls.bounding;
    filling += first.model_calls.filling;
    captions.push_back(decode_tokens(first.tokens, vocab));
    refs.push_back(ex.refs);
  }
  const auto n = static_cast<double>(examples.size());
  auto& r = out.report;
  r.manner = std::string(manner_name(gen.manner));
  r.metrics = score_corpus(captions, refs);
  double sum = 0.0;
  for (auto l : latencies) sum += static_cast<double>(l);
  out.mean_ns = sum / n;
  r.latency_mean_ns = static_cast<std::int64_t>(out.mean_ns);
  r.latency_median_ns = median(latencies);
  r.calls_bounding = static_cast<double>(bounding) / n;
  r.calls_filling = static_cast<double>(filling) / n;
  out.mean_calls = r.calls_bounding + r.calls_filling;
  r.hardware = options.hardware;
  return out;
}

}  // namespace

std::vector<BenchReport> benchmark(const StepModel& model, const Vocab& vocab, std::span<const Example> examples,
                                   const BenchOptions& options) {
  if (examples.empty()) throw DataError("benchmark needs at least one record");
  if (options.warmup < 1) throw ConfigError("bench warmup must be >= 1");
  if (options.iters < 1) throw ConfigError("bench iters must be >= 1");

  GenerateOptions base;
  base.manner = Manner::AR;
  base.beam = options.baseline_beam;
  const Measured baseline = measure(model, vocab, examples, base, options);
  log::info("baseline ar beam " + std::to_string(options.baseline_beam) + ": " +
            std::to_string(baseline.mean_calls) + " calls per image");

  std::vector<BenchReport> out;
  for (Manner m : options.manners) {
    Measured cur;
    if (m == Manner::AR) {
      cur = baseline;
    } else {
      GenerateOptions gen;
      gen.manner = m;
      cur = measure(model, vocab, examples, gen, options);
    }
    cur.report.speedup_calls = baseline.mean_calls / cur.mean_calls;
    cur.report.speedup_wall = options.timing && cur.mean_ns > 0.0 ? baseline.mean_ns / cur.mean_ns : 0.0;
    out.push_back(std::move(cur.report));
  }
  return out;
}

}  // namespace bofi
