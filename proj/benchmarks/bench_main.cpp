// Micro benchmarks for the decode paths and the hot helpers around them.

#include <benchmark/benchmark.h>

#include <bofi/boxes.hpp>
#include <bofi/corpus.hpp>
#include <bofi/decode.hpp>
#include <bofi/metrics.hpp>
#include <bofi/model.hpp>
#include <bofi/train.hpp>

namespace {

using namespace bofi;

struct Fixture {
  Vocab vocab;
  ModelConfig config;
  std::vector<Example> examples;

  Fixture() {
    SynthConfig sc;
    sc.n_scenes = 64;
    const auto records = generate_synthetic_corpus(sc, 3);
    vocab = build_vocab(records, 1);
    config.vocab_size = static_cast<int>(vocab.size());
    config.d_r = sc.d_r;
    examples = make_examples(records, vocab, kFinestLevel, config).examples;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

const Model& model() {
  static const Model m(fixture().config, 1);
  return m;
}

void BM_Generate(benchmark::State& state, Manner manner, int beam) {
  const auto& xs = fixture().examples;
  GenerateOptions g;
  g.manner = manner;
  g.beam = beam;
  std::size_t i = 0;
  long calls = 0;
  for (auto _ : state) {
    const auto trace = generate(model(), xs[i++ % xs.size()].regions, g);
    calls += trace.model_calls.total();
    benchmark::DoNotOptimize(trace.tokens.data());
  }
  state.counters["calls"] = benchmark::Counter(static_cast<double>(calls), benchmark::Counter::kAvgIterations);
}
BENCHMARK_CAPTURE(BM_Generate, ar_beam3, Manner::AR, 3)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(BM_Generate, ar_greedy, Manner::AR, 1)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(BM_Generate, na, Manner::NA, 1)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(BM_Generate, sa, Manner::SA, 1)->Unit(benchmark::kMicrosecond);

void BM_FillGivenBoxes(benchmark::State& state, Manner manner) {
  const auto& ex = fixture().examples.front();
  GenerateOptions g;
  g.manner = manner;
  g.boxes = ex.boxes;
  for (auto _ : state) benchmark::DoNotOptimize(generate(model(), ex.regions, g).tokens.data());
}
BENCHMARK_CAPTURE(BM_FillGivenBoxes, na, Manner::NA)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(BM_FillGivenBoxes, sa, Manner::SA)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
  Model m(fixture().config, 2);
  TrainOptions o;
  o.batch = static_cast<int>(state.range(0));
  Trainer trainer(m, o);
  std::vector<const Example*> batch;
  for (int i = 0; i < o.batch; ++i) batch.push_back(&fixture().examples[static_cast<std::size_t>(i)]);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch).loss.total);
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_ExtractBoxes(benchmark::State& state) {
  const ParseNode tree = parse_bracketed(
      "(S (NP (DT a) (JJ small) (NN dog)) (VP (VBZ runs) (PP (IN across) (NP (DT the) (JJ green) (NN field)))))");
  for (auto _ : state) benchmark::DoNotOptimize(extract_boxes(tree, kFinestLevel).boxes.data());
}
BENCHMARK(BM_ExtractBoxes);

void BM_CiderD(benchmark::State& state) {
  std::vector<Sentence> cands;
  std::vector<RefSet> refs;
  for (const auto& ex : fixture().examples) {
    cands.push_back(ex.refs.front());
    refs.push_back(ex.refs);
  }
  for (auto _ : state) benchmark::DoNotOptimize(cider_d(cands, refs));
}
BENCHMARK(BM_CiderD)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
