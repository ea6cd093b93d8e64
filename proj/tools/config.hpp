#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <bofi/bench.hpp>
#include <bofi/corpus.hpp>
#include <bofi/model.hpp>
#include <bofi/train.hpp>

namespace bofi::cli {

struct DataSection {
  std::string path;  // dataset JSONL used by train / evaluate / bench
  int max_len = kDefaultMaxLen;
  int min_count = 5;
  int level_k = kFinestLevel;
};

struct ModelSection {
  int d = 64;
  int n_enc = 2;
  int n_dec = 2;
  int heads = 4;
  int d_ff = 128;
  int d_r = 32;
  int max_boxes = 16;
  int max_box_len = 16;
  double init_range = 0.08;
};

struct RLSection {
  bool enabled = false;
  int M = 5;
  int steps = 50;
  int batch = 16;
  double lr = 1e-5;
  std::string manner = "na";
};

struct TrainSection {
  std::string mode = "joint";
  double lr = 3e-4;
  int batch = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
  std::string imit_mode = "full";
  int checkpoint_every = 0;  // 0: final checkpoint only
  RLSection rl;
};

struct DecodeSection {
  std::string manner = "na";
  int beam = 1;
};

struct BenchSection {
  int warmup = 1;
  int iters = 3;
  int baseline_beam = 3;
  bool timing = true;
  std::string manners = "ar,na,sa";
  std::string hardware = "cpu, single thread, batch 1";
};

struct SynthSection {
  int n_scenes = 2000;
  int n_test = 200;
  int n_categories = 20;
  int n_attributes = 10;
  int n_sizes = 4;
  int n_materials = 5;
  int n_relations = 10;
  int n_refs = 5;
  double noise = 0.1;
  std::uint64_t seed = 7;
  std::vector<std::string> templates = SynthConfig::default_templates();
};

struct Config {
  DataSection data;
  ModelSection model;
  TrainSection train;
  DecodeSection decode;
  BenchSection bench;
  SynthSection synth;
};

/// Parses JSON text over the defaults. Unknown keys and wrong types throw
/// ConfigError naming the dotted key.
Config parse_config(std::string_view json_text, Config base = {});
Config load_config(const std::filesystem::path& path, Config base = {});

/// Applies "section.key=value" (nested: "train.rl.M=3"). The value is read as
/// JSON when it parses, otherwise as a string.
void apply_override(Config& config, std::string_view assignment);

std::string dump_config(const Config& config);

/// Semantic checks beyond types (ranges, enum names).
void validate(const Config& config);

ModelConfig model_config(const Config& config, int vocab_size);
SynthConfig synth_config(const Config& config);
TrainOptions train_options(const Config& config);
BenchOptions bench_options(const Config& config);
std::vector<Manner> parse_manners(std::string_view list);

}  // namespace bofi::cli
