#include "config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include <bofi/error.hpp>

namespace bofi::cli {

using json = nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataSection, path, max_len, min_count, level_k)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelSection, d, n_enc, n_dec, heads, d_ff, d_r, max_boxes, max_box_len,
                                   init_range)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RLSection, enabled, M, steps, batch, lr, manner)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainSection, mode, lr, batch, epochs, seed, imit_mode, checkpoint_every, rl)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DecodeSection, manner, beam)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchSection, warmup, iters, baseline_beam, timing, manners, hardware)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SynthSection, n_scenes, n_test, n_categories, n_attributes, n_sizes, n_materials,
                                   n_relations, n_refs, noise, seed, templates)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Config, data, model, train, decode, bench, synth)

namespace {

bool compatible(const json& def, const json& val) {
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_string()) return val.is_string();
  if (def.is_number_float()) return val.is_number();
  if (def.is_number_unsigned()) return val.is_number_unsigned() || (val.is_number_integer() && val.get<long long>() >= 0);
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_array())
    return val.is_array() && std::all_of(val.begin(), val.end(), [](const json& e) { return e.is_string(); });
  return false;
}

void merge(json& target, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, val] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!target.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& slot = target[key];
    if (slot.is_object()) {
      merge(slot, val, path);
    } else {
      if (!compatible(slot, val))
        throw ConfigError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got " +
                          val.dump());
      slot = val;
    }
  }
}

Config from(const json& j) {
  try {
    return j.get<Config>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

}  // namespace

Config parse_config(std::string_view json_text, Config base) {
  json patch;
  try {
    patch = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json j = base;
  merge(j, patch, "");
  return from(j);
}

Config load_config(const std::filesystem::path& path, Config base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

void apply_override(Config& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override must look like key=value, got '" + std::string(assignment) + "'");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("malformed override key '" + key + "'");
    patch = json{{*it, patch}};
  }
  json j = config;
  merge(j, patch, "");
  config = from(j);
}

std::string dump_config(const Config& config) { return json(config).dump(2) + "\n"; }

std::vector<Manner> parse_manners(std::string_view list) {
  std::vector<Manner> out;
  std::string rest(list);
  std::stringstream ss(rest);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(manner_from_name(item));
  if (out.empty()) throw ConfigError("manner list is empty");
  return out;
}

void validate(const Config& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.data.max_len >= 1, "data.max_len must be >= 1");
  require(c.data.min_count >= 1, "data.min_count must be >= 1");
  require(c.data.level_k >= 1 || c.data.level_k == kFinestLevel, "data.level_k must be >= 1 or -1");
  model_config(c, kNumReserved + 1).validate();
  train_mode_from_name(c.train.mode);
  imit_mode_from_name(c.train.imit_mode);
  require(c.train.lr > 0.0, "train.lr must be positive");
  require(c.train.batch >= 1, "train.batch must be >= 1");
  require(c.train.epochs >= 0, "train.epochs must be >= 0");
  require(c.train.checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
  require(c.train.rl.M >= 2, "train.rl.M must be >= 2");
  require(c.train.rl.steps >= 0 && c.train.rl.batch >= 1, "train.rl.steps >= 0 and train.rl.batch >= 1");
  require(c.train.rl.lr > 0.0, "train.rl.lr must be positive");
  require(manner_from_name(c.train.rl.manner) != Manner::AR, "train.rl.manner must be na or sa");
  manner_from_name(c.decode.manner);
  require(c.decode.beam >= 1, "decode.beam must be >= 1");
  require(c.bench.warmup >= 1 && c.bench.iters >= 1, "bench.warmup and bench.iters must be >= 1");
  require(c.bench.baseline_beam >= 1, "bench.baseline_beam must be >= 1");
  parse_manners(c.bench.manners);
  require(c.synth.n_scenes >= 1 && c.synth.n_test >= 0, "synth.n_scenes >= 1 and synth.n_test >= 0");
  require(!c.synth.templates.empty(), "synth.templates must not be empty");
}

ModelConfig model_config(const Config& c, int vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.d = c.model.d;
  m.n_enc = c.model.n_enc;
  m.n_dec = c.model.n_dec;
  m.heads = c.model.heads;
  m.d_ff = c.model.d_ff;
  m.d_r = c.model.d_r;
  m.max_len = c.data.max_len;
  m.max_boxes = c.model.max_boxes;
  m.max_box_len = c.model.max_box_len;
  m.init_range = c.model.init_range;
  return m;
}

SynthConfig synth_config(const Config& c) {
  SynthConfig s;
  s.n_scenes = c.synth.n_scenes + c.synth.n_test;
  s.n_categories = c.synth.n_categories;
  s.n_attributes = c.synth.n_attributes;
  s.n_sizes = c.synth.n_sizes;
  s.n_materials = c.synth.n_materials;
  s.n_relations = c.synth.n_relations;
  s.d_r = c.model.d_r;
  s.n_refs = c.synth.n_refs;
  s.noise = c.synth.noise;
  s.templates = c.synth.templates;
  return s;
}

TrainOptions train_options(const Config& c) {
  TrainOptions t;
  t.loss.mode = train_mode_from_name(c.train.mode);
  t.loss.imit = imit_mode_from_name(c.train.imit_mode);
  t.adam.lr = c.train.lr;
  t.batch = c.train.batch;
  t.seed = c.train.seed;
  return t;
}

BenchOptions bench_options(const Config& c) {
  BenchOptions b;
  b.manners = parse_manners(c.bench.manners);
  b.baseline_beam = c.bench.baseline_beam;
  b.warmup = c.bench.warmup;
  b.iters = c.bench.iters;
  b.timing = c.bench.timing;
  b.hardware = c.bench.hardware;
  return b;
}

}  // namespace bofi::cli
