#include "commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include <bofi/bench.hpp>
#include <bofi/boxes.hpp>
#include <bofi/corpus.hpp>
#include <bofi/decode.hpp>
#include <bofi/error.hpp>
#include <bofi/log.hpp>
#include <bofi/metrics.hpp>
#include <bofi/model.hpp>
#include <bofi/train.hpp>

#include "config.hpp"

namespace bofi::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, bool need_out) {
  sub->add_option("--config", c.config_path, "JSON config file");
  sub->add_option("--set", c.overrides, "Override a config key: section.key=value")->take_all();
  auto* out = sub->add_option("--out", c.out_dir, "Directory for artifacts");
  if (need_out) out->required();
  sub->add_option("--seed", c.seed, "Seed for every random choice");
}

Config resolve(const Common& c) {
  Config cfg = c.config_path.empty() ? Config{} : load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  validate(cfg);
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::path p(c.out_dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create output directory " + p.string() + ": " + ec.message());
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

std::string data_path(const std::string& flag, const Config& cfg) {
  const std::string p = flag.empty() ? cfg.data.path : flag;
  if (p.empty()) throw ConfigError("no dataset given (use --data or data.path)");
  return p;
}

/// Evaluation examples keep every record; gold boxes only when a tree exists.
std::vector<Example> eval_examples(const std::vector<CaptionRecord>& records, const Vocab& vocab, int level,
                                   std::size_t limit) {
  std::vector<Example> out;
  for (const auto& r : records) {
    if (limit && out.size() >= limit) break;
    Example ex;
    ex.id = r.id;
    ex.regions = r.regions;
    ex.tokens = encode_tokens(r.tokens, vocab);
    if (r.tree) ex.boxes = extract_boxes(parse_bracketed(*r.tree), level).boxes;
    ex.refs = r.refs.empty() ? RefSet{r.tokens} : r.refs;
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw DataError("dataset has no records");
  return out;
}

std::string boxes_lines(const ParseNode& tree, int level) {
  const Segmentation seg = extract_boxes(tree, level);
  const auto words = leaves(tree);
  std::string s;
  for (std::size_t i = 0; i < seg.boxes.size(); ++i) {
    const auto& sp = seg.spans[i];
    const std::vector<std::string> piece(words.begin() + static_cast<long>(sp.begin),
                                         words.begin() + static_cast<long>(sp.end));
    s += std::string(box_type_name(seg.boxes[i].type)) + ":" + std::to_string(seg.boxes[i].length) + ":" +
         join(piece) + "\n";
  }
  return s;
}

// --------------------------------------------------------------------------

int cmd_gen_data(const Common& c, std::ostream& out) {
  Config cfg = resolve(c);
  if (c.seed) cfg.synth.seed = *c.seed;
  const auto records = generate_synthetic_corpus(synth_config(cfg), cfg.synth.seed);
  const auto n_train = static_cast<std::size_t>(cfg.synth.n_scenes);
  const std::span<const CaptionRecord> all(records);
  const fs::path dir = out_dir(c);
  write_dataset(all.subspan(0, n_train), dir / "train.jsonl");
  write_dataset(all.subspan(n_train), dir / "test.jsonl");

  std::vector<BoundingSequence> seqs;
  for (const auto& r : all.subspan(0, n_train))
    if (r.tree) seqs.push_back(extract_boxes(parse_bracketed(*r.tree), cfg.data.level_k).boxes);
  const auto stats = box_statistics(seqs);
  json j;
  j["train"] = n_train;
  j["test"] = records.size() - n_train;
  j["level"] = cfg.data.level_k;
  json nh = json::object(), lh = json::object(), tf = json::object();
  for (auto [k, v] : stats.count_hist) nh[std::to_string(k)] = v;
  for (auto [k, v] : stats.length_hist) lh[std::to_string(k)] = v;
  for (auto [k, v] : stats.type_freq) tf[std::string(box_type_name(k))] = v;
  j["box_count_hist"] = nh;
  j["box_length_hist"] = lh;
  j["box_types"] = tf;
  write_file(dir / "stats.json", j.dump(2) + "\n");
  out << "wrote " << n_train << " train and " << records.size() - n_train << " test records to " << dir.string()
      << "\n";
  return kExitOk;
}

int cmd_inspect(const Common& c, const std::string& tree, const std::string& data, std::optional<int> level_flag,
                std::ostream& out) {
  const Config cfg = resolve(c);
  const int level = level_flag.value_or(cfg.data.level_k);
  std::string text;
  if (!tree.empty()) {
    text = boxes_lines(parse_bracketed(tree), level);
  } else {
    const auto records = read_dataset(data_path(data, cfg), cfg.data.max_len);
    std::vector<BoundingSequence> seqs;
    for (const auto& r : records) {
      if (!r.tree) continue;
      const ParseNode t = parse_bracketed(*r.tree);
      text += "# " + r.id + "\n" + boxes_lines(t, level);
      seqs.push_back(extract_boxes(t, level).boxes);
    }
    const auto stats = box_statistics(seqs);
    text += "# boxes per caption:";
    for (auto [k, v] : stats.count_hist) text += " " + std::to_string(k) + "=" + std::to_string(v);
    text += "\n";
  }
  out << text;
  if (!c.out_dir.empty()) write_file(out_dir(c) / "boxes.txt", text);
  return kExitOk;
}

json step_json(const StepLog& s, TrainMode mode) {
  json j;
  j["step"] = s.step;
  j["bound"] = s.loss.bound;
  j["na"] = s.loss.na;
  j["sa"] = s.loss.sa;
  j["imit"] = s.loss.imit;
  if (mode == TrainMode::Ar) j["ar"] = s.loss.ar;
  j["total"] = s.loss.total;
  j["lr"] = s.lr;
  return j;
}

int cmd_train(const Common& c, const std::string& data, std::ostream& out) {
  Config cfg = resolve(c);
  if (c.seed) cfg.train.seed = *c.seed;
  const auto records = read_dataset(data_path(data, cfg), cfg.data.max_len);
  const Vocab vocab = build_vocab(records, cfg.data.min_count);
  const ModelConfig mc = model_config(cfg, static_cast<int>(vocab.size()));
  const ExampleSet set = make_examples(records, vocab, cfg.data.level_k, mc);
  if (set.examples.empty()) throw DataError("no record carries a usable parse tree");
  if (set.skipped) log::info("skipped " + std::to_string(set.skipped) + " records without usable trees");

  const fs::path dir = out_dir(c);
  write_file(dir / "config.json", dump_config(cfg));
  std::ofstream logf(dir / "train_log.jsonl", std::ios::binary);
  if (!logf) throw DataError("cannot write training log");

  Model model(mc, cfg.train.seed);
  TrainOptions opts = train_options(cfg);
  Trainer trainer(model, opts);
  StepLog last;
  for (int e = 0; e < cfg.train.epochs; ++e) {
    trainer.train_epoch(set.examples, [&](const StepLog& s) {
      logf << step_json(s, opts.loss.mode).dump() << '\n';
      last = s;
      if (cfg.train.checkpoint_every > 0 && s.step % cfg.train.checkpoint_every == 0)
        save_checkpoint(model, vocab, dir / ("checkpoint-" + std::to_string(s.step) + ".json"));
    });
    log::info("epoch " + std::to_string(e + 1) + " total loss " + std::to_string(last.loss.total));
  }

  if (cfg.train.rl.enabled) {
    const RLSection& rl = cfg.train.rl;
    std::vector<RefSet> refs;
    for (const auto& ex : set.examples) refs.push_back(ex.refs);
    const CiderD scorer(refs);
    Adam adam(model, AdamConfig{rl.lr, opts.adam.beta1, opts.adam.beta2, opts.adam.eps});
    RLConfig rc;
    rc.M = rl.M;
    rc.manner = manner_from_name(rl.manner);
    Rng rng(Rng::mix(cfg.train.seed, 0x5c57));
    std::size_t next = 0;
    for (int s = 0; s < rl.steps; ++s) {
      std::vector<const Example*> batch;
      for (int b = 0; b < rl.batch; ++b) batch.push_back(&set.examples[next++ % set.examples.size()]);
      const ScstResult r = scst_step(model, adam, batch, vocab, scorer, rc, rng);
      json j;
      j["rl_step"] = s + 1;
      j["pseudo_loss"] = r.pseudo_loss;
      j["reward"] = r.mean_reward;
      logf << j.dump() << '\n';
    }
  }
  save_checkpoint(model, vocab, dir / "model.json");
  out << "trained " << train_mode_name(opts.loss.mode) << " on " << set.examples.size() << " records, "
      << trainer.optimizer().steps() << " steps; checkpoint " << (dir / "model.json").string() << "\n";
  return kExitOk;
}

struct GenFlags {
  std::string model, data, manner, boxes;
  std::optional<int> beam, level;
  bool oracle = false;
  std::size_t limit = 0;
};

GenerateOptions gen_options(const Config& cfg, const GenFlags& f) {
  GenerateOptions g;
  g.manner = manner_from_name(f.manner.empty() ? cfg.decode.manner : f.manner);
  g.beam = f.beam.value_or(cfg.decode.beam);
  if (g.beam < 1) throw ConfigError("beam must be >= 1");
  if (!f.boxes.empty()) g.boxes = parse_box_list(f.boxes);
  return g;
}

int cmd_generate(const Common& c, const GenFlags& f, std::ostream& out) {
  const Config cfg = resolve(c);
  const Checkpoint ck = load_checkpoint(f.model);
  const auto records = read_dataset(data_path(f.data, cfg), ck.model.config().max_len);
  const int level = f.level.value_or(cfg.data.level_k);
  const auto examples = eval_examples(records, ck.vocab, level, f.limit);
  const GenerateOptions base = gen_options(cfg, f);

  std::string lines;
  for (const auto& ex : examples) {
    GenerateOptions g = base;
    if (f.oracle && !g.boxes) {
      if (ex.boxes.empty()) throw DataError("record " + ex.id + " has no tree for oracle boxes");
      g.boxes = ex.boxes;
    }
    const DecodeTrace t = generate(ck.model, ex.regions, g);
    const auto words = decode_tokens(t.tokens, ck.vocab);
    json j;
    j["id"] = ex.id;
    j["manner"] = manner_name(t.manner);
    j["caption"] = join(words);
    j["tokens"] = t.tokens.size();
    j["boxes"] = t.boxes_used ? json(format_box_list(*t.boxes_used)) : json(nullptr);
    j["model_calls"] = {{"bounding", t.model_calls.bounding}, {"filling", t.model_calls.filling}};
    lines += j.dump() + "\n";
    out << ex.id << "\t" << join(words) << "\t[" << manner_name(t.manner) << " tokens=" << t.tokens.size()
        << (t.boxes_used ? " boxes=" + format_box_list(*t.boxes_used) : std::string())
        << " calls=" << t.model_calls.bounding << "+" << t.model_calls.filling << " wall_ns=" << t.wall_time_ns
        << "]\n";
  }
  if (!c.out_dir.empty()) write_file(out_dir(c) / "generations.jsonl", lines);
  return kExitOk;
}

int cmd_evaluate(const Common& c, const GenFlags& f, std::ostream& out) {
  const Config cfg = resolve(c);
  const Checkpoint ck = load_checkpoint(f.model);
  const auto records = read_dataset(data_path(f.data, cfg), ck.model.config().max_len);
  const auto examples = eval_examples(records, ck.vocab, f.level.value_or(cfg.data.level_k), f.limit);
  const GenerateOptions g = gen_options(cfg, f);
  const EvalResult r = evaluate_model(ck.model, ck.vocab, examples, g);
  json j;
  j["manner"] = manner_name(g.manner);
  j["records"] = examples.size();
  j["bleu1"] = r.metrics.bleu1;
  j["bleu4"] = r.metrics.bleu4;
  j["cider"] = r.metrics.cider;
  out << j.dump(2) << "\n";
  if (!c.out_dir.empty()) write_file(out_dir(c) / "metrics.json", j.dump(2) + "\n");
  return kExitOk;
}

int cmd_bench(const Common& c, const GenFlags& f, const std::string& manners, std::ostream& out) {
  Config cfg = resolve(c);
  if (!manners.empty()) cfg.bench.manners = manners;
  const BenchOptions opts = bench_options(cfg);
  const Checkpoint ck = load_checkpoint(f.model);
  const auto records = read_dataset(data_path(f.data, cfg), ck.model.config().max_len);
  const auto examples = eval_examples(records, ck.vocab, cfg.data.level_k, f.limit);
  const auto reports = benchmark(ck.model, ck.vocab, examples, opts);
  out << report_text(reports);
  if (!c.out_dir.empty()) {
    const fs::path dir = out_dir(c);
    emit_report(reports, dir / "bench.json", ReportFormat::Json);
    emit_report(reports, dir / "bench.txt", ReportFormat::Text);
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"bofi: bounding-and-filling caption generation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "bofi 0.1.0");

  Common common;
  std::string tree, data, manners;
  std::optional<int> level;
  GenFlags gf;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus (train.jsonl, test.jsonl)");
  add_common(gen, common, true);

  auto* inspect = app.add_subcommand("inspect-boxes", "Print boxes of a tree or a dataset");
  add_common(inspect, common, false);
  auto* tree_opt = inspect->add_option("--tree", tree, "Bracketed tree");
  inspect->add_option("--data", data, "Dataset JSONL")->excludes(tree_opt);
  inspect->add_option("--level", level, "Split level k (>= 1, or -1 for the finest)");

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(train, common, true);
  train->add_option("--data", data, "Training dataset JSONL");

  auto add_gen_flags = [&](CLI::App* sub, bool decode_flags) {
    sub->add_option("--model", gf.model, "Checkpoint file")->required();
    sub->add_option("--data", gf.data, "Dataset JSONL");
    sub->add_option("--limit", gf.limit, "Use only the first N records");
    if (!decode_flags) return;
    sub->add_option("--manner", gf.manner, "ar, na or sa");
    sub->add_option("--beam", gf.beam, "Beam size for ar");
    sub->add_option("--level", gf.level, "Split level for oracle boxes");
    sub->add_option("--boxes", gf.boxes, "User bounding sequence, e.g. NP:3,VP:2,NP:2");
    sub->add_flag("--oracle", gf.oracle, "Fill gold boxes from each record's tree");
  };
  auto* generate_cmd = app.add_subcommand("generate", "Generate captions");
  add_common(generate_cmd, common, false);
  add_gen_flags(generate_cmd, true);

  auto* evaluate = app.add_subcommand("evaluate", "Score generated captions (BLEU-1/4, CIDEr-D)");
  add_common(evaluate, common, false);
  add_gen_flags(evaluate, true);

  auto* bench = app.add_subcommand("bench", "Latency and speedup against the AR beam baseline");
  add_common(bench, common, false);
  add_gen_flags(bench, false);
  bench->add_option("--manners", manners, "Comma-separated manners, e.g. ar,na,sa");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common, out);
    if (*inspect) {
      if (tree.empty() && data.empty() && resolve(common).data.path.empty())
        throw ConfigError("inspect-boxes needs --tree or --data");
      return cmd_inspect(common, tree, data, level, out);
    }
    if (*train) return cmd_train(common, data, out);
    if (*generate_cmd) return cmd_generate(common, gf, out);
    if (*evaluate) return cmd_evaluate(common, gf, out);
    if (*bench) return cmd_bench(common, gf, manners, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace bofi::cli
