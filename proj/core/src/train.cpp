#include "bofi/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bofi/error.hpp"
#include "bofi/log.hpp"

namespace bofi {

using ad::Tape;
using ad::Var;

std::string_view train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Joint: return "joint";
    case TrainMode::SaOnly: return "sa-only";
    case TrainMode::NaOnly: return "na-only";
    case TrainMode::Ar: return "ar";
    case TrainMode::Plain: return "plain";
  }
  return "?";
}

TrainMode train_mode_from_name(std::string_view name) {
  for (auto m : {TrainMode::Joint, TrainMode::SaOnly, TrainMode::NaOnly, TrainMode::Ar, TrainMode::Plain})
    if (train_mode_name(m) == name) return m;
  throw ConfigError("unknown training mode '" + std::string(name) + "'");
}

std::string_view imit_mode_name(ImitMode m) {
  switch (m) {
    case ImitMode::Full: return "full";
    case ImitMode::Scalar: return "scalar";
    case ImitMode::None: return "none";
  }
  return "?";
}

ImitMode imit_mode_from_name(std::string_view name) {
  if (name == "full") return ImitMode::Full;
  if (name == "scalar") return ImitMode::Scalar;
  if (name == "none") return ImitMode::None;
  throw ConfigError("unknown imitation mode '" + std::string(name) + "'");
}

ExampleSet make_examples(std::span<const CaptionRecord> records, const Vocab& vocab, int level,
                         const ModelConfig& config) {
  ExampleSet out;
  for (const auto& r : records) {
    if (r.regions.cols() != config.d_r)
      throw DataError("record " + r.id + ": region dimension " + std::to_string(r.regions.cols()) +
                      ", model expects " + std::to_string(config.d_r));
    if (!r.tree || r.tokens.empty() || static_cast<int>(r.tokens.size()) > config.max_len) {
      ++out.skipped;
      continue;
    }
    Segmentation seg = extract_boxes(parse_bracketed(*r.tree), level);
    const bool fits = static_cast<int>(seg.boxes.size()) <= config.max_boxes &&
                      std::all_of(seg.boxes.begin(), seg.boxes.end(),
                                  [&](const BoxSpec& b) { return b.length <= config.max_box_len; });
    if (!fits) {
      ++out.skipped;
      continue;
    }
    Example ex;
    ex.id = r.id;
    ex.regions = r.regions;
    ex.tokens = encode_tokens(r.tokens, vocab);
    ex.boxes = std::move(seg.boxes);
    ex.refs = r.refs.empty() ? RefSet{r.tokens} : r.refs;
    out.examples.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canvases

FillCanvas na_canvas(std::span<const BoxSpec> boxes) {
  FillCanvas c;
  c.tags = slot_tags(boxes);
  c.inputs.assign(c.tags.size(), kMask);
  return c;
}

FillCanvas sa_canvas(std::span<const TokenId> tokens, std::span<const BoxSpec> boxes) {
  if (static_cast<int>(tokens.size()) != total_length(boxes))
    throw ModelError("SA canvas: " + std::to_string(tokens.size()) + " tokens for boxes covering " +
                     std::to_string(total_length(boxes)));
  FillCanvas c;
  c.tags = slot_tags(boxes);
  std::size_t offset = 0;
  std::span<const TokenId> prev;
  for (const auto& b : boxes) {
    const auto len = static_cast<std::size_t>(b.length);
    if (prev.empty()) {
      c.inputs.insert(c.inputs.end(), len, kBos);
    } else {
      const auto copy = position_wise_copy(prev, b.length);
      c.inputs.insert(c.inputs.end(), copy.begin(), copy.end());
    }
    prev = tokens.subspan(offset, len);
    offset += len;
  }
  return c;
}

FillCanvas ar_canvas(std::span<const TokenId> tokens, int max_len) {
  FillCanvas c;
  c.inputs.push_back(kBos);
  c.inputs.insert(c.inputs.end(), tokens.begin(), tokens.end());
  c.tags = neutral_tags(static_cast<int>(c.inputs.size()), max_len);
  return c;
}

FillCanvas plain_canvas(int length, int max_len) {
  FillCanvas c;
  c.inputs.assign(static_cast<std::size_t>(length), kMask);
  c.tags = neutral_tags(length, max_len);
  return c;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

std::vector<int> as_targets(std::span<const TokenId> tokens) { return {tokens.begin(), tokens.end()}; }

std::vector<double> ones(std::size_t n) { return std::vector<double>(n, 1.0); }

void check_tokens(std::span<const TokenId> tokens, std::span<const BoxSpec> boxes) {
  if (static_cast<int>(tokens.size()) != total_length(boxes))
    throw ModelError("caption has " + std::to_string(tokens.size()) + " tokens but boxes cover " +
                     std::to_string(total_length(boxes)));
}

Var na_logits(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const BoxSpec> boxes) {
  const FillCanvas c = na_canvas(boxes);
  return m.fill_logits(t, pv, ctx, c, all_visible_mask(static_cast<int>(c.inputs.size())));
}

Var sa_logits(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const TokenId> tokens,
              std::span<const BoxSpec> boxes) {
  const FillCanvas c = sa_canvas(tokens, boxes);
  return m.fill_logits(t, pv, ctx, c, box_causal_mask(c.tags));
}

Var token_loss(Tape& t, Var logits, std::span<const TokenId> targets) {
  const auto tg = as_targets(targets);
  return ad::cross_entropy(t, logits, tg, ones(tg.size()));
}

}  // namespace

Var loss_bound(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const BoxSpec> boxes) {
  const auto logits = m.bounding_logits(t, pv, ctx, boxes);
  std::vector<int> types, lengths;
  for (const auto& b : boxes) {
    types.push_back(static_cast<int>(b.type));
    lengths.push_back(b.length - 1);
  }
  types.push_back(static_cast<int>(BoxType::EOB));
  lengths.push_back(-1);  // the EOB step carries no length
  const auto w = ones(types.size());
  return ad::add(t, ad::cross_entropy(t, logits.type, types, w), ad::cross_entropy(t, logits.length, lengths, w));
}

Var loss_na(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const TokenId> tokens,
            std::span<const BoxSpec> boxes) {
  check_tokens(tokens, boxes);
  return token_loss(t, na_logits(t, pv, m, ctx, boxes), tokens);
}

Var loss_sa(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const TokenId> tokens,
            std::span<const BoxSpec> boxes) {
  check_tokens(tokens, boxes);
  return token_loss(t, sa_logits(t, pv, m, ctx, tokens, boxes), tokens);
}

Var loss_ar(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const TokenId> tokens) {
  const FillCanvas c = ar_canvas(tokens, m.config().max_len);
  const Var logits = m.fill_logits(t, pv, ctx, c, token_causal_mask(static_cast<int>(c.inputs.size())));
  std::vector<TokenId> targets(tokens.begin(), tokens.end());
  targets.push_back(kEos);
  return token_loss(t, logits, targets);
}

Var loss_plain(Tape& t, const ParamVars& pv, const Model& m, Var ctx, std::span<const TokenId> tokens) {
  const FillCanvas c = plain_canvas(static_cast<int>(tokens.size()), m.config().max_len);
  return token_loss(t, m.fill_logits(t, pv, ctx, c, all_visible_mask(static_cast<int>(c.inputs.size()))), tokens);
}

Var loss_imit(Tape& t, Var na_logits_var, const Mat& sa_probs, std::span<const TokenId> targets, ImitMode mode) {
  const Mat& z = t.value(na_logits_var);
  if (sa_probs.rows() != z.rows() || static_cast<Eigen::Index>(targets.size()) != z.rows())
    throw ModelError("imitation: NA and SA canvases differ in length");
  const auto T = static_cast<std::size_t>(z.rows());
  const std::vector<double> w(T, 1.0 / static_cast<double>(T));
  if (mode == ImitMode::Full) return ad::kl_to_constant(t, na_logits_var, sa_probs, w);
  std::vector<double> s(T);
  for (std::size_t i = 0; i < T; ++i) s[i] = sa_probs(static_cast<Eigen::Index>(i), targets[i]);
  return ad::target_imitation(t, na_logits_var, as_targets(targets), s, w);
}

Var batch_loss(Tape& t, const ParamVars& pv, const Model& m, std::span<const Example* const> batch,
               const LossOptions& options, LossBreakdown* parts) {
  if (batch.empty()) throw ModelError("empty training batch");
  if (!options.imit_targets.empty() && options.imit_targets.size() != batch.size())
    throw ModelError("imitation targets do not match the batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossBreakdown acc;
  Var total;
  auto add = [&](Var term, double& slot) {
    slot += t.value(term)(0, 0) * inv;
    total = total.valid() ? ad::add(t, total, term) : term;
  };
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example* ex = batch[i];
    const Var ctx = m.encode(t, pv, ex->regions);
    switch (options.mode) {
      case TrainMode::Ar:
        add(loss_ar(t, pv, m, ctx, ex->tokens), acc.ar);
        break;
      case TrainMode::Plain:
        add(loss_bound(t, pv, m, ctx, ex->boxes), acc.bound);
        add(loss_plain(t, pv, m, ctx, ex->tokens), acc.na);
        break;
      case TrainMode::NaOnly:
        add(loss_bound(t, pv, m, ctx, ex->boxes), acc.bound);
        add(loss_na(t, pv, m, ctx, ex->tokens, ex->boxes), acc.na);
        break;
      case TrainMode::SaOnly:
        add(loss_bound(t, pv, m, ctx, ex->boxes), acc.bound);
        add(loss_sa(t, pv, m, ctx, ex->tokens, ex->boxes), acc.sa);
        break;
      case TrainMode::Joint: {
        check_tokens(ex->tokens, ex->boxes);
        add(loss_bound(t, pv, m, ctx, ex->boxes), acc.bound);
        const Var nz = na_logits(t, pv, m, ctx, ex->boxes);
        const Var sz = sa_logits(t, pv, m, ctx, ex->tokens, ex->boxes);
        add(token_loss(t, nz, ex->tokens), acc.na);
        add(token_loss(t, sz, ex->tokens), acc.sa);
        if (options.imit == ImitMode::None) break;
        const Mat target =
            options.imit_targets.empty() ? kernels::softmax_rows(t.value(sz)) : options.imit_targets[i];
        add(loss_imit(t, nz, target, ex->tokens, options.imit), acc.imit);
        break;
      }
    }
  }
  acc.total = acc.bound + acc.na + acc.sa + acc.imit + acc.ar;
  if (parts) *parts = acc;
  return ad::scale(t, total, inv);
}

std::vector<Mat> sa_targets(const Model& m, std::span<const Example* const> batch) {
  std::vector<Mat> out;
  out.reserve(batch.size());
  for (const Example* ex : batch) {
    const FillCanvas c = sa_canvas(ex->tokens, ex->boxes);
    out.push_back(m.fill_forward(m.encode_regions(ex->regions), c, box_causal_mask(c.tags)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation

Adam::Adam(const Model& model, AdamConfig config) : config_(config) {
  m_ = model.zero_gradients();
  v_ = model.zero_gradients();
}

void Adam::step(Model& model, const Gradients& grads) {
  auto& params = model.params();
  if (grads.size() != params.size()) throw ModelError("Adam: gradient count does not match the parameters");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = grads[i].array();
    m_[i].array() = config_.beta1 * m_[i].array() + (1.0 - config_.beta1) * g;
    v_[i].array() = config_.beta2 * v_[i].array() + (1.0 - config_.beta2) * g.square();
    params[i].value.array() -=
        config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

Trainer::Trainer(Model& model, TrainOptions options)
    : model_(model), options_(options), adam_(model, options.adam) {
  if (options_.batch < 1) throw ConfigError("batch size must be >= 1");
}

StepLog Trainer::step(std::span<const Example* const> batch) {
  Tape tape(true);
  const ParamVars pv = model_.bind(tape);
  StepLog log;
  const Var loss = batch_loss(tape, pv, model_, batch, options_.loss, &log.loss);
  Gradients grads = model_.zero_gradients();
  tape.backward(loss, grads);
  adam_.step(model_, grads);
  log.step = adam_.steps();
  log.lr = options_.adam.lr;
  return log;
}

std::vector<StepLog> Trainer::train_epoch(std::span<const Example> examples,
                                          const std::function<void(const StepLog&)>& on_step) {
  if (examples.empty()) throw DataError("no training examples (records need parse trees)");
  std::vector<const Example*> order;
  order.reserve(examples.size());
  for (const auto& e : examples) order.push_back(&e);
  Rng rng(Rng::mix(options_.seed, static_cast<std::uint64_t>(epoch_)));
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  std::vector<StepLog> history;
  const auto bs = static_cast<std::size_t>(options_.batch);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::span<const Example* const> batch(order.data() + start, std::min(bs, order.size() - start));
    history.push_back(step(batch));
    if (on_step) on_step(history.back());
  }
  ++epoch_;
  return history;
}

// ---------------------------------------------------------------------------
// Self-critical training

std::vector<double> scst_advantages(std::span<const double> rewards) {
  const auto M = rewards.size();
  if (M < 2) throw ConfigError("SCST needs M >= 2 samples");
  const double sum = std::accumulate(rewards.begin(), rewards.end(), 0.0);
  std::vector<double> adv(M);
  for (std::size_t m = 0; m < M; ++m) adv[m] = rewards[m] - (sum - rewards[m]) / static_cast<double>(M - 1);
  return adv;
}

namespace {

TokenId sample_row(const Mat& probs, Eigen::Index row, Rng& rng) {
  const double u = rng.uniform();
  double c = 0.0;
  for (Eigen::Index v = 0; v < probs.cols(); ++v) {
    c += probs(row, v);
    if (u < c) return static_cast<TokenId>(v);
  }
  return static_cast<TokenId>(probs.cols() - 1);
}

std::vector<TokenId> words_only(const std::vector<TokenId>& ids) {
  std::vector<TokenId> out;
  for (TokenId t : ids)
    if (t != kPad && t != kBos && t != kEos) out.push_back(t);
  return out;
}

}  // namespace

ScstResult scst_step(Model& model, Adam& adam, std::span<const Example* const> batch, const Vocab& vocab,
                     const CiderD& scorer, const RLConfig& rl, Rng& rng) {
  if (rl.M < 2) throw ConfigError("SCST needs M >= 2 samples");
  if (rl.manner == Manner::AR) throw ConfigError("SCST supports the na and sa manners");
  if (batch.empty()) throw ModelError("empty SCST batch");
  Tape tape(true);
  const ParamVars pv = model.bind(tape);
  Var total;
  double reward_sum = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const double inv_m = 1.0 / static_cast<double>(rl.M);

  for (const Example* ex : batch) {
    if (ex->refs.empty()) throw DataError("record " + ex->id + " has no references for SCST");
    const Var ctx = model.encode(tape, pv, ex->regions);
    const Mat& ctx_value = tape.value(ctx);
    const BoundingSequence boxes = decode_bounding(model, ctx_value, model.config().max_boxes, true).boxes;

    std::vector<std::vector<TokenId>> samples(static_cast<std::size_t>(rl.M));
    std::vector<Var> logits;
    if (rl.manner == Manner::NA) {
      const Var z = na_logits(tape, pv, model, ctx, boxes);
      const Mat p = kernels::softmax_rows(tape.value(z));
      for (auto& s : samples)
        for (Eigen::Index r = 0; r < p.rows(); ++r) s.push_back(sample_row(p, r, rng));
      logits.assign(samples.size(), z);
    } else {
      const auto tags = slot_tags(boxes);
      for (auto& s : samples) {
        auto cursor = model.start_filling(ctx_value);
        std::vector<TokenId> prev;
        std::size_t offset = 0;
        for (const auto& b : boxes) {
          const auto len = static_cast<std::size_t>(b.length);
          const auto inputs = prev.empty() ? std::vector<TokenId>(len, kBos) : position_wise_copy(prev, b.length);
          const Mat p = cursor->append(inputs, std::span<const SlotTag>(tags.data() + offset, len));
          prev.clear();
          for (Eigen::Index r = 0; r < p.rows(); ++r) prev.push_back(sample_row(p, r, rng));
          s.insert(s.end(), prev.begin(), prev.end());
          offset += len;
        }
        logits.push_back(sa_logits(tape, pv, model, ctx, s, boxes));
      }
    }

    std::vector<double> rewards;
    for (const auto& s : samples)
      rewards.push_back(rl.reward ? rl.reward(s, *ex) : scorer.score(decode_tokens(words_only(s), vocab), ex->refs));
    for (double r : rewards) reward_sum += r * inv_m * inv_b;
    const auto adv = scst_advantages(rewards);
    for (std::size_t m = 0; m < samples.size(); ++m) {
      const std::vector<double> w(samples[m].size(), adv[m] * inv_m * inv_b);
      const Var term = ad::cross_entropy(tape, logits[m], as_targets(samples[m]), w);
      total = total.valid() ? ad::add(tape, total, term) : term;
    }
  }
  Gradients grads = model.zero_gradients();
  tape.backward(total, grads);
  adam.step(model, grads);
  return {tape.value(total)(0, 0), reward_sum};
}

// ---------------------------------------------------------------------------
// Distillation and evaluation

namespace {

void set_leaves(ParseNode& node, std::span<const std::string> words, std::size_t& next) {
  if (node.is_leaf()) {
    node.token = words[next++];
    return;
  }
  for (auto& c : node.children) set_leaves(c, words, next);
}

}  // namespace

std::vector<CaptionRecord> distill_corpus(const Teacher& teacher, std::span<const CaptionRecord> records) {
  std::vector<CaptionRecord> out;
  for (const auto& r : records) {
    std::vector<std::string> words = teacher(r);
    CaptionRecord d = r;
    if (words != r.tokens) {
      if (!r.tree || words.empty()) continue;
      ParseNode tree = parse_bracketed(*r.tree);
      if (leaves(tree).size() != words.size()) continue;
      std::size_t next = 0;
      set_leaves(tree, words, next);
      d.tree = to_bracketed(tree);
      d.tokens = std::move(words);
    }
    out.push_back(std::move(d));
  }
  log::info("distillation kept " + std::to_string(out.size()) + " of " + std::to_string(records.size()) +
            " records");
  return out;
}

Teacher ar_teacher(const Model& model, const Vocab& vocab, int beam) {
  return [&model, &vocab, beam](const CaptionRecord& r) {
    const Mat ctx = model.encode_regions(r.regions);
    return decode_tokens(decode_ar(model, ctx, beam).tokens, vocab);
  };
}

EvalResult evaluate_model(const StepModel& model, const Vocab& vocab, std::span<const Example> examples,
                          const GenerateOptions& options) {
  if (examples.empty()) throw DataError("nothing to evaluate");
  EvalResult res;
  std::vector<RefSet> refs;
  for (const auto& ex : examples) {
    res.traces.push_back(generate(model, ex.regions, options));
    res.captions.push_back(decode_tokens(res.traces.back().tokens, vocab));
    refs.push_back(ex.refs);
  }
  res.metrics = score_corpus(res.captions, refs);
  return res;
}

}  // namespace bofi
