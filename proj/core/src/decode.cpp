#include "bofi/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "bofi/error.hpp"

namespace bofi {

std::string_view manner_name(Manner m) {
  switch (m) {
    case Manner::AR: return "ar";
    case Manner::NA: return "na";
    case Manner::SA: return "sa";
  }
  return "?";
}

Manner manner_from_name(std::string_view name) {
  if (name == "ar") return Manner::AR;
  if (name == "na") return Manner::NA;
  if (name == "sa") return Manner::SA;
  throw ConfigError("unknown manner '" + std::string(name) + "' (expected ar, na or sa)");
}

namespace {

template <class F>
auto timed(std::int64_t& acc, F&& f) {
  const auto start = std::chrono::steady_clock::now();
  auto result = f();
  acc += std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start).count();
  return result;
}

constexpr int kNoWordIds[] = {kPad, kBos, kEos};
constexpr int kArExcluded[] = {kPad, kBos};

std::vector<TokenId> argmax_rows(const Mat& probs) {
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r)
    out.push_back(argmax_excluding({probs.row(r).data(), static_cast<std::size_t>(probs.cols())}, kNoWordIds));
  return out;
}

void check_canvas(const StepModel& model, std::span<const BoxSpec> boxes) {
  const auto& cfg = model.config();
  validate_bounding(boxes, cfg.max_boxes, cfg.max_box_len);
  const int t = total_length(boxes);
  if (t > cfg.max_len)
    throw DataError("bounding sequence covers " + std::to_string(t) + " tokens, max_len is " +
                    std::to_string(cfg.max_len));
}

}  // namespace

int argmax_excluding(std::span<const double> probs, std::span<const int> excluded) {
  int best = -1;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i) {
    if (std::find(excluded.begin(), excluded.end(), i) != excluded.end()) continue;
    if (best < 0 || probs[static_cast<std::size_t>(i)] > probs[static_cast<std::size_t>(best)]) best = i;
  }
  if (best < 0) throw ModelError("argmax over an empty support");
  return best;
}

BoundingResult decode_bounding(const StepModel& model, const Mat& ctx, int max_boxes, bool mask_eob_first) {
  if (max_boxes < 1) throw ConfigError("max_boxes must be >= 1");
  const int max_len = model.config().max_len;
  max_boxes = std::min(max_boxes, model.config().max_boxes);
  auto cursor = model.start_bounding(ctx);
  BoundingResult res;
  int used = 0;
  std::optional<BoxSpec> prev;
  while (static_cast<int>(res.boxes.size()) < max_boxes) {
    const BoxDistributions d = cursor->step(prev);
    ++res.calls;
    const bool first = res.boxes.empty();
    std::vector<int> excluded;
    if (first && mask_eob_first) excluded.push_back(static_cast<int>(BoxType::EOB));
    const auto type = static_cast<BoxType>(argmax_excluding(d.type, excluded));
    if (type == BoxType::EOB) {
      if (first) throw EmptyBoundingError();
      res.stopped_by_eob = true;
      break;
    }
    const int length = std::min(argmax_excluding(d.length, {}) + 1, max_len - used);
    if (length <= 0) {
      res.dropped_final = true;
      break;
    }
    used += length;
    res.boxes.push_back({type, length});
    prev = res.boxes.back();
  }
  return res;
}

std::vector<int> copy_counts(int l_prev, int l_next) {
  if (l_prev < 1 || l_next < 0) throw ModelError("position_wise_copy: need l_prev >= 1 and l_next >= 0");
  const int base = l_next / l_prev;
  const int rem = l_next % l_prev;
  std::vector<int> n(static_cast<std::size_t>(l_prev), base);
  for (int i = l_prev - rem; i < l_prev; ++i) n[static_cast<std::size_t>(i)] = base + 1;
  return n;
}

std::vector<TokenId> position_wise_copy(std::span<const TokenId> prev, int l_next) {
  const auto n = copy_counts(static_cast<int>(prev.size()), l_next);
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(l_next));
  for (std::size_t i = 0; i < prev.size(); ++i) out.insert(out.end(), static_cast<std::size_t>(n[i]), prev[i]);
  return out;
}

DecodeTrace decode_na(const StepModel& model, const Mat& ctx, std::span<const BoxSpec> boxes) {
  check_canvas(model, boxes);
  DecodeTrace trace;
  trace.manner = Manner::NA;
  const auto tags = slot_tags(boxes);
  const std::vector<TokenId> inputs(tags.size(), kMask);
  auto cursor = model.start_filling(ctx);
  const Mat probs = timed(trace.wall_time_ns, [&] { return cursor->append(inputs, tags); });
  trace.model_calls.filling = 1;
  trace.tokens = argmax_rows(probs);
  trace.boxes_used = BoundingSequence(boxes.begin(), boxes.end());
  return trace;
}

DecodeTrace decode_sa(const StepModel& model, const Mat& ctx, std::span<const BoxSpec> boxes) {
  check_canvas(model, boxes);
  DecodeTrace trace;
  trace.manner = Manner::SA;
  const auto tags = slot_tags(boxes);
  auto cursor = model.start_filling(ctx);
  std::vector<TokenId> prev;
  std::size_t offset = 0;
  for (const auto& box : boxes) {
    const auto len = static_cast<std::size_t>(box.length);
    const std::vector<TokenId> inputs =
        prev.empty() ? std::vector<TokenId>(len, kBos) : position_wise_copy(prev, box.length);
    const std::span<const SlotTag> box_tags(tags.data() + offset, len);
    const Mat probs = timed(trace.wall_time_ns, [&] { return cursor->append(inputs, box_tags); });
    ++trace.model_calls.filling;
    prev = argmax_rows(probs);
    trace.tokens.insert(trace.tokens.end(), prev.begin(), prev.end());
    offset += len;
  }
  trace.boxes_used = BoundingSequence(boxes.begin(), boxes.end());
  return trace;
}

namespace {

SlotTag ar_tag(int p, int max_len) { return {BoxType::OTHER, 0, std::min(p, max_len)}; }

DecodeTrace greedy_ar(const StepModel& model, const Mat& ctx) {
  const int max_len = model.config().max_len;
  DecodeTrace trace;
  trace.manner = Manner::AR;
  auto cursor = model.start_filling(ctx);
  TokenId last = kBos;
  for (int step = 0; step < max_len; ++step) {
    const SlotTag tag = ar_tag(step, max_len);
    const Mat probs = timed(trace.wall_time_ns, [&] { return cursor->append({&last, 1}, {&tag, 1}); });
    ++trace.model_calls.filling;
    ++trace.hypothesis_evals;
    const int next = argmax_excluding({probs.data(), static_cast<std::size_t>(probs.cols())}, kArExcluded);
    if (next == kEos) break;
    trace.tokens.push_back(next);
    last = next;
  }
  return trace;
}

struct Hypothesis {
  std::vector<TokenId> tokens;
  double score = 0.0;
  bool finished = false;
  std::unique_ptr<FillingCursor> cursor;
};

struct Candidate {
  double score;
  std::size_t parent;
  TokenId token;  // -1 carries a finished hypothesis over unchanged
};

}  // namespace

DecodeTrace decode_beam(const StepModel& model, const Mat& ctx, int beam) {
  if (beam < 1) throw ConfigError("beam must be >= 1");
  const int max_len = model.config().max_len;
  DecodeTrace trace;
  trace.manner = Manner::AR;
  std::vector<Hypothesis> hyps;
  hyps.push_back({{}, 0.0, false, model.start_filling(ctx)});

  for (int step = 0; step < max_len; ++step) {
    std::vector<Candidate> cands;
    std::vector<Mat> probs(hyps.size());
    bool any_live = false;
    for (std::size_t h = 0; h < hyps.size(); ++h) {
      if (hyps[h].finished) {
        cands.push_back({hyps[h].score, h, -1});
        continue;
      }
      any_live = true;
      const TokenId last = hyps[h].tokens.empty() ? kBos : hyps[h].tokens.back();
      const SlotTag tag = ar_tag(step, max_len);
      probs[h] = timed(trace.wall_time_ns, [&] { return hyps[h].cursor->append({&last, 1}, {&tag, 1}); });
      ++trace.hypothesis_evals;
      for (int v = 0; v < probs[h].cols(); ++v) {
        if (v == kPad || v == kBos) continue;
        cands.push_back({hyps[h].score + std::log(std::max(probs[h](0, v), kProbFloor)), h, v});
      }
    }
    if (!any_live) break;
    ++trace.model_calls.filling;
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (static_cast<int>(cands.size()) > beam) cands.resize(static_cast<std::size_t>(beam));

    std::vector<Hypothesis> next;
    std::vector<double> scores;
    for (const auto& c : cands) {
      const Hypothesis& parent = hyps[c.parent];
      Hypothesis h;
      h.tokens = parent.tokens;
      h.score = c.score;
      if (c.token < 0) {
        h.finished = true;
      } else if (c.token == kEos) {
        h.finished = true;
      } else {
        h.tokens.push_back(c.token);
        h.finished = static_cast<int>(h.tokens.size()) >= max_len;
        if (!h.finished) h.cursor = parent.cursor->clone();
      }
      scores.push_back(h.score);
      next.push_back(std::move(h));
    }
    trace.beam_scores.push_back(std::move(scores));
    hyps = std::move(next);
    if (std::all_of(hyps.begin(), hyps.end(), [](const Hypothesis& h) { return h.finished; })) break;
  }
  trace.tokens = hyps.front().tokens;
  return trace;
}

DecodeTrace decode_ar(const StepModel& model, const Mat& ctx, int beam) {
  if (beam < 1) throw ConfigError("beam must be >= 1");
  return beam == 1 ? greedy_ar(model, ctx) : decode_beam(model, ctx, beam);
}

DecodeTrace generate(const StepModel& model, const Mat& regions, const GenerateOptions& options) {
  std::int64_t ns = 0;
  const Mat ctx = timed(ns, [&] { return model.encode_regions(regions); });
  DecodeTrace trace;
  if (options.manner == Manner::AR) {
    trace = decode_ar(model, ctx, options.beam);
  } else {
    BoundingSequence boxes;
    long bound_calls = 0, overhead = 0;
    if (options.boxes) {
      boxes = *options.boxes;
    } else {
      BoundingResult b;
      try {
        b = timed(ns, [&] { return decode_bounding(model, ctx, model.config().max_boxes); });
      } catch (const EmptyBoundingError&) {
        // EOB won the first step: one wasted call, then retry with EOB masked.
        bound_calls = overhead = 1;
        b = timed(ns, [&] { return decode_bounding(model, ctx, model.config().max_boxes, true); });
      }
      bound_calls += b.calls;
      overhead += b.calls - static_cast<long>(b.boxes.size());
      boxes = std::move(b.boxes);
    }
    if (options.plain_tags) boxes = {BoxSpec{BoxType::OTHER, total_length(boxes)}};
    trace = options.manner == Manner::NA ? decode_na(model, ctx, boxes) : decode_sa(model, ctx, boxes);
    trace.model_calls.bounding = bound_calls;
    trace.bounding_overhead = overhead;
  }
  trace.wall_time_ns += ns;
  return trace;
}

}  // namespace bofi
