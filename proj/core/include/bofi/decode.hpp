#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "bofi/boxes.hpp"
#include "bofi/corpus.hpp"
#include "bofi/error.hpp"
#include "bofi/model.hpp"

namespace bofi {

enum class Manner { AR, NA, SA };

std::string_view manner_name(Manner m);   // "ar", "na", "sa"
Manner manner_from_name(std::string_view name);  // throws ConfigError

struct ModelCalls {
  long bounding = 0;
  long filling = 0;
  long total() const { return bounding + filling; }
};

struct DecodeTrace {
  Manner manner = Manner::AR;
  ModelCalls model_calls;
  /// Decoder rows evaluated by beam search: one per live hypothesis per step.
  long hypothesis_evals = 0;
  /// Bounding calls that produced no box (the EOB step, or a box clamped to
  /// zero length), plus calls spent on a retry after an empty bounding.
  long bounding_overhead = 0;
  std::int64_t wall_time_ns = 0;
  std::vector<TokenId> tokens;
  std::optional<BoundingSequence> boxes_used;
  /// Sorted hypothesis scores after each beam step.
  std::vector<std::vector<double>> beam_scores;
};

class EmptyBoundingError : public ModelError {
 public:
  EmptyBoundingError() : ModelError("empty bounding") {}
};

struct BoundingResult {
  BoundingSequence boxes;
  long calls = 0;
  bool stopped_by_eob = false;
  bool dropped_final = false;
};

/// Greedy bounding loop. Stops on EOB or after max_boxes boxes; a box that
/// would push the total past max_len is truncated, and dropped (ending the
/// loop) when nothing of it remains. Throws EmptyBoundingError when
/// EOB wins the first step unless `mask_eob_first`.
BoundingResult decode_bounding(const StepModel& model, const Mat& ctx, int max_boxes, bool mask_eob_first = false);

/// Copy counts n_1..n_{l_prev} for mapping a box of l_prev tokens onto l_next
/// positions.
std::vector<int> copy_counts(int l_prev, int l_next);
std::vector<TokenId> position_wise_copy(std::span<const TokenId> prev, int l_next);

DecodeTrace decode_na(const StepModel& model, const Mat& ctx, std::span<const BoxSpec> boxes);
DecodeTrace decode_sa(const StepModel& model, const Mat& ctx, std::span<const BoxSpec> boxes);
/// Left-to-right decoding; beam == 1 is plain greedy search.
DecodeTrace decode_ar(const StepModel& model, const Mat& ctx, int beam = 1);
/// Beam search proper, also for beam == 1. Scores are summed log-probabilities;
/// finished hypotheses compete with live ones at every step.
DecodeTrace decode_beam(const StepModel& model, const Mat& ctx, int beam);

struct GenerateOptions {
  Manner manner = Manner::NA;
  int beam = 1;
  std::optional<BoundingSequence> boxes;  // user-specified B skips bounding
  /// Fill one OTHER box spanning the bounded length (the untagged ablation).
  bool plain_tags = false;
};

/// encode -> bound (unless B is given) -> fill, timed around model calls.
DecodeTrace generate(const StepModel& model, const Mat& regions, const GenerateOptions& options);

/// Index of the largest entry, skipping `excluded` ids; lowest index wins ties.
int argmax_excluding(std::span<const double> probs, std::span<const int> excluded);

}  // namespace bofi
