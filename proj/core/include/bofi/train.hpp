#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bofi/autodiff.hpp"
#include "bofi/boxes.hpp"
#include "bofi/corpus.hpp"
#include "bofi/decode.hpp"
#include "bofi/metrics.hpp"
#include "bofi/model.hpp"
#include "bofi/rng.hpp"

namespace bofi {

/// joint: bound + na + sa + imit. sa-only / na-only: bound + that path.
/// ar: token-causal training of the shared decoder (the AR baseline).
/// plain: bound + na with every position tagged as one OTHER box (ablation).
enum class TrainMode { Joint, SaOnly, NaOnly, Ar, Plain };
/// None drops the imitation term from joint training.
enum class ImitMode { Full, Scalar, None };

std::string_view train_mode_name(TrainMode m);
TrainMode train_mode_from_name(std::string_view name);  // throws ConfigError
std::string_view imit_mode_name(ImitMode m);
ImitMode imit_mode_from_name(std::string_view name);

/// A record prepared for training: ids, gold boxes at the configured level.
struct Example {
  std::string id;
  Mat regions;
  std::vector<TokenId> tokens;
  BoundingSequence boxes;
  RefSet refs;
};

struct ExampleSet {
  std::vector<Example> examples;
  std::size_t skipped = 0;  // records without a usable tree
};

/// Records lacking a tree, or whose boxes exceed the model limits, are skipped.
/// Records without references use their own caption as the only reference.
ExampleSet make_examples(std::span<const CaptionRecord> records, const Vocab& vocab, int level,
                         const ModelConfig& config);

struct LossBreakdown {
  double bound = 0.0;
  double na = 0.0;
  double sa = 0.0;
  double imit = 0.0;
  double ar = 0.0;
  double total = 0.0;
};

// Per-example losses recorded on a tape. Each is a 1x1 sum over positions.
ad::Var loss_bound(ad::Tape& t, const ParamVars& pv, const Model& m, ad::Var ctx, std::span<const BoxSpec> boxes);
ad::Var loss_na(ad::Tape& t, const ParamVars& pv, const Model& m, ad::Var ctx, std::span<const TokenId> tokens,
                std::span<const BoxSpec> boxes);
ad::Var loss_sa(ad::Tape& t, const ParamVars& pv, const Model& m, ad::Var ctx, std::span<const TokenId> tokens,
                std::span<const BoxSpec> boxes);
ad::Var loss_ar(ad::Tape& t, const ParamVars& pv, const Model& m, ad::Var ctx, std::span<const TokenId> tokens);
ad::Var loss_plain(ad::Tape& t, const ParamVars& pv, const Model& m, ad::Var ctx, std::span<const TokenId> tokens);

/// Imitation of SA by NA: FULL is (1/T) sum_t KL(p^n_t || p^s_t) over the
/// vocabulary; SCALAR is (1/T) sum_t p^n(w_t) log(p^n(w_t) / p^s(w_t)).
/// `sa_probs` is held constant.
ad::Var loss_imit(ad::Tape& t, ad::Var na_logits, const Mat& sa_probs, std::span<const TokenId> targets,
                  ImitMode mode);

/// Canvas builders shared by training and tests.
FillCanvas na_canvas(std::span<const BoxSpec> boxes);
FillCanvas sa_canvas(std::span<const TokenId> tokens, std::span<const BoxSpec> boxes);
FillCanvas ar_canvas(std::span<const TokenId> tokens, int max_len);
FillCanvas plain_canvas(int length, int max_len);

struct LossOptions {
  TrainMode mode = TrainMode::Joint;
  ImitMode imit = ImitMode::Full;
  /// Frozen SA distributions, one per batch example; empty means they are
  /// taken from the current forward pass.
  std::span<const Mat> imit_targets;
};

/// SA output distributions under teacher forcing, one matrix per example.
std::vector<Mat> sa_targets(const Model& m, std::span<const Example* const> batch);

/// Mean over the batch of the mode's objective. `parts` receives the
/// component values (also batch means).
ad::Var batch_loss(ad::Tape& t, const ParamVars& pv, const Model& m, std::span<const Example* const> batch,
                   const LossOptions& options, LossBreakdown* parts = nullptr);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

class Adam {
 public:
  Adam(const Model& model, AdamConfig config);
  void step(Model& model, const Gradients& grads);
  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

struct TrainOptions {
  LossOptions loss;
  AdamConfig adam;
  int batch = 32;
  std::uint64_t seed = 1;
};

struct StepLog {
  long step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

class Trainer {
 public:
  Trainer(Model& model, TrainOptions options);

  StepLog step(std::span<const Example* const> batch);
  /// Shuffles (seeded by epoch), splits into batches, steps through them.
  std::vector<StepLog> train_epoch(std::span<const Example> examples,
                                   const std::function<void(const StepLog&)>& on_step = {});
  int epoch() const { return epoch_; }
  Adam& optimizer() { return adam_; }

 private:
  Model& model_;
  TrainOptions options_;
  Adam adam_;
  int epoch_ = 0;
};

using RewardFn = std::function<double(const std::vector<TokenId>& sample, const Example& ex)>;

struct RLConfig {
  int M = 5;
  Manner manner = Manner::NA;
  RewardFn reward;  // CIDEr-D against the example's refs when empty
};

struct ScstResult {
  double pseudo_loss = 0.0;
  double mean_reward = 0.0;
};

/// One self-critical update: per example, bound greedily, sample M captions
/// from the filling distributions, reward them, and ascend
/// (1/M) sum_m (r_m - b_m) log p(S_m) with b_m the mean of the other rewards.
ScstResult scst_step(Model& model, Adam& adam, std::span<const Example* const> batch, const Vocab& vocab,
                     const CiderD& scorer, const RLConfig& rl, Rng& rng);

/// Per-sample advantages r_m - mean(r_{-m}).
std::vector<double> scst_advantages(std::span<const double> rewards);

using Teacher = std::function<std::vector<std::string>(const CaptionRecord&)>;

/// Replaces every record's caption by the teacher's. The tree is kept when the
/// caption is unchanged, otherwise re-derived by writing the teacher words into
/// the original leaves; records whose lengths do not align are dropped.
std::vector<CaptionRecord> distill_corpus(const Teacher& teacher, std::span<const CaptionRecord> records);

/// Beam search over the shared decoder as a teacher.
Teacher ar_teacher(const Model& model, const Vocab& vocab, int beam = 3);

/// Runs generate() for each example and scores against its refs.
struct EvalResult {
  MetricReport metrics;
  std::vector<Sentence> captions;
  std::vector<DecodeTrace> traces;
};
EvalResult evaluate_model(const StepModel& model, const Vocab& vocab, std::span<const Example> examples,
                          const GenerateOptions& options);

}  // namespace bofi
