#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bofi/autodiff.hpp"
#include "bofi/boxes.hpp"
#include "bofi/corpus.hpp"
#include "bofi/tensor.hpp"

namespace bofi {

struct ModelConfig {
  int vocab_size = 0;
  int d = 64;
  int n_enc = 2;
  int n_dec = 2;
  int heads = 4;
  int d_ff = 128;
  int d_r = 32;
  int max_len = kDefaultMaxLen;
  int max_boxes = 16;
  int max_box_len = 16;
  double init_range = 0.08;

  void validate() const;  // throws ConfigError
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Param {
  std::string name;
  Mat value;
};

/// One gradient matrix per parameter, same order and shapes.
using Gradients = std::vector<Mat>;
using ParamVars = std::vector<ad::Var>;

/// Decoder-input description for the filling decoder: input token plus slot
/// tag per position.
struct FillCanvas {
  std::vector<TokenId> inputs;
  std::vector<SlotTag> tags;
};

struct BoxDistributions {
  std::vector<double> type;    // over BoxType, EOB included
  std::vector<double> length;  // index j is length j + 1
};

/// Stateful bounding decoder: one call per generated box.
class BoundingCursor {
 public:
  virtual ~BoundingCursor() = default;
  /// `prev` is the box produced by the previous step; empty on the first call.
  virtual BoxDistributions step(const std::optional<BoxSpec>& prev) = 0;
};

/// Stateful filling decoder. Each append() adds a block of positions that
/// attend to every earlier position and to the whole block itself, and
/// returns their output distributions (block rows x vocab).
class FillingCursor {
 public:
  virtual ~FillingCursor() = default;
  virtual Mat append(std::span<const TokenId> inputs, std::span<const SlotTag> tags) = 0;
  virtual int length() const = 0;
  virtual std::unique_ptr<FillingCursor> clone() const = 0;
};

/// The inference surface the schedulers run against.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual const ModelConfig& config() const = 0;
  virtual Mat encode_regions(const Mat& regions) const = 0;
  virtual std::unique_ptr<BoundingCursor> start_bounding(const Mat& ctx) const = 0;
  virtual std::unique_ptr<FillingCursor> start_filling(const Mat& ctx) const = 0;
};

/// Region encoder (no positional encoding), one-layer autoregressive bounding
/// decoder with type and length heads, and a single filling decoder shared by
/// every generation manner.
class Model : public StepModel {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const override { return config_; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t param_index(std::string_view name) const;
  Param& param(std::string_view name) { return params_[param_index(name)]; }
  const Param& param(std::string_view name) const { return params_[param_index(name)]; }
  std::size_t num_weights() const;

  Gradients zero_gradients() const;

  // Differentiable forward passes.
  ParamVars bind(ad::Tape& tape) const;
  ad::Var encode(ad::Tape& tape, const ParamVars& pv, const Mat& regions) const;

  struct BoundingLogits {
    ad::Var type;    // (history + 1) x kNumBoxTypes
    ad::Var length;  // (history + 1) x max_box_len
  };
  /// Row t predicts box t + 1 given boxes 1..t (row 0 sees only BOS).
  BoundingLogits bounding_logits(ad::Tape& tape, const ParamVars& pv, ad::Var ctx,
                                 std::span<const BoxSpec> history) const;

  /// Logits over the vocabulary for every canvas position under `mask`.
  ad::Var fill_logits(ad::Tape& tape, const ParamVars& pv, ad::Var ctx, const FillCanvas& canvas,
                      const AttentionMask& mask) const;

  // Inference.
  Mat encode_regions(const Mat& regions) const override;
  BoxDistributions bounding_step(const Mat& ctx, std::span<const BoxSpec> history) const;
  Mat fill_forward(const Mat& ctx, const FillCanvas& canvas, const AttentionMask& mask) const;
  std::unique_ptr<BoundingCursor> start_bounding(const Mat& ctx) const override;
  std::unique_ptr<FillingCursor> start_filling(const Mat& ctx) const override;

  struct LinearIds {
    std::size_t w, b;
  };
  struct NormIds {
    std::size_t gain, bias;
  };
  struct AttentionIds {
    LinearIds q, k, v, o;
  };
  struct EncoderLayerIds {
    AttentionIds self;
    NormIds norm1;
    LinearIds ff1, ff2;
    NormIds norm2;
  };
  struct DecoderLayerIds {
    AttentionIds self;
    NormIds norm1;
    AttentionIds cross;
    NormIds norm2;
    LinearIds ff1, ff2;
    NormIds norm3;
  };

 private:
  std::size_t add_param(std::string name, int rows, int cols);
  LinearIds add_linear(const std::string& prefix, int in, int out);
  NormIds add_norm(const std::string& prefix);
  AttentionIds add_attention(const std::string& prefix);
  DecoderLayerIds add_decoder_layer(const std::string& prefix);

  ad::Var decoder_layer(ad::Tape& tape, const ParamVars& pv, const DecoderLayerIds& ids, ad::Var x, ad::Var ctx,
                        const AttentionMask& self_mask) const;
  FillCanvas checked(const FillCanvas& canvas) const;

  friend class ModelBoundingCursor;
  friend class ModelFillingCursor;

  ModelConfig config_;
  std::vector<Param> params_;

  LinearIds enc_in_{};
  std::vector<EncoderLayerIds> enc_layers_;
  std::size_t bound_type_emb_ = 0, bound_len_emb_ = 0, bound_pos_emb_ = 0;
  DecoderLayerIds bound_layer_{};
  LinearIds type_head_{}, len_head_{};
  std::size_t tok_emb_ = 0, box_type_emb_ = 0, slot_pos_emb_ = 0, pos_emb_ = 0;
  std::vector<DecoderLayerIds> fill_layers_;
  LinearIds out_proj_{};
};

/// Row index of the BOS-box in the bounding type embedding.
inline constexpr int kBosBoxRow = kNumBoxTypes;

/// Visibility for the filling decoder: every position sees the whole canvas
/// (NA), or every earlier box plus its own (SA), or earlier tokens (AR).
AttentionMask all_visible_mask(int n);
AttentionMask box_causal_mask(std::span<const SlotTag> tags);
AttentionMask token_causal_mask(int n);

/// Neutral tags used by autoregressive decoding: one OTHER box covering the
/// sequence, positions clamped to the embedding tables.
std::vector<SlotTag> neutral_tags(int n, int max_len);

struct GradCheckEntry {
  std::string block;
  double max_rel_error = 0.0;  // max |a - n| divided by the block's largest gradient magnitude
  double max_abs_error = 0.0;
  double scale = 0.0;          // largest |gradient| in the block
  std::size_t checked = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> blocks;
  double tolerance = 0.0;
  bool passed() const;
  double max_rel_error() const;
};

using LossFn = std::function<ad::Var(ad::Tape&, const ParamVars&)>;

/// Compares analytic gradients of `loss` against central differences with
/// step h, for every parameter block. Blocks whose gradient scale is below
/// the difference round-off floor, max(1e-10, 100 eps max(1, |L|) / h), are
/// judged by absolute error instead. `max_entries` > 0 samples that
/// many evenly spaced entries per block. `analytic` overrides the tape's
/// gradients (fault injection in tests).
GradCheckReport grad_check(Model& model, const LossFn& loss, double tolerance, double h = 1e-5,
                           std::size_t max_entries = 0, const Gradients* analytic = nullptr);

/// Analytic gradients of `loss` via one reverse sweep; returns the loss value.
double gradients(const Model& model, const LossFn& loss, Gradients& out);

// Checkpoint: JSON container, see docs/checkpoint.md.
void save_checkpoint(const Model& model, const Vocab& vocab, const std::filesystem::path& path);
struct Checkpoint {
  Model model;
  Vocab vocab;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bofi
