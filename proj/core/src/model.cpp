#include "bofi/model.hpp"

#include <algorithm>
#include <limits>
#include <cmath>

#include "bofi/error.hpp"
#include "bofi/rng.hpp"

namespace bofi {

using ad::Tape;
using ad::Var;

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model config: " + msg);
  };
  require(vocab_size > kNumReserved, "vocab_size must exceed the reserved tokens");
  require(d >= 1 && heads >= 1 && d % heads == 0, "d must be a positive multiple of heads");
  require(n_enc >= 0 && n_dec >= 1, "need n_enc >= 0 and n_dec >= 1");
  require(d_ff >= 1 && d_r >= 1, "d_ff and d_r must be positive");
  require(max_len >= 1 && max_boxes >= 1 && max_box_len >= 1, "length limits must be positive");
  require(max_boxes <= max_len, "max_boxes cannot exceed max_len");
  require(init_range >= 0.0, "init_range must be non-negative");
}

// ---------------------------------------------------------------------------
// Construction

std::size_t Model::add_param(std::string name, int rows, int cols) {
  params_.push_back(Param{std::move(name), Mat::Zero(rows, cols)});
  return params_.size() - 1;
}

Model::LinearIds Model::add_linear(const std::string& prefix, int in, int out) {
  return {add_param(prefix + ".w", in, out), add_param(prefix + ".b", 1, out)};
}

Model::NormIds Model::add_norm(const std::string& prefix) {
  return {add_param(prefix + ".gain", 1, config_.d), add_param(prefix + ".bias", 1, config_.d)};
}

Model::AttentionIds Model::add_attention(const std::string& prefix) {
  const int d = config_.d;
  return {add_linear(prefix + ".q", d, d), add_linear(prefix + ".k", d, d), add_linear(prefix + ".v", d, d),
          add_linear(prefix + ".o", d, d)};
}

Model::DecoderLayerIds Model::add_decoder_layer(const std::string& prefix) {
  DecoderLayerIds ids;
  ids.self = add_attention(prefix + ".self");
  ids.norm1 = add_norm(prefix + ".norm1");
  ids.cross = add_attention(prefix + ".cross");
  ids.norm2 = add_norm(prefix + ".norm2");
  ids.ff1 = add_linear(prefix + ".ff1", config_.d, config_.d_ff);
  ids.ff2 = add_linear(prefix + ".ff2", config_.d_ff, config_.d);
  ids.norm3 = add_norm(prefix + ".norm3");
  return ids;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int d = config_.d;
  const int table_len = config_.max_len + 1;

  enc_in_ = add_linear("enc.in", config_.d_r, d);
  for (int i = 0; i < config_.n_enc; ++i) {
    const std::string p = "enc." + std::to_string(i);
    EncoderLayerIds ids;
    ids.self = add_attention(p + ".self");
    ids.norm1 = add_norm(p + ".norm1");
    ids.ff1 = add_linear(p + ".ff1", d, config_.d_ff);
    ids.ff2 = add_linear(p + ".ff2", config_.d_ff, d);
    ids.norm2 = add_norm(p + ".norm2");
    enc_layers_.push_back(ids);
  }

  bound_type_emb_ = add_param("bound.type_emb", kNumBoxTypes + 1, d);
  bound_len_emb_ = add_param("bound.len_emb", config_.max_box_len + 1, d);
  bound_pos_emb_ = add_param("bound.pos_emb", config_.max_boxes + 1, d);
  bound_layer_ = add_decoder_layer("bound.layer");
  type_head_ = add_linear("bound.type_head", d, kNumBoxTypes);
  len_head_ = add_linear("bound.len_head", d, config_.max_box_len);

  tok_emb_ = add_param("fill.tok_emb", config_.vocab_size, d);
  box_type_emb_ = add_param("fill.type_emb", kNumBoxTypes, d);
  slot_pos_emb_ = add_param("fill.slot_pos_emb", table_len, d);
  pos_emb_ = add_param("fill.pos_emb", table_len, d);
  for (int i = 0; i < config_.n_dec; ++i) fill_layers_.push_back(add_decoder_layer("fill." + std::to_string(i)));
  out_proj_ = add_linear("fill.out", d, config_.vocab_size);

  Rng rng(seed);
  const double r = config_.init_range;
  for (auto& p : params_) {
    const bool is_gain = p.name.ends_with(".gain");
    const bool is_norm_bias = p.name.ends_with(".bias");
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double u = rng.uniform(-r, r);
      p.value.data()[i] = is_gain ? 1.0 : (is_norm_bias ? 0.0 : u);
    }
  }
}

std::size_t Model::param_index(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw ModelError("no parameter named '" + std::string(name) + "'");
}

std::size_t Model::num_weights() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Gradients Model::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
  return g;
}

// ---------------------------------------------------------------------------
// Differentiable forward

ParamVars Model::bind(Tape& tape) const {
  ParamVars pv;
  pv.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) pv.push_back(tape.param(params_[i].value, static_cast<int>(i)));
  return pv;
}

namespace {

Var lin(Tape& t, const ParamVars& pv, const Model::LinearIds& ids, Var x) {
  return ad::linear(t, x, pv[ids.w], pv[ids.b]);
}

Var norm(Tape& t, const ParamVars& pv, const Model::NormIds& ids, Var x) {
  return ad::layer_norm(t, x, pv[ids.gain], pv[ids.bias]);
}

Var mha(Tape& t, const ParamVars& pv, const Model::AttentionIds& ids, Var x, Var mem, const AttentionMask& mask,
        int heads) {
  Var q = lin(t, pv, ids.q, x);
  Var k = lin(t, pv, ids.k, mem);
  Var v = lin(t, pv, ids.v, mem);
  return lin(t, pv, ids.o, ad::attention(t, q, k, v, mask, heads));
}

Var ffn(Tape& t, const ParamVars& pv, const Model::LinearIds& ff1, const Model::LinearIds& ff2, Var x) {
  return lin(t, pv, ff2, ad::relu(t, lin(t, pv, ff1, x)));
}

}  // namespace

Var Model::encode(Tape& tape, const ParamVars& pv, const Mat& regions) const {
  if (regions.rows() < 1) throw ModelError("encode: no regions");
  if (regions.cols() != config_.d_r)
    throw ModelError("encode: region dimension " + std::to_string(regions.cols()) + ", model expects " +
                     std::to_string(config_.d_r));
  const int n = static_cast<int>(regions.rows());
  Var x = lin(tape, pv, enc_in_, tape.constant(regions));
  const AttentionMask mask = AttentionMask::all(n, n);
  for (const auto& l : enc_layers_) {
    x = norm(tape, pv, l.norm1, ad::add(tape, x, mha(tape, pv, l.self, x, x, mask, config_.heads)));
    x = norm(tape, pv, l.norm2, ad::add(tape, x, ffn(tape, pv, l.ff1, l.ff2, x)));
  }
  return x;
}

Var Model::decoder_layer(Tape& tape, const ParamVars& pv, const DecoderLayerIds& l, Var x, Var ctx,
                         const AttentionMask& self_mask) const {
  const int n = static_cast<int>(tape.value(x).rows());
  const int m = static_cast<int>(tape.value(ctx).rows());
  x = norm(tape, pv, l.norm1, ad::add(tape, x, mha(tape, pv, l.self, x, x, self_mask, config_.heads)));
  x = norm(tape, pv, l.norm2,
           ad::add(tape, x, mha(tape, pv, l.cross, x, ctx, AttentionMask::all(n, m), config_.heads)));
  return norm(tape, pv, l.norm3, ad::add(tape, x, ffn(tape, pv, l.ff1, l.ff2, x)));
}

namespace {

struct BoundingRows {
  std::vector<int> type, length, step;
};

BoundingRows bounding_rows(std::span<const BoxSpec> history, const ModelConfig& cfg) {
  if (static_cast<int>(history.size()) >= cfg.max_boxes + 1)
    throw ModelError("bounding history longer than max_boxes");
  BoundingRows r;
  r.type.push_back(kBosBoxRow);
  r.length.push_back(0);
  r.step.push_back(0);
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& b = history[i];
    if (b.type == BoxType::EOB) throw ModelError("EOB in bounding history");
    r.type.push_back(static_cast<int>(b.type));
    r.length.push_back(std::clamp(b.length, 1, cfg.max_box_len));
    r.step.push_back(static_cast<int>(i) + 1);
  }
  return r;
}

}  // namespace

Model::BoundingLogits Model::bounding_logits(Tape& tape, const ParamVars& pv, Var ctx,
                                             std::span<const BoxSpec> history) const {
  const BoundingRows rows = bounding_rows(history, config_);
  Var x = ad::add(tape, ad::gather_rows(tape, pv[bound_type_emb_], rows.type),
                  ad::gather_rows(tape, pv[bound_len_emb_], rows.length));
  x = ad::add(tape, x, ad::gather_rows(tape, pv[bound_pos_emb_], rows.step));
  x = decoder_layer(tape, pv, bound_layer_, x, ctx, AttentionMask::token_causal(static_cast<int>(rows.type.size())));
  return {lin(tape, pv, type_head_, x), lin(tape, pv, len_head_, x)};
}

FillCanvas Model::checked(const FillCanvas& canvas) const {
  if (canvas.inputs.size() != canvas.tags.size())
    throw ModelError("fill canvas: " + std::to_string(canvas.inputs.size()) + " inputs but " +
                     std::to_string(canvas.tags.size()) + " tags");
  if (canvas.inputs.empty()) throw ModelError("fill canvas is empty");
  if (static_cast<int>(canvas.inputs.size()) > config_.max_len + 1)
    throw ModelError("fill canvas longer than max_len + 1");
  for (TokenId t : canvas.inputs)
    if (t < 0 || t >= config_.vocab_size) throw ModelError("token id " + std::to_string(t) + " outside vocabulary");
  return canvas;
}

Var Model::fill_logits(Tape& tape, const ParamVars& pv, Var ctx, const FillCanvas& canvas,
                       const AttentionMask& mask) const {
  checked(canvas);
  const int n = static_cast<int>(canvas.inputs.size());
  if (mask.rows() != n || mask.cols() != n) throw ModelError("fill mask shape does not match the canvas");
  std::vector<int> tok(canvas.inputs.begin(), canvas.inputs.end());
  std::vector<int> type(n), slot(n), pos(n);
  for (int p = 0; p < n; ++p) {
    const auto& tg = canvas.tags[static_cast<std::size_t>(p)];
    type[static_cast<std::size_t>(p)] = static_cast<int>(tg.type);
    slot[static_cast<std::size_t>(p)] = std::min(tg.pos, config_.max_len);
    pos[static_cast<std::size_t>(p)] = p;
  }
  Var x = ad::add(tape, ad::gather_rows(tape, pv[tok_emb_], tok), ad::gather_rows(tape, pv[box_type_emb_], type));
  x = ad::add(tape, x, ad::gather_rows(tape, pv[slot_pos_emb_], slot));
  x = ad::add(tape, x, ad::gather_rows(tape, pv[pos_emb_], pos));
  for (const auto& l : fill_layers_) x = decoder_layer(tape, pv, l, x, ctx, mask);
  return lin(tape, pv, out_proj_, x);
}

// ---------------------------------------------------------------------------
// Inference

Mat Model::encode_regions(const Mat& regions) const {
  Tape tape(false);
  const ParamVars pv = bind(tape);
  return tape.value(encode(tape, pv, regions));
}

BoxDistributions Model::bounding_step(const Mat& ctx, std::span<const BoxSpec> history) const {
  Tape tape(false);
  const ParamVars pv = bind(tape);
  const auto logits = bounding_logits(tape, pv, tape.constant(ctx), history);
  const Mat type = kernels::softmax_rows(tape.value(logits.type));
  const Mat len = kernels::softmax_rows(tape.value(logits.length));
  const auto last = type.rows() - 1;
  BoxDistributions out;
  out.type.assign(type.row(last).data(), type.row(last).data() + type.cols());
  out.length.assign(len.row(last).data(), len.row(last).data() + len.cols());
  return out;
}

Mat Model::fill_forward(const Mat& ctx, const FillCanvas& canvas, const AttentionMask& mask) const {
  Tape tape(false);
  const ParamVars pv = bind(tape);
  return kernels::softmax_rows(tape.value(fill_logits(tape, pv, tape.constant(ctx), canvas, mask)));
}

namespace {

struct LayerCache {
  Mat self_k, self_v;    // grows with every appended block
  Mat cross_k, cross_v;  // fixed per context
};

Mat lin_value(const std::vector<Param>& ps, const Model::LinearIds& ids, const Mat& x) {
  return kernels::linear(x, ps[ids.w].value, ps[ids.b].value);
}

Mat norm_value(const std::vector<Param>& ps, const Model::NormIds& ids, const Mat& x) {
  return kernels::layer_norm(x, ps[ids.gain].value, ps[ids.bias].value, 1e-5);
}

void append_rows(Mat& dst, const Mat& rows) {
  const auto old = dst.rows();
  dst.conservativeResize(old + rows.rows(), rows.cols());
  dst.bottomRows(rows.rows()) = rows;
}

LayerCache make_cache(const std::vector<Param>& ps, const Model::DecoderLayerIds& l, const Mat& ctx, int d) {
  LayerCache c;
  c.self_k.resize(0, d);
  c.self_v.resize(0, d);
  c.cross_k = lin_value(ps, l.cross.k, ctx);
  c.cross_v = lin_value(ps, l.cross.v, ctx);
  return c;
}

/// Incremental decoder layer: the block attends to all cached rows and to
/// itself in full.
Mat layer_step(const std::vector<Param>& ps, const Model::DecoderLayerIds& l, LayerCache& c, const Mat& x,
               int heads) {
  append_rows(c.self_k, lin_value(ps, l.self.k, x));
  append_rows(c.self_v, lin_value(ps, l.self.v, x));
  const int b = static_cast<int>(x.rows());
  Mat a = kernels::attention(lin_value(ps, l.self.q, x), c.self_k, c.self_v,
                             AttentionMask::all(b, static_cast<int>(c.self_k.rows())), heads);
  Mat h = norm_value(ps, l.norm1, x + lin_value(ps, l.self.o, a));
  a = kernels::attention(lin_value(ps, l.cross.q, h), c.cross_k, c.cross_v,
                         AttentionMask::all(b, static_cast<int>(c.cross_k.rows())), heads);
  h = norm_value(ps, l.norm2, h + lin_value(ps, l.cross.o, a));
  const Mat f = lin_value(ps, l.ff2, kernels::relu(lin_value(ps, l.ff1, h)));
  return norm_value(ps, l.norm3, h + f);
}

}  // namespace

class ModelBoundingCursor final : public BoundingCursor {
 public:
  ModelBoundingCursor(const Model& m, const Mat& ctx)
      : m_(m), cache_(make_cache(m.params_, m.bound_layer_, ctx, m.config_.d)) {}

  BoxDistributions step(const std::optional<BoxSpec>& prev) override {
    const auto& ps = m_.params_;
    const auto& cfg = m_.config_;
    if (steps_ > cfg.max_boxes) throw ModelError("bounding cursor stepped past max_boxes");
    int type = kBosBoxRow, len = 0;
    if (prev) {
      if (steps_ == 0) throw ModelError("first bounding step takes no previous box");
      if (prev->type == BoxType::EOB) throw ModelError("EOB in bounding history");
      type = static_cast<int>(prev->type);
      len = std::clamp(prev->length, 1, cfg.max_box_len);
    } else if (steps_ != 0) {
      throw ModelError("bounding step after the first needs the previous box");
    }
    Mat x = ps[m_.bound_type_emb_].value.row(type) + ps[m_.bound_len_emb_].value.row(len) +
            ps[m_.bound_pos_emb_].value.row(steps_);
    x = layer_step(ps, m_.bound_layer_, cache_, x, cfg.heads);
    ++steps_;
    Mat t = kernels::softmax_rows(lin_value(ps, m_.type_head_, x));
    Mat l = kernels::softmax_rows(lin_value(ps, m_.len_head_, x));
    BoxDistributions out;
    out.type.assign(t.data(), t.data() + t.size());
    out.length.assign(l.data(), l.data() + l.size());
    return out;
  }

 private:
  const Model& m_;
  LayerCache cache_;
  int steps_ = 0;
};

class ModelFillingCursor final : public FillingCursor {
 public:
  ModelFillingCursor(const Model& m, const Mat& ctx) : m_(m) {
    for (const auto& l : m.fill_layers_) caches_.push_back(make_cache(m.params_, l, ctx, m.config_.d));
  }

  Mat append(std::span<const TokenId> inputs, std::span<const SlotTag> tags) override {
    const auto& ps = m_.params_;
    const auto& cfg = m_.config_;
    if (inputs.size() != tags.size()) throw ModelError("append: inputs and tags differ in length");
    if (inputs.empty()) throw ModelError("append: empty block");
    if (length_ + static_cast<int>(inputs.size()) > cfg.max_len + 1)
      throw ModelError("append: canvas longer than max_len + 1");
    const int b = static_cast<int>(inputs.size());
    Mat x(b, cfg.d);
    for (int i = 0; i < b; ++i) {
      const TokenId tok = inputs[static_cast<std::size_t>(i)];
      if (tok < 0 || tok >= cfg.vocab_size) throw ModelError("token id " + std::to_string(tok) + " outside vocabulary");
      const auto& tg = tags[static_cast<std::size_t>(i)];
      x.row(i) = ps[m_.tok_emb_].value.row(tok) + ps[m_.box_type_emb_].value.row(static_cast<int>(tg.type)) +
                 ps[m_.slot_pos_emb_].value.row(std::min(tg.pos, cfg.max_len)) +
                 ps[m_.pos_emb_].value.row(length_ + i);
    }
    for (std::size_t l = 0; l < caches_.size(); ++l) x = layer_step(ps, m_.fill_layers_[l], caches_[l], x, cfg.heads);
    length_ += b;
    Mat probs = lin_value(ps, m_.out_proj_, x);
    kernels::softmax_rows_inplace(probs);
    return probs;
  }

  int length() const override { return length_; }

  std::unique_ptr<FillingCursor> clone() const override { return std::make_unique<ModelFillingCursor>(*this); }

 private:
  const Model& m_;
  std::vector<LayerCache> caches_;
  int length_ = 0;
};

std::unique_ptr<BoundingCursor> Model::start_bounding(const Mat& ctx) const {
  return std::make_unique<ModelBoundingCursor>(*this, ctx);
}

std::unique_ptr<FillingCursor> Model::start_filling(const Mat& ctx) const {
  return std::make_unique<ModelFillingCursor>(*this, ctx);
}

// ---------------------------------------------------------------------------
// Masks

AttentionMask all_visible_mask(int n) { return AttentionMask::all(n, n); }

AttentionMask box_causal_mask(std::span<const SlotTag> tags) {
  std::vector<int> group;
  group.reserve(tags.size());
  for (const auto& t : tags) group.push_back(t.box);
  return AttentionMask::group_causal(group);
}

AttentionMask token_causal_mask(int n) { return AttentionMask::token_causal(n); }

std::vector<SlotTag> neutral_tags(int n, int max_len) {
  std::vector<SlotTag> tags;
  tags.reserve(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) tags.push_back({BoxType::OTHER, 0, std::min(p, max_len)});
  return tags;
}

// ---------------------------------------------------------------------------
// Gradient checking

bool GradCheckReport::passed() const {
  return std::all_of(blocks.begin(), blocks.end(), [](const auto& b) { return b.passed; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
  return m;
}

double gradients(const Model& model, const LossFn& loss, Gradients& out) {
  out = model.zero_gradients();
  Tape tape(true);
  const ParamVars pv = model.bind(tape);
  Var l = loss(tape, pv);
  tape.backward(l, out);
  return tape.value(l)(0, 0);
}

namespace {

double loss_value(const Model& model, const LossFn& loss) {
  Tape tape(false);
  const ParamVars pv = model.bind(tape);
  return tape.value(loss(tape, pv))(0, 0);
}

}  // namespace

GradCheckReport grad_check(Model& model, const LossFn& loss, double tolerance, double h, std::size_t max_entries,
                           const Gradients* analytic) {
  Gradients computed;
  if (!analytic) {
    gradients(model, loss, computed);
    analytic = &computed;
  }
  GradCheckReport report;
  report.tolerance = tolerance;
  // Round-off in a central difference is about eps * |L| / h.
  const double floor =
      std::max(1e-10, 100.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss_value(model, loss))) / h);
  for (std::size_t b = 0; b < model.params().size(); ++b) {
    Mat& value = model.params()[b].value;
    const Mat& a = (*analytic)[b];
    const auto n = static_cast<std::size_t>(value.size());
    const std::size_t stride = (max_entries == 0 || max_entries >= n) ? 1 : n / max_entries;

    GradCheckEntry e;
    e.block = model.params()[b].name;
    double scale = 0.0;
    for (std::size_t i = 0; i < n; i += stride) {
      double& w = value.data()[i];
      const double saved = w;
      w = saved + h;
      const double up = loss_value(model, loss);
      w = saved - h;
      const double down = loss_value(model, loss);
      w = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double an = a.data()[i];
      scale = std::max({scale, std::abs(an), std::abs(numeric)});
      e.max_abs_error = std::max(e.max_abs_error, std::abs(an - numeric));
      ++e.checked;
    }
    e.scale = scale;
    if (scale < floor) {
      e.max_rel_error = 0.0;
      e.passed = e.max_abs_error <= tolerance;
    } else {
      e.max_rel_error = e.max_abs_error / scale;
      e.passed = e.max_rel_error < tolerance;
    }
    report.blocks.push_back(std::move(e));
  }
  return report;
}

}  // namespace bofi
