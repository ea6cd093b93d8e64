#include "bofi/autodiff.hpp"

#include <cmath>
#include <limits>

#include "bofi/error.hpp"

namespace bofi {

// ---------------------------------------------------------------------------
// Masks

AttentionMask AttentionMask::all(int rows, int cols) {
  AttentionMask m;
  m.rows_ = rows;
  m.cols_ = cols;
  return m;
}

AttentionMask AttentionMask::token_causal(int n) {
  AttentionMask m;
  m.rows_ = m.cols_ = n;
  m.allow_.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c <= r; ++c) m.allow_[static_cast<std::size_t>(r * n + c)] = 1;
  return m;
}

AttentionMask AttentionMask::group_causal(std::span<const int> group) {
  AttentionMask m;
  const int n = static_cast<int>(group.size());
  m.rows_ = m.cols_ = n;
  m.allow_.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      m.allow_[static_cast<std::size_t>(r * n + c)] = group[static_cast<std::size_t>(c)] <= group[static_cast<std::size_t>(r)];
  return m;
}

namespace kernels {

Mat linear(const Mat& x, const Mat& w, const Mat& bias) {
  Mat y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += bias.row(0);
  return y;
}

Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps, NormCache* cache) {
  const auto n = x.rows();
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  Mat y(n, x.cols());
  if (cache) {
    cache->mean.resize(n);
    cache->rstd.resize(n);
  }
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).sum() * inv_d;
    const double var = (x.row(r).array() - mu).square().sum() * inv_d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    y.row(r) = ((x.row(r).array() - mu) * rstd * gain.row(0).array() + bias.row(0).array()).matrix();
    if (cache) {
      cache->mean(r) = mu;
      cache->rstd(r) = rstd;
    }
  }
  return y;
}

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

void softmax_rows_inplace(Mat& x) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

Mat softmax_rows(const Mat& x) {
  Mat y = x;
  softmax_rows_inplace(y);
  return y;
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, const AttentionMask& mask, int heads,
              std::vector<Mat>* probs) {
  const auto n = q.rows();
  const auto m = k.rows();
  const auto d = q.cols();
  const auto dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Mat out(n, d);
  if (probs) probs->resize(static_cast<std::size_t>(heads));
  Mat s(n, m);
  for (int h = 0; h < heads; ++h) {
    s.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
    s *= scale;
    if (!mask.is_all())
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < m; ++c)
          if (!mask.allowed(static_cast<int>(r), static_cast<int>(c))) s(r, c) = kNegInf;
    softmax_rows_inplace(s);
    out.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    if (probs) (*probs)[static_cast<std::size_t>(h)] = s;
  }
  return out;
}

}  // namespace kernels

namespace ad {

// ---------------------------------------------------------------------------
// Tape

Tape::Node& Tape::node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id())); }
const Tape::Node& Tape::node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())); }

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), nullptr, -1, false, {}, {}});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(const Mat& value, int index) {
  nodes_.push_back(Node{{}, &value, index, grad_enabled_, {}, {}});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

const Mat& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.value;
}

bool Tape::needs_grad(Var v) const { return node(v).needs_grad; }

Var Tape::record(Mat value, std::initializer_list<Var> inputs, Backward back) {
  bool needs = false;
  if (grad_enabled_)
    for (Var in : inputs) needs = needs || node(in).needs_grad;
  nodes_.push_back(Node{std::move(value), nullptr, -1, needs, {}, needs ? std::move(back) : Backward{}});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Mat& Tape::grad_slot(Var v) {
  Node& n = node(v);
  if (n.grad.size() == 0) {
    const Mat& val = n.ref ? *n.ref : n.value;
    n.grad = Mat::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

const Mat* Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

void Tape::backward(Var loss, std::vector<Mat>& param_grads) {
  const Mat& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1)
    throw ModelError("backward() needs a scalar loss, got " + std::to_string(lv.rows()) + "x" +
                     std::to_string(lv.cols()));
  if (!node(loss).needs_grad) return;
  grad_slot(loss)(0, 0) += 1.0;
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this, n.grad);
    if (n.param >= 0) {
      auto& g = param_grads.at(static_cast<std::size_t>(n.param));
      if (g.size() == 0)
        g = n.grad;
      else
        g += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Tape& t, Var a, Var b) {
  Mat y = t.value(a) * t.value(b);
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.needs_grad(a)) tp.grad_slot(a).noalias() += g * tp.value(b).transpose();
    if (tp.needs_grad(b)) tp.grad_slot(b).noalias() += tp.value(a).transpose() * g;
  });
}

Var linear(Tape& t, Var x, Var w, Var bias) {
  Mat y = kernels::linear(t.value(x), t.value(w), t.value(bias));
  return t.record(std::move(y), {x, w, bias}, [x, w, bias](Tape& tp, const Mat& g) {
    if (tp.needs_grad(x)) tp.grad_slot(x).noalias() += g * tp.value(w).transpose();
    if (tp.needs_grad(w)) tp.grad_slot(w).noalias() += tp.value(x).transpose() * g;
    if (tp.needs_grad(bias)) tp.grad_slot(bias) += g.colwise().sum();
  });
}

Var add(Tape& t, Var a, Var b) {
  Mat y = t.value(a) + t.value(b);
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.needs_grad(a)) tp.grad_slot(a) += g;
    if (tp.needs_grad(b)) tp.grad_slot(b) += g;
  });
}

Var scale(Tape& t, Var a, double s) {
  Mat y = t.value(a) * s;
  return t.record(std::move(y), {a}, [a, s](Tape& tp, const Mat& g) { tp.grad_slot(a) += g * s; });
}

Var relu(Tape& t, Var x) {
  Mat y = kernels::relu(t.value(x));
  return t.record(std::move(y), {x}, [x](Tape& tp, const Mat& g) {
    tp.grad_slot(x) += (tp.value(x).array() > 0.0).select(g, 0.0);
  });
}

Var sum(Tape& t, Var x) {
  Mat y(1, 1);
  y(0, 0) = t.value(x).sum();
  return t.record(std::move(y), {x}, [x](Tape& tp, const Mat& g) { tp.grad_slot(x).array() += g(0, 0); });
}

Var gather_rows(Tape& t, Var table, std::span<const int> rows) {
  const Mat& tab = t.value(table);
  Mat y(static_cast<Eigen::Index>(rows.size()), tab.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tab.rows())
      throw ModelError("gather index " + std::to_string(rows[i]) + " out of range " + std::to_string(tab.rows()));
    y.row(static_cast<Eigen::Index>(i)) = tab.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(y), {table}, [table, idx = std::move(idx)](Tape& tp, const Mat& g) {
    Mat& gt = tp.grad_slot(table);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  kernels::NormCache cache;
  Mat y = kernels::layer_norm(t.value(x), t.value(gain), t.value(bias), eps, &cache);
  return t.record(std::move(y), {x, gain, bias}, [x, gain, bias, cache = std::move(cache)](Tape& tp, const Mat& g) {
    const Mat& xv = tp.value(x);
    const auto n = xv.rows();
    const double inv_d = 1.0 / static_cast<double>(xv.cols());
    Mat xhat(n, xv.cols());
    for (Eigen::Index r = 0; r < n; ++r) xhat.row(r) = (xv.row(r).array() - cache.mean(r)) * cache.rstd(r);
    if (tp.needs_grad(gain)) tp.grad_slot(gain) += g.cwiseProduct(xhat).colwise().sum();
    if (tp.needs_grad(bias)) tp.grad_slot(bias) += g.colwise().sum();
    if (tp.needs_grad(x)) {
      Mat& gx = tp.grad_slot(x);
      const auto gv = tp.value(gain).row(0).array();
      for (Eigen::Index r = 0; r < n; ++r) {
        const Eigen::ArrayXd dxhat = (g.row(r).array() * gv).transpose();
        const double m1 = dxhat.sum() * inv_d;
        const double m2 = (dxhat * xhat.row(r).array().transpose()).sum() * inv_d;
        gx.row(r).array() += (cache.rstd(r) * (dxhat - m1 - xhat.row(r).array().transpose() * m2)).transpose();
      }
    }
  });
}

Var attention(Tape& t, Var q, Var k, Var v, const AttentionMask& mask, int heads) {
  std::vector<Mat> probs;
  Mat y = kernels::attention(t.value(q), t.value(k), t.value(v), mask, heads, &probs);
  return t.record(std::move(y), {q, k, v}, [q, k, v, heads, probs = std::move(probs)](Tape& tp, const Mat& g) {
    const Mat& qv = tp.value(q);
    const Mat& kv = tp.value(k);
    const Mat& vv = tp.value(v);
    const auto dh = qv.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool gq = tp.needs_grad(q), gk = tp.needs_grad(k), gv = tp.needs_grad(v);
    Mat dp, ds;
    for (int h = 0; h < heads; ++h) {
      const Mat& p = probs[static_cast<std::size_t>(h)];
      const auto g_h = g.middleCols(h * dh, dh);
      if (gv) tp.grad_slot(v).middleCols(h * dh, dh).noalias() += p.transpose() * g_h;
      if (!gq && !gk) continue;
      dp.noalias() = g_h * vv.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd row_dot = dp.cwiseProduct(p).rowwise().sum();
      ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
      if (gq) tp.grad_slot(q).middleCols(h * dh, dh).noalias() += ds * kv.middleCols(h * dh, dh);
      if (gk) tp.grad_slot(k).middleCols(h * dh, dh).noalias() += ds.transpose() * qv.middleCols(h * dh, dh);
    }
  });
}

namespace {

double floored_log(double p) { return std::log(std::max(p, kProbFloor)); }

void check_rows(const Mat& logits, std::size_t n, const char* what) {
  if (static_cast<std::size_t>(logits.rows()) != n)
    throw ModelError(std::string(what) + ": " + std::to_string(n) + " entries for " +
                     std::to_string(logits.rows()) + " rows");
}

}  // namespace

Var cross_entropy(Tape& t, Var logits, std::span<const int> targets, std::span<const double> weights) {
  const Mat& z = t.value(logits);
  check_rows(z, targets.size(), "cross_entropy targets");
  check_rows(z, weights.size(), "cross_entropy weights");
  Mat q = kernels::softmax_rows(z);
  Mat y = Mat::Zero(1, 1);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0) continue;
    y(0, 0) -= weights[static_cast<std::size_t>(r)] * floored_log(q(r, tgt));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.record(std::move(y), {logits},
                  [logits, q = std::move(q), tg = std::move(tg), w = std::move(w)](Tape& tp, const Mat& g) {
                    Mat& gz = tp.grad_slot(logits);
                    for (Eigen::Index r = 0; r < q.rows(); ++r) {
                      const int tgt = tg[static_cast<std::size_t>(r)];
                      if (tgt < 0 || q(r, tgt) < kProbFloor) continue;
                      const double c = g(0, 0) * w[static_cast<std::size_t>(r)];
                      gz.row(r) += c * q.row(r);
                      gz(r, tgt) -= c;
                    }
                  });
}

Var kl_to_constant(Tape& t, Var logits, const Mat& target_probs, std::span<const double> weights) {
  const Mat& z = t.value(logits);
  if (target_probs.rows() != z.rows() || target_probs.cols() != z.cols())
    throw ModelError("kl_to_constant: target shape mismatch");
  check_rows(z, weights.size(), "kl_to_constant weights");
  Mat q = kernels::softmax_rows(z);
  Mat log_s = target_probs.unaryExpr(&floored_log);
  Mat y = Mat::Zero(1, 1);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double kl = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) kl += q(r, c) * (floored_log(q(r, c)) - log_s(r, c));
    y(0, 0) += weights[static_cast<std::size_t>(r)] * kl;
  }
  std::vector<double> w(weights.begin(), weights.end());
  return t.record(std::move(y), {logits},
                  [logits, q = std::move(q), log_s = std::move(log_s), w = std::move(w)](Tape& tp, const Mat& g) {
                    Mat& gz = tp.grad_slot(logits);
                    Eigen::ArrayXd dq(q.cols());
                    for (Eigen::Index r = 0; r < q.rows(); ++r) {
                      for (Eigen::Index c = 0; c < q.cols(); ++c)
                        dq(c) = floored_log(q(r, c)) - log_s(r, c) + (q(r, c) >= kProbFloor ? 1.0 : 0.0);
                      const Eigen::ArrayXd qr = q.row(r).transpose().array();
                      const double mean = (qr * dq).sum();
                      const double c = g(0, 0) * w[static_cast<std::size_t>(r)];
                      gz.row(r).array() += (c * qr * (dq - mean)).transpose();
                    }
                  });
}

Var target_imitation(Tape& t, Var logits, std::span<const int> targets, std::span<const double> target_probs,
                     std::span<const double> weights) {
  const Mat& z = t.value(logits);
  check_rows(z, targets.size(), "target_imitation targets");
  check_rows(z, target_probs.size(), "target_imitation probabilities");
  check_rows(z, weights.size(), "target_imitation weights");
  Mat q = kernels::softmax_rows(z);
  Mat y = Mat::Zero(1, 1);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0) continue;
    const double p = q(r, tgt);
    y(0, 0) += weights[static_cast<std::size_t>(r)] * p *
               (floored_log(p) - floored_log(target_probs[static_cast<std::size_t>(r)]));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> s(target_probs.begin(), target_probs.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.record(std::move(y), {logits},
                  [logits, q = std::move(q), tg = std::move(tg), s = std::move(s), w = std::move(w)](
                      Tape& tp, const Mat& g) {
                    Mat& gz = tp.grad_slot(logits);
                    for (Eigen::Index r = 0; r < q.rows(); ++r) {
                      const int tgt = tg[static_cast<std::size_t>(r)];
                      if (tgt < 0) continue;
                      const double p = q(r, tgt);
                      const double df = floored_log(p) - floored_log(s[static_cast<std::size_t>(r)]) +
                                        (p >= kProbFloor ? 1.0 : 0.0);
                      const double c = g(0, 0) * w[static_cast<std::size_t>(r)] * df * p;
                      gz.row(r) -= c * q.row(r);
                      gz(r, tgt) += c;
                    }
                  });
}

}  // namespace ad
}  // namespace bofi
