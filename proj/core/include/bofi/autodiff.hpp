#pragma once

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bofi/kernels.hpp"
#include "bofi/tensor.hpp"

namespace bofi::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only meaningful with its tape.
class Var {
 public:
  Var() = default;
  int id() const { return id_; }
  bool valid() const { return id_ >= 0; }

 private:
  explicit Var(int id) : id_(id) {}
  int id_ = -1;
  friend class Tape;
};

using Backward = std::function<void(Tape&, const Mat& grad_out)>;

/// Records a computation as it runs; backward() replays it in reverse
/// creation order, which is a topological order by construction.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat value);
  /// Binds external storage (not copied; must outlive the tape). Gradients
  /// land in param_grads[index] during backward().
  Var param(const Mat& value, int index);

  const Mat& value(Var v) const;
  bool needs_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Appends an op result. `back` is dropped when no input needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward back);

  /// Gradient buffer of v, zero-initialised on first access.
  Mat& grad_slot(Var v);
  /// Gradient of v after backward(), or nullptr if none flowed to it.
  const Mat* grad(Var v) const;

  /// Reverse sweep from a 1x1 loss. Throws ModelError otherwise.
  void backward(Var loss, std::vector<Mat>& param_grads);

 private:
  struct Node {
    Mat value;
    const Mat* ref = nullptr;
    int param = -1;
    bool needs_grad = false;
    Mat grad;
    Backward back;
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

Var matmul(Tape& t, Var a, Var b);
/// x W + bias, bias broadcast over rows.
Var linear(Tape& t, Var x, Var w, Var bias);
Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var relu(Tape& t, Var x);
Var sum(Tape& t, Var x);
Var gather_rows(Tape& t, Var table, std::span<const int> rows);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
Var attention(Tape& t, Var q, Var k, Var v, const AttentionMask& mask, int heads);

/// sum_i w_i * -log(max(softmax(z_i)[target_i], floor)); rows with target < 0
/// are skipped. Result is 1x1.
Var cross_entropy(Tape& t, Var logits, std::span<const int> targets, std::span<const double> weights);

/// sum_i w_i * KL(softmax(z_i) || s_i) over full rows, s held constant.
Var kl_to_constant(Tape& t, Var logits, const Mat& target_probs, std::span<const double> weights);

/// sum_i w_i * p_i log(p_i / s_i) where p_i = softmax(z_i)[target_i] and s_i
/// is a constant probability for the same target.
Var target_imitation(Tape& t, Var logits, std::span<const int> targets, std::span<const double> target_probs,
                     std::span<const double> weights);

}  // namespace bofi::ad
