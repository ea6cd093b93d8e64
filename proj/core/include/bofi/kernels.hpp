#pragma once

#include <span>
#include <vector>

#include "bofi/tensor.hpp"

namespace bofi {

/// Probabilities are floored here before any logarithm is taken.
inline constexpr double kProbFloor = 1e-12;

/// Which key columns each query row may attend to.
class AttentionMask {
 public:
  static AttentionMask all(int rows, int cols);
  /// Row p sees columns q <= p.
  static AttentionMask token_causal(int n);
  /// Row p sees column q iff group[q] <= group[p]; groups are non-decreasing.
  static AttentionMask group_causal(std::span<const int> group);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool is_all() const { return allow_.empty(); }
  bool allowed(int r, int c) const {
    return allow_.empty() || allow_[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_) +
                                    static_cast<std::size_t>(c)] != 0;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<unsigned char> allow_;  // empty means every entry is allowed
};

namespace kernels {

Mat linear(const Mat& x, const Mat& w, const Mat& bias);

struct NormCache {
  Eigen::VectorXd mean;
  Eigen::VectorXd rstd;
};
Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps, NormCache* cache = nullptr);

Mat relu(const Mat& x);

void softmax_rows_inplace(Mat& x);
Mat softmax_rows(const Mat& x);

/// Multi-head scaled dot-product attention. q: n x d, k/v: m x d.
/// When `probs` is given it receives one n x m matrix per head.
Mat attention(const Mat& q, const Mat& k, const Mat& v, const AttentionMask& mask, int heads,
              std::vector<Mat>* probs = nullptr);

}  // namespace kernels
}  // namespace bofi
