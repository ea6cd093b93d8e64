#include <doctest.h>

#include <functional>

#include <bofi/autodiff.hpp>
#include <bofi/kernels.hpp>

#include "../helpers.hpp"

using namespace bofi;
using ad::Tape;
using ad::Var;

namespace {

using Fn = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval(const Fn& f, std::vector<Mat>& inputs) {
  Tape t(false);
  std::vector<Var> vs;
  for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(t.param(inputs[i], static_cast<int>(i)));
  return t.value(f(t, vs))(0, 0);
}

// Largest |analytic - numeric| relative to the largest gradient magnitude.
double fd_error(const Fn& f, std::vector<Mat> inputs, double h = 1e-5) {
  std::vector<Mat> grads;
  for (const auto& m : inputs) grads.push_back(Mat::Zero(m.rows(), m.cols()));
  {
    Tape t;
    std::vector<Var> vs;
    for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(t.param(inputs[i], static_cast<int>(i)));
    t.backward(f(t, vs), grads);
  }
  double err = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i].data()[j];
      inputs[i].data()[j] = saved + h;
      const double up = eval(f, inputs);
      inputs[i].data()[j] = saved - h;
      const double down = eval(f, inputs);
      inputs[i].data()[j] = saved;
      const double num = (up - down) / (2 * h);
      err = std::max(err, std::abs(num - grads[i].data()[j]));
      scale = std::max(scale, std::abs(grads[i].data()[j]));
    }
  }
  return err / scale;
}

Var weighted_sum(Tape& t, Var x, std::uint64_t seed) {
  const Mat& v = t.value(x);
  return ad::sum(t, ad::matmul(t, ad::scale(t, x, 1.0), t.constant(testing::random_mat(static_cast<int>(v.cols()), 1, seed))));
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("sum of a parameter has an all-ones gradient") {
    Mat w = testing::random_mat(3, 4, 1);
    std::vector<Mat> g{Mat::Zero(3, 4), Mat::Zero(2, 2)};
    Mat other = testing::random_mat(2, 2, 2);
    Tape t;
    const Var a = t.param(w, 0);
    t.param(other, 1);
    t.backward(ad::sum(t, a), g);
    CHECK(g[0] == Mat::Ones(3, 4));
    CHECK(g[1] == Mat::Zero(2, 2));
  }

  TEST_CASE("backward requires a scalar") {
    Mat w = testing::random_mat(2, 2, 1);
    std::vector<Mat> g{Mat::Zero(2, 2)};
    Tape t;
    const Var a = t.param(w, 0);
    CHECK_THROWS_AS(t.backward(a, g), ModelError);
  }

  TEST_CASE("gradients accumulate across uses") {
    Mat w = testing::random_mat(2, 3, 4);
    std::vector<Mat> g{Mat::Zero(2, 3)};
    Tape t;
    const Var a = t.param(w, 0);
    t.backward(ad::sum(t, ad::add(t, a, ad::scale(t, a, 2.0))), g);
    CHECK(g[0].isApprox(Mat::Constant(2, 3, 3.0)));
  }

  TEST_CASE("matmul, linear, relu") {
    CHECK(fd_error([](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ad::matmul(t, v[0], v[1]), 5); },
                   {testing::random_mat(3, 4, 1), testing::random_mat(4, 2, 2)}) < 1e-6);
    CHECK(fd_error(
              [](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ad::relu(t, ad::linear(t, v[0], v[1], v[2])), 6);
              },
              {testing::random_mat(3, 4, 3), testing::random_mat(4, 5, 4), testing::random_mat(1, 5, 5)}) < 1e-6);
  }

  TEST_CASE("gather rows") {
    const std::vector<int> rows{2, 0, 2, 1};
    CHECK(fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ad::gather_rows(t, v[0], rows), 7); },
                   {testing::random_mat(3, 4, 6)}) < 1e-6);
  }

  TEST_CASE("layer norm") {
    CHECK(fd_error(
              [](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ad::layer_norm(t, v[0], v[1], v[2]), 8);
              },
              {testing::random_mat(3, 6, 7), testing::random_mat(1, 6, 8), testing::random_mat(1, 6, 9)}) < 1e-6);
  }

  TEST_CASE("attention under each mask kind") {
    const std::vector<int> groups{0, 0, 1, 2, 2};
    for (const auto& mask : {AttentionMask::all(5, 5), AttentionMask::token_causal(5), AttentionMask::group_causal(groups)}) {
      CHECK(fd_error(
                [&](Tape& t, const std::vector<Var>& v) {
                  return weighted_sum(t, ad::attention(t, v[0], v[1], v[2], mask, 2), 9);
                },
                {testing::random_mat(5, 4, 10), testing::random_mat(5, 4, 11), testing::random_mat(5, 4, 12)}) < 1e-6);
    }
    const auto cross = AttentionMask::all(2, 3);
    CHECK(fd_error(
              [&](Tape& t, const std::vector<Var>& v) {
                return weighted_sum(t, ad::attention(t, v[0], v[1], v[2], cross, 2), 10);
              },
              {testing::random_mat(2, 4, 13), testing::random_mat(3, 4, 14), testing::random_mat(3, 4, 15)}) < 1e-6);
  }

  TEST_CASE("losses") {
    const std::vector<int> targets{1, -1, 3};
    const std::vector<double> weights{0.5, 2.0, 1.5};
    CHECK(fd_error([&](Tape& t, const std::vector<Var>& v) { return ad::cross_entropy(t, v[0], targets, weights); },
                   {testing::random_mat(3, 5, 16)}) < 1e-6);
    Mat s = kernels::softmax_rows(testing::random_mat(3, 5, 17));
    CHECK(fd_error([&](Tape& t, const std::vector<Var>& v) { return ad::kl_to_constant(t, v[0], s, weights); },
                   {testing::random_mat(3, 5, 18)}) < 1e-6);
    const std::vector<int> all_targets{1, 0, 3};
    const std::vector<double> sp{0.3, 0.05, 0.6};
    CHECK(fd_error(
              [&](Tape& t, const std::vector<Var>& v) {
                return ad::target_imitation(t, v[0], all_targets, sp, weights);
              },
              {testing::random_mat(3, 5, 19)}) < 1e-6);
  }

  TEST_CASE("kernel attention matches the tape") {
    const Mat q = testing::random_mat(4, 6, 20), k = testing::random_mat(5, 6, 21), v = testing::random_mat(5, 6, 22);
    const auto mask = AttentionMask::all(4, 5);
    Tape t(false);
    const Mat via_tape = t.value(ad::attention(t, t.constant(q), t.constant(k), t.constant(v), mask, 3));
    CHECK((via_tape - kernels::attention(q, k, v, mask, 3)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("group causal mask") {
    const std::vector<int> g{0, 0, 1};
    const auto m = AttentionMask::group_causal(g);
    CHECK(m.allowed(0, 1));
    CHECK_FALSE(m.allowed(0, 2));
    CHECK(m.allowed(2, 0));
    CHECK(m.allowed(2, 2));
  }
}
