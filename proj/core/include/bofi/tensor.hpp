#pragma once

#include <Eigen/Core>

namespace bofi {

/// Dense row-major matrix of doubles; every tensor in the library is 2-D.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace bofi
