#pragma once

#include <Eigen/Dense>

#include <functional>

namespace fedcausal {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using IntVector = Eigen::VectorXi;

/// Covariates are stored one record per row; rows of a row-major matrix are
/// contiguous, which keeps record-level resampling cheap.
using Covariates = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ConstVectorRef = Eigen::Ref<const Vector>;

/// Batched evaluation of a per-record function (propensity score, outcome
/// mean) over every row of a covariate block.
using BatchFn = std::function<Vector(const Covariates&)>;

/// Scalar function of one covariate vector.
using PointFn = std::function<double(const ConstVectorRef&)>;

inline BatchFn batched(PointFn f) {
  return [f = std::move(f)](const Covariates& x) {
    Vector out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = f(x.row(i).transpose());
    return out;
  };
}

}  // namespace fedcausal
