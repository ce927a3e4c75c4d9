#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace structdrop {

using Index = Eigen::Index;

// Row-major so that row gathers (the unit of row dropout) are contiguous.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

#ifdef STRUCTDROP_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

} // namespace structdrop
