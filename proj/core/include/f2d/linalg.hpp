#pragma once

#include <Eigen/Dense>

#include <cmath>

namespace f2d {

/// Cosine similarity; 0 when either vector has zero norm.
template <typename A, typename B>
double cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

template <typename A>
bool all_finite(const Eigen::MatrixBase<A>& a) {
  return a.allFinite();
}

}  // namespace f2d
