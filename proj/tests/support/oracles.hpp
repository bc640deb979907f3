#pragma once

// Brute-force reference implementations, written from the formulas without
// reusing library code paths. Shared by unit and acceptance tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace oracle {

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// -log softmax(logits)[label], evaluated naively with a max shift.
inline double softmax_cross_entropy(const std::vector<double>& logits, int label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[static_cast<std::size_t>(label)] - mx - std::log(z));
}

// Additive angular margin loss for one feature against K class columns.
inline double arcface(const Eigen::VectorXd& v, const Eigen::MatrixXd& w, int label, double m,
                      double s) {
  std::vector<double> logits;
  for (Eigen::Index k = 0; k < w.cols(); ++k) {
    double c = cosine(v, w.col(k));
    if (k == label) c = std::cos(std::acos(std::clamp(c, -1.0, 1.0)) + m);
    logits.push_back(s * c);
  }
  return softmax_cross_entropy(logits, label);
}

// Multi-scale variant: each level is normalized separately, then concatenated.
inline double multiscale_arcface(const std::vector<Eigen::VectorXd>& levels,
                                 const Eigen::MatrixXd& w, int label, double m, double s) {
  Eigen::Index total = 0;
  for (const auto& l : levels) total += l.size();
  Eigen::VectorXd v(total);
  Eigen::Index at = 0;
  for (const auto& l : levels) {
    v.segment(at, l.size()) = l / l.norm();
    at += l.size();
  }
  return arcface(v, w, label, m, s);
}

// P(pos > neg) + 0.5 P(pos == neg) by counting every pair.
inline double pairwise_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline double harmonic_mean(const std::vector<double>& v) {
  double inv = 0.0;
  for (double x : v) {
    if (x == 0.0) return 0.0;
    inv += 1.0 / x;
  }
  return static_cast<double>(v.size()) / inv;
}

inline double geometric_mean(const std::vector<double>& v) {
  double prod = 1.0;
  for (double x : v) prod *= x;
  return std::pow(prod, 1.0 / static_cast<double>(v.size()));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Composed-target noise regression: eps_hat against eps inside the mask and
// the class-prompt prediction outside it. Latents are C x (H*W); the mask is H x W.
inline double cgdr(const Eigen::MatrixXd& eps_hat, const Eigen::MatrixXd& eps,
                   const Eigen::MatrixXd& eps_class, const Eigen::MatrixXd& mask) {
  double sum = 0.0;
  for (Eigen::Index c = 0; c < eps.rows(); ++c) {
    for (Eigen::Index p = 0; p < eps.cols(); ++p) {
      const double m = mask(p / mask.cols(), p % mask.cols());
      const double target = eps(c, p) * m + eps_class(c, p) * (1.0 - m);
      sum += (eps_hat(c, p) - target) * (eps_hat(c, p) - target);
    }
  }
  return sum / static_cast<double>(eps.size());
}

// Unbiased covariance, one sample per row.
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& x) {
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mu;
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

// |mu_a - mu_b|^2 + tr(Sa + Sb) - 2 tr sqrt(Sa Sb). The trace of the square
// root is taken as the sum of square roots of the (real, non-negative)
// eigenvalues of the non-symmetric product Sa Sb.
inline double frechet(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::RowVectorXd d = a.colwise().mean() - b.colwise().mean();
  const Eigen::MatrixXd sa = covariance(a), sb = covariance(b);
  const Eigen::EigenSolver<Eigen::MatrixXd> es(sa * sb);
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  }
  return d.squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

// Mean over sets of the best value among each set's first n entries.
inline double prefix_max_mean(const std::vector<std::vector<double>>& sets, int n) {
  double total = 0.0;
  for (const auto& s : sets) {
    double best = -1.0;
    for (int i = 0; i < n; ++i) best = std::max(best, s[static_cast<std::size_t>(i)]);
    total += best;
  }
  return total / static_cast<double>(sets.size());
}

// Central finite difference of f with respect to every entry of x.
inline Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f,
                                        Eigen::MatrixXd x, double h = 1e-6) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

}  // namespace oracle
