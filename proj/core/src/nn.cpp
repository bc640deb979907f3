#include "f2d/nn.hpp"

#include "f2d/errors.hpp"

#include <cmath>
#include <cstring>

namespace f2d::nn {

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return m;
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal() * stddev;
  }
  return m;
}

Linear::Linear(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = ag::parameter(uniform_init(in, out, bound, rng));
  bias = ag::parameter(uniform_init(1, out, bound, rng));
}

void Linear::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(Eigen::Index width)
    : gamma(ag::parameter(Matrix::Ones(1, width))), beta(ag::parameter(Matrix::Zero(1, width))) {}

void LayerNorm::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Var dropout(const Var& x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  if (rate >= 1.0) return ag::constant(Matrix::Zero(x.rows(), x.cols()));
  const double keep = 1.0 - rate;
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < mask.cols(); ++j) {
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
      mask(i, j) = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    }
  }
  return ag::hadamard(x, ag::constant(std::move(mask)));
}

Adam::Adam(std::vector<Var> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.has_grad()) continue;
    Matrix g = p.grad();
    if (config_.weight_decay != 0.0) g += config_.weight_decay * p.value();
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    const Matrix m_hat = m_[i] / bc1;
    const Matrix v_hat = v_[i] / bc2;
    p.mutable_value().array() -=
        config_.learning_rate * m_hat.array() / (v_hat.array().sqrt() + config_.eps);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double gradient_norm(const NamedParameters& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (p.has_grad()) sq += p.grad().squaredNorm();
  }
  return std::sqrt(sq);
}

std::uint64_t digest(const NamedParameters& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, p] : params) {
    mix(name.data(), name.size());
    const Matrix& v = p.value();
    mix(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
  }
  return h;
}

}  // namespace f2d::nn
