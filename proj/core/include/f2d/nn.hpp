#pragma once

#include "f2d/autograd.hpp"
#include "f2d/random.hpp"

#include <string>
#include <utility>
#include <vector>

namespace f2d::nn {

using ag::Matrix;
using ag::Var;

/// Ordered, named view over a module's trainable tensors.
using NamedParameters = std::vector<std::pair<std::string, Var>>;

/// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);
Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, Rng& rng);

  Var operator()(const Var& x) const { return ag::add_rowwise(ag::matmul(x, weight), bias); }
  Eigen::Index in_features() const { return weight.rows(); }
  Eigen::Index out_features() const { return weight.cols(); }
  void collect(const std::string& prefix, NamedParameters& out) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(Eigen::Index width);

  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, NamedParameters& out) const;
};

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors. Identity when `rng` is null or the rate is zero.
Var dropout(const Var& x, double rate, Rng* rng);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig config);

  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();
  long long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig config_;
  long long t_ = 0;
};

/// Euclidean norm of all accumulated gradients.
double gradient_norm(const NamedParameters& params);

/// Stable digest of parameter values; changes iff any value bit changes.
std::uint64_t digest(const NamedParameters& params);

}  // namespace f2d::nn
