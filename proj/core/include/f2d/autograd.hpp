#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 matrices.
// Every value is a 2-D matrix; vectors are 1xN rows. A graph is built eagerly
// as operations run and is released when the last Var referencing it dies.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace f2d::ag {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  /// Direct write access, intended for optimizer updates on leaf parameters.
  Matrix& mutable_value() { return node_->value; }
  /// Accumulated gradient; zeros of the value's shape if nothing flowed in.
  Matrix grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  /// Scalar value of a 1x1 Var.
  double item() const;

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix m) { return Var(std::move(m), false); }
inline Var parameter(Matrix m) { return Var(std::move(m), true); }

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Backpropagates from a 1x1 output into every reachable node.
void backward(const Var& output);

// Arithmetic ------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double c);
/// Adds a 1xC row to every row of an RxC matrix.
Var add_rowwise(const Var& a, const Var& row);
Var transpose(const Var& a);

// Nonlinearities --------------------------------------------------------------

Var leaky_relu(const Var& a, double slope);
Var gelu(const Var& a);
Var tanh(const Var& a);

/// Row-wise layer normalization with learned 1xC gain and bias.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Row-wise L2 normalization; rows with norm below eps are divided by eps.
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

/// Multi-head self-attention over `batch` independent sequences of `tokens`
/// rows each. `qkv` is (batch*tokens) x (3*width) laid out as [Q | K | V].
Var self_attention(const Var& qkv, int batch, int tokens, int heads);

// Shape -----------------------------------------------------------------------

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var select_rows(const Var& a, std::span<const Eigen::Index> rows);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Row-major reshape.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);

// Reductions ------------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// Column-wise mean, producing a 1xC row.
Var mean_rows(const Var& a);
/// mean((a - b)^2) over all elements.
Var mean_squared_error(const Var& a, const Var& b);

// Losses ----------------------------------------------------------------------

/// Additive angular margin softmax cross-entropy, averaged over rows.
/// `cosines` is BxK holding cos(theta) of every sample to every class; the
/// target logit becomes s*cos(theta_y + m) and the others s*cos(theta_k).
Var angular_margin_cross_entropy(const Var& cosines, std::span<const int> labels,
                                 double margin, double scale);

}  // namespace f2d::ag
