#include "f2d/autograd.hpp"

#include "f2d/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

namespace f2d::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
}

Var make_result(Matrix value, std::initializer_list<Var> parents,
                std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var::from_node(std::move(node));
}

Var make_result_n(Matrix value, std::span<const Var> parents,
                  std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var::from_node(std::move(node));
}

void flow(const std::shared_ptr<Node>& target, const Matrix& g) {
  if (target->requires_grad) target->accumulate(g);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) {
    throw ShapeError("item() requires a 1x1 value, got " + shape_str(value()));
  }
  return value()(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw ShapeError("backward() requires a scalar output");
  }
  if (!output.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  visited.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  output.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " +
                     shape_str(b.value()));
  }
  auto an = a.node(), bn = b.node();
  return make_result(a.value() * b.value(), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  return make_result(a.value() + b.value(), {a, b}, [an, bn](Node& self) {
    flow(an, self.grad);
    flow(bn, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  return make_result(a.value() - b.value(), {a, b}, [an, bn](Node& self) {
    flow(an, self.grad);
    if (bn->requires_grad) bn->accumulate(-self.grad);
  });
}

Var hadamard(const Var& a, const Var& b) {
  require_same_shape(a, b, "hadamard");
  auto an = a.node(), bn = b.node();
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(self.grad.cwiseProduct(an->value));
  });
}

Var scale(const Var& a, double c) {
  auto an = a.node();
  return make_result(a.value() * c, {a}, [an, c](Node& self) { flow(an, self.grad * c); });
}

Var add_rowwise(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_rowwise: row " + shape_str(row.value()) + " does not fit " +
                     shape_str(a.value()));
  }
  auto an = a.node(), rn = row.node();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [an, rn](Node& self) {
    flow(an, self.grad);
    if (rn->requires_grad) rn->accumulate(self.grad.colwise().sum());
  });
}

Var transpose(const Var& a) {
  auto an = a.node();
  return make_result(a.value().transpose(), {a},
                     [an](Node& self) { flow(an, self.grad.transpose()); });
}

Var leaky_relu(const Var& a, double slope) {
  auto an = a.node();
  Matrix out = a.value().unaryExpr([slope](double x) { return x > 0 ? x : slope * x; });
  return make_result(std::move(out), {a}, [an, slope](Node& self) {
    if (!an->requires_grad) return;
    Matrix d = an->value.unaryExpr([slope](double x) { return x > 0 ? 1.0 : slope; });
    an->accumulate(self.grad.cwiseProduct(d));
  });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  auto an = a.node();
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); });
  return make_result(std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    Matrix d = an->value.unaryExpr([](double x) {
      const double t = std::tanh(k * (x + c * x * x * x));
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
    });
    an->accumulate(self.grad.cwiseProduct(d));
  });
}

Var tanh(const Var& a) {
  auto an = a.node();
  Matrix out = a.value().array().tanh().matrix();
  return make_result(out, {a}, [an, out](Node& self) {
    if (!an->requires_grad) return;
    an->accumulate(self.grad.cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(c));
  }
  Matrix xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(std::move(out), {x, gamma, beta},
                     [xn, gn, bn, xhat, inv_std](Node& self) {
                       const Matrix& g = self.grad;
                       if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
                       if (bn->requires_grad) bn->accumulate(g.colwise().sum());
                       if (!xn->requires_grad) return;
                       Matrix dxhat = (g.array().rowwise() * gn->value.row(0).array()).matrix();
                       Matrix dx(g.rows(), g.cols());
                       for (Eigen::Index i = 0; i < g.rows(); ++i) {
                         const double m1 = dxhat.row(i).mean();
                         const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                         dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) *
                                     inv_std(i);
                       }
                       xn->accumulate(dx);
                     });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Eigen::Index n = a.rows();
  Eigen::VectorXd norms(n);
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    norms(i) = std::max(a.value().row(i).norm(), eps);
    out.row(i) = a.value().row(i) / norms(i);
  }
  auto an = a.node();
  return make_result(out, {a}, [an, out, norms, eps](Node& self) {
    if (!an->requires_grad) return;
    Matrix d(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      if (norms(i) <= eps) {
        d.row(i) = self.grad.row(i) / eps;
      } else {
        const double proj = self.grad.row(i).dot(out.row(i));
        d.row(i) = (self.grad.row(i) - out.row(i) * proj) / norms(i);
      }
    }
    an->accumulate(d);
  });
}

Var self_attention(const Var& qkv, int batch, int tokens, int heads) {
  if (qkv.rows() != static_cast<Eigen::Index>(batch) * tokens || qkv.cols() % 3 != 0) {
    throw ShapeError("self_attention: qkv shape " + shape_str(qkv.value()) +
                     " inconsistent with batch/tokens");
  }
  const Eigen::Index width = qkv.cols() / 3;
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("self_attention: width not divisible by head count");
  }
  const Eigen::Index dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& x = qkv.value();

  Matrix out(qkv.rows(), width);
  std::vector<Matrix> probs(static_cast<std::size_t>(batch) * heads);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
    for (int h = 0; h < heads; ++h) {
      const auto q = x.block(r0, h * dh, tokens, dh);
      const auto k = x.block(r0, width + h * dh, tokens, dh);
      const auto v = x.block(r0, 2 * width + h * dh, tokens, dh);
      Matrix s = (q * k.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      out.block(r0, h * dh, tokens, dh) = s * v;
      probs[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }
  }

  auto qn = qkv.node();
  return make_result(std::move(out), {qkv},
                     [qn, probs = std::move(probs), batch, tokens, heads, width, dh,
                      inv_sqrt](Node& self) {
                       if (!qn->requires_grad) return;
                       const Matrix& x = qn->value;
                       Matrix dx = Matrix::Zero(x.rows(), x.cols());
                       for (int b = 0; b < batch; ++b) {
                         const Eigen::Index r0 = static_cast<Eigen::Index>(b) * tokens;
                         for (int h = 0; h < heads; ++h) {
                           const Matrix& p = probs[static_cast<std::size_t>(b) * heads + h];
                           const auto q = x.block(r0, h * dh, tokens, dh);
                           const auto k = x.block(r0, width + h * dh, tokens, dh);
                           const auto v = x.block(r0, 2 * width + h * dh, tokens, dh);
                           const auto g = self.grad.block(r0, h * dh, tokens, dh);
                           dx.block(r0, 2 * width + h * dh, tokens, dh) += p.transpose() * g;
                           Matrix dp = g * v.transpose();
                           Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
                           Matrix ds = p.cwiseProduct((dp.colwise() - rowdot));
                           ds *= inv_sqrt;
                           dx.block(r0, h * dh, tokens, dh) += ds * k;
                           dx.block(r0, width + h * dh, tokens, dh) += ds.transpose() * q;
                         }
                       }
                       qn->accumulate(dx);
                     });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows out of range");
  }
  auto an = a.node();
  return make_result(a.value().middleRows(start, count), {a}, [an, start, count](Node& self) {
    if (!an->requires_grad) return;
    Matrix g = Matrix::Zero(an->value.rows(), an->value.cols());
    g.middleRows(start, count) = self.grad;
    an->accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols out of range");
  }
  auto an = a.node();
  return make_result(a.value().middleCols(start, count), {a}, [an, start, count](Node& self) {
    if (!an->requires_grad) return;
    Matrix g = Matrix::Zero(an->value.rows(), an->value.cols());
    g.middleCols(start, count) = self.grad;
    an->accumulate(g);
  });
}

Var select_rows(const Var& a, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("select_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  auto an = a.node();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return make_result(std::move(out), {a}, [an, idx](Node& self) {
    if (!an->requires_grad) return;
    Matrix g = Matrix::Zero(an->value.rows(), an->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
    an->accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, parts.front().cols());
  std::vector<std::shared_ptr<Node>> nodes;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    nodes.push_back(p.node());
  }
  return make_result_n(std::move(out), parts, [nodes](Node& self) {
    Eigen::Index r = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->accumulate(self.grad.middleRows(r, n->value.rows()));
      r += n->value.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix out(parts.front().rows(), total);
  std::vector<std::shared_ptr<Node>> nodes;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    nodes.push_back(p.node());
  }
  return make_result_n(std::move(out), parts, [nodes](Node& self) {
    Eigen::Index c = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->accumulate(self.grad.middleCols(c, n->value.cols()));
      c += n->value.cols();
    }
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count differs");
  const RowMajor src = a.value();
  Matrix out = Eigen::Map<const RowMajor>(src.data(), rows, cols);
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    const RowMajor g = self.grad;
    Matrix back = Eigen::Map<const RowMajor>(g.data(), an->value.rows(), an->value.cols());
    an->accumulate(back);
  });
}

Var sum(const Var& a) {
  auto an = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [an](Node& self) {
    flow(an, Matrix::Constant(an->value.rows(), an->value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var mean_rows(const Var& a) {
  auto an = a.node();
  const double n = static_cast<double>(a.rows());
  return make_result(a.value().colwise().mean(), {a}, [an, n](Node& self) {
    if (!an->requires_grad) return;
    Matrix g = self.grad.replicate(an->value.rows(), 1) / n;
    an->accumulate(g);
  });
}

Var mean_squared_error(const Var& a, const Var& b) {
  const Var d = sub(a, b);
  return mean(hadamard(d, d));
}

Var angular_margin_cross_entropy(const Var& cosines, std::span<const int> labels,
                                 double margin, double scale_factor) {
  const Eigen::Index batch = cosines.rows(), classes = cosines.cols();
  if (static_cast<Eigen::Index>(labels.size()) != batch) {
    throw ShapeError("angular_margin_cross_entropy: label count differs from batch");
  }
  constexpr double kClampEps = 1e-12;
  Matrix probs(batch, classes);
  Eigen::VectorXd target_slope(batch);  // d cos(theta+m) / d cos(theta)
  double total = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) {
      throw IndexError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                       ")");
    }
    const double c_raw = cosines.value()(b, y);
    const double c = std::clamp(c_raw, -1.0 + kClampEps, 1.0 - kClampEps);
    const double theta = std::acos(c);
    Eigen::RowVectorXd logits = cosines.value().row(b) * scale_factor;
    logits(y) = scale_factor * std::cos(theta + margin);
    target_slope(b) = (c_raw == c) ? std::sin(theta + margin) / std::sqrt(1.0 - c * c) : 0.0;
    const double mx = logits.maxCoeff();
    Eigen::RowVectorXd e = (logits.array() - mx).exp();
    const double z = e.sum();
    total += (std::log(z) + mx) - logits(y);
    probs.row(b) = e / z;
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(batch);
  auto cn = cosines.node();
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result(std::move(out), {cosines},
                     [cn, probs, target_slope, ys, scale_factor](Node& self) {
                       if (!cn->requires_grad) return;
                       const double g = self.grad(0, 0) / static_cast<double>(probs.rows());
                       Matrix d = probs * (scale_factor * g);
                       for (Eigen::Index b = 0; b < probs.rows(); ++b) {
                         const int y = ys[static_cast<std::size_t>(b)];
                         d(b, y) = scale_factor * g * (probs(b, y) - 1.0) * target_slope(b);
                       }
                       cn->accumulate(d);
                     });
}

}  // namespace f2d::ag
