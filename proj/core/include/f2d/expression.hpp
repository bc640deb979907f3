#pragma once

// Expression guidance: expression coefficients from a pluggable extractor are
// concatenated after the identity feature. During training the expression
// part is replaced by a learnable unconditional vector with probability 0.2.

#include "f2d/autograd.hpp"
#include "f2d/identity_encoder.hpp"
#include "f2d/image.hpp"
#include "f2d/random.hpp"

#include <optional>
#include <string>

namespace f2d::expression {

inline constexpr int kDefaultExpressionWidth = 64;
inline constexpr double kDefaultDropProbability = 0.2;

struct ExpressionFeature {
  Eigen::RowVectorXd values;
};

/// Plugin contract: a fixed-width finite vector per image, or a thrown
/// ExtractionError describing why no expression could be recovered.
class ExpressionExtractor {
 public:
  virtual ~ExpressionExtractor() = default;
  virtual int width() const = 0;
  virtual std::string name() const = 0;
  virtual Eigen::RowVectorXd coefficients(const Image& image) const = 0;
  virtual std::uint64_t digest() const = 0;
};

/// Always returns zeros of the configured width.
class ZeroExpressionExtractor final : public ExpressionExtractor {
 public:
  explicit ZeroExpressionExtractor(int width = kDefaultExpressionWidth);
  int width() const override { return width_; }
  std::string name() const override { return "zero"; }
  Eigen::RowVectorXd coefficients(const Image& image) const override;
  std::uint64_t digest() const override { return static_cast<std::uint64_t>(width_); }

 private:
  int width_;
};

/// Stand-in for a 3D face reconstruction model: a frozen random projection
/// of the mean-centered lower face (mouth and eye rows). Refuses images with
/// no visible structure.
class ToyExpressionExtractor final : public ExpressionExtractor {
 public:
  ToyExpressionExtractor(int image_size = 32, int width = kDefaultExpressionWidth,
                         std::uint64_t seed = 3);
  int width() const override { return static_cast<int>(projection_.cols()); }
  std::string name() const override { return "toy-projection"; }
  Eigen::RowVectorXd coefficients(const Image& image) const override;
  std::uint64_t digest() const override;

 private:
  int image_size_;
  Eigen::MatrixXd projection_;  // pixels x width
};

/// Runs the extractor and checks the plugin contract (width, finiteness).
ExpressionFeature extract_expression(const Image& image, const ExpressionExtractor& extractor);

/// The learnable stand-in used when the expression is dropped.
struct UnconditionalExpressionVector {
  ag::Var value;  // 1 x width, zero-initialized

  UnconditionalExpressionVector() = default;
  explicit UnconditionalExpressionVector(int width)
      : value(ag::parameter(Eigen::MatrixXd::Zero(1, width))) {}
  int width() const { return static_cast<int>(value.cols()); }
};

enum class ConditionMode { train, inference_uncond, inference_cond };

struct ConditionVector {
  ag::Var values;  // 1 x (identity width + expression width)
  bool used_unconditional = false;

  Eigen::RowVectorXd row() const { return values.value().row(0); }
};

/// Builds [v_id, v_exp] or [v_id, uncond] per the mode. In train mode the
/// expression is dropped with probability `drop_probability` using `rng`.
ConditionVector compose_condition(const identity::MultiScaleIdentityFeature& identity,
                                  const std::optional<ExpressionFeature>& expression,
                                  const UnconditionalExpressionVector& uncond, ConditionMode mode,
                                  Rng* rng, double drop_probability = kDefaultDropProbability);

}  // namespace f2d::expression
