#include "f2d/expression.hpp"

#include "f2d/errors.hpp"
#include "f2d/nn.hpp"

#include <cmath>

namespace f2d::expression {

namespace {

// Rows of the 32x32 layout that carry expression (eyes through chin).
constexpr int kFirstRow = 10;
constexpr int kLastRow = 28;

}  // namespace

ZeroExpressionExtractor::ZeroExpressionExtractor(int width) : width_(width) {
  if (width <= 0) throw ConfigError("expression width must be positive");
}

Eigen::RowVectorXd ZeroExpressionExtractor::coefficients(const Image&) const {
  return Eigen::RowVectorXd::Zero(width_);
}

ToyExpressionExtractor::ToyExpressionExtractor(int image_size, int width, std::uint64_t seed)
    : image_size_(image_size) {
  if (width <= 0) throw ConfigError("expression width must be positive");
  if (image_size != 32) throw ConfigError("toy expression extractor expects 32x32 faces");
  Rng rng(derive_seed(seed, "toy_expression"));
  const int pixels = (kLastRow - kFirstRow) * image_size;
  projection_ = nn::normal_init(pixels, width, 1.0 / std::sqrt(static_cast<double>(pixels)), rng);
}

Eigen::RowVectorXd ToyExpressionExtractor::coefficients(const Image& image) const {
  if (image.width() != image_size_ || image.height() != image_size_) {
    throw ExtractionError("toy expression extractor: unsupported resolution " +
                          std::to_string(image.width()) + "x" + std::to_string(image.height()));
  }
  if (image.stddev() < 1e-3) throw ExtractionError("toy expression extractor: no face detected");
  Eigen::RowVectorXd crop((kLastRow - kFirstRow) * image_size_);
  Eigen::Index k = 0;
  for (int y = kFirstRow; y < kLastRow; ++y) {
    for (int x = 0; x < image_size_; ++x) crop(k++) = image.at(y, x, 0);
  }
  crop.array() -= crop.mean();
  return crop * projection_;
}

std::uint64_t ToyExpressionExtractor::digest() const {
  return nn::digest({{"projection", ag::constant(projection_)}});
}

ExpressionFeature extract_expression(const Image& image, const ExpressionExtractor& extractor) {
  Eigen::RowVectorXd v;
  try {
    v = extractor.coefficients(image);
  } catch (const ExtractionError&) {
    throw;
  } catch (const std::exception& e) {
    throw ExtractionError(extractor.name() + ": " + e.what());
  }
  if (v.size() != extractor.width()) {
    throw ExtractionError(extractor.name() + ": returned width " + std::to_string(v.size()) +
                          ", expected " + std::to_string(extractor.width()));
  }
  if (!v.allFinite()) throw ExtractionError(extractor.name() + ": non-finite coefficients");
  return {std::move(v)};
}

ConditionVector compose_condition(const identity::MultiScaleIdentityFeature& identity,
                                  const std::optional<ExpressionFeature>& expression,
                                  const UnconditionalExpressionVector& uncond, ConditionMode mode,
                                  Rng* rng, double drop_probability) {
  if (expression && expression->values.size() != uncond.width()) {
    throw ConfigError("expression width " + std::to_string(expression->values.size()) +
                      " differs from the unconditional vector width " +
                      std::to_string(uncond.width()));
  }
  bool use_uncond = false;
  switch (mode) {
    case ConditionMode::train:
      if (rng == nullptr) throw ConfigError("train-mode composition needs a random source");
      if (!expression) throw MissingReferenceError("train-mode composition needs v_exp");
      use_uncond = rng->bernoulli(drop_probability);
      break;
    case ConditionMode::inference_uncond:
      use_uncond = true;
      break;
    case ConditionMode::inference_cond:
      if (!expression) {
        throw MissingReferenceError("expression-conditional generation needs a reference v_exp");
      }
      break;
  }
  const ag::Var id = ag::constant(identity.concatenated);
  const ag::Var tail = use_uncond ? uncond.value : ag::constant(expression->values);
  const ag::Var parts[] = {id, tail};
  return {ag::concat_cols(parts), use_uncond};
}

}  // namespace f2d::expression
