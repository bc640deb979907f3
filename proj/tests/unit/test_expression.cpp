#include "f2d/errors.hpp"
#include "f2d/expression.hpp"
#include "f2d/synthetic_faces.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace f2d;
using namespace f2d::expression;

namespace {

identity::MultiScaleIdentityFeature identity_feature(int width, double fill) {
  identity::MultiScaleIdentityFeature f;
  f.concatenated = Eigen::RowVectorXd::Constant(width, fill);
  return f;
}

ExpressionFeature expression_feature(const Eigen::RowVectorXd& v) { return {v}; }

}  // namespace

TEST(ExtractExpression, IsDeterministic) {
  const ToyExpressionExtractor ex(32, 16, 3);
  const Image img = fixture::face(1, 2);
  EXPECT_EQ(extract_expression(img, ex).values, extract_expression(img, ex).values);
}

TEST(ExtractExpression, ZeroStubReturnsZerosOfConfiguredWidth) {
  const ZeroExpressionExtractor ex(64);
  const auto f = extract_expression(fixture::face(), ex);
  EXPECT_EQ(f.values.size(), 64);
  EXPECT_TRUE(f.values.isZero(0.0));
}

TEST(ExtractExpression, TwoExpressionsOfOneSubjectDiffer) {
  Rng rng(21);
  const auto person = synth::random_identity(rng);
  synth::FaceVariation neutral;
  synth::FaceVariation smiling;
  smiling.smile = 1.0;
  smiling.mouth_open = 0.8;
  smiling.eye_open = 0.5;
  const ToyExpressionExtractor ex(32, 16, 3);
  const auto a = extract_expression(synth::render_face(person, neutral).image, ex).values;
  const auto b = extract_expression(synth::render_face(person, smiling).image, ex).values;
  EXPECT_LT(oracle::cosine(a.transpose(), b.transpose()), 1.0 - 1e-6);
}

TEST(ExtractExpression, FlatImageIsAnExtractionError) {
  const ToyExpressionExtractor ex(32, 16, 3);
  EXPECT_THROW(extract_expression(Image(32, 32, 1, 0.5), ex), ExtractionError);
}

TEST(ExtractExpression, WrongResolutionIsAnExtractionError) {
  const ToyExpressionExtractor ex(32, 16, 3);
  EXPECT_THROW(extract_expression(Image(16, 16, 1, 0.5), ex), ExtractionError);
}

TEST(ComposeCondition, InferenceUncondAlwaysUsesUnconditional) {
  UnconditionalExpressionVector uncond(4);
  const auto id = identity_feature(6, 0.5);
  const auto exp = expression_feature(Eigen::RowVectorXd::Ones(4));
  for (int i = 0; i < 5; ++i) {
    const auto c = compose_condition(id, exp, uncond, ConditionMode::inference_uncond, nullptr);
    EXPECT_TRUE(c.used_unconditional);
    EXPECT_TRUE(c.row().tail(4).isZero(0.0));
  }
  // No reference needed either.
  EXPECT_TRUE(compose_condition(id, std::nullopt, uncond, ConditionMode::inference_uncond, nullptr)
                  .used_unconditional);
}

TEST(ComposeCondition, InferenceCondTailEqualsReferenceExactly) {
  UnconditionalExpressionVector uncond(5);
  Rng rng(2);
  Eigen::RowVectorXd r(5);
  for (int i = 0; i < 5; ++i) r[i] = rng.normal();
  const auto id = identity_feature(7, -0.25);
  const auto c = compose_condition(id, expression_feature(r), uncond, ConditionMode::inference_cond, nullptr);
  EXPECT_FALSE(c.used_unconditional);
  ASSERT_EQ(c.values.cols(), 12);
  EXPECT_EQ(c.row().head(7), id.concatenated);
  EXPECT_EQ(c.row().tail(5), r);
}

TEST(ComposeCondition, InferenceCondWithoutReferenceThrows) {
  UnconditionalExpressionVector uncond(3);
  EXPECT_THROW(compose_condition(identity_feature(2, 1.0), std::nullopt, uncond,
                                 ConditionMode::inference_cond, nullptr),
               MissingReferenceError);
}

TEST(ComposeCondition, TrainModeNeedsRandomSource) {
  UnconditionalExpressionVector uncond(3);
  EXPECT_THROW(compose_condition(identity_feature(2, 1.0), expression_feature(Eigen::RowVectorXd::Ones(3)),
                                 uncond, ConditionMode::train, nullptr),
               ConfigError);
}

TEST(ComposeCondition, RejectsWidthMismatch) {
  UnconditionalExpressionVector uncond(3);
  EXPECT_THROW(compose_condition(identity_feature(2, 1.0), expression_feature(Eigen::RowVectorXd::Ones(4)),
                                 uncond, ConditionMode::inference_cond, nullptr),
               ConfigError);
}

TEST(ComposeCondition, TrainDropFractionWithinBinomialBand) {
  UnconditionalExpressionVector uncond(4);
  uncond.value = ag::parameter(Eigen::RowVectorXd::Constant(4, -3.0));
  const auto id = identity_feature(3, 0.1);
  const auto exp = expression_feature(Eigen::RowVectorXd::Constant(4, 2.0));
  Rng rng(2024);
  int dropped = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto c = compose_condition(id, exp, uncond, ConditionMode::train, &rng);
    const Eigen::RowVectorXd tail = c.row().tail(4);
    // Never a mix of the two branches, and the flag matches the branch taken.
    if (c.used_unconditional) {
      EXPECT_EQ(tail, uncond.value.value().row(0));
      ++dropped;
    } else {
      EXPECT_EQ(tail, exp.values);
    }
    EXPECT_EQ(c.row().head(3), id.concatenated);
  }
  const double fraction = dropped / 10000.0;
  EXPECT_GE(fraction, 0.188);
  EXPECT_LE(fraction, 0.212);
}

TEST(ComposeCondition, UnconditionalGradientFlowsOnlyWhenSelected) {
  UnconditionalExpressionVector uncond(3);
  const auto id = identity_feature(2, 1.0);
  const auto exp = expression_feature(Eigen::RowVectorXd::Ones(3));

  auto c = compose_condition(id, exp, uncond, ConditionMode::inference_cond, nullptr);
  ag::backward(ag::sum(ag::hadamard(c.values, c.values)));
  EXPECT_TRUE(uncond.value.grad().isZero(0.0));

  UnconditionalExpressionVector other(3);
  other.value = ag::parameter(Eigen::RowVectorXd::Constant(3, 0.5));
  c = compose_condition(id, exp, other, ConditionMode::inference_uncond, nullptr);
  ag::backward(ag::sum(ag::hadamard(c.values, c.values)));
  EXPECT_FALSE(other.value.grad().isZero(0.0));
}
