#include "f2d/errors.hpp"
#include "f2d/inference.hpp"

#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <atomic>

using namespace f2d;
using namespace f2d::inference;

namespace {

class CountingDenoiser final : public diffusion::Denoiser {
 public:
  explicit CountingDenoiser(const diffusion::Denoiser& inner) : inner_(inner) {}
  diffusion::LatentShape latent_shape() const override { return inner_.latent_shape(); }
  ag::Var predict(const ag::Var& z, int t, const ag::Var& c) const override {
    ++calls;
    return inner_.predict(z, t, c);
  }
  std::uint64_t digest() const override { return inner_.digest(); }
  mutable std::atomic<int> calls{0};

 private:
  const diffusion::Denoiser& inner_;
};

InferenceConfig quick(int steps = 6, std::uint64_t seed = 1) {
  InferenceConfig c;
  c.num_steps = steps;
  c.seed = seed;
  return c;
}

const mapping::PromptTemplate kPrompt("A photo of S* in the snow");

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST(CfgNoise, ScaleZeroIsUnconditionalAndOneIsConditional) {
  const fixture::ToyStack s;
  Rng rng(1);
  const diffusion::Latent z = random_matrix(4, 16, rng);
  const ag::Var cond = s.text.encode("A photo of a dog");
  const ag::Var uncond = s.text.encode("");
  const auto eps_c = s.denoiser.predict(ag::constant(z), 500, cond).value();
  const auto eps_u = s.denoiser.predict(ag::constant(z), 500, uncond).value();
  EXPECT_EQ(cfg_noise(z, 500, cond, uncond, 0.0, s.denoiser), eps_u);
  EXPECT_EQ(cfg_noise(z, 500, cond, uncond, 1.0, s.denoiser), eps_c);
}

TEST(CfgNoise, MatchesFormulaOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd u = random_matrix(4, 16, rng), c = random_matrix(4, 16, rng);
    const double w = 10.0 * rng.uniform();
    const auto g = guide(u, c, w);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      EXPECT_NEAR(g.data()[i], u.data()[i] + w * (c.data()[i] - u.data()[i]), 1e-6);
    }
  }
}

TEST(CfgNoise, ShapeMismatchThrows) {
  EXPECT_THROW(guide(Eigen::MatrixXd::Zero(4, 16), Eigen::MatrixXd::Zero(4, 8), 7.0), ShapeError);
}

TEST(InferenceConfig, Validation) {
  InferenceConfig c;
  c.num_steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = InferenceConfig{};
  c.guidance_scale = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = InferenceConfig{};
  EXPECT_EQ(c.num_steps, 30);
  EXPECT_EQ(c.guidance_scale, 7.0);
  EXPECT_EQ(c.dsc_alpha, 0.8);
}

TEST(TimestepGrid, DescendsFromTopToOne) {
  const auto g = timestep_grid(30, 1000);
  ASSERT_EQ(g.size(), 30u);
  EXPECT_EQ(g.front(), 1000);
  EXPECT_EQ(g.back(), 1);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
}

TEST(DscSwitchIndex, CeilingArithmetic) {
  EXPECT_EQ(dsc_switch_index(30, 0.8), 6);
  EXPECT_EQ(dsc_switch_index(30, 1.0), 0);
  EXPECT_EQ(dsc_switch_index(30, 0.0), 30);
  EXPECT_EQ(dsc_switch_index(10, 0.75), 3);  // ceil(2.5)
  EXPECT_EQ(dsc_switch_index(7, 0.5), 4);    // ceil(3.5)
  EXPECT_THROW(dsc_switch_index(30, 1.2), ConfigError);
}

TEST(Generate, SameSeedIsBitIdentical) {
  const fixture::ToyStack s;
  const auto state = s.mapper();
  const Image face = fixture::face(1);
  const auto a = generate(face, kPrompt, quick(), s.models(), state);
  const auto b = generate(face, kPrompt, quick(), s.models(), state);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.latent, b.latent);
}

TEST(Generate, DifferentSeedsDiffer) {
  const fixture::ToyStack s;
  const auto state = s.mapper();
  const Image face = fixture::face(1);
  EXPECT_NE(generate(face, kPrompt, quick(6, 1), s.models(), state).latent,
            generate(face, kPrompt, quick(6, 2), s.models(), state).latent);
}

TEST(Generate, TwoDenoiserCallsPerStep) {
  const fixture::ToyStack s;
  const CountingDenoiser counter(s.denoiser);
  auto frozen = s.models();
  frozen.denoiser = &counter;
  const auto state = s.mapper();
  for (int n : {1, 3, 30}) {
    counter.calls = 0;
    const auto g = generate(fixture::face(), kPrompt, quick(n), frozen, state);
    EXPECT_EQ(counter.calls.load(), 2 * n);
    EXPECT_EQ(g.trace.denoiser_calls, 2 * n);
    EXPECT_EQ(g.trace.timesteps.size(), static_cast<std::size_t>(n));
  }
}

TEST(Generate, NonPlaceholderWordsChangeTheOutput) {
  const fixture::ToyStack s;
  const auto state = s.mapper();
  const Image face = fixture::face(2);
  const auto a = generate(face, mapping::PromptTemplate("A photo of S* as a chef"), quick(), s.models(), state);
  const auto b = generate(face, mapping::PromptTemplate("A photo of S* on the moon"), quick(), s.models(), state);
  EXPECT_NE(a.latent, b.latent);
}

TEST(Generate, UsesTheUnconditionalExpressionVector) {
  const fixture::ToyStack s;
  const auto cond = inference_condition(fixture::face(), nullptr, s.models(), s.mapper());
  EXPECT_TRUE(cond.used_unconditional);
}

TEST(DscGenerate, AlphaOneBitEqualsGenerate) {
  const fixture::ToyStack s;
  const auto state = s.mapper();
  InferenceConfig c = quick(8);
  c.dsc_alpha = 1.0;
  for (std::uint64_t seed : {0u, 5u, 9u}) {
    c.seed = seed;
    const auto a = generate(fixture::face(3), kPrompt, c, s.models(), state);
    const auto b = dsc_generate(fixture::face(3), kPrompt, c, s.models(), state);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.latent, b.latent);
    EXPECT_EQ(b.trace.switch_index, 0);
  }
}

TEST(DscGenerate, AlphaZeroNeverUsesTheIdentifier) {
  const fixture::ToyStack s;
  InferenceConfig c = quick(8);
  c.dsc_alpha = 0.0;
  const auto g = dsc_generate(fixture::face(), kPrompt, c, s.models(), s.mapper());
  EXPECT_EQ(g.trace.switch_index, 8);
  for (bool used : g.trace.used_identifier) EXPECT_FALSE(used);
  // Same as sampling under the class prompt alone.
  const ag::Var cls = s.text.encode(kPrompt.substituted("person"));
  EXPECT_EQ(sample(cls, cls, 0, c, s.models()).latent, g.latent);
}

TEST(DscGenerate, DefaultRatioSplitsSixAndTwentyFour) {
  const fixture::ToyStack s;
  InferenceConfig c = quick(30);
  const auto g = dsc_generate(fixture::face(), kPrompt, c, s.models(), s.mapper());
  EXPECT_EQ(g.trace.switch_index, 6);
  const auto n_identifier = std::count(g.trace.used_identifier.begin(), g.trace.used_identifier.end(), true);
  EXPECT_EQ(n_identifier, 24);
  for (int i = 0; i < 6; ++i) EXPECT_FALSE(g.trace.used_identifier[static_cast<std::size_t>(i)]);
}

TEST(ExpressionConditional, SelfReferenceMatchesTrainingConditionalBranch) {
  const fixture::ToyStack s;
  const auto state = s.mapper();
  const Image face = fixture::face(1, 1);
  const auto cond = inference_condition(face, &face, s.models(), state);
  const auto expected = expression::compose_condition(
      s.encoder.extract(face), expression::extract_expression(face, s.expression), state.uncond,
      expression::ConditionMode::inference_cond, nullptr);
  EXPECT_FALSE(cond.used_unconditional);
  EXPECT_EQ(cond.row(), expected.row());
}

TEST(ExpressionConditional, ZeroStubGivesZeroTail) {
  const fixture::ToyStack s;
  const expression::ZeroExpressionExtractor zero(s.expression.width());
  auto frozen = s.models();
  frozen.expression = &zero;
  const Image face = fixture::face();
  const auto cond = inference_condition(face, &face, frozen, s.mapper());
  EXPECT_TRUE(cond.row().tail(zero.width()).isZero(0.0));
}

TEST(ExpressionConditional, DifferentReferencesGiveDifferentImages) {
  const fixture::ToyStack s;
  const auto state = s.mapper();
  const Image face = fixture::face(0);
  Rng rng(4);
  const auto person = synth::random_identity(rng);
  synth::FaceVariation smile;
  smile.smile = 1.0;
  smile.mouth_open = 0.9;
  const Image neutral = synth::render_face(person, {}).image;
  const Image smiling = synth::render_face(person, smile).image;
  EXPECT_NE(expression_conditional_generate(face, neutral, kPrompt, quick(), s.models(), state).latent,
            expression_conditional_generate(face, smiling, kPrompt, quick(), s.models(), state).latent);
}

TEST(ExpressionConditional, UnusableReferenceIsMissingReferenceError) {
  const fixture::ToyStack s;
  EXPECT_THROW(expression_conditional_generate(fixture::face(), Image(32, 32, 1, 0.4), kPrompt, quick(),
                                               s.models(), s.mapper()),
               MissingReferenceError);
}

TEST(Generate, StageLabelsOnFailure) {
  const fixture::ToyStack s;
  try {
    generate(Image(16, 16, 1, 0.5), kPrompt, quick(), s.models(), s.mapper());
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "encode");
  }
}
