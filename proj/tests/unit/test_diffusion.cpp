#include "f2d/diffusion.hpp"
#include "f2d/errors.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <cmath>

using namespace f2d;
using namespace f2d::diffusion;

namespace {

const LatentShape kShape{4, 4, 4};

Latent random_latent(Rng& rng, const LatentShape& s = kShape) { return sample_noise(rng, s); }

Eigen::MatrixXd random_mask(Rng& rng, int h = 4, int w = 4) {
  Eigen::MatrixXd m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return m;
}

ag::Var random_context(Rng& rng, int rows = 3, int width = 5) {
  Eigen::MatrixXd c(rows, width);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
  return ag::constant(c);
}

// Returns a preset latent regardless of input.
class FixedDenoiser final : public Denoiser {
 public:
  explicit FixedDenoiser(Latent out) : out_(std::move(out)) {}
  LatentShape latent_shape() const override { return kShape; }
  ag::Var predict(const ag::Var&, int, const ag::Var&) const override { return ag::constant(out_); }
  std::uint64_t digest() const override { return 0; }

 private:
  Latent out_;
};

// Independent scaled-linear cumulative product.
double alpha_bar_oracle(int t) {
  double prod = 1.0;
  for (int i = 1; i <= t; ++i) {
    const double root = std::sqrt(0.00085) + (std::sqrt(0.012) - std::sqrt(0.00085)) * (i - 1) / 999.0;
    prod *= 1.0 - root * root;
  }
  return prod;
}

struct Instance {
  NoisyLatent nl;
  ag::Var cond;
  ag::Var cls;
  Eigen::MatrixXd mask;
};

Instance random_instance(Rng& rng) {
  static const NoiseSchedule schedule = NoiseSchedule::scaled_linear();
  Instance in;
  in.nl = add_noise(random_latent(rng), sample_timestep(rng, schedule), random_latent(rng), schedule);
  in.cond = random_context(rng);
  in.cls = random_context(rng);
  in.mask = random_mask(rng);
  return in;
}

}  // namespace

TEST(NoiseSchedule, StartsAtOneAndMatchesClosedForm) {
  const auto s = NoiseSchedule::scaled_linear();
  EXPECT_EQ(s.num_train_timesteps(), 1000);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  for (int t : {1, 10, 500, 999, 1000}) EXPECT_NEAR(s.alpha_bar(t), alpha_bar_oracle(t), 1e-12);
  EXPECT_THROW(s.alpha_bar(1001), TimestepError);
  EXPECT_THROW(s.alpha_bar(-1), TimestepError);
}

TEST(AddNoise, ZeroTimestepIsIdentity) {
  Rng rng(1);
  const auto s = NoiseSchedule::scaled_linear();
  const Latent z0 = random_latent(rng);
  EXPECT_EQ(add_noise(z0, 0, random_latent(rng), s).z_t, z0);
}

TEST(AddNoise, ZeroNoiseScalesSignal) {
  Rng rng(2);
  const auto s = NoiseSchedule::scaled_linear();
  const Latent z0 = random_latent(rng);
  const auto nl = add_noise(z0, 400, Latent::Zero(4, 16), s);
  EXPECT_LE((nl.z_t - std::sqrt(s.alpha_bar(400)) * z0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(AddNoise, MatchesClosedFormOracle) {
  Rng rng(3);
  const auto s = NoiseSchedule::scaled_linear();
  for (int trial = 0; trial < 20; ++trial) {
    const Latent z0 = random_latent(rng), eps = random_latent(rng);
    const int t = sample_timestep(rng, s);
    const double ab = alpha_bar_oracle(t);
    const auto nl = add_noise(z0, t, eps, s);
    for (Eigen::Index i = 0; i < z0.size(); ++i) {
      EXPECT_NEAR(nl.z_t.data()[i], std::sqrt(ab) * z0.data()[i] + std::sqrt(1 - ab) * eps.data()[i], 1e-6);
    }
    EXPECT_EQ(nl.t, t);
    EXPECT_EQ(nl.eps, eps);
    EXPECT_EQ(nl.z0, z0);
  }
}

TEST(AddNoise, OutOfRangeTimestepThrows) {
  const auto s = NoiseSchedule::scaled_linear();
  EXPECT_THROW(add_noise(Latent::Zero(4, 16), 1001, Latent::Zero(4, 16), s), TimestepError);
}

TEST(SampleTimestep, UniformOverTrainingRange) {
  const auto s = NoiseSchedule::scaled_linear();
  Rng rng(99);
  std::vector<int> counts(1000, 0);
  for (int i = 0; i < 10000; ++i) {
    const int t = sample_timestep(rng, s);
    ASSERT_GE(t, 1);
    ASSERT_LE(t, 1000);
    ++counts[static_cast<std::size_t>(t - 1)];
  }
  double stat = 0.0;
  for (int c : counts) stat += (c - 10.0) * (c - 10.0) / 10.0;
  const boost::math::chi_squared dist(999.0);
  const double critical = boost::math::quantile(dist, 0.999);
  EXPECT_NEAR(critical, 1142.8479838910355, 1e-6);
  EXPECT_LT(stat, critical);
}

TEST(DownsampleMask, ConstantMasksStayConstant) {
  EXPECT_EQ(downsample_mask(Eigen::MatrixXd::Ones(32, 32), 4, 4), Eigen::MatrixXd::Ones(4, 4));
  EXPECT_EQ(downsample_mask(Eigen::MatrixXd::Zero(32, 32), 4, 4), Eigen::MatrixXd::Zero(4, 4));
}

TEST(DownsampleMask, CheckerboardHalfFractionRoundsUp) {
  Eigen::MatrixXd board(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) board(y, x) = (x + y) % 2;
  EXPECT_EQ(downsample_mask(board, 4, 4), Eigen::MatrixXd::Ones(4, 4));
}

TEST(DownsampleMask, JustBelowHalfIsZero) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(8, 8);
  m.topRows(3).setOnes();
  m(3, 0) = 1.0;  // 25 of 64 pixels per 8x8 block
  EXPECT_EQ(downsample_mask(m, 1, 1)(0, 0), 0.0);
}

TEST(DownsampleMask, NonDivisibleShapeThrows) {
  EXPECT_THROW(downsample_mask(Eigen::MatrixXd::Ones(30, 32), 4, 4), ShapeError);
}

TEST(ReconstructionLoss, PerfectPredictionIsZero) {
  Rng rng(4);
  const auto s = NoiseSchedule::scaled_linear();
  const Latent eps = random_latent(rng);
  const auto nl = add_noise(random_latent(rng), 10, eps, s);
  const FixedDenoiser d(eps);
  EXPECT_EQ(reconstruction_loss(nl, random_context(rng), d).item(), 0.0);
}

TEST(ReconstructionLoss, ConstantOffsetGivesSquare) {
  Rng rng(5);
  const auto s = NoiseSchedule::scaled_linear();
  const Latent eps = random_latent(rng);
  const auto nl = add_noise(random_latent(rng), 10, eps, s);
  for (double c : {0.5, -1.5, 3.0}) {
    const FixedDenoiser d(eps.array() + c);
    EXPECT_NEAR(reconstruction_loss(nl, random_context(rng), d).item(), c * c, 1e-12);
  }
}

TEST(CgdrLoss, AllOnesMaskReducesToReconstruction) {
  Rng rng(6);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto in = random_instance(rng);
    const double rec = reconstruction_loss(in.nl, in.cond, d).item();
    EXPECT_NEAR(cgdr_loss(in.nl, in.cond, in.cls, Eigen::MatrixXd::Ones(4, 4), d).item(), rec, 1e-6);
    EXPECT_NEAR(masked_reconstruction_loss(in.nl, in.cond, Eigen::MatrixXd::Ones(4, 4), d).item(), rec, 1e-6);
  }
}

TEST(CgdrLoss, ZeroMaskWithClassPromptAsIdentityIsZero) {
  Rng rng(7);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  const auto in = random_instance(rng);
  EXPECT_NEAR(cgdr_loss(in.nl, in.cls, in.cls, Eigen::MatrixXd::Zero(4, 4), d).item(), 0.0, 1e-15);
}

TEST(CgdrLoss, MatchesComposedTargetOracle) {
  Rng rng(8);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto in = random_instance(rng);
    const Latent eps_hat = d.predict(ag::constant(in.nl.z_t), in.nl.t, in.cond).value();
    const Latent eps_class = d.predict(ag::constant(in.nl.z_t), in.nl.t, in.cls).value();
    EXPECT_NEAR(cgdr_loss(in.nl, in.cond, in.cls, in.mask, d).item(),
                oracle::cgdr(eps_hat, in.nl.eps, eps_class, in.mask), 1e-6);
  }
}

TEST(CgdrLoss, ClassBranchCarriesNoGradient) {
  Rng rng(9);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  const auto in = random_instance(rng);
  const ag::Var cond = ag::parameter(in.cond.value());
  const ag::Var cls = ag::parameter(in.cls.value());
  ag::backward(cgdr_loss(in.nl, cond, cls, in.mask, d));
  EXPECT_TRUE(cls.grad().isZero(0.0));
  EXPECT_FALSE(cond.grad().isZero(0.0));
}

TEST(CgdrLoss, MaskShapeMismatchThrows) {
  Rng rng(10);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  const auto in = random_instance(rng);
  EXPECT_THROW(cgdr_loss(in.nl, in.cond, in.cls, Eigen::MatrixXd::Ones(2, 8), d), ShapeError);
}

TEST(CgdrLoss, NonFiniteDenoiserOutputIsNumericError) {
  Rng rng(11);
  const auto in = random_instance(rng);
  const FixedDenoiser d(Latent::Constant(4, 16, std::nan("")));
  EXPECT_THROW(cgdr_loss(in.nl, in.cond, in.cls, in.mask, d), NumericError);
  EXPECT_THROW(reconstruction_loss(in.nl, in.cond, d), NumericError);
}

TEST(MaskedReconstructionLoss, ZeroMaskIsZero) {
  Rng rng(12);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  const auto in = random_instance(rng);
  EXPECT_EQ(masked_reconstruction_loss(in.nl, in.cond, Eigen::MatrixXd::Zero(4, 4), d).item(), 0.0);
}

TEST(MaskedReconstructionLoss, MatchesFormulaOracle) {
  Rng rng(13);
  const LinearToyDenoiser d(kShape, 3, 5, 1000, 7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto in = random_instance(rng);
    const Latent eps_hat = d.predict(ag::constant(in.nl.z_t), in.nl.t, in.cond).value();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < 4; ++c)
      for (Eigen::Index p = 0; p < 16; ++p) {
        const double r = (in.nl.eps(c, p) - eps_hat(c, p)) * in.mask(p / 4, p % 4);
        sum += r * r;
      }
    EXPECT_NEAR(masked_reconstruction_loss(in.nl, in.cond, in.mask, d).item(), sum / 64.0, 1e-6);
  }
}

TEST(LossKind, RoundTripsThroughStrings) {
  for (auto k : {LossKind::cgdr, LossKind::reconstruction, LossKind::masked_reconstruction}) {
    EXPECT_EQ(loss_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(loss_kind_from_string("l1"), ConfigError);
}

// Training -------------------------------------------------------------------

namespace {

TrainStepConfig toy_train_config(LossKind kind) {
  TrainStepConfig c;
  c.loss_kind = kind;
  c.learning_rate = 1e-3;
  c.batch_size = 4;
  return c;
}

}  // namespace

TEST(CgdrGradient, MatchesFiniteDifferencesThroughMapper) {
  const fixture::ToyStack stack;
  const auto frozen = stack.models();
  const auto faces = fixture::training_faces(10);
  TrainStepConfig cfg = toy_train_config(LossKind::cgdr);
  cfg.drop_prob = 0.5;
  const ag::Var class_ctx = stack.text.encode(cfg.class_prompt);
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    mapping::MapperState state = stack.mapper(static_cast<std::uint64_t>(trial));
    const PreparedSample p = prepare_sample(faces[static_cast<std::size_t>(trial)], frozen, cfg, rng);
    nn::Linear& proj = state.mappers.second.layer(2);
    nn::Linear& hidden = state.mappers.first.layer(1);
    const Eigen::MatrixXd w0 = proj.weight.value();
    const Eigen::MatrixXd b0 = hidden.bias.value();

    ag::backward(sample_loss(p, state, cfg, frozen, class_ctx, nullptr));
    const Eigen::MatrixXd gw = proj.weight.grad();
    const Eigen::MatrixXd gb = hidden.bias.grad();

    auto loss_w = [&](const Eigen::MatrixXd& w) {
      ag::NoGradGuard ng;
      proj.weight = ag::parameter(w);
      const double v = sample_loss(p, state, cfg, frozen, class_ctx, nullptr).item();
      proj.weight = ag::parameter(w0);
      return v;
    };
    auto loss_b = [&](const Eigen::MatrixXd& b) {
      ag::NoGradGuard ng;
      hidden.bias = ag::parameter(b);
      const double v = sample_loss(p, state, cfg, frozen, class_ctx, nullptr).item();
      hidden.bias = ag::parameter(b0);
      return v;
    };
    EXPECT_LT(oracle::relative_error(gw, oracle::numeric_gradient(loss_w, w0)), 1e-3) << "trial " << trial;
    EXPECT_LT(oracle::relative_error(gb, oracle::numeric_gradient(loss_b, b0)), 1e-3) << "trial " << trial;
  }
}

TEST(MapperTrainer, IdenticalSeedsGiveIdenticalReports) {
  const fixture::ToyStack stack;
  const auto faces = fixture::training_faces(4);
  auto run = [&] {
    mapping::MapperState state = stack.mapper();
    MapperTrainer trainer(state, toy_train_config(LossKind::cgdr), stack.models());
    Rng rng(5);
    std::vector<LossReport> out;
    for (int i = 0; i < 2; ++i) out.push_back(trainer.step(faces, rng));
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(MapperTrainer, SingleSampleReconstructionMatchesDirectComposition) {
  const fixture::ToyStack stack;
  const auto frozen = stack.models();
  const auto faces = fixture::training_faces(1);
  const TrainStepConfig cfg = toy_train_config(LossKind::reconstruction);
  mapping::MapperState state = stack.mapper();

  Rng direct_rng(77);
  const PreparedSample p = prepare_sample(faces[0], frozen, cfg, direct_rng);
  const auto cond = expression::compose_condition(
      p.identity, p.expression, state.uncond,
      p.drop_expression ? expression::ConditionMode::inference_uncond : expression::ConditionMode::inference_cond,
      nullptr);
  const auto ident = mapping::map_to_identifier(cond, state.mappers, state.config, &direct_rng);
  const auto seq = mapping::inject_identifier(mapping::PromptTemplate(cfg.identity_prompt_template), ident, stack.text);
  const double direct = reconstruction_loss(p.noisy, seq.context, stack.denoiser).item();

  MapperTrainer trainer(state, cfg, frozen);
  Rng rng(77);
  EXPECT_EQ(trainer.step(faces, rng).loss, direct);
}

TEST(MapperTrainer, FrozenWeightsAndNonTrainableStateUntouched) {
  const fixture::ToyStack stack;
  const auto frozen = stack.models();
  const std::uint64_t before = frozen.digest();
  mapping::MapperState state = stack.mapper();
  const std::uint64_t mapper_before = nn::digest(state.parameters());
  MapperTrainer trainer(state, toy_train_config(LossKind::cgdr), frozen);
  Rng rng(1);
  const auto faces = fixture::training_faces(4);
  for (int i = 0; i < 5; ++i) trainer.step(faces, rng);
  EXPECT_EQ(frozen.digest(), before);
  EXPECT_NE(nn::digest(state.parameters()), mapper_before);
  EXPECT_EQ(state.steps, 5);
}

TEST(MapperTrainer, UnconditionalGradientZeroWithoutDrops) {
  const fixture::ToyStack stack;
  const auto faces = fixture::training_faces(4);
  for (auto kind : {LossKind::cgdr, LossKind::reconstruction, LossKind::masked_reconstruction}) {
    TrainStepConfig cfg = toy_train_config(kind);
    cfg.drop_prob = 0.0;
    mapping::MapperState state = stack.mapper();
    MapperTrainer trainer(state, cfg, stack.models());
    Rng rng(3);
    for (int i = 0; i < 3; ++i) {
      const auto r = trainer.step(faces, rng);
      EXPECT_EQ(r.dropped, 0);
      EXPECT_EQ(r.uncond_grad_norm, 0.0);
    }
    EXPECT_TRUE(state.uncond.value.value().isZero(0.0));
  }
}

TEST(MapperTrainer, UnconditionalGradientNonzeroWhenDropped) {
  const fixture::ToyStack stack;
  const auto faces = fixture::training_faces(4);
  TrainStepConfig cfg = toy_train_config(LossKind::reconstruction);
  cfg.drop_prob = 1.0;
  mapping::MapperState state = stack.mapper();
  MapperTrainer trainer(state, cfg, stack.models());
  Rng rng(3);
  const auto r = trainer.step(faces, rng);
  EXPECT_EQ(r.dropped, 4);
  EXPECT_GT(r.uncond_grad_norm, 0.0);
}

TEST(MapperTrainer, EmptyBatchThrows) {
  const fixture::ToyStack stack;
  mapping::MapperState state = stack.mapper();
  MapperTrainer trainer(state, toy_train_config(LossKind::cgdr), stack.models());
  Rng rng(0);
  EXPECT_THROW(trainer.step({}, rng), EmptyInputError);
}

TEST(MapperTrainer, FailuresCarryTheSampleIndex) {
  const fixture::ToyStack stack;
  auto faces = fixture::training_faces(3);
  faces[2].image = Image(32, 32, 1, 0.5);  // no structure for the expression extractor
  mapping::MapperState state = stack.mapper();
  MapperTrainer trainer(state, toy_train_config(LossKind::cgdr), stack.models());
  Rng rng(0);
  try {
    trainer.step(faces, rng);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos) << e.what();
  }
}

TEST(TrainStepConfig, RejectsInvalidDropProbability) {
  TrainStepConfig c;
  c.drop_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainStepConfig, JsonRoundTrip) {
  TrainStepConfig c = toy_train_config(LossKind::masked_reconstruction);
  c.steps = 77;
  const TrainStepConfig back = nlohmann::json(c).get<TrainStepConfig>();
  EXPECT_EQ(back.loss_kind, c.loss_kind);
  EXPECT_EQ(back.steps, 77);
  EXPECT_EQ(back.learning_rate, c.learning_rate);
  EXPECT_EQ(back.class_prompt, c.class_prompt);
}
