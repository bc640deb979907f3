#pragma once

// Latent diffusion pieces used by personalization training: the discrete
// noise schedule, forward noising, latent-resolution masks, the frozen
// denoiser and latent codec interfaces (with toy implementations), the three
// training objectives, and the mapper training step.

#include "f2d/autograd.hpp"
#include "f2d/expression.hpp"
#include "f2d/identity_encoder.hpp"
#include "f2d/image.hpp"
#include "f2d/mapping.hpp"
#include "f2d/nn.hpp"
#include "f2d/random.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace f2d::diffusion {

/// Latents are channels x (height * width), each row one channel in raster order.
using Latent = Eigen::MatrixXd;

struct LatentShape {
  int channels = 4;
  int height = 4;
  int width = 4;

  Eigen::Index elements() const { return static_cast<Eigen::Index>(channels) * height * width; }
  bool operator==(const LatentShape&) const = default;
};

/// Discrete variance-preserving schedule with alpha_bar(0) = 1 and training
/// timesteps 1..T.
class NoiseSchedule {
 public:
  /// Stable Diffusion's "scaled linear" betas.
  static NoiseSchedule scaled_linear(int train_steps = 1000, double beta_start = 0.00085,
                                     double beta_end = 0.012);

  int num_train_timesteps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  double signal_scale(int t) const;  // sqrt(alpha_bar)
  double noise_scale(int t) const;   // sqrt(1 - alpha_bar)
  /// Noise-to-signal ratio sqrt((1 - alpha_bar) / alpha_bar).
  double sigma(int t) const;
  void check(int t) const;

 private:
  std::vector<double> alpha_bar_;
};

struct NoisyLatent {
  Latent z_t;
  Latent eps;
  Latent z0;
  int t = 0;
};

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
NoisyLatent add_noise(const Latent& z0, int t, const Latent& eps, const NoiseSchedule& schedule);

/// Uniform over the training range 1..T.
int sample_timestep(Rng& rng, const NoiseSchedule& schedule);
Latent sample_noise(Rng& rng, const LatentShape& shape);

/// Block rule: a latent cell is 1 iff at least half of its pixel block is
/// foreground.
Eigen::MatrixXd downsample_mask(const Eigen::MatrixXd& pixel_mask, int latent_height,
                                int latent_width);

struct SegmentationMask {
  Eigen::MatrixXd pixel;   // image resolution, values in {0, 1}
  Eigen::MatrixXd latent;  // latent resolution, values in {0, 1}

  static SegmentationMask from_pixel(Eigen::MatrixXd pixel, const LatentShape& shape);
};

/// Repeats an h x w mask over channels to match a Latent.
Latent broadcast_mask(const Eigen::MatrixXd& mask, const LatentShape& shape);

// Frozen interfaces -----------------------------------------------------------

/// Noise prediction eps_theta(z_t, t, tau(p)). Differentiable in the context.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual LatentShape latent_shape() const = 0;
  virtual ag::Var predict(const ag::Var& z_t, int t, const ag::Var& context) const = 0;
  virtual std::uint64_t digest() const = 0;
};

/// eps = A z_t + reshape(flatten(context) W) + (t / T) c. Linear in z_t and
/// the context; used where a formula oracle is wanted.
class LinearToyDenoiser final : public Denoiser {
 public:
  LinearToyDenoiser(LatentShape shape, int context_rows, int context_width, int train_steps,
                    std::uint64_t seed);
  LatentShape latent_shape() const override { return shape_; }
  ag::Var predict(const ag::Var& z_t, int t, const ag::Var& context) const override;
  std::uint64_t digest() const override;

 private:
  LatentShape shape_;
  int train_steps_;
  Eigen::MatrixXd channel_mix_;   // C x C
  Eigen::MatrixXd context_proj_;  // (rows * width) x (C * H * W)
  Eigen::MatrixXd time_bias_;     // C x (H * W)
};

/// Clean-latent parameterized toy denoiser: the context is decoded into a
/// clean-latent guess x0 = reshape(flatten(context) W + b) + lambda * z_t
/// and the noise estimate is (z_t - a_t x0) / b_t. Conditioning can steer the
/// prediction toward any latent, so personalization is trainable against a
/// frozen network; the z_t term lets the sampling noise reach the output.
class StructuredToyDenoiser final : public Denoiser {
 public:
  StructuredToyDenoiser(LatentShape shape, int context_rows, int context_width,
                        NoiseSchedule schedule, std::uint64_t seed, double latent_coupling = 0.1);
  LatentShape latent_shape() const override { return shape_; }
  ag::Var predict(const ag::Var& z_t, int t, const ag::Var& context) const override;
  std::uint64_t digest() const override;

 private:
  LatentShape shape_;
  NoiseSchedule schedule_;
  double coupling_;
  Eigen::MatrixXd decoder_;  // (rows * width) x (C * H * W)
  Eigen::MatrixXd bias_;     // 1 x (C * H * W)
};

/// Image <-> latent autoencoder.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual LatentShape latent_shape() const = 0;
  virtual Latent encode(const Image& image) const = 0;
  virtual Image decode(const Latent& latent) const = 0;
  virtual std::uint64_t digest() const = 0;
};

/// Orthonormal 2x2-Haar projection of each 8x8 block onto four channels
/// (mean, horizontal, vertical, diagonal); 32x32 gray -> 4x4x4.
class HaarBlockCodec final : public LatentCodec {
 public:
  explicit HaarBlockCodec(int image_size = 32, int block = 8);
  LatentShape latent_shape() const override;
  Latent encode(const Image& image) const override;
  Image decode(const Latent& latent) const override;
  std::uint64_t digest() const override;

 private:
  int image_size_;
  int block_;
  Eigen::MatrixXd basis_;  // 4 x (block * block)
};

// Objectives ------------------------------------------------------------------

/// mean((eps - eps_theta(z_t, t, cond))^2).
ag::Var reconstruction_loss(const NoisyLatent& nl, const ag::Var& cond, const Denoiser& denoiser);

/// mean(((eps - eps_theta) * M)^2), averaged over every element.
ag::Var masked_reconstruction_loss(const NoisyLatent& nl, const ag::Var& cond,
                                   const Eigen::MatrixXd& latent_mask, const Denoiser& denoiser);

/// mean((eps_hat - (eps * M + eps_hat_c * (1 - M)))^2) where eps_hat_c, the
/// class-prompt prediction on the same z_t, is a constant target.
ag::Var cgdr_loss(const NoisyLatent& nl, const ag::Var& cond_identity, const ag::Var& cond_class,
                  const Eigen::MatrixXd& latent_mask, const Denoiser& denoiser);

// Training step ---------------------------------------------------------------

enum class LossKind { cgdr, reconstruction, masked_reconstruction };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct TrainStepConfig {
  LossKind loss_kind = LossKind::cgdr;
  std::string class_prompt = "A photo of a person";
  std::string identity_prompt_template = "A photo of S*";
  double drop_prob = expression::kDefaultDropProbability;
  double learning_rate = 1e-5;
  int batch_size = 32;
  int steps = 100000;
  bool horizontal_flip = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainStepConfig& c);
void from_json(const nlohmann::json& j, TrainStepConfig& c);

/// Non-owning views of every frozen network used during personalization.
struct FrozenModels {
  const identity::IdentityEncoder* encoder = nullptr;
  const expression::ExpressionExtractor* expression = nullptr;
  const mapping::TextEncoder* text = nullptr;
  const Denoiser* denoiser = nullptr;
  const LatentCodec* codec = nullptr;
  const NoiseSchedule* schedule = nullptr;

  void validate() const;
  /// Combined digest of all frozen weights.
  std::uint64_t digest() const;
};

struct TrainingSample {
  Image image;
  Eigen::MatrixXd pixel_mask;
};

/// Everything random about one sample's loss, drawn up front so the loss is
/// a deterministic function of the mapper parameters.
struct PreparedSample {
  identity::MultiScaleIdentityFeature identity;
  expression::ExpressionFeature expression;
  bool drop_expression = false;
  NoisyLatent noisy;
  Eigen::MatrixXd latent_mask;
};

PreparedSample prepare_sample(const TrainingSample& sample, const FrozenModels& frozen,
                              const TrainStepConfig& config, Rng& rng);

/// Loss of one prepared sample. `class_context` is tau(class prompt);
/// mapper dropout is active iff `dropout_rng` is non-null.
ag::Var sample_loss(const PreparedSample& sample, const mapping::MapperState& state,
                    const TrainStepConfig& config, const FrozenModels& frozen,
                    const ag::Var& class_context, Rng* dropout_rng);

struct LossReport {
  double loss = 0.0;
  double grad_norm = 0.0;
  double uncond_grad_norm = 0.0;
  int dropped = 0;
  std::vector<double> sample_losses;
  std::vector<int> timesteps;

  bool operator==(const LossReport&) const = default;
};

/// Owns the optimizer over the mapper networks and the unconditional
/// expression vector; nothing else is ever updated.
class MapperTrainer {
 public:
  MapperTrainer(mapping::MapperState& state, TrainStepConfig config, FrozenModels frozen);

  LossReport step(std::span<const TrainingSample> batch, Rng& rng);
  /// Mean loss with fixed draws from `seed`, mapper dropout off, no update.
  double evaluate(std::span<const TrainingSample> batch, std::uint64_t seed) const;

  const TrainStepConfig& config() const { return config_; }

 private:
  mapping::MapperState& state_;
  TrainStepConfig config_;
  FrozenModels frozen_;
  nn::Adam optimizer_;
  ag::Var class_context_;
};

}  // namespace f2d::diffusion
