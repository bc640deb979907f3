#include "f2d/diffusion.hpp"

#include "f2d/errors.hpp"

#include <cmath>

namespace f2d::diffusion {

namespace {

void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + " contains non-finite values");
}

void check_latent(const Latent& z, const LatentShape& shape, const char* what) {
  if (z.rows() != shape.channels || z.cols() != static_cast<Eigen::Index>(shape.height) * shape.width) {
    throw ShapeError(std::string(what) + " is " + std::to_string(z.rows()) + "x" +
                     std::to_string(z.cols()) + ", expected " + std::to_string(shape.channels) +
                     "x" + std::to_string(shape.height * shape.width));
  }
}

ag::Var flatten(const ag::Var& v) { return ag::reshape(v, 1, v.rows() * v.cols()); }

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  return derive_seed(h ^ v, "frozen");
}

}  // namespace

// Schedule --------------------------------------------------------------------

NoiseSchedule NoiseSchedule::scaled_linear(int train_steps, double beta_start, double beta_end) {
  if (train_steps < 1) throw ConfigError("schedule needs at least one timestep");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw ConfigError("betas must satisfy 0 < start <= end < 1");
  }
  NoiseSchedule s;
  s.alpha_bar_.resize(static_cast<std::size_t>(train_steps) + 1);
  s.alpha_bar_[0] = 1.0;
  const double a = std::sqrt(beta_start);
  const double b = std::sqrt(beta_end);
  for (int i = 0; i < train_steps; ++i) {
    const double frac = train_steps == 1 ? 0.0 : static_cast<double>(i) / (train_steps - 1);
    const double root = a + (b - a) * frac;
    s.alpha_bar_[i + 1] = s.alpha_bar_[i] * (1.0 - root * root);
  }
  return s;
}

void NoiseSchedule::check(int t) const {
  if (t < 0 || t > num_train_timesteps()) {
    throw TimestepError("timestep " + std::to_string(t) + " outside [0, " +
                        std::to_string(num_train_timesteps()) + "]");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  check(t);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::signal_scale(int t) const { return std::sqrt(alpha_bar(t)); }
double NoiseSchedule::noise_scale(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

double NoiseSchedule::sigma(int t) const {
  const double ab = alpha_bar(t);
  return std::sqrt((1.0 - ab) / ab);
}

NoisyLatent add_noise(const Latent& z0, int t, const Latent& eps, const NoiseSchedule& schedule) {
  schedule.check(t);
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) {
    throw ShapeError("noise shape differs from latent shape");
  }
  NoisyLatent nl;
  nl.z_t = schedule.signal_scale(t) * z0 + schedule.noise_scale(t) * eps;
  nl.eps = eps;
  nl.z0 = z0;
  nl.t = t;
  return nl;
}

int sample_timestep(Rng& rng, const NoiseSchedule& schedule) {
  return rng.uniform_int(1, schedule.num_train_timesteps());
}

Latent sample_noise(Rng& rng, const LatentShape& shape) {
  Latent eps(shape.channels, static_cast<Eigen::Index>(shape.height) * shape.width);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
  return eps;
}

// Masks -----------------------------------------------------------------------

Eigen::MatrixXd downsample_mask(const Eigen::MatrixXd& pixel_mask, int latent_height,
                                int latent_width) {
  if (latent_height <= 0 || latent_width <= 0 || pixel_mask.rows() % latent_height != 0 ||
      pixel_mask.cols() % latent_width != 0 || pixel_mask.size() == 0) {
    throw ShapeError("mask " + std::to_string(pixel_mask.rows()) + "x" +
                     std::to_string(pixel_mask.cols()) + " does not tile into " +
                     std::to_string(latent_height) + "x" + std::to_string(latent_width));
  }
  const Eigen::Index bh = pixel_mask.rows() / latent_height;
  const Eigen::Index bw = pixel_mask.cols() / latent_width;
  Eigen::MatrixXd out(latent_height, latent_width);
  for (int i = 0; i < latent_height; ++i) {
    for (int j = 0; j < latent_width; ++j) {
      const double frac = pixel_mask.block(i * bh, j * bw, bh, bw).mean();
      out(i, j) = frac >= 0.5 ? 1.0 : 0.0;
    }
  }
  return out;
}

SegmentationMask SegmentationMask::from_pixel(Eigen::MatrixXd pixel, const LatentShape& shape) {
  SegmentationMask m;
  m.latent = downsample_mask(pixel, shape.height, shape.width);
  m.pixel = std::move(pixel);
  return m;
}

Latent broadcast_mask(const Eigen::MatrixXd& mask, const LatentShape& shape) {
  if (mask.rows() != shape.height || mask.cols() != shape.width) {
    throw ShapeError("latent mask is " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + ", expected " + std::to_string(shape.height) +
                     "x" + std::to_string(shape.width));
  }
  Eigen::RowVectorXd flat(static_cast<Eigen::Index>(shape.height) * shape.width);
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) flat(y * shape.width + x) = mask(y, x);
  }
  return flat.replicate(shape.channels, 1);
}

// Toy denoisers ---------------------------------------------------------------

LinearToyDenoiser::LinearToyDenoiser(LatentShape shape, int context_rows, int context_width,
                                     int train_steps, std::uint64_t seed)
    : shape_(shape), train_steps_(train_steps) {
  if (train_steps < 1) throw ConfigError("denoiser needs a positive timestep range");
  Rng rng(derive_seed(seed, "linear_toy_denoiser"));
  const Eigen::Index in = static_cast<Eigen::Index>(context_rows) * context_width;
  channel_mix_ = nn::normal_init(shape.channels, shape.channels, 0.3, rng);
  context_proj_ = nn::normal_init(in, shape.elements(), 1.0 / std::sqrt(static_cast<double>(in)), rng);
  time_bias_ = nn::normal_init(shape.channels, static_cast<Eigen::Index>(shape.height) * shape.width,
                               0.5, rng);
}

ag::Var LinearToyDenoiser::predict(const ag::Var& z_t, int t, const ag::Var& context) const {
  check_latent(z_t.value(), shape_, "z_t");
  if (context.rows() * context.cols() != context_proj_.rows()) {
    throw ShapeError("denoiser context has the wrong number of elements");
  }
  if (t < 0 || t > train_steps_) throw TimestepError("timestep outside the denoiser range");
  const ag::Var mixed = ag::matmul(ag::constant(channel_mix_), z_t);
  const ag::Var ctx = ag::reshape(ag::matmul(flatten(context), ag::constant(context_proj_)),
                                  shape_.channels, z_t.cols());
  const ag::Var time = ag::constant(time_bias_ * (static_cast<double>(t) / train_steps_));
  return ag::add(ag::add(mixed, ctx), time);
}

std::uint64_t LinearToyDenoiser::digest() const {
  return nn::digest({{"channel_mix", ag::constant(channel_mix_)},
                     {"context_proj", ag::constant(context_proj_)},
                     {"time_bias", ag::constant(time_bias_)}});
}

StructuredToyDenoiser::StructuredToyDenoiser(LatentShape shape, int context_rows, int context_width,
                                             NoiseSchedule schedule, std::uint64_t seed,
                                             double latent_coupling)
    : shape_(shape), schedule_(std::move(schedule)), coupling_(latent_coupling) {
  Rng rng(derive_seed(seed, "structured_toy_denoiser"));
  const Eigen::Index in = static_cast<Eigen::Index>(context_rows) * context_width;
  // Small next to face latents (rms ~0.25): the fixed prompt words barely move
  // x0, so the learned token has to carry the subject.
  decoder_ = nn::normal_init(in, shape.elements(), 0.25 / std::sqrt(static_cast<double>(in)), rng);
  bias_ = nn::normal_init(1, shape.elements(), 0.05, rng);
}

ag::Var StructuredToyDenoiser::predict(const ag::Var& z_t, int t, const ag::Var& context) const {
  check_latent(z_t.value(), shape_, "z_t");
  if (context.rows() * context.cols() != decoder_.rows()) {
    throw ShapeError("denoiser context has the wrong number of elements");
  }
  schedule_.check(t);
  if (t == 0) throw TimestepError("noise prediction is undefined at t = 0");
  const double a = schedule_.signal_scale(t);
  const double b = schedule_.noise_scale(t);
  const ag::Var guess =
      ag::reshape(ag::add_rowwise(ag::matmul(flatten(context), ag::constant(decoder_)),
                                  ag::constant(bias_)),
                  shape_.channels, z_t.cols());
  const ag::Var x0 = ag::add(guess, ag::scale(z_t, coupling_));
  return ag::scale(ag::sub(z_t, ag::scale(x0, a)), 1.0 / b);
}

std::uint64_t StructuredToyDenoiser::digest() const {
  return nn::digest({{"decoder", ag::constant(decoder_)},
                     {"bias", ag::constant(bias_)},
                     {"coupling", ag::constant(Eigen::MatrixXd::Constant(1, 1, coupling_))}});
}

// Codec -----------------------------------------------------------------------

namespace {
constexpr double kLatentScale = 0.5;
}

HaarBlockCodec::HaarBlockCodec(int image_size, int block) : image_size_(image_size), block_(block) {
  if (block <= 0 || block % 2 != 0 || image_size <= 0 || image_size % block != 0) {
    throw ConfigError("codec block must be even and tile the image");
  }
  const int half = block / 2;
  const double unit = 1.0 / block;  // each pattern has block^2 entries of +-1/block
  basis_.resize(4, static_cast<Eigen::Index>(block) * block);
  for (int y = 0; y < block; ++y) {
    for (int x = 0; x < block; ++x) {
      const double sx = x < half ? 1.0 : -1.0;
      const double sy = y < half ? 1.0 : -1.0;
      const Eigen::Index k = static_cast<Eigen::Index>(y) * block + x;
      basis_(0, k) = unit;
      basis_(1, k) = unit * sx;
      basis_(2, k) = unit * sy;
      basis_(3, k) = unit * sx * sy;
    }
  }
}

LatentShape HaarBlockCodec::latent_shape() const {
  return {4, image_size_ / block_, image_size_ / block_};
}

Latent HaarBlockCodec::encode(const Image& image) const {
  if (image.width() != image_size_ || image.height() != image_size_ || image.channels() != 1) {
    throw ShapeError("codec expects a " + std::to_string(image_size_) + "x" +
                     std::to_string(image_size_) + " gray image");
  }
  const LatentShape shape = latent_shape();
  Latent z(4, static_cast<Eigen::Index>(shape.height) * shape.width);
  Eigen::VectorXd pixels(static_cast<Eigen::Index>(block_) * block_);
  for (int by = 0; by < shape.height; ++by) {
    for (int bx = 0; bx < shape.width; ++bx) {
      for (int y = 0; y < block_; ++y) {
        for (int x = 0; x < block_; ++x) {
          pixels(y * block_ + x) = image.at(by * block_ + y, bx * block_ + x) - 0.5;
        }
      }
      z.col(by * shape.width + bx) = kLatentScale * (basis_ * pixels);
    }
  }
  return z;
}

Image HaarBlockCodec::decode(const Latent& latent) const {
  const LatentShape shape = latent_shape();
  check_latent(latent, shape, "latent");
  Image out(image_size_, image_size_, 1);
  for (int by = 0; by < shape.height; ++by) {
    for (int bx = 0; bx < shape.width; ++bx) {
      const Eigen::VectorXd pixels =
          basis_.transpose() * latent.col(by * shape.width + bx) / kLatentScale;
      for (int y = 0; y < block_; ++y) {
        for (int x = 0; x < block_; ++x) {
          out.at(by * block_ + y, bx * block_ + x) = pixels(y * block_ + x) + 0.5;
        }
      }
    }
  }
  out.clamp();
  return out;
}

std::uint64_t HaarBlockCodec::digest() const {
  return nn::digest({{"basis", ag::constant(basis_)}});
}

// Objectives ------------------------------------------------------------------

namespace {

ag::Var predict_checked(const NoisyLatent& nl, const ag::Var& cond, const Denoiser& denoiser) {
  const LatentShape shape = denoiser.latent_shape();
  check_latent(nl.z_t, shape, "z_t");
  check_latent(nl.eps, shape, "eps");
  check_finite(nl.z_t, "z_t");
  check_finite(nl.eps, "eps");
  ag::Var out = denoiser.predict(ag::constant(nl.z_t), nl.t, cond);
  check_latent(out.value(), shape, "denoiser output");
  check_finite(out.value(), "denoiser output");
  return out;
}

}  // namespace

ag::Var reconstruction_loss(const NoisyLatent& nl, const ag::Var& cond, const Denoiser& denoiser) {
  const ag::Var eps_hat = predict_checked(nl, cond, denoiser);
  return ag::mean_squared_error(eps_hat, ag::constant(nl.eps));
}

ag::Var masked_reconstruction_loss(const NoisyLatent& nl, const ag::Var& cond,
                                   const Eigen::MatrixXd& latent_mask, const Denoiser& denoiser) {
  const Latent m = broadcast_mask(latent_mask, denoiser.latent_shape());
  const ag::Var eps_hat = predict_checked(nl, cond, denoiser);
  const ag::Var masked = ag::hadamard(eps_hat, ag::constant(m));
  return ag::mean_squared_error(masked, ag::constant(nl.eps.cwiseProduct(m)));
}

ag::Var cgdr_loss(const NoisyLatent& nl, const ag::Var& cond_identity, const ag::Var& cond_class,
                  const Eigen::MatrixXd& latent_mask, const Denoiser& denoiser) {
  const Latent m = broadcast_mask(latent_mask, denoiser.latent_shape());
  Latent eps_class;
  {
    ag::NoGradGuard no_grad;
    eps_class = predict_checked(nl, cond_class, denoiser).value();
  }
  const ag::Var eps_hat = predict_checked(nl, cond_identity, denoiser);
  const Latent ones = Latent::Ones(m.rows(), m.cols());
  const Latent target = nl.eps.cwiseProduct(m) + eps_class.cwiseProduct(ones - m);
  return ag::mean_squared_error(eps_hat, ag::constant(target));
}

// Training step ---------------------------------------------------------------

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::cgdr: return "cgdr";
    case LossKind::reconstruction: return "reconstruction";
    case LossKind::masked_reconstruction: return "masked_reconstruction";
  }
  return "unknown";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "cgdr") return LossKind::cgdr;
  if (name == "reconstruction") return LossKind::reconstruction;
  if (name == "masked_reconstruction") return LossKind::masked_reconstruction;
  throw ConfigError("unknown loss kind \"" + name + "\"");
}

void TrainStepConfig::validate() const {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("drop_prob must lie in [0, 1]");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (class_prompt.empty()) throw ConfigError("class_prompt must be non-empty");
  mapping::PromptTemplate{identity_prompt_template};
}

void to_json(nlohmann::json& j, const TrainStepConfig& c) {
  j = {{"loss_kind", to_string(c.loss_kind)},
       {"class_prompt", c.class_prompt},
       {"identity_prompt_template", c.identity_prompt_template},
       {"drop_prob", c.drop_prob},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"horizontal_flip", c.horizontal_flip}};
}

void from_json(const nlohmann::json& j, TrainStepConfig& c) {
  const TrainStepConfig d;
  c.loss_kind = loss_kind_from_string(j.value("loss_kind", to_string(d.loss_kind)));
  c.class_prompt = j.value("class_prompt", d.class_prompt);
  c.identity_prompt_template = j.value("identity_prompt_template", d.identity_prompt_template);
  c.drop_prob = j.value("drop_prob", d.drop_prob);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.horizontal_flip = j.value("horizontal_flip", d.horizontal_flip);
}

void FrozenModels::validate() const {
  if (!encoder) throw ConfigError("no identity encoder registered");
  if (!expression) throw ConfigError("no expression extractor registered");
  if (!text) throw ConfigError("no text encoder registered");
  if (!denoiser) throw ConfigError("no denoiser registered");
  if (!codec) throw ConfigError("no latent codec registered");
  if (!schedule) throw ConfigError("no noise schedule registered");
  if (!(denoiser->latent_shape() == codec->latent_shape())) {
    throw ShapeError("denoiser and codec disagree on the latent shape");
  }
}

std::uint64_t FrozenModels::digest() const {
  validate();
  std::uint64_t h = encoder->digest();
  h = mix(h, expression->digest());
  h = mix(h, text->digest());
  h = mix(h, denoiser->digest());
  h = mix(h, codec->digest());
  return h;
}

PreparedSample prepare_sample(const TrainingSample& sample, const FrozenModels& frozen,
                              const TrainStepConfig& config, Rng& rng) {
  Image image = sample.image;
  Eigen::MatrixXd mask = sample.pixel_mask;
  if (config.horizontal_flip && rng.bernoulli(0.5)) {
    image = image.flipped_horizontally();
    mask = mask.rowwise().reverse().eval();
  }
  PreparedSample p;
  try {
    p.identity = frozen.encoder->extract(image);
  } catch (const std::exception& e) {
    throw StageError("identity encoder", e.what());
  }
  try {
    p.expression = expression::extract_expression(image, *frozen.expression);
  } catch (const std::exception& e) {
    throw StageError("expression extractor", e.what());
  }
  p.drop_expression = rng.bernoulli(config.drop_prob);
  const int t = sample_timestep(rng, *frozen.schedule);
  const LatentShape shape = frozen.denoiser->latent_shape();
  const Latent eps = sample_noise(rng, shape);
  try {
    p.noisy = add_noise(frozen.codec->encode(image), t, eps, *frozen.schedule);
  } catch (const std::exception& e) {
    throw StageError("latent codec", e.what());
  }
  try {
    p.latent_mask = downsample_mask(mask, shape.height, shape.width);
  } catch (const std::exception& e) {
    throw StageError("mask", e.what());
  }
  return p;
}

ag::Var sample_loss(const PreparedSample& sample, const mapping::MapperState& state,
                    const TrainStepConfig& config, const FrozenModels& frozen,
                    const ag::Var& class_context, Rng* dropout_rng) {
  const expression::ConditionVector cond = expression::compose_condition(
      sample.identity, sample.expression, state.uncond,
      sample.drop_expression ? expression::ConditionMode::inference_uncond
                             : expression::ConditionMode::inference_cond,
      nullptr, config.drop_prob);
  const mapping::IdentifierEmbedding ident =
      mapping::map_to_identifier(cond, state.mappers, state.config, dropout_rng);
  mapping::ConditioningSequence seq;
  try {
    seq = mapping::inject_identifier(mapping::PromptTemplate(config.identity_prompt_template),
                                     ident, *frozen.text);
  } catch (const std::exception& e) {
    throw StageError("text encoder", e.what());
  }
  try {
    switch (config.loss_kind) {
      case LossKind::reconstruction:
        return reconstruction_loss(sample.noisy, seq.context, *frozen.denoiser);
      case LossKind::masked_reconstruction:
        return masked_reconstruction_loss(sample.noisy, seq.context, sample.latent_mask,
                                          *frozen.denoiser);
      case LossKind::cgdr:
        return cgdr_loss(sample.noisy, seq.context, class_context, sample.latent_mask,
                         *frozen.denoiser);
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("denoiser", e.what());
  }
  throw ConfigError("unhandled loss kind");
}

namespace {

std::vector<ag::Var> trainable(const mapping::MapperState& state) {
  std::vector<ag::Var> out;
  for (const auto& [name, v] : state.parameters()) out.push_back(v);
  return out;
}

[[noreturn]] void rethrow_with_index(std::size_t i, const std::exception& e) {
  const std::string prefix = "sample " + std::to_string(i);
  if (const auto* s = dynamic_cast<const StageError*>(&e)) {
    throw StageError(prefix + ", " + s->stage(), e.what());
  }
  throw StageError(prefix, e.what());
}

}  // namespace

MapperTrainer::MapperTrainer(mapping::MapperState& state, TrainStepConfig config,
                             FrozenModels frozen)
    : state_(state),
      config_(std::move(config)),
      frozen_(frozen),
      optimizer_(trainable(state), nn::AdamConfig{.learning_rate = config_.learning_rate}) {
  config_.validate();
  frozen_.validate();
  ag::NoGradGuard no_grad;
  class_context_ = frozen_.text->encode(config_.class_prompt);
}

LossReport MapperTrainer::step(std::span<const TrainingSample> batch, Rng& rng) {
  if (batch.empty()) throw EmptyInputError("training batch is empty");
  LossReport report;
  ag::Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ag::Var loss;
    try {
      const PreparedSample p = prepare_sample(batch[i], frozen_, config_, rng);
      report.timesteps.push_back(p.noisy.t);
      report.dropped += p.drop_expression ? 1 : 0;
      loss = sample_loss(p, state_, config_, frozen_, class_context_, &rng);
    } catch (const std::exception& e) {
      rethrow_with_index(i, e);
    }
    report.sample_losses.push_back(loss.item());
    total = i == 0 ? loss : ag::add(total, loss);
  }
  total = ag::scale(total, 1.0 / static_cast<double>(batch.size()));
  report.loss = total.item();
  if (!std::isfinite(report.loss)) throw NumericError("training loss is not finite");

  optimizer_.zero_grad();
  ag::backward(total);
  report.grad_norm = nn::gradient_norm(state_.parameters());
  report.uncond_grad_norm = nn::gradient_norm({{"uncond_expression", state_.uncond.value}});
  optimizer_.step();
  ++state_.steps;
  return report;
}

double MapperTrainer::evaluate(std::span<const TrainingSample> batch, std::uint64_t seed) const {
  if (batch.empty()) throw EmptyInputError("evaluation batch is empty");
  ag::NoGradGuard no_grad;
  Rng rng(seed);
  double sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    try {
      const PreparedSample p = prepare_sample(batch[i], frozen_, config_, rng);
      sum += sample_loss(p, state_, config_, frozen_, class_context_, nullptr).item();
    } catch (const std::exception& e) {
      rethrow_with_index(i, e);
    }
  }
  return sum / static_cast<double>(batch.size());
}

}  // namespace f2d::diffusion
