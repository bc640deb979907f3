#include "f2d/inference.hpp"

#include "f2d/errors.hpp"

#include <algorithm>
#include <cmath>

namespace f2d::inference {

std::string to_string(SchedulerKind kind) {
  switch (kind) {
    case SchedulerKind::euler_ancestral: return "euler_ancestral";
  }
  return "unknown";
}

SchedulerKind scheduler_from_string(const std::string& name) {
  if (name == "euler_ancestral") return SchedulerKind::euler_ancestral;
  throw ConfigError("unknown scheduler \"" + name + "\"");
}

void InferenceConfig::validate() const {
  if (num_steps < 1) throw ConfigError("num_steps must be at least 1");
  if (!(guidance_scale >= 0.0)) throw ConfigError("guidance_scale must be non-negative");
  if (!(dsc_alpha >= 0.0 && dsc_alpha <= 1.0)) throw ConfigError("dsc_alpha must lie in [0, 1]");
  if (class_word.empty()) throw ConfigError("class_word must be non-empty");
}

void to_json(nlohmann::json& j, const InferenceConfig& c) {
  j = {{"num_steps", c.num_steps},       {"guidance_scale", c.guidance_scale},
       {"scheduler", to_string(c.scheduler)}, {"dsc_alpha", c.dsc_alpha},
       {"seed", c.seed},                 {"class_word", c.class_word}};
}

void from_json(const nlohmann::json& j, InferenceConfig& c) {
  const InferenceConfig d;
  c.num_steps = j.value("num_steps", d.num_steps);
  c.guidance_scale = j.value("guidance_scale", d.guidance_scale);
  c.scheduler = scheduler_from_string(j.value("scheduler", to_string(d.scheduler)));
  c.dsc_alpha = j.value("dsc_alpha", d.dsc_alpha);
  c.seed = j.value("seed", d.seed);
  c.class_word = j.value("class_word", d.class_word);
}

diffusion::Latent guide(const diffusion::Latent& eps_uncond, const diffusion::Latent& eps_cond,
                        double scale) {
  if (eps_uncond.rows() != eps_cond.rows() || eps_uncond.cols() != eps_cond.cols()) {
    throw ShapeError("conditional and unconditional predictions differ in shape");
  }
  // Same as u + s (c - u), but exact at s = 0 and s = 1.
  return (1.0 - scale) * eps_uncond + scale * eps_cond;
}

diffusion::Latent cfg_noise(const diffusion::Latent& z_t, int t, const ag::Var& cond,
                            const ag::Var& uncond, double scale,
                            const diffusion::Denoiser& denoiser) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols()) {
    throw ShapeError("conditional and unconditional contexts differ in shape");
  }
  ag::NoGradGuard no_grad;
  const ag::Var z = ag::constant(z_t);
  const diffusion::Latent eps_c = denoiser.predict(z, t, cond).value();
  const diffusion::Latent eps_u = denoiser.predict(z, t, uncond).value();
  return guide(eps_u, eps_c, scale);
}

std::vector<int> timestep_grid(int num_steps, int train_steps) {
  if (num_steps < 1) throw ConfigError("num_steps must be at least 1");
  std::vector<int> out(static_cast<std::size_t>(num_steps));
  if (num_steps == 1) {
    out[0] = train_steps;
    return out;
  }
  const double step = static_cast<double>(train_steps - 1) / (num_steps - 1);
  for (int i = 0; i < num_steps; ++i) {
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(train_steps - step * i));
  }
  return out;
}

int dsc_switch_index(int num_steps, double alpha) {
  if (num_steps < 1) throw ConfigError("num_steps must be at least 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("dsc_alpha must lie in [0, 1]");
  // The tolerance absorbs representation error such as (1 - 0.8) * 30 = 6.000...1.
  const double raw = (1.0 - alpha) * num_steps;
  const int k = static_cast<int>(std::ceil(raw - 1e-9));
  return std::clamp(k, 0, num_steps);
}

expression::ConditionVector inference_condition(const Image& face, const Image* reference,
                                                const diffusion::FrozenModels& frozen,
                                                const mapping::MapperState& state) {
  identity::MultiScaleIdentityFeature id;
  try {
    id = frozen.encoder->extract(face);
  } catch (const std::exception& e) {
    throw StageError("encode", e.what());
  }
  if (reference == nullptr) {
    return expression::compose_condition(id, std::nullopt, state.uncond,
                                         expression::ConditionMode::inference_uncond, nullptr);
  }
  expression::ExpressionFeature exp;
  try {
    exp = expression::extract_expression(*reference, *frozen.expression);
  } catch (const std::exception& e) {
    throw MissingReferenceError(std::string("expression reference unusable: ") + e.what());
  }
  return expression::compose_condition(id, exp, state.uncond,
                                       expression::ConditionMode::inference_cond, nullptr);
}

ag::Var identifier_context(const expression::ConditionVector& cond,
                           const mapping::PromptTemplate& prompt,
                           const diffusion::FrozenModels& frozen,
                           const mapping::MapperState& state) {
  ag::NoGradGuard no_grad;
  try {
    const mapping::IdentifierEmbedding ident =
        mapping::map_to_identifier(cond, state.mappers, state.config, nullptr);
    return mapping::inject_identifier(prompt, ident, *frozen.text).context;
  } catch (const std::exception& e) {
    throw StageError("map", e.what());
  }
}

Generation sample(const ag::Var& identity_context, const ag::Var& class_context, int switch_index,
                  const InferenceConfig& config, const diffusion::FrozenModels& frozen) {
  config.validate();
  frozen.validate();
  ag::NoGradGuard no_grad;
  ag::Var uncond;
  try {
    uncond = frozen.text->encode("");
  } catch (const std::exception& e) {
    throw StageError("encode", e.what());
  }

  const diffusion::NoiseSchedule& schedule = *frozen.schedule;
  const diffusion::LatentShape shape = frozen.denoiser->latent_shape();
  Rng rng(derive_seed(config.seed, "sampling"));

  Generation out;
  out.trace.timesteps = timestep_grid(config.num_steps, schedule.num_train_timesteps());
  out.trace.switch_index = switch_index;
  const auto& ts = out.trace.timesteps;

  // Variance-exploding view: x = z / sqrt(alpha_bar), sigma = sqrt((1 - ab) / ab).
  const double sigma_max = schedule.sigma(ts.front());
  diffusion::Latent x = diffusion::sample_noise(rng, shape) * std::sqrt(sigma_max * sigma_max + 1.0);

  try {
    for (int i = 0; i < config.num_steps; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      const double sigma = schedule.sigma(ts[idx]);
      const double sigma_next = i + 1 < config.num_steps ? schedule.sigma(ts[idx + 1]) : 0.0;
      const bool use_identifier = i >= switch_index;
      out.trace.used_identifier.push_back(use_identifier);

      const diffusion::Latent z = x / std::sqrt(sigma * sigma + 1.0);
      const diffusion::Latent eps =
          cfg_noise(z, ts[idx], use_identifier ? identity_context : class_context, uncond,
                    config.guidance_scale, *frozen.denoiser);
      out.trace.denoiser_calls += 2;

      // Euler-ancestral update with eta = 1; the derivative (x - x0_hat) / sigma is eps.
      const double s2 = sigma * sigma;
      const double n2 = sigma_next * sigma_next;
      const double sigma_up = std::min(sigma_next, std::sqrt(std::max(0.0, n2 * (s2 - n2) / s2)));
      const double sigma_down = std::sqrt(std::max(0.0, n2 - sigma_up * sigma_up));
      x += eps * (sigma_down - sigma);
      if (sigma_next > 0.0) x += diffusion::sample_noise(rng, shape) * sigma_up;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("denoise", e.what());
  }
  if (!x.allFinite()) throw StageError("denoise", "latent diverged to non-finite values");

  out.latent = x;
  try {
    out.image = frozen.codec->decode(x);
  } catch (const std::exception& e) {
    throw StageError("decode", e.what());
  }
  return out;
}

Generation generate(const Image& face, const mapping::PromptTemplate& prompt,
                    const InferenceConfig& config, const diffusion::FrozenModels& frozen,
                    const mapping::MapperState& state) {
  frozen.validate();
  const ag::Var ctx =
      identifier_context(inference_condition(face, nullptr, frozen, state), prompt, frozen, state);
  return sample(ctx, ctx, 0, config, frozen);
}

Generation dsc_generate(const Image& face, const mapping::PromptTemplate& prompt,
                        const InferenceConfig& config, const diffusion::FrozenModels& frozen,
                        const mapping::MapperState& state) {
  config.validate();
  frozen.validate();
  const ag::Var ctx =
      identifier_context(inference_condition(face, nullptr, frozen, state), prompt, frozen, state);
  ag::Var class_ctx;
  try {
    ag::NoGradGuard no_grad;
    class_ctx = frozen.text->encode(prompt.substituted(config.class_word));
  } catch (const std::exception& e) {
    throw StageError("encode", e.what());
  }
  return sample(ctx, class_ctx, dsc_switch_index(config.num_steps, config.dsc_alpha), config,
                frozen);
}

Generation expression_conditional_generate(const Image& face, const Image& reference,
                                           const mapping::PromptTemplate& prompt,
                                           const InferenceConfig& config,
                                           const diffusion::FrozenModels& frozen,
                                           const mapping::MapperState& state) {
  frozen.validate();
  const ag::Var ctx =
      identifier_context(inference_condition(face, &reference, frozen, state), prompt, frozen, state);
  return sample(ctx, ctx, 0, config, frozen);
}

}  // namespace f2d::inference
