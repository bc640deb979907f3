#pragma once

// Identity-conditioned sampling with classifier-free guidance, the delayed
// subject conditioning baseline, and expression-conditional generation.

#include "f2d/diffusion.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace f2d::inference {

enum class SchedulerKind { euler_ancestral };

std::string to_string(SchedulerKind kind);
SchedulerKind scheduler_from_string(const std::string& name);

struct InferenceConfig {
  int num_steps = 30;
  double guidance_scale = 7.0;
  SchedulerKind scheduler = SchedulerKind::euler_ancestral;
  double dsc_alpha = 0.8;
  std::uint64_t seed = 0;
  /// Replaces S* during the class-conditioned steps of DSC.
  std::string class_word = "person";

  void validate() const;
};

void to_json(nlohmann::json& j, const InferenceConfig& c);
void from_json(const nlohmann::json& j, InferenceConfig& c);

/// eps_u + scale * (eps_c - eps_u).
diffusion::Latent guide(const diffusion::Latent& eps_uncond, const diffusion::Latent& eps_cond,
                        double scale);

/// Guided noise estimate from one conditional and one unconditional call.
diffusion::Latent cfg_noise(const diffusion::Latent& z_t, int t, const ag::Var& cond,
                            const ag::Var& uncond, double scale,
                            const diffusion::Denoiser& denoiser);

/// round(linspace(T, 1, num_steps)).
std::vector<int> timestep_grid(int num_steps, int train_steps);

/// Number of leading class-conditioned steps: ceil((1 - alpha) * num_steps).
int dsc_switch_index(int num_steps, double alpha);

struct GenerationTrace {
  std::vector<int> timesteps;
  /// Per step, whether the identifier (true) or the class word (false) conditioned it.
  std::vector<bool> used_identifier;
  int switch_index = 0;
  int denoiser_calls = 0;
};

struct Generation {
  Image image;
  diffusion::Latent latent;
  GenerationTrace trace;
};

/// Identity condition for inference: ṽ_exp when `reference` is null, else the
/// reference image's expression.
expression::ConditionVector inference_condition(const Image& face, const Image* reference,
                                                const diffusion::FrozenModels& frozen,
                                                const mapping::MapperState& state);

/// tau(template with S* injected) for a condition vector.
ag::Var identifier_context(const expression::ConditionVector& cond,
                           const mapping::PromptTemplate& prompt,
                           const diffusion::FrozenModels& frozen,
                           const mapping::MapperState& state);

/// Ancestral sampling; step i uses `class_context` when i < switch_index and
/// `identity_context` otherwise.
Generation sample(const ag::Var& identity_context, const ag::Var& class_context, int switch_index,
                  const InferenceConfig& config, const diffusion::FrozenModels& frozen);

Generation generate(const Image& face, const mapping::PromptTemplate& prompt,
                    const InferenceConfig& config, const diffusion::FrozenModels& frozen,
                    const mapping::MapperState& state);

Generation dsc_generate(const Image& face, const mapping::PromptTemplate& prompt,
                        const InferenceConfig& config, const diffusion::FrozenModels& frozen,
                        const mapping::MapperState& state);

Generation expression_conditional_generate(const Image& face, const Image& reference,
                                           const mapping::PromptTemplate& prompt,
                                           const InferenceConfig& config,
                                           const diffusion::FrozenModels& frozen,
                                           const mapping::MapperState& state);

}  // namespace f2d::inference
