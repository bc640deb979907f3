#pragma once

// Small frozen-model bundles and temp directories shared by the tests.

#include "f2d/diffusion.hpp"
#include "f2d/inference.hpp"
#include "f2d/synthetic_faces.hpp"

#include <unistd.h>

#include <filesystem>
#include <memory>
#include <string>

namespace fixture {

// Removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("f2d_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline f2d::identity::EncoderConfig small_encoder_config() {
  f2d::identity::EncoderConfig c;
  c.num_layers = 2;
  c.depth_set = {1, 2};
  c.embed_dim = 16;
  c.num_heads = 2;
  c.num_identities = 4;
  return c;
}

// Frozen stack with the structured toy denoiser (the pipeline default).
struct ToyStack {
  f2d::identity::IdentityEncoder encoder{small_encoder_config(), 1};
  f2d::expression::ToyExpressionExtractor expression{32, 16, 3};
  f2d::mapping::ToyTextEncoder text{32, 16, 256, 5};
  f2d::diffusion::NoiseSchedule schedule = f2d::diffusion::NoiseSchedule::scaled_linear();
  f2d::diffusion::HaarBlockCodec codec{32};
  f2d::diffusion::StructuredToyDenoiser denoiser{codec.latent_shape(), 16, 32, schedule, 9, 0.3};

  f2d::diffusion::FrozenModels models() const {
    return {&encoder, &expression, &text, &denoiser, &codec, &schedule};
  }

  f2d::mapping::MapperConfig mapper_config() const {
    f2d::mapping::MapperConfig mc;
    mc.input_width = encoder.config().feature_width() + expression.width();
    mc.output_width = text.width();
    return mc;
  }

  f2d::mapping::MapperState mapper(std::uint64_t seed = 4) const {
    return f2d::mapping::MapperState(mapper_config(), expression.width(), seed);
  }
};

inline std::vector<f2d::diffusion::TrainingSample> training_faces(int n, std::uint64_t seed = 7) {
  std::vector<f2d::diffusion::TrainingSample> out;
  for (const auto& f : f2d::synth::make_dataset(n, 1, seed, 11, 0.5)) {
    out.push_back({f.face.image, f.face.mask});
  }
  return out;
}

inline f2d::Image face(int identity = 0, int variation = 0) {
  const auto faces = f2d::synth::make_dataset(identity + 1, variation + 1, 7, 11, 0.5);
  return faces[static_cast<std::size_t>(identity * (variation + 1) + variation)].face.image;
}

}  // namespace fixture
