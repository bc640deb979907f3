#include "f2d/evaluation.hpp"
#include "f2d/inference.hpp"

#include "fixtures.hpp"

#include <benchmark/benchmark.h>

using namespace f2d;

static void BM_EncoderExtract(benchmark::State& state) {
  identity::EncoderConfig c;
  c.num_layers = static_cast<int>(state.range(0));
  c.depth_set = {c.num_layers};
  const identity::IdentityEncoder enc(c, 1);
  const Image face = fixture::face(0);
  for (auto _ : state) benchmark::DoNotOptimize(enc.extract(face));
}
BENCHMARK(BM_EncoderExtract)->Arg(4)->Arg(8);

static void BM_MapperTrainStep(benchmark::State& state) {
  const fixture::ToyStack stack;
  const auto faces = fixture::training_faces(8);
  mapping::MapperState mapper = stack.mapper();
  diffusion::TrainStepConfig cfg;
  cfg.batch_size = 8;
  diffusion::MapperTrainer trainer(mapper, cfg, stack.models());
  Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(faces, rng));
}
BENCHMARK(BM_MapperTrainStep)->Unit(benchmark::kMillisecond);

static void BM_DscSampling(benchmark::State& state) {
  const fixture::ToyStack stack;
  const auto mapper = stack.mapper();
  const mapping::PromptTemplate prompt("A photo of S* as a chef");
  const Image face = fixture::face(1);
  inference::InferenceConfig cfg;
  cfg.num_steps = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(inference::dsc_generate(face, prompt, cfg, stack.models(), mapper));
  }
}
BENCHMARK(BM_DscSampling)->Arg(10)->Arg(30)->Unit(benchmark::kMillisecond);

static void BM_Frechet(benchmark::State& state) {
  const auto d = state.range(0);
  Rng rng(7);
  Eigen::MatrixXd a(256, d), b(256, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.normal() + 0.1;
  }
  for (auto _ : state) benchmark::DoNotOptimize(evaluation::frechet_distance(a, b));
}
BENCHMARK(BM_Frechet)->Arg(16)->Arg(64);
BENCHMARK_MAIN();
