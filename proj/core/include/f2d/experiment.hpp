#pragma once

// Experiment plumbing: manifests, prompt sets, the toy frozen-model registry,
// the resumable stage functions behind the CLI, and the full pipeline.

#include "f2d/diffusion.hpp"
#include "f2d/evaluation.hpp"
#include "f2d/identity_encoder.hpp"
#include "f2d/inference.hpp"
#include "f2d/mapping.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace f2d::identity {
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);
}  // namespace f2d::identity

namespace f2d::experiment {

namespace fs = std::filesystem;

// Inputs ----------------------------------------------------------------------

struct ManifestRecord {
  fs::path image_path;
  fs::path mask_path;
  std::string identity;
  Image image;
  Eigen::MatrixXd mask;
};

/// One JSON object per line: {"image": ..., "identity": ..., "mask": ...}.
/// Relative paths resolve against the manifest's directory; blank lines are
/// ignored.
std::vector<ManifestRecord> load_manifest(const fs::path& path);

/// Renders identities x variations synthetic faces with masks under `dir`
/// and writes dir/manifest.jsonl. Returns the manifest path.
fs::path write_synthetic_dataset(const fs::path& dir, int identities, int variations,
                                 std::uint64_t identity_seed, std::uint64_t variation_seed,
                                 double strength = 0.5);

struct PromptSet {
  std::vector<mapping::PromptTemplate> templates;

  /// One template per non-empty line; every line needs exactly one "S*".
  static PromptSet parse(const std::string& text);
  static PromptSet load(const fs::path& path);
};

// Configuration ---------------------------------------------------------------

struct FixtureConfig {
  std::uint64_t seed = 2024;
  int text_width = 64;
  int text_max_length = 16;
  int expression_width = expression::kDefaultExpressionWidth;
  double denoiser_coupling = 0.3;
  std::vector<std::string> recognizers = {"adaface", "sphereface", "facenet"};
  double siglip_scale = 10.0;
  double siglip_bias = -2.0;
};

struct ExperimentConfig {
  std::string run_name = "f2d";
  std::uint64_t seed = 0;
  fs::path manifest;
  /// Faces to personalize at generation time; defaults to `manifest`.
  fs::path eval_manifest;
  fs::path prompts;
  fs::path output_dir = "runs";
  /// Optional pre-existing checkpoints; trained from scratch when empty.
  fs::path encoder_checkpoint;
  fs::path mapper_checkpoint;

  identity::EncoderConfig encoder;
  identity::PretrainConfig pretrain;
  double mapper_dropout = 0.1;
  diffusion::TrainStepConfig train;
  inference::InferenceConfig inference;
  /// "standard" or "dsc".
  std::string generation_mode = "standard";
  FixtureConfig fixtures;

  int num_samples = 4;
  int max_faces = 0;    // 0 = every identity in the evaluation manifest
  int max_prompts = 0;  // 0 = every prompt
  std::string class_phrase = "a person";
  std::string reference_template = "A photo of S*";
  std::string reference_prompt = "A photo of a person";
  std::vector<int> upper_bound_ns;  // empty = powers of two up to num_samples
  int workers = 1;

  /// Checks values and that every referenced input path exists.
  void validate() const;
  fs::path run_dir() const { return output_dir / run_name; }
  std::vector<int> effective_upper_bound_ns() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

inline constexpr const char* kOutputDirEnv = "F2D_OUTPUT_DIR";

/// Reads a JSON config; relative paths resolve against the file's directory.
ExperimentConfig load_config(const fs::path& path);
/// Applies the output-directory environment override, if set.
void apply_environment(ExperimentConfig& config);

// Frozen models ---------------------------------------------------------------

/// Owns the toy frozen networks (text encoder, expression extractor,
/// denoiser, codec, schedule, metric models) for one fixture seed.
class FrozenSuite {
 public:
  FrozenSuite(const FixtureConfig& config, const identity::IdentityEncoder& encoder);

  diffusion::FrozenModels models() const;
  evaluation::EvaluationModels metrics() const;
  const mapping::TextEncoder& text() const { return *text_; }
  int expression_width() const { return expression_->width(); }

 private:
  const identity::IdentityEncoder* encoder_;
  std::unique_ptr<mapping::ToyTextEncoder> text_;
  std::unique_ptr<expression::ToyExpressionExtractor> expression_;
  std::unique_ptr<diffusion::NoiseSchedule> schedule_;
  std::unique_ptr<diffusion::HaarBlockCodec> codec_;
  std::unique_ptr<diffusion::StructuredToyDenoiser> denoiser_;
  std::vector<std::unique_ptr<evaluation::ToyFaceRecognizer>> recognizers_;
  std::unique_ptr<evaluation::ToyImageEmbedder> clip_image_;
  std::unique_ptr<evaluation::ToyTextEmbedder> clip_text_;
  std::unique_ptr<evaluation::ToyImageEmbedder> siglip_image_;
  std::unique_ptr<evaluation::ToyTextEmbedder> siglip_text_;
  double siglip_scale_;
  double siglip_bias_;
};

// Run log ---------------------------------------------------------------------

/// Appends timestamp-free lines to <run_dir>/run.log and mirrors them to an
/// optional stream.
class RunLog {
 public:
  explicit RunLog(const fs::path& path, std::ostream* echo = nullptr);
  void info(const std::string& stage, const std::string& msg);
  void warn(const std::string& stage, const std::string& msg);
  void error(const std::string& stage, const std::string& msg);

 private:
  void write(const char* level, const std::string& stage, const std::string& msg);
  std::ofstream out_;
  std::ostream* echo_;
};

// Stages ----------------------------------------------------------------------

struct EncoderArtifact {
  std::unique_ptr<identity::IdentityEncoder> encoder;
  fs::path checkpoint;
  std::string sha256;
  bool reused = false;
};

struct MapperArtifact {
  mapping::MapperState state;
  fs::path checkpoint;
  std::string sha256;
  bool reused = false;
};

struct GenerationRecord {
  std::size_t face_index = 0;
  std::size_t prompt_index = 0;
  std::size_t sample_index = 0;
  std::string image_id;
  fs::path image;
  std::string template_text;
  std::uint64_t seed = 0;
  bool reused = false;
};

struct GenerationOutputs {
  std::vector<GenerationRecord> samples;     // (face, prompt, sample) order
  std::vector<GenerationRecord> references;  // one per face
};

/// Maps identity names to dense labels in first-appearance order.
std::vector<identity::LabeledImage> labeled_images(const std::vector<ManifestRecord>& records,
                                                   int* num_identities = nullptr);
/// First record of each identity, in manifest order, capped at `max_faces`.
std::vector<ManifestRecord> evaluation_faces(const std::vector<ManifestRecord>& records,
                                             int max_faces);

EncoderArtifact pretrain_encoder(const ExperimentConfig& config,
                                 const std::vector<ManifestRecord>& records, RunLog& log);
/// Loads an encoder checkpoint, restoring its configuration from metadata.
EncoderArtifact load_encoder(const fs::path& checkpoint);

MapperArtifact train_mapper(const ExperimentConfig& config,
                            const std::vector<ManifestRecord>& records,
                            const EncoderArtifact& encoder, const FrozenSuite& suite,
                            RunLog& log);
MapperArtifact load_mapper(const fs::path& checkpoint);

GenerationOutputs generate_images(const ExperimentConfig& config,
                                  const std::vector<ManifestRecord>& faces,
                                  const PromptSet& prompts, const MapperArtifact& mapper,
                                  const FrozenSuite& suite, RunLog& log);

/// Scores every generated sample, reading images back from disk.
std::vector<evaluation::SampleReport> evaluate_images(
    const ExperimentConfig& config, const std::vector<ManifestRecord>& faces,
    const PromptSet& prompts, const GenerationOutputs& generated, const FrozenSuite& suite);

/// Groups reports into (face, prompt) sets in generation order.
std::map<std::string, std::vector<evaluation::SampleReport>> group_reports(
    const std::vector<GenerationRecord>& samples,
    const std::vector<evaluation::SampleReport>& reports);

/// Writes reports.csv (with a reports.meta.json provenance sidecar) and
/// summary.json; returns the best-of-N curve.
evaluation::UpperBoundCurve write_evaluation(const ExperimentConfig& config,
                                             const GenerationOutputs& generated,
                                             const std::vector<evaluation::SampleReport>& reports,
                                             const nlohmann::json& provenance);

/// Similarity distributions at every tap of the encoder's depth set. Taps
/// that cannot be sampled are skipped with a warning.
std::vector<identity::SimilarityDistribution> analyze_encoder(
    const identity::IdentityEncoder& encoder, const std::vector<ManifestRecord>& records,
    std::uint64_t seed, RunLog& log);

/// Full pipeline; returns the run directory.
fs::path run_experiment(const ExperimentConfig& config, std::ostream* echo = nullptr);

/// JSON file write with a trailing newline.
void write_json_file(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const fs::path& path);

}  // namespace f2d::experiment
