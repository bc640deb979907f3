#pragma once

// Identity x Text evaluation: identity similarity across three recognizer
// slots, CLIP / directional CLIP / SigLIP text fidelity, per-image harmonic
// and geometric means, the best-of-N upper bound, and the Frechet distance.

#include "f2d/image.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace f2d::evaluation {

// Model interfaces ------------------------------------------------------------

/// Face recognition with built-in detection; nullopt means no face found.
class FaceRecognizer {
 public:
  virtual ~FaceRecognizer() = default;
  virtual std::string name() const = 0;
  virtual std::optional<Eigen::RowVectorXd> embed(const Image& image) const = 0;
};

class ImageEmbedder {
 public:
  virtual ~ImageEmbedder() = default;
  virtual Eigen::RowVectorXd embed(const Image& image) const = 0;
};

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual Eigen::RowVectorXd embed(const std::string& text) const = 0;
};

/// Random projection of the centered image; reports no face when the image
/// is nearly flat.
class ToyFaceRecognizer final : public FaceRecognizer {
 public:
  ToyFaceRecognizer(std::string name, std::uint64_t seed, int image_size = 32, int width = 64,
                    double detection_threshold = 0.02);
  std::string name() const override { return name_; }
  std::optional<Eigen::RowVectorXd> embed(const Image& image) const override;

 private:
  std::string name_;
  int image_size_;
  double threshold_;
  Eigen::MatrixXd projection_;
};

/// Random projection of a 4x-downsampled image, normalized, with one constant
/// coordinate appended (shared with ToyTextEmbedder). Output width is width + 1.
class ToyImageEmbedder final : public ImageEmbedder {
 public:
  explicit ToyImageEmbedder(std::uint64_t seed, int image_size = 32, int width = 32);
  Eigen::RowVectorXd embed(const Image& image) const override;

 private:
  int image_size_;
  Eigen::MatrixXd projection_;
};

/// Sum of hashed per-word random vectors, normalized, with the shared constant
/// coordinate appended.
class ToyTextEmbedder final : public TextEmbedder {
 public:
  explicit ToyTextEmbedder(std::uint64_t seed, int width = 32, int buckets = 512);
  Eigen::RowVectorXd embed(const std::string& text) const override;

 private:
  Eigen::MatrixXd table_;
};

struct ClipModels {
  const ImageEmbedder* image = nullptr;
  const TextEmbedder* text = nullptr;
};

struct SiglipModels {
  const ImageEmbedder* image = nullptr;
  const TextEmbedder* text = nullptr;
  double scale = 1.0;
  double bias = 0.0;
};

// Metrics ---------------------------------------------------------------------

/// max(cos(f(input), f(generated)), 0); 0 when no face is found in the
/// generated image. A failure on the input image is an InputQualityError.
double identity_similarity(const Image& input, const Image& generated,
                           const FaceRecognizer& recognizer);

double clip_score_from_embeddings(const Eigen::RowVectorXd& image, const Eigen::RowVectorXd& text);
double clip_score(const Image& image, const std::string& prompt, const ClipModels& models);

/// Cosine of the image and text difference vectors, clipped at 0; 0 when
/// either difference vanishes.
double dclip_score_from_embeddings(const Eigen::RowVectorXd& image,
                                   const Eigen::RowVectorXd& text,
                                   const Eigen::RowVectorXd& ref_image,
                                   const Eigen::RowVectorXd& ref_text);
double dclip_score(const Image& image, const std::string& prompt, const Image& ref_image,
                   const std::string& ref_prompt, const ClipModels& models);

/// sigmoid(scale * cos + bias).
double siglip_score_from_embeddings(const Eigen::RowVectorXd& image,
                                    const Eigen::RowVectorXd& text, double scale, double bias);
double siglip_score(const Image& image, const std::string& prompt, const SiglipModels& models);

inline constexpr std::size_t kNumMetrics = 6;
using MetricScores = std::array<double, kNumMetrics>;
/// Column order of every report: three identity slots, then text metrics.
inline constexpr std::array<const char*, kNumMetrics> kMetricNames = {
    "adaface", "sphereface", "facenet", "clip", "dclip", "siglip"};

struct IdTextMeans {
  double hmean = 0.0;
  double gmean = 0.0;
};

/// Harmonic and geometric means of six scores in [0, 1]; both 0 if any is 0.
IdTextMeans id_text_aggregate(const MetricScores& scores);

struct SampleReport {
  std::string image_id;
  std::string prompt_id;  // empty when not tied to a prompt
  int sample_idx = -1;    // position within its (face, prompt) set; -1 if none
  MetricScores scores{};
  double hmean = 0.0;
  double gmean = 0.0;

  /// Builds a report, computing the means and checking the invariants.
  static SampleReport from_scores(std::string image_id, const MetricScores& scores);
  void validate() const;
  bool operator==(const SampleReport&) const = default;
};

void to_json(nlohmann::json& j, const SampleReport& r);
void from_json(const nlohmann::json& j, SampleReport& r);

/// Dataset-level means: each metric and hMean/gMean are averaged over images.
struct DatasetSummary {
  std::size_t count = 0;
  MetricScores metric_means{};
  double hmean = 0.0;
  double gmean = 0.0;

  bool operator==(const DatasetSummary&) const = default;
};

DatasetSummary summarize(std::span<const SampleReport> reports);
/// hMean of the dataset-level metric means. Not what is reported; exposed for
/// comparison only.
double hmean_of_means(std::span<const SampleReport> reports);

void to_json(nlohmann::json& j, const DatasetSummary& s);
void from_json(const nlohmann::json& j, DatasetSummary& s);

/// CSV with header image_id,prompt_id,sample_idx,<metrics>,hmean,gmean;
/// values printed with 17 significant digits so doubles round-trip. An empty
/// sample_idx field stands for -1.
void write_reports_csv(const std::filesystem::path& path, std::span<const SampleReport> reports);
std::vector<SampleReport> read_reports_csv(const std::filesystem::path& path);
std::string reports_to_csv(std::span<const SampleReport> reports);
std::vector<SampleReport> reports_from_csv(const std::string& text);

// Upper bound -----------------------------------------------------------------

struct UpperBoundCurve {
  std::vector<std::pair<int, double>> points;  // (N, mean best hMean)
  bool operator==(const UpperBoundCurve&) const = default;
};

inline const std::vector<int> kDefaultUpperBoundNs = {1, 2, 4, 8, 16};

/// Point N is the mean over sets of the best hMean among each set's first N
/// reports.
UpperBoundCurve upper_bound_curve(const std::map<std::string, std::vector<SampleReport>>& sets,
                                  const std::vector<int>& ns = kDefaultUpperBoundNs);

void to_json(nlohmann::json& j, const UpperBoundCurve& c);

// Distribution distance -------------------------------------------------------

/// Frechet distance between Gaussian fits of two feature sets (one row per
/// sample).
double frechet_distance(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b);

// Per-sample evaluation -------------------------------------------------------

struct EvaluationModels {
  std::array<const FaceRecognizer*, 3> recognizers{};
  ClipModels clip;
  SiglipModels siglip;

  void validate() const;
};

struct SampleInputs {
  std::string image_id;
  const Image* input_face = nullptr;
  const Image* generated = nullptr;
  std::string prompt;             // with the identifier replaced by the class phrase
  const Image* reference = nullptr;  // generated under the plain identity prompt
  std::string reference_prompt = "A photo of a person";
};

SampleReport evaluate_sample(const SampleInputs& inputs, const EvaluationModels& models);

}  // namespace f2d::evaluation
