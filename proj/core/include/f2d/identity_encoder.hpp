#pragma once

// Multi-scale identity (MSID) encoder: a small ViT whose classifier-token
// outputs are tapped at several depths. Training applies the additive angular
// margin loss to the concatenation of every tap so that shallow and deep
// features are all identity-discriminative.

#include "f2d/autograd.hpp"
#include "f2d/image.hpp"
#include "f2d/nn.hpp"
#include "f2d/random.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace f2d::identity {

struct EncoderConfig {
  int num_layers = 12;
  std::vector<int> depth_set{3, 6, 9, 12};
  int embed_dim = 64;
  int num_identities = 2;
  double margin = 0.5;
  double scale = 64.0;

  // Backbone geometry. Small defaults so tests run on 32x32 synthetic faces.
  int image_size = 32;
  int channels = 1;
  int patch_size = 8;
  int num_heads = 4;
  int mlp_ratio = 2;

  // Full-scale pretraining schedule; recorded, not exercised at desk scale.
  int batch_size = 1024;
  double learning_rate = 1e-3;
  int epochs = 30;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
  int feature_width() const { return static_cast<int>(depth_set.size()) * embed_dim; }
  int tokens() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Per-depth identity vectors, each L2-normalized, plus their concatenation.
struct MultiScaleIdentityFeature {
  std::vector<Eigen::RowVectorXd> per_level;
  Eigen::RowVectorXd concatenated;

  /// Normalizes each level and concatenates them in order.
  static MultiScaleIdentityFeature from_levels(std::vector<Eigen::RowVectorXd> levels);
  Eigen::Index width() const { return concatenated.size(); }
};

class IdentityEncoder {
 public:
  IdentityEncoder(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  /// Classifier-token outputs for a batch after blocks 1..up_to_depth; entry
  /// i is a (batch x embed_dim) Var for depth i + 1.
  std::vector<ag::Var> forward(std::span<const Image> batch, int up_to_depth) const;

  /// (batch x feature_width) per-level-normalized concatenation over the
  /// configured depth set.
  ag::Var multiscale(std::span<const Image> batch) const;

  MultiScaleIdentityFeature extract(const Image& image) const;
  /// Normalized classifier-token vector at one depth (1-based).
  Eigen::RowVectorXd tap(const Image& image, int depth) const;

  nn::NamedParameters parameters() const;
  std::uint64_t digest() const { return nn::digest(parameters()); }

  long long train_steps() const { return train_steps_; }
  void set_train_steps(long long n) { train_steps_ = n; }

 private:
  struct Block {
    nn::LayerNorm ln1;
    nn::Linear qkv;
    nn::Linear proj;
    nn::LayerNorm ln2;
    nn::Linear fc1;
    nn::Linear fc2;
  };

  void check_image(const Image& image) const;

  EncoderConfig config_;
  nn::Linear patch_embed_;
  ag::Var cls_token_;
  ag::Var position_;
  std::vector<Block> blocks_;
  long long train_steps_ = 0;
};

/// Margin classifier weights, one column per identity.
struct MarginHead {
  ag::Var weight;  // feature_width x num_identities

  MarginHead() = default;
  MarginHead(int feature_width, int num_identities, Rng& rng);
  nn::NamedParameters parameters() const { return {{"head.weight", weight}}; }
};

/// Differentiable margin loss over a batch of (unnormalized) features. The
/// feature rows and the weight columns are both L2-normalized first.
ag::Var margin_loss(const ag::Var& features, std::span<const int> labels, const MarginHead& head,
                    double margin, double scale);

/// -log of the margin-softmax probability of `label` for one feature.
double multiscale_arcface_loss(const MultiScaleIdentityFeature& feature, int label,
                               const MarginHead& head, const EncoderConfig& config);

struct LabeledImage {
  Image image;
  int label = 0;
};

struct PretrainConfig {
  int steps = 2000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  /// The margin ramps linearly from 0 to its configured value over these
  /// steps; margin-from-scratch training can collapse on small datasets.
  int margin_warmup_steps = 0;
  bool horizontal_flip = true;
  std::uint64_t seed = 0;
};

/// Trains encoder and head with the margin loss over the encoder's depth set.
/// Returns the per-step training loss. `on_step` (optional) sees (step, loss).
std::vector<double> pretrain(IdentityEncoder& encoder, MarginHead& head,
                             std::span<const LabeledImage> data, const PretrainConfig& config,
                             const std::function<void(int, double)>& on_step = {});

// Similarity analysis ---------------------------------------------------------

using Gallery = std::map<std::string, std::vector<Eigen::RowVectorXd>>;

struct SimilarityDistribution {
  std::vector<double> same_scores;
  std::vector<double> diff_scores;
  int layer = 0;
};

/// Features at `layer` for every image, grouped by label.
Gallery build_gallery(const IdentityEncoder& encoder, std::span<const LabeledImage> data,
                      int layer);

/// One {anchor, positive, negative} triplet per identity, sampled uniformly.
SimilarityDistribution similarity_distribution(const Gallery& gallery, int layer,
                                               std::uint64_t seed);

/// Probability that a random same-score exceeds a random diff-score, with
/// ties credited one half.
double roc_auc(std::span<const double> positives, std::span<const double> negatives);
double roc_auc(const SimilarityDistribution& dist);

}  // namespace f2d::identity
