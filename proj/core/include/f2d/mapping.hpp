#pragma once

// Mapping from the identity/expression condition into the text-embedding space
// as two pseudo-word embeddings, and their injection into tokenized prompts.

#include "f2d/autograd.hpp"
#include "f2d/expression.hpp"
#include "f2d/nn.hpp"
#include "f2d/random.hpp"

#include <json.hpp>

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace f2d::mapping {

// Text encoder interface --------------------------------------------------------

/// Frozen text encoder. Prompts are tokenized into ids (with begin/end
/// markers), looked up in a frozen vocabulary, then position-encoded and
/// contextualized into a fixed max_length x width conditioning sequence.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;

  virtual int width() const = 0;
  virtual int max_length() const = 0;
  /// The id standing for the literal placeholder "S*".
  virtual int placeholder_id() const = 0;
  virtual std::vector<int> tokenize(std::string_view text) const = 0;
  /// Vocabulary rows for the ids, n x width.
  virtual Eigen::MatrixXd embed_tokens(std::span<const int> ids) const = 0;
  /// Differentiable positional encoding plus contextualization of an n x width
  /// embedding sequence (n <= max_length); returns max_length x width.
  virtual ag::Var contextualize(const ag::Var& embeddings) const = 0;
  virtual std::uint64_t digest() const = 0;

  /// tau(p) for a plain prompt.
  ag::Var encode(std::string_view text) const;
};

/// Hashed-vocabulary toy text encoder with a causal-average mixing layer.
class ToyTextEncoder final : public TextEncoder {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBegin = 1;
  static constexpr int kEnd = 2;
  static constexpr int kPlaceholder = 3;

  explicit ToyTextEncoder(int width = 64, int max_length = 16, int vocab_size = 1024,
                          std::uint64_t seed = 5);

  int width() const override { return static_cast<int>(vocabulary_.cols()); }
  int max_length() const override { return static_cast<int>(positions_.rows()); }
  int placeholder_id() const override { return kPlaceholder; }
  std::vector<int> tokenize(std::string_view text) const override;
  Eigen::MatrixXd embed_tokens(std::span<const int> ids) const override;
  ag::Var contextualize(const ag::Var& embeddings) const override;
  std::uint64_t digest() const override;

 private:
  Eigen::MatrixXd vocabulary_;  // vocab x width
  Eigen::MatrixXd positions_;   // max_length x width
  Eigen::MatrixXd causal_mean_; // max_length x max_length
  Eigen::MatrixXd mixing_;      // width x width
};

// Prompt templates ------------------------------------------------------------

inline constexpr std::string_view kPlaceholderText = "S*";

/// A prompt containing exactly one "S*".
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text);

  const std::string& text() const { return text_; }
  /// The prompt with "S*" replaced by `words` (e.g. "a person").
  std::string substituted(std::string_view words) const;

 private:
  std::string text_;
};

// Mapping networks ------------------------------------------------------------

struct MapperConfig {
  int input_width = 0;
  int hidden_width = 0;  // 0 means "same as input_width"
  int output_width = 0;
  double dropout = 0.1;
  double leaky_slope = 0.01;

  void validate() const;
  int hidden() const { return hidden_width > 0 ? hidden_width : input_width; }
};

void to_json(nlohmann::json& j, const MapperConfig& c);
void from_json(const nlohmann::json& j, MapperConfig& c);

/// Two (linear, dropout, LeakyReLU) blocks and a final linear projection.
class MappingNetwork {
 public:
  MappingNetwork() = default;
  MappingNetwork(const MapperConfig& config, Rng& rng);

  /// Dropout is active iff `dropout_rng` is non-null.
  ag::Var operator()(const ag::Var& x, Rng* dropout_rng) const;
  void collect(const std::string& prefix, nn::NamedParameters& out) const;

  nn::Linear& layer(int i) { return i == 0 ? first_ : i == 1 ? second_ : projection_; }

 private:
  nn::Linear first_;
  nn::Linear second_;
  nn::Linear projection_;
  double dropout_ = 0.1;
  double slope_ = 0.01;
};

struct MapperParams {
  MappingNetwork first;
  MappingNetwork second;
};

/// Everything trained in the personalization stage.
struct MapperState {
  MapperConfig config;
  MapperParams mappers;
  expression::UnconditionalExpressionVector uncond;
  long long steps = 0;

  MapperState() = default;
  MapperState(const MapperConfig& config, int expression_width, std::uint64_t seed);

  nn::NamedParameters parameters() const;
};

struct IdentifierEmbedding {
  ag::Var first;   // S1*, 1 x text width
  ag::Var second;  // S2*, 1 x text width
};

/// S* = [f_map^1(cond), f_map^2(cond)]. Evaluation mode when `dropout_rng` is
/// null.
IdentifierEmbedding map_to_identifier(const expression::ConditionVector& cond,
                                      const MapperParams& params, const MapperConfig& config,
                                      Rng* dropout_rng = nullptr);

struct ConditioningSequence {
  ag::Var token_embeddings;  // before positional encoding, n x width
  ag::Var context;           // tau(p), max_length x width
  int placeholder_position = -1;
  int length = 0;
};

/// Replaces the single placeholder token with the two identifier embeddings
/// and runs the text encoder's contextualization.
ConditioningSequence inject_identifier(const PromptTemplate& prompt,
                                       const IdentifierEmbedding& identifier,
                                       const TextEncoder& encoder);

}  // namespace f2d::mapping
