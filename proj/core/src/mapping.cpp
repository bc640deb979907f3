#include "f2d/mapping.hpp"

#include "f2d/errors.hpp"

#include <cctype>
#include <cmath>

namespace f2d::mapping {

ag::Var TextEncoder::encode(std::string_view text) const {
  const std::vector<int> ids = tokenize(text);
  if (static_cast<int>(ids.size()) > max_length()) {
    throw LengthError("prompt needs " + std::to_string(ids.size()) + " tokens, max is " +
                      std::to_string(max_length()));
  }
  return contextualize(ag::constant(embed_tokens(ids)));
}

ToyTextEncoder::ToyTextEncoder(int width, int max_length, int vocab_size, std::uint64_t seed) {
  if (width <= 0 || max_length < 3 || vocab_size <= kPlaceholder + 1) {
    throw ConfigError("invalid toy text encoder geometry");
  }
  Rng rng(derive_seed(seed, "toy_text_encoder"));
  vocabulary_ = nn::normal_init(vocab_size, width, 1.0, rng);
  positions_ = nn::normal_init(max_length, width, 0.5, rng);
  mixing_ = nn::normal_init(width, width, 1.0 / std::sqrt(static_cast<double>(width)), rng);
  causal_mean_ = Eigen::MatrixXd::Zero(max_length, max_length);
  for (int i = 0; i < max_length; ++i) {
    causal_mean_.row(i).head(i + 1).setConstant(1.0 / (i + 1));
  }
}

std::vector<int> ToyTextEncoder::tokenize(std::string_view text) const {
  const auto vocab = static_cast<std::uint64_t>(vocabulary_.rows());
  std::vector<int> ids{kBegin};
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : word) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    ids.push_back(kPlaceholder + 1 + static_cast<int>(h % (vocab - kPlaceholder - 1)));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text.compare(i, kPlaceholderText.size(), kPlaceholderText) == 0) {
      flush();
      ids.push_back(kPlaceholder);
      i += kPlaceholderText.size() - 1;
      continue;
    }
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c) || c >= 0x80) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  ids.push_back(kEnd);
  return ids;
}

Eigen::MatrixXd ToyTextEncoder::embed_tokens(std::span<const int> ids) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), vocabulary_.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocabulary_.rows()) throw IndexError("token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = vocabulary_.row(ids[i]);
  }
  return out;
}

ag::Var ToyTextEncoder::contextualize(const ag::Var& embeddings) const {
  const Eigen::Index n = embeddings.rows();
  if (embeddings.cols() != vocabulary_.cols()) throw ShapeError("embedding width mismatch");
  if (n > positions_.rows()) {
    throw LengthError("sequence of " + std::to_string(n) + " tokens exceeds max length " +
                      std::to_string(positions_.rows()));
  }
  ag::Var padded = embeddings;
  if (n < positions_.rows()) {
    const Eigen::MatrixXd pad = vocabulary_.row(kPad).replicate(positions_.rows() - n, 1);
    const ag::Var parts[] = {embeddings, ag::constant(pad)};
    padded = ag::concat_rows(parts);
  }
  const ag::Var h = ag::add(padded, ag::constant(positions_));
  const ag::Var mixed =
      ag::tanh(ag::matmul(ag::matmul(ag::constant(causal_mean_), h), ag::constant(mixing_)));
  return ag::add(h, mixed);
}

std::uint64_t ToyTextEncoder::digest() const {
  return nn::digest({{"vocabulary", ag::constant(vocabulary_)},
                     {"positions", ag::constant(positions_)},
                     {"mixing", ag::constant(mixing_)}});
}

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  std::size_t count = 0;
  for (std::size_t pos = text_.find(kPlaceholderText); pos != std::string::npos;
       pos = text_.find(kPlaceholderText, pos + kPlaceholderText.size())) {
    ++count;
  }
  if (count != 1) {
    throw TemplateError("prompt template must contain exactly one \"S*\", found " +
                        std::to_string(count) + ": \"" + text_ + "\"");
  }
}

std::string PromptTemplate::substituted(std::string_view words) const {
  std::string out = text_;
  out.replace(out.find(kPlaceholderText), kPlaceholderText.size(), words);
  return out;
}

void MapperConfig::validate() const {
  if (input_width <= 0 || output_width <= 0 || hidden() <= 0) {
    throw ConfigError("mapper widths must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("mapper dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const MapperConfig& c) {
  j = {{"input_width", c.input_width}, {"hidden_width", c.hidden_width},
       {"output_width", c.output_width}, {"dropout", c.dropout},
       {"leaky_slope", c.leaky_slope}};
}

void from_json(const nlohmann::json& j, MapperConfig& c) {
  MapperConfig d;
  c.input_width = j.value("input_width", d.input_width);
  c.hidden_width = j.value("hidden_width", d.hidden_width);
  c.output_width = j.value("output_width", d.output_width);
  c.dropout = j.value("dropout", d.dropout);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
}

MappingNetwork::MappingNetwork(const MapperConfig& config, Rng& rng)
    : first_(config.input_width, config.hidden(), rng),
      second_(config.hidden(), config.hidden(), rng),
      projection_(config.hidden(), config.output_width, rng),
      dropout_(config.dropout),
      slope_(config.leaky_slope) {}

ag::Var MappingNetwork::operator()(const ag::Var& x, Rng* dropout_rng) const {
  ag::Var h = ag::leaky_relu(nn::dropout(first_(x), dropout_, dropout_rng), slope_);
  h = ag::leaky_relu(nn::dropout(second_(h), dropout_, dropout_rng), slope_);
  return projection_(h);
}

void MappingNetwork::collect(const std::string& prefix, nn::NamedParameters& out) const {
  first_.collect(prefix + ".fc1", out);
  second_.collect(prefix + ".fc2", out);
  projection_.collect(prefix + ".proj", out);
}

MapperState::MapperState(const MapperConfig& cfg, int expression_width, std::uint64_t seed)
    : config(cfg), uncond(expression_width) {
  config.validate();
  Rng rng1(derive_seed(seed, "mapper.1"));
  Rng rng2(derive_seed(seed, "mapper.2"));
  mappers.first = MappingNetwork(config, rng1);
  mappers.second = MappingNetwork(config, rng2);
}

nn::NamedParameters MapperState::parameters() const {
  nn::NamedParameters out;
  mappers.first.collect("mapper1", out);
  mappers.second.collect("mapper2", out);
  out.emplace_back("uncond_expression", uncond.value);
  return out;
}

IdentifierEmbedding map_to_identifier(const expression::ConditionVector& cond,
                                      const MapperParams& params, const MapperConfig& config,
                                      Rng* dropout_rng) {
  if (cond.values.rows() != 1 || cond.values.cols() != config.input_width) {
    throw ConfigError("condition width " + std::to_string(cond.values.cols()) +
                      " does not match mapper input width " + std::to_string(config.input_width));
  }
  return {params.first(cond.values, dropout_rng), params.second(cond.values, dropout_rng)};
}

ConditioningSequence inject_identifier(const PromptTemplate& prompt,
                                       const IdentifierEmbedding& identifier,
                                       const TextEncoder& encoder) {
  const std::vector<int> ids = encoder.tokenize(prompt.text());
  int position = -1;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == encoder.placeholder_id()) {
      if (position >= 0) throw TemplateError("prompt tokenizes to more than one placeholder");
      position = static_cast<int>(i);
    }
  }
  if (position < 0) throw TemplateError("prompt has no placeholder token");
  if (identifier.first.cols() != encoder.width() || identifier.second.cols() != encoder.width()) {
    throw ShapeError("identifier width differs from the text encoder width");
  }
  const int length = static_cast<int>(ids.size()) + 1;
  if (length > encoder.max_length()) {
    throw LengthError("prompt needs " + std::to_string(length) +
                      " tokens after injection, max is " + std::to_string(encoder.max_length()));
  }

  const Eigen::MatrixXd vocab = encoder.embed_tokens(ids);
  std::vector<ag::Var> parts;
  if (position > 0) parts.push_back(ag::constant(vocab.topRows(position)));
  parts.push_back(identifier.first);
  parts.push_back(identifier.second);
  const Eigen::Index rest = vocab.rows() - position - 1;
  if (rest > 0) parts.push_back(ag::constant(vocab.bottomRows(rest)));

  ConditioningSequence seq;
  seq.token_embeddings = ag::concat_rows(parts);
  seq.context = encoder.contextualize(seq.token_embeddings);
  seq.placeholder_position = position;
  seq.length = length;
  return seq;
}

}  // namespace f2d::mapping
