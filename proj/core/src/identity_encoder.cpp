#include "f2d/identity_encoder.hpp"

#include "f2d/errors.hpp"
#include "f2d/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace f2d::identity {

void EncoderConfig::validate() const {
  if (num_layers <= 0) throw ConfigError("num_layers must be positive");
  if (depth_set.empty()) throw ConfigError("depth_set must not be empty");
  for (std::size_t i = 0; i < depth_set.size(); ++i) {
    if (depth_set[i] < 1) throw ConfigError("depth_set entries must be >= 1");
    if (i > 0 && depth_set[i] <= depth_set[i - 1]) {
      throw ConfigError("depth_set must be strictly increasing");
    }
  }
  if (depth_set.back() > num_layers) {
    throw ConfigError("depth_set entry " + std::to_string(depth_set.back()) +
                      " exceeds num_layers " + std::to_string(num_layers));
  }
  if (!(margin > 0.0 && margin < std::numbers::pi / 2)) {
    throw ConfigError("margin must lie in (0, pi/2)");
  }
  if (!(scale > 0.0)) throw ConfigError("scale must be positive");
  if (num_identities < 2) throw ConfigError("num_identities must be at least 2");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim must be a positive multiple of num_heads");
  }
  if (patch_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("patch_size must divide image_size");
  }
  if (channels <= 0 || mlp_ratio <= 0) throw ConfigError("channels and mlp_ratio must be positive");
}

int EncoderConfig::tokens() const {
  const int side = image_size / patch_size;
  return side * side + 1;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"num_layers", c.num_layers},   {"depth_set", c.depth_set},
       {"embed_dim", c.embed_dim},     {"num_identities", c.num_identities},
       {"margin", c.margin},           {"scale", c.scale},
       {"image_size", c.image_size},   {"channels", c.channels},
       {"patch_size", c.patch_size},   {"num_heads", c.num_heads},
       {"mlp_ratio", c.mlp_ratio},     {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate}, {"epochs", c.epochs}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.num_layers = j.value("num_layers", d.num_layers);
  c.depth_set = j.value("depth_set", d.depth_set);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_identities = j.value("num_identities", d.num_identities);
  c.margin = j.value("margin", d.margin);
  c.scale = j.value("scale", d.scale);
  c.image_size = j.value("image_size", d.image_size);
  c.channels = j.value("channels", d.channels);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
}

MultiScaleIdentityFeature MultiScaleIdentityFeature::from_levels(
    std::vector<Eigen::RowVectorXd> levels) {
  MultiScaleIdentityFeature f;
  Eigen::Index total = 0;
  for (auto& v : levels) {
    const double n = v.norm();
    if (n > 0.0) v /= n;
    total += v.size();
  }
  f.concatenated.resize(total);
  Eigen::Index offset = 0;
  for (const auto& v : levels) {
    f.concatenated.segment(offset, v.size()) = v;
    offset += v.size();
  }
  f.per_level = std::move(levels);
  return f;
}

IdentityEncoder::IdentityEncoder(EncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, "identity_encoder"));
  const int d = config_.embed_dim;
  const int patch_dim = config_.patch_size * config_.patch_size * config_.channels;
  patch_embed_ = nn::Linear(patch_dim, d, rng);
  cls_token_ = ag::parameter(nn::normal_init(1, d, 0.02, rng));
  position_ = ag::parameter(nn::normal_init(config_.tokens(), d, 0.02, rng));
  for (int i = 0; i < config_.num_layers; ++i) {
    Block b{nn::LayerNorm(d),
            nn::Linear(d, 3 * d, rng),
            nn::Linear(d, d, rng),
            nn::LayerNorm(d),
            nn::Linear(d, d * config_.mlp_ratio, rng),
            nn::Linear(d * config_.mlp_ratio, d, rng)};
    blocks_.push_back(std::move(b));
  }
}

void IdentityEncoder::check_image(const Image& image) const {
  if (image.width() != config_.image_size || image.height() != config_.image_size ||
      image.channels() != config_.channels) {
    throw ShapeError("encoder expects " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + "x" + std::to_string(config_.channels) +
                     " input, got " + std::to_string(image.width()) + "x" +
                     std::to_string(image.height()) + "x" + std::to_string(image.channels()));
  }
}

std::vector<ag::Var> IdentityEncoder::forward(std::span<const Image> batch, int up_to_depth) const {
  if (up_to_depth < 1 || up_to_depth > config_.num_layers) {
    throw ConfigError("tap depth " + std::to_string(up_to_depth) + " outside [1, " +
                      std::to_string(config_.num_layers) + "]");
  }
  if (batch.empty()) throw ShapeError("empty batch");
  const int n_tokens = config_.tokens();
  const int n_patches = n_tokens - 1;
  const int bsz = static_cast<int>(batch.size());

  ag::Matrix patches(static_cast<Eigen::Index>(bsz) * n_patches,
                     config_.patch_size * config_.patch_size * config_.channels);
  for (int b = 0; b < bsz; ++b) {
    check_image(batch[static_cast<std::size_t>(b)]);
    patches.middleRows(static_cast<Eigen::Index>(b) * n_patches, n_patches) =
        batch[static_cast<std::size_t>(b)].patches(config_.patch_size);
  }
  const ag::Var embedded = patch_embed_(ag::constant(std::move(patches)));

  std::vector<ag::Var> rows;
  std::vector<ag::Var> positions;
  rows.reserve(static_cast<std::size_t>(bsz) * 2);
  for (int b = 0; b < bsz; ++b) {
    rows.push_back(cls_token_);
    rows.push_back(ag::slice_rows(embedded, static_cast<Eigen::Index>(b) * n_patches, n_patches));
    positions.push_back(position_);
  }
  ag::Var x = ag::add(ag::concat_rows(rows), ag::concat_rows(positions));

  std::vector<Eigen::Index> cls_rows(static_cast<std::size_t>(bsz));
  for (int b = 0; b < bsz; ++b) cls_rows[static_cast<std::size_t>(b)] = static_cast<Eigen::Index>(b) * n_tokens;

  std::vector<ag::Var> taps;
  for (int layer = 0; layer < up_to_depth; ++layer) {
    const Block& blk = blocks_[static_cast<std::size_t>(layer)];
    const ag::Var attn = ag::self_attention(blk.qkv(blk.ln1(x)), bsz, n_tokens, config_.num_heads);
    const ag::Var h = ag::add(x, blk.proj(attn));
    x = ag::add(h, blk.fc2(ag::gelu(blk.fc1(blk.ln2(h)))));
    taps.push_back(ag::select_rows(x, cls_rows));
  }
  return taps;
}

ag::Var IdentityEncoder::multiscale(std::span<const Image> batch) const {
  const std::vector<ag::Var> taps = forward(batch, config_.depth_set.back());
  std::vector<ag::Var> levels;
  for (int depth : config_.depth_set) {
    levels.push_back(ag::l2_normalize_rows(taps[static_cast<std::size_t>(depth - 1)]));
  }
  return ag::concat_cols(levels);
}

MultiScaleIdentityFeature IdentityEncoder::extract(const Image& image) const {
  ag::NoGradGuard no_grad;
  const std::vector<ag::Var> taps = forward(std::span<const Image>(&image, 1), config_.depth_set.back());
  std::vector<Eigen::RowVectorXd> levels;
  for (int depth : config_.depth_set) {
    levels.emplace_back(taps[static_cast<std::size_t>(depth - 1)].value().row(0));
  }
  return MultiScaleIdentityFeature::from_levels(std::move(levels));
}

Eigen::RowVectorXd IdentityEncoder::tap(const Image& image, int depth) const {
  ag::NoGradGuard no_grad;
  const std::vector<ag::Var> taps = forward(std::span<const Image>(&image, 1), depth);
  Eigen::RowVectorXd v = taps.back().value().row(0);
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

nn::NamedParameters IdentityEncoder::parameters() const {
  nn::NamedParameters out;
  patch_embed_.collect("patch_embed", out);
  out.emplace_back("cls_token", cls_token_);
  out.emplace_back("position", position_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    blocks_[i].ln1.collect(p + ".ln1", out);
    blocks_[i].qkv.collect(p + ".qkv", out);
    blocks_[i].proj.collect(p + ".proj", out);
    blocks_[i].ln2.collect(p + ".ln2", out);
    blocks_[i].fc1.collect(p + ".fc1", out);
    blocks_[i].fc2.collect(p + ".fc2", out);
  }
  return out;
}

MarginHead::MarginHead(int feature_width, int num_identities, Rng& rng)
    : weight(ag::parameter(nn::normal_init(feature_width, num_identities, 0.01, rng))) {}

ag::Var margin_loss(const ag::Var& features, std::span<const int> labels, const MarginHead& head,
                    double margin, double scale) {
  if (features.cols() != head.weight.rows()) {
    throw ShapeError("feature width " + std::to_string(features.cols()) +
                     " differs from head rows " + std::to_string(head.weight.rows()));
  }
  const ag::Var v = ag::l2_normalize_rows(features);
  const ag::Var w = ag::transpose(ag::l2_normalize_rows(ag::transpose(head.weight)));
  return ag::angular_margin_cross_entropy(ag::matmul(v, w), labels, margin, scale);
}

double multiscale_arcface_loss(const MultiScaleIdentityFeature& feature, int label,
                               const MarginHead& head, const EncoderConfig& config) {
  const Eigen::Index classes = head.weight.cols();
  if (label < 0 || label >= classes) {
    throw IndexError("label " + std::to_string(label) + " outside [0, " +
                     std::to_string(classes) + ")");
  }
  if (!feature.concatenated.allFinite()) throw NumericError("non-finite identity feature");
  ag::NoGradGuard no_grad;
  const int labels[] = {label};
  return margin_loss(ag::constant(feature.concatenated), labels, head, config.margin, config.scale)
      .item();
}

std::vector<double> pretrain(IdentityEncoder& encoder, MarginHead& head,
                             std::span<const LabeledImage> data, const PretrainConfig& config,
                             const std::function<void(int, double)>& on_step) {
  if (data.empty()) throw EmptyInputError("no training images");
  const EncoderConfig& ec = encoder.config();
  if (head.weight.rows() != ec.feature_width()) {
    throw ShapeError("margin head width does not match the encoder depth set");
  }
  std::vector<ag::Var> params;
  for (auto& [name, p] : encoder.parameters()) params.push_back(p);
  for (auto& [name, p] : head.parameters()) params.push_back(p);
  nn::Adam optimizer(params, {.learning_rate = config.learning_rate, .weight_decay = config.weight_decay});

  Rng rng(derive_seed(config.seed, "pretrain"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(config.steps));
  const int bsz = std::min<int>(config.batch_size, static_cast<int>(data.size()));
  for (int step = 0; step < config.steps; ++step) {
    std::vector<Image> batch;
    std::vector<int> labels;
    for (int i = 0; i < bsz; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        cursor = 0;
      }
      const LabeledImage& item = data[order[cursor++]];
      batch.push_back(config.horizontal_flip && rng.bernoulli(0.5) ? item.image.flipped_horizontally()
                                                                   : item.image);
      labels.push_back(item.label);
    }
    const double margin =
        step < config.margin_warmup_steps
            ? ec.margin * static_cast<double>(step) / config.margin_warmup_steps
            : ec.margin;
    const ag::Var loss = margin_loss(encoder.multiscale(batch), labels, head, margin, ec.scale);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite pretraining loss");
    ag::backward(loss);
    optimizer.step();
    losses.push_back(loss.item());
    encoder.set_train_steps(encoder.train_steps() + 1);
    if (on_step) on_step(step, loss.item());
  }
  return losses;
}

Gallery build_gallery(const IdentityEncoder& encoder, std::span<const LabeledImage> data,
                      int layer) {
  Gallery g;
  for (const auto& item : data) {
    g[std::to_string(item.label)].push_back(encoder.tap(item.image, layer));
  }
  return g;
}

SimilarityDistribution similarity_distribution(const Gallery& gallery, int layer,
                                               std::uint64_t seed) {
  if (gallery.size() < 2) throw SamplingError("need at least two identities");
  for (const auto& [id, feats] : gallery) {
    if (feats.size() < 2) {
      throw SamplingError("identity '" + id + "' has fewer than two images");
    }
  }
  std::vector<const std::vector<Eigen::RowVectorXd>*> ids;
  for (const auto& [id, feats] : gallery) ids.push_back(&feats);

  Rng rng(derive_seed(seed, "similarity_triplets"));
  SimilarityDistribution dist;
  dist.layer = layer;
  const auto n_ids = static_cast<std::int64_t>(ids.size());
  for (std::int64_t i = 0; i < n_ids; ++i) {
    const auto& feats = *ids[static_cast<std::size_t>(i)];
    const auto n = static_cast<std::int64_t>(feats.size());
    const std::int64_t a = rng.uniform_int(0, n - 1);
    std::int64_t p = rng.uniform_int(0, n - 2);
    if (p >= a) ++p;
    std::int64_t other = rng.uniform_int(0, n_ids - 2);
    if (other >= i) ++other;
    const auto& neg_feats = *ids[static_cast<std::size_t>(other)];
    const std::int64_t q = rng.uniform_int(0, static_cast<std::int64_t>(neg_feats.size()) - 1);
    const auto& anchor = feats[static_cast<std::size_t>(a)];
    dist.same_scores.push_back(
        std::clamp(cosine(anchor, feats[static_cast<std::size_t>(p)]), -1.0, 1.0));
    dist.diff_scores.push_back(
        std::clamp(cosine(anchor, neg_feats[static_cast<std::size_t>(q)]), -1.0, 1.0));
  }
  return dist;
}

double roc_auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) {
    throw EmptyInputError("roc_auc needs non-empty score lists");
  }
  std::vector<double> neg(negatives.begin(), negatives.end());
  std::sort(neg.begin(), neg.end());
  long long greater = 0, ties = 0;
  for (double p : positives) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(lo, neg.end(), p);
    greater += lo - neg.begin();
    ties += hi - lo;
  }
  return (static_cast<double>(greater) + 0.5 * static_cast<double>(ties)) /
         (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

double roc_auc(const SimilarityDistribution& dist) {
  return roc_auc(dist.same_scores, dist.diff_scores);
}

}  // namespace f2d::identity
