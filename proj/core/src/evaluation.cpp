#include "f2d/evaluation.hpp"

#include "f2d/errors.hpp"
#include "f2d/linalg.hpp"
#include "f2d/nn.hpp"
#include "f2d/random.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace f2d::evaluation {

namespace {

Eigen::RowVectorXd centered_pixels(const Image& image) {
  Eigen::RowVectorXd v(static_cast<Eigen::Index>(image.data().size()));
  for (std::size_t i = 0; i < image.data().size(); ++i) v(static_cast<Eigen::Index>(i)) = image.data()[i];
  v.array() -= v.mean();
  return v;
}

void check_size(const Image& image, int size, const char* who) {
  if (image.width() != size || image.height() != size || image.channels() != 1) {
    throw ShapeError(std::string(who) + ": expected a " + std::to_string(size) + "x" +
                     std::to_string(size) + " gray image");
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ToyFaceRecognizer::ToyFaceRecognizer(std::string name, std::uint64_t seed, int image_size,
                                     int width, double detection_threshold)
    : name_(std::move(name)), image_size_(image_size), threshold_(detection_threshold) {
  Rng rng(derive_seed(seed, "toy_face_recognizer/" + name_));
  const int pixels = image_size * image_size;
  projection_ = nn::normal_init(pixels, width, 1.0 / std::sqrt(static_cast<double>(pixels)), rng);
}

std::optional<Eigen::RowVectorXd> ToyFaceRecognizer::embed(const Image& image) const {
  check_size(image, image_size_, "toy face recognizer");
  if (image.stddev() < threshold_) return std::nullopt;
  return Eigen::RowVectorXd(centered_pixels(image) * projection_);
}

namespace {

// Unit-normalizes and appends a constant coordinate. Image and text embeddings
// of one model then share a positive baseline cosine (0.36 / 1.36 for
// orthogonal pairs), as contrastive embedders do.
constexpr double kSharedOffset = 0.6;

Eigen::RowVectorXd with_shared_offset(const Eigen::RowVectorXd& v) {
  Eigen::RowVectorXd out(v.size() + 1);
  const double n = v.norm();
  out.head(v.size()) = n > 0.0 ? Eigen::RowVectorXd(v / n) : v;
  out(v.size()) = kSharedOffset;
  return out;
}

}  // namespace

ToyImageEmbedder::ToyImageEmbedder(std::uint64_t seed, int image_size, int width)
    : image_size_(image_size) {
  Rng rng(derive_seed(seed, "toy_image_embedder"));
  const int pixels = (image_size / 4) * (image_size / 4);
  projection_ = nn::normal_init(pixels, width, 1.0, rng);
}

Eigen::RowVectorXd ToyImageEmbedder::embed(const Image& image) const {
  check_size(image, image_size_, "toy image embedder");
  return with_shared_offset(centered_pixels(image.downsampled(4)) * projection_);
}

ToyTextEmbedder::ToyTextEmbedder(std::uint64_t seed, int width, int buckets) {
  Rng rng(derive_seed(seed, "toy_text_embedder"));
  table_ = nn::normal_init(buckets, width, 1.0, rng);
}

Eigen::RowVectorXd ToyTextEmbedder::embed(const std::string& text) const {
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(table_.cols());
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : word) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    out += table_.row(static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(table_.rows())));
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return with_shared_offset(out);
}

// Metrics ---------------------------------------------------------------------

double identity_similarity(const Image& input, const Image& generated,
                           const FaceRecognizer& recognizer) {
  std::optional<Eigen::RowVectorXd> a;
  try {
    a = recognizer.embed(input);
  } catch (const std::exception& e) {
    throw InputQualityError(recognizer.name() + " failed on the input image: " + e.what());
  }
  if (!a) throw InputQualityError(recognizer.name() + " found no face in the input image");
  const std::optional<Eigen::RowVectorXd> b = recognizer.embed(generated);
  if (!b) return 0.0;
  return std::max(cosine(*a, *b), 0.0);
}

double clip_score_from_embeddings(const Eigen::RowVectorXd& image, const Eigen::RowVectorXd& text) {
  if (image.size() != text.size()) throw ShapeError("image and text embeddings differ in width");
  return std::max(cosine(image, text), 0.0);
}

double clip_score(const Image& image, const std::string& prompt, const ClipModels& models) {
  return clip_score_from_embeddings(models.image->embed(image), models.text->embed(prompt));
}

double dclip_score_from_embeddings(const Eigen::RowVectorXd& image,
                                   const Eigen::RowVectorXd& text,
                                   const Eigen::RowVectorXd& ref_image,
                                   const Eigen::RowVectorXd& ref_text) {
  if (image.size() != ref_image.size() || text.size() != ref_text.size() ||
      image.size() != text.size()) {
    throw ShapeError("dCLIP embeddings differ in width");
  }
  const Eigen::RowVectorXd dy = image - ref_image;
  const Eigen::RowVectorXd dp = text - ref_text;
  if (dy.norm() == 0.0 || dp.norm() == 0.0) return 0.0;
  return std::max(cosine(dy, dp), 0.0);
}

double dclip_score(const Image& image, const std::string& prompt, const Image& ref_image,
                   const std::string& ref_prompt, const ClipModels& models) {
  return dclip_score_from_embeddings(models.image->embed(image), models.text->embed(prompt),
                                     models.image->embed(ref_image),
                                     models.text->embed(ref_prompt));
}

double siglip_score_from_embeddings(const Eigen::RowVectorXd& image,
                                    const Eigen::RowVectorXd& text, double scale, double bias) {
  if (image.size() != text.size()) throw ShapeError("image and text embeddings differ in width");
  return sigmoid(scale * cosine(image, text) + bias);
}

double siglip_score(const Image& image, const std::string& prompt, const SiglipModels& models) {
  return siglip_score_from_embeddings(models.image->embed(image), models.text->embed(prompt),
                                      models.scale, models.bias);
}

IdTextMeans id_text_aggregate(const MetricScores& scores) {
  double inv = 0.0;
  double logs = 0.0;
  for (double v : scores) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw NumericError("metric score " + std::to_string(v) + " outside [0, 1]");
    }
    if (v == 0.0) return {0.0, 0.0};
    inv += 1.0 / v;
    logs += std::log(v);
  }
  const double n = static_cast<double>(kNumMetrics);
  return {n / inv, std::exp(logs / n)};
}

SampleReport SampleReport::from_scores(std::string image_id, const MetricScores& scores) {
  SampleReport r;
  r.image_id = std::move(image_id);
  r.scores = scores;
  const IdTextMeans m = id_text_aggregate(scores);
  r.hmean = m.hmean;
  r.gmean = m.gmean;
  r.validate();
  return r;
}

void SampleReport::validate() const {
  double sum = 0.0;
  for (double v : scores) {
    if (!(v >= 0.0 && v <= 1.0)) throw NumericError("report score outside [0, 1]");
    sum += v;
  }
  const double mean = sum / static_cast<double>(kNumMetrics);
  constexpr double tol = 1e-12;
  if (!(hmean <= gmean + tol && gmean <= mean + tol && hmean >= 0.0)) {
    throw NumericError("report for \"" + image_id + "\" violates hMean <= gMean <= mean");
  }
}

void to_json(nlohmann::json& j, const SampleReport& r) {
  j = nlohmann::json{{"image_id", r.image_id}, {"prompt_id", r.prompt_id}, {"sample_idx", r.sample_idx}};
  for (std::size_t i = 0; i < kNumMetrics; ++i) j[kMetricNames[i]] = r.scores[i];
  j["hmean"] = r.hmean;
  j["gmean"] = r.gmean;
}

void from_json(const nlohmann::json& j, SampleReport& r) {
  r.image_id = j.at("image_id").get<std::string>();
  r.prompt_id = j.value("prompt_id", std::string());
  r.sample_idx = j.value("sample_idx", -1);
  for (std::size_t i = 0; i < kNumMetrics; ++i) r.scores[i] = j.at(kMetricNames[i]).get<double>();
  r.hmean = j.at("hmean").get<double>();
  r.gmean = j.at("gmean").get<double>();
}

DatasetSummary summarize(std::span<const SampleReport> reports) {
  if (reports.empty()) throw EmptyInputError("no reports to summarize");
  DatasetSummary s;
  s.count = reports.size();
  for (const SampleReport& r : reports) {
    for (std::size_t i = 0; i < kNumMetrics; ++i) s.metric_means[i] += r.scores[i];
    s.hmean += r.hmean;
    s.gmean += r.gmean;
  }
  const double n = static_cast<double>(reports.size());
  for (double& v : s.metric_means) v /= n;
  s.hmean /= n;
  s.gmean /= n;
  return s;
}

double hmean_of_means(std::span<const SampleReport> reports) {
  return id_text_aggregate(summarize(reports).metric_means).hmean;
}

void to_json(nlohmann::json& j, const DatasetSummary& s) {
  j = nlohmann::json{{"count", s.count}};
  for (std::size_t i = 0; i < kNumMetrics; ++i) j[kMetricNames[i]] = s.metric_means[i];
  j["hmean"] = s.hmean;
  j["gmean"] = s.gmean;
}

void from_json(const nlohmann::json& j, DatasetSummary& s) {
  s.count = j.at("count").get<std::size_t>();
  for (std::size_t i = 0; i < kNumMetrics; ++i) s.metric_means[i] = j.at(kMetricNames[i]).get<double>();
  s.hmean = j.at("hmean").get<double>();
  s.gmean = j.at("gmean").get<double>();
}

// CSV -------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote", line_no);
  fields.push_back(std::move(cur));
  return fields;
}

std::string csv_header() {
  std::string h = "image_id,prompt_id,sample_idx";
  for (const char* name : kMetricNames) h += std::string(",") + name;
  return h + ",hmean,gmean";
}

}  // namespace

std::string reports_to_csv(std::span<const SampleReport> reports) {
  std::string out = csv_header() + "\n";
  for (const SampleReport& r : reports) {
    out += quote_field(r.image_id) + "," + quote_field(r.prompt_id) + ",";
    if (r.sample_idx >= 0) out += std::to_string(r.sample_idx);
    for (double v : r.scores) out += "," + format_double(v);
    out += "," + format_double(r.hmean) + "," + format_double(r.gmean) + "\n";
  }
  return out;
}

std::vector<SampleReport> reports_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("missing CSV header", 1);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != csv_header()) throw ParseError("unexpected CSV header", line_no);
  std::vector<SampleReport> reports;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line, line_no);
    constexpr std::size_t kFields = kNumMetrics + 5;
    if (f.size() != kFields) {
      throw ParseError("expected " + std::to_string(kFields) + " fields", line_no);
    }
    SampleReport r;
    r.image_id = f[0];
    r.prompt_id = f[1];
    auto number = [&](const std::string& s) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        throw ParseError("invalid number \"" + s + "\"", line_no);
      }
      if (used != s.size()) throw ParseError("invalid number \"" + s + "\"", line_no);
      return v;
    };
    if (!f[2].empty()) {
      const double idx = number(f[2]);
      if (idx < 0 || idx != std::floor(idx)) throw ParseError("invalid sample_idx \"" + f[2] + "\"", line_no);
      r.sample_idx = static_cast<int>(idx);
    }
    for (std::size_t i = 0; i < kNumMetrics; ++i) r.scores[i] = number(f[i + 3]);
    r.hmean = number(f[kNumMetrics + 3]);
    r.gmean = number(f[kNumMetrics + 4]);
    reports.push_back(std::move(r));
  }
  return reports;
}

void write_reports_csv(const std::filesystem::path& path, std::span<const SampleReport> reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << reports_to_csv(reports);
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<SampleReport> read_reports_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return reports_from_csv(ss.str());
}

// Upper bound -----------------------------------------------------------------

UpperBoundCurve upper_bound_curve(const std::map<std::string, std::vector<SampleReport>>& sets,
                                  const std::vector<int>& ns) {
  if (sets.empty()) throw EmptyInputError("no (image, prompt) sets");
  if (ns.empty()) throw ConfigError("no N values requested");
  const int max_n = *std::max_element(ns.begin(), ns.end());
  if (*std::min_element(ns.begin(), ns.end()) < 1) throw ConfigError("N must be at least 1");
  for (const auto& [key, reports] : sets) {
    if (static_cast<int>(reports.size()) < max_n) {
      throw SamplingError("set \"" + key + "\" has " + std::to_string(reports.size()) +
                          " reports, need " + std::to_string(max_n));
    }
  }
  UpperBoundCurve curve;
  for (int n : ns) {
    double total = 0.0;
    for (const auto& [key, reports] : sets) {
      double best = reports.front().hmean;
      for (int i = 1; i < n; ++i) best = std::max(best, reports[static_cast<std::size_t>(i)].hmean);
      total += best;
    }
    curve.points.emplace_back(n, total / static_cast<double>(sets.size()));
  }
  return curve;
}

void to_json(nlohmann::json& j, const UpperBoundCurve& c) {
  j = nlohmann::json::array();
  for (const auto& [n, v] : c.points) j.push_back({{"n", n}, {"best_hmean", v}});
}

// Frechet distance ------------------------------------------------------------

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw EmptyInputError("each feature set needs two vectors");
  if (a.cols() != b.cols()) throw ShapeError("feature sets differ in dimension");
  if (!a.allFinite() || !b.allFinite()) throw NumericError("non-finite features");

  auto moments = [](const Eigen::MatrixXd& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - mu;
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    return std::pair{mu, cov};
  };
  const auto [mu_a, cov_a] = moments(a);
  const auto [mu_b, cov_b] = moments(b);

  // tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), which is symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd roots = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * roots.asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

// Per-sample evaluation -------------------------------------------------------

void EvaluationModels::validate() const {
  for (const FaceRecognizer* r : recognizers) {
    if (!r) throw ConfigError("face recognizer slot is empty");
  }
  if (!clip.image || !clip.text) throw ConfigError("CLIP encoders are not registered");
  if (!siglip.image || !siglip.text) throw ConfigError("SigLIP encoders are not registered");
}

SampleReport evaluate_sample(const SampleInputs& in, const EvaluationModels& models) {
  models.validate();
  if (!in.input_face || !in.generated || !in.reference) {
    throw ConfigError("sample inputs are incomplete");
  }
  MetricScores s{};
  for (std::size_t i = 0; i < 3; ++i) {
    s[i] = identity_similarity(*in.input_face, *in.generated, *models.recognizers[i]);
  }
  s[3] = clip_score(*in.generated, in.prompt, models.clip);
  s[4] = dclip_score(*in.generated, in.prompt, *in.reference, in.reference_prompt, models.clip);
  s[5] = siglip_score(*in.generated, in.prompt, models.siglip);
  return SampleReport::from_scores(in.image_id, s);
}

}  // namespace f2d::evaluation
