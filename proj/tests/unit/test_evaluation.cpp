#include "f2d/errors.hpp"
#include "f2d/evaluation.hpp"
#include "f2d/parallel.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace f2d;
using namespace f2d::evaluation;

namespace {

Eigen::RowVectorXd random_row(int n, Rng& rng) {
  Eigen::RowVectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

MetricScores random_scores(Rng& rng, double zero_prob = 0.0) {
  MetricScores s;
  for (double& v : s) v = rng.bernoulli(zero_prob) ? 0.0 : rng.uniform();
  return s;
}

// Embeds an image as a fixed vector chosen by its top-left pixel; "no face"
// when that pixel is exactly zero.
class LookupRecognizer final : public FaceRecognizer {
 public:
  std::map<double, Eigen::RowVectorXd> table;
  std::string name() const override { return "lookup"; }
  std::optional<Eigen::RowVectorXd> embed(const Image& image) const override {
    const double key = image.at(0, 0);
    if (key == 0.0) return std::nullopt;
    return table.at(key);
  }
};

Image keyed(double key) {
  Image img(4, 4, 1, 0.5);
  img.at(0, 0) = key;
  return img;
}

}  // namespace

TEST(IdentitySimilarity, SelfSimilarityIsOne) {
  const ToyFaceRecognizer rec("adaface", 1);
  const Image face = fixture::face(2);
  EXPECT_NEAR(identity_similarity(face, face, rec), 1.0, 1e-12);
}

TEST(IdentitySimilarity, AntiparallelClipsToZero) {
  LookupRecognizer rec;
  rec.table[0.1] = Eigen::RowVectorXd::Ones(3);
  rec.table[0.2] = -Eigen::RowVectorXd::Ones(3);
  EXPECT_EQ(identity_similarity(keyed(0.1), keyed(0.2), rec), 0.0);
}

TEST(IdentitySimilarity, NoFaceInGeneratedScoresZero) {
  const ToyFaceRecognizer rec("sphereface", 2);
  EXPECT_EQ(identity_similarity(fixture::face(), Image(32, 32, 1, 0.5), rec), 0.0);
}

TEST(IdentitySimilarity, NoFaceInInputIsInputQualityError) {
  const ToyFaceRecognizer rec("facenet", 3);
  EXPECT_THROW(identity_similarity(Image(32, 32, 1, 0.5), fixture::face(), rec), InputQualityError);
}

TEST(ClipScore, IdenticalIsOneOrthogonalIsZero) {
  const Eigen::RowVectorXd a = Eigen::RowVectorXd::Unit(4, 0), b = Eigen::RowVectorXd::Unit(4, 1);
  EXPECT_NEAR(clip_score_from_embeddings(a, a), 1.0, 1e-15);
  EXPECT_EQ(clip_score_from_embeddings(a, b), 0.0);
  EXPECT_EQ(clip_score_from_embeddings(a, -a), 0.0);
}

TEST(ClipScore, MatchesCosineOracle) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto a = random_row(6, rng), b = random_row(6, rng);
    EXPECT_NEAR(clip_score_from_embeddings(a, b), std::max(0.0, oracle::cosine(a.transpose(), b.transpose())), 1e-6);
  }
}

TEST(DclipScore, DegenerateReferenceIsZero) {
  Rng rng(2);
  const auto y = random_row(5, rng), p = random_row(5, rng), pr = random_row(5, rng);
  EXPECT_EQ(dclip_score_from_embeddings(y, p, y, pr), 0.0);
  EXPECT_EQ(dclip_score_from_embeddings(y, p, random_row(5, rng), p), 0.0);
}

TEST(DclipScore, ParallelDifferencesScoreOne) {
  Rng rng(3);
  const auto yr = random_row(5, rng), pr = random_row(5, rng), d = random_row(5, rng);
  EXPECT_NEAR(dclip_score_from_embeddings(yr + d, pr + 2.5 * d, yr, pr), 1.0, 1e-12);
}

TEST(DclipScore, MatchesFormulaOracle) {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto y = random_row(6, rng), p = random_row(6, rng), yr = random_row(6, rng), pr = random_row(6, rng);
    const double expected = std::max(0.0, oracle::cosine((y - yr).transpose(), (p - pr).transpose()));
    EXPECT_NEAR(dclip_score_from_embeddings(y, p, yr, pr), expected, 1e-6);
  }
}

TEST(SiglipScore, FixedPoints) {
  const Eigen::RowVectorXd a = Eigen::RowVectorXd::Unit(3, 0);
  EXPECT_NEAR(siglip_score_from_embeddings(a, Eigen::RowVectorXd::Unit(3, 2), 1.0, 0.0), 0.5, 1e-15);
  EXPECT_NEAR(siglip_score_from_embeddings(a, a, 1.0, 0.0), 0.7310585786300049, 1e-12);
}

TEST(SiglipScore, MonotoneInCosine) {
  double prev = -1.0;
  for (int k = 0; k <= 20; ++k) {
    const double angle = M_PI * (20 - k) / 20.0;
    const Eigen::RowVectorXd t = (Eigen::RowVectorXd(2) << std::cos(angle), std::sin(angle)).finished();
    const double s = siglip_score_from_embeddings(Eigen::RowVectorXd::Unit(2, 0), t, 10.0, -3.0);
    EXPECT_GT(s, prev);
    prev = s;
  }
}

TEST(SiglipScore, MatchesFormulaOracle) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto a = random_row(4, rng), b = random_row(4, rng);
    const double s = 1.0 + 10.0 * rng.uniform(), bias = rng.normal();
    EXPECT_NEAR(siglip_score_from_embeddings(a, b, s, bias),
                oracle::sigmoid(s * oracle::cosine(a.transpose(), b.transpose()) + bias), 1e-6);
  }
}

TEST(IdTextAggregate, EqualValues) {
  MetricScores s;
  s.fill(0.37);
  const auto m = id_text_aggregate(s);
  EXPECT_NEAR(m.hmean, 0.37, 1e-15);
  EXPECT_NEAR(m.gmean, 0.37, 1e-15);
}

TEST(IdTextAggregate, AnyZeroGivesZero) {
  MetricScores s;
  s.fill(0.8);
  s[4] = 0.0;
  const auto m = id_text_aggregate(s);
  EXPECT_EQ(m.hmean, 0.0);
  EXPECT_EQ(m.gmean, 0.0);
}

TEST(IdTextAggregate, WorkedExample) {
  EXPECT_NEAR(id_text_aggregate({0.2, 0.4, 0.4, 0.2, 0.4, 0.4}).hmean, 0.3, 1e-15);
}

TEST(IdTextAggregate, MatchesOraclesAndOrdering) {
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const MetricScores s = random_scores(rng, 0.02);
    const std::vector<double> v(s.begin(), s.end());
    const auto m = id_text_aggregate(s);
    EXPECT_NEAR(m.hmean, oracle::harmonic_mean(v), 1e-12);
    const bool any_zero = std::count(v.begin(), v.end(), 0.0) > 0;
    EXPECT_NEAR(m.gmean, any_zero ? 0.0 : oracle::geometric_mean(v), 1e-12);
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / 6.0;
    EXPECT_LE(m.hmean, m.gmean + 1e-12);
    EXPECT_LE(m.gmean, mean + 1e-12);
  }
}

TEST(SampleReport, RejectsOutOfRangeScores) {
  EXPECT_THROW(SampleReport::from_scores("x", {0.5, 0.5, 1.2, 0.5, 0.5, 0.5}), NumericError);
  SampleReport r = SampleReport::from_scores("x", {0.5, 0.6, 0.7, 0.5, 0.5, 0.5});
  r.hmean = 0.9;  // breaks hMean <= gMean
  EXPECT_THROW(r.validate(), NumericError);
}

TEST(Summarize, ReportsPerImageMeanNotHmeanOfMeans) {
  const std::vector<SampleReport> reports = {
      SampleReport::from_scores("a", {1.0, 1.0, 1.0, 1.0, 1.0, 0.01}),
      SampleReport::from_scores("b", {0.01, 1.0, 1.0, 1.0, 1.0, 1.0})};
  const auto s = summarize(reports);
  const double per_image = (reports[0].hmean + reports[1].hmean) / 2.0;
  EXPECT_EQ(s.hmean, per_image);
  EXPECT_GT(std::abs(hmean_of_means(reports) - per_image), 0.5);
  EXPECT_EQ(s.count, 2u);
  EXPECT_NEAR(s.metric_means[0], 0.505, 1e-15);
}

TEST(Summarize, EmptyThrows) {
  EXPECT_THROW(summarize(std::vector<SampleReport>{}), EmptyInputError);
}

TEST(ReportsCsv, RoundTripsExactly) {
  Rng rng(7);
  std::vector<SampleReport> reports;
  for (int i = 0; i < 30; ++i) {
    auto r = SampleReport::from_scores("img,\"" + std::to_string(i) + "\"", random_scores(rng, 0.1));
    r.prompt_id = "p" + std::to_string(i % 3);
    r.sample_idx = i % 4 == 0 ? -1 : i;
    reports.push_back(r);
  }
  EXPECT_EQ(reports_from_csv(reports_to_csv(reports)), reports);

  const fixture::TempDir dir("csv");
  write_reports_csv(dir.path() / "r.csv", reports);
  EXPECT_EQ(read_reports_csv(dir.path() / "r.csv"), reports);
}

TEST(ReportsCsv, HeaderListsColumnsInOrder) {
  const std::string csv = reports_to_csv(std::vector<SampleReport>{});
  EXPECT_EQ(csv, "image_id,prompt_id,sample_idx,adaface,sphereface,facenet,clip,dclip,siglip,hmean,gmean\n");
}

TEST(ReportsCsv, ParseErrorsCarryLineNumbers) {
  const std::string header = reports_to_csv(std::vector<SampleReport>{});
  try {
    reports_from_csv(header + "a,p,0,1,1,1,1,1,1,1,1\nb,p,0,1,1,oops,1,1,1,1,1\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(reports_from_csv(header + "a,p,0,1,1\n"), ParseError);
  EXPECT_THROW(reports_from_csv("id,score\n"), ParseError);
  EXPECT_THROW(reports_from_csv(""), ParseError);
  EXPECT_THROW(read_reports_csv("/nonexistent/reports.csv"), IoError);
}

TEST(ReportJson, RoundTrips) {
  auto r = SampleReport::from_scores("f000_p01_s02", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  r.prompt_id = "p01";
  r.sample_idx = 2;
  EXPECT_EQ(nlohmann::json(r).get<SampleReport>(), r);
  const auto s = summarize(std::vector<SampleReport>{r});
  EXPECT_EQ(nlohmann::json(s).get<DatasetSummary>(), s);
}

// Upper bound ----------------------------------------------------------------

namespace {

std::map<std::string, std::vector<SampleReport>> random_sets(Rng& rng, int sets, int n) {
  std::map<std::string, std::vector<SampleReport>> out;
  for (int s = 0; s < sets; ++s) {
    for (int i = 0; i < n; ++i) {
      out["set" + std::to_string(s)].push_back(SampleReport::from_scores("x", random_scores(rng, 0.1)));
    }
  }
  return out;
}

std::vector<std::vector<double>> hmeans(const std::map<std::string, std::vector<SampleReport>>& sets) {
  std::vector<std::vector<double>> out;
  for (const auto& [k, v] : sets) {
    out.emplace_back();
    for (const auto& r : v) out.back().push_back(r.hmean);
  }
  return out;
}

}  // namespace

TEST(UpperBound, ConstantSetsGiveConstantCurve) {
  std::map<std::string, std::vector<SampleReport>> sets;
  const auto r = SampleReport::from_scores("x", {0.3, 0.4, 0.5, 0.6, 0.7, 0.8});
  sets["a"] = std::vector<SampleReport>(16, r);
  const auto c = upper_bound_curve(sets);
  ASSERT_EQ(c.points.size(), 5u);
  for (const auto& [n, v] : c.points) EXPECT_EQ(v, r.hmean);
}

TEST(UpperBound, FirstPointIsPlainMean) {
  Rng rng(8);
  const auto sets = random_sets(rng, 7, 16);
  double mean = 0.0;
  for (const auto& [k, v] : sets) mean += v.front().hmean;
  mean /= 7.0;
  EXPECT_EQ(upper_bound_curve(sets).points.front().second, mean);
}

TEST(UpperBound, MatchesPrefixMaxOracleAndIsMonotone) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto sets = random_sets(rng, 3 + trial % 4, 16);
    const auto curve = upper_bound_curve(sets);
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
      EXPECT_EQ(curve.points[i].second, oracle::prefix_max_mean(hmeans(sets), curve.points[i].first));
      if (i > 0) EXPECT_GE(curve.points[i].second, curve.points[i - 1].second);
    }
  }
}

TEST(UpperBound, ShortSetIsSamplingError) {
  Rng rng(10);
  auto sets = random_sets(rng, 2, 16);
  sets["set1"].pop_back();
  EXPECT_THROW(upper_bound_curve(sets), SamplingError);
  EXPECT_THROW(upper_bound_curve({}), EmptyInputError);
}

// Frechet --------------------------------------------------------------------

namespace {

Eigen::MatrixXd gaussian_rows(Rng& rng, int n, int d, double shift = 0.0) {
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() + shift;
  return m;
}

}  // namespace

TEST(Frechet, IdenticalSetsAreZero) {
  Rng rng(11);
  const auto a = gaussian_rows(rng, 50, 6);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
}

TEST(Frechet, OneDimensionalShiftedGaussians) {
  Rng rng(12);
  const auto a = gaussian_rows(rng, 100000, 1);
  const auto b = gaussian_rows(rng, 100000, 1, 3.0);
  EXPECT_NEAR(frechet_distance(a, b), 9.0, 0.2);
}

TEST(Frechet, TranslationInvariant) {
  Rng rng(13);
  const auto a = gaussian_rows(rng, 40, 5), b = gaussian_rows(rng, 60, 5, 0.5);
  const Eigen::RowVectorXd shift = random_row(5, rng) * 10.0;
  EXPECT_NEAR(frechet_distance(a.rowwise() + shift, b.rowwise() + shift), frechet_distance(a, b), 1e-6);
}

TEST(Frechet, MatchesEigenvalueOracle) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 5;
    const auto a = gaussian_rows(rng, 30, d), b = gaussian_rows(rng, 25, d, 0.3);
    const Eigen::MatrixXd mix = Eigen::MatrixXd::Identity(d, d) + 0.5 * gaussian_rows(rng, d, d);
    EXPECT_NEAR(frechet_distance(a * mix, b), oracle::frechet(a * mix, b), 1e-5);
    EXPECT_GE(frechet_distance(a * mix, b), 0.0);
  }
}

TEST(Frechet, Preconditions) {
  EXPECT_THROW(frechet_distance(Eigen::MatrixXd::Zero(1, 3), Eigen::MatrixXd::Zero(4, 3)), EmptyInputError);
  EXPECT_THROW(frechet_distance(Eigen::MatrixXd::Zero(4, 2), Eigen::MatrixXd::Zero(4, 3)), ShapeError);
}

// Full sample evaluation -----------------------------------------------------

TEST(EvaluateSample, ConcurrentCallsMatchSequential) {
  const ToyFaceRecognizer r1("adaface", 1), r2("sphereface", 2), r3("facenet", 3);
  const ToyImageEmbedder clip_img(4), sig_img(6);
  const ToyTextEmbedder clip_txt(5), sig_txt(7);
  EvaluationModels models;
  models.recognizers = {&r1, &r2, &r3};
  models.clip = {&clip_img, &clip_txt};
  models.siglip = {&sig_img, &sig_txt, 10.0, -5.0};

  std::vector<Image> faces;
  for (int i = 0; i < 12; ++i) faces.push_back(fixture::face(i % 4, i / 4));
  auto run = [&](int i) {
    SampleInputs in;
    in.image_id = std::to_string(i);
    in.input_face = &faces[static_cast<std::size_t>(i)];
    in.generated = &faces[static_cast<std::size_t>((i + 1) % 12)];
    in.reference = &faces[static_cast<std::size_t>((i + 2) % 12)];
    in.prompt = "A photo of a person as a chef";
    return evaluate_sample(in, models);
  };
  std::vector<SampleReport> serial, parallel(12);
  for (int i = 0; i < 12; ++i) serial.push_back(run(i));
  parallel_for(12, 4, [&](std::size_t i) { parallel[i] = run(static_cast<int>(i)); });
  EXPECT_EQ(serial, parallel);
  for (const auto& r : serial) EXPECT_NO_THROW(r.validate());
}

TEST(EvaluateSample, MissingModelsAreConfigErrors) {
  EvaluationModels models;
  EXPECT_THROW(models.validate(), ConfigError);
}

TEST(ToyEmbedders, AppendSharedOffsetCoordinate) {
  const ToyImageEmbedder img(1, 32, 8);
  const ToyTextEmbedder txt(2, 8);
  EXPECT_EQ(img.embed(fixture::face()).size(), 9);
  EXPECT_EQ(txt.embed("a photo").size(), 9);
  EXPECT_EQ(txt.embed("x"), txt.embed("x"));
}
