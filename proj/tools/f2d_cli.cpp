#include "f2d/errors.hpp"
#include "f2d/experiment.hpp"
#include "f2d/plots.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace f2d;
namespace ex = f2d::experiment;

namespace {

// Values given on the command line; unset ones leave the config file alone.
struct Overrides {
  std::optional<std::string> run_name;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> manifest;
  std::optional<std::string> eval_manifest;
  std::optional<std::string> prompts;
  std::optional<std::string> output_dir;
  std::optional<std::string> encoder_checkpoint;
  std::optional<std::string> mapper_checkpoint;
  std::optional<std::string> loss_kind;
  std::optional<int> train_steps;
  std::optional<int> pretrain_steps;
  std::optional<int> num_samples;
  std::optional<int> num_steps;
  std::optional<double> guidance_scale;
  std::optional<std::string> generation_mode;
  std::optional<double> dsc_alpha;
  std::optional<int> max_faces;
  std::optional<int> max_prompts;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, std::string& config_path, Overrides& o) {
  cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--run-name", o.run_name);
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--manifest", o.manifest, "training manifest (JSONL)");
  cmd->add_option("--eval-manifest", o.eval_manifest, "faces to personalize (JSONL)");
  cmd->add_option("--prompts", o.prompts, "prompt template file");
  cmd->add_option("-o,--output-dir", o.output_dir);
  cmd->add_option("--encoder-checkpoint", o.encoder_checkpoint);
  cmd->add_option("--mapper-checkpoint", o.mapper_checkpoint);
  cmd->add_option("--loss-kind", o.loss_kind, "cgdr | reconstruction | masked_reconstruction");
  cmd->add_option("--train-steps", o.train_steps);
  cmd->add_option("--pretrain-steps", o.pretrain_steps);
  cmd->add_option("--num-samples", o.num_samples);
  cmd->add_option("--num-steps", o.num_steps, "sampler steps");
  cmd->add_option("--guidance-scale", o.guidance_scale);
  cmd->add_option("--generation-mode", o.generation_mode, "standard | dsc");
  cmd->add_option("--dsc-alpha", o.dsc_alpha);
  cmd->add_option("--max-faces", o.max_faces);
  cmd->add_option("--max-prompts", o.max_prompts);
  cmd->add_option("-j,--workers", o.workers);
}

// Precedence: flags > environment > config file.
ex::ExperimentConfig resolve_config(const std::string& path, const Overrides& o) {
  ex::ExperimentConfig c = ex::load_config(path);
  ex::apply_environment(c);
  if (o.run_name) c.run_name = *o.run_name;
  if (o.seed) c.seed = *o.seed;
  if (o.manifest) c.manifest = *o.manifest;
  if (o.eval_manifest) c.eval_manifest = *o.eval_manifest;
  if (o.prompts) c.prompts = *o.prompts;
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.encoder_checkpoint) c.encoder_checkpoint = *o.encoder_checkpoint;
  if (o.mapper_checkpoint) c.mapper_checkpoint = *o.mapper_checkpoint;
  if (o.loss_kind) c.train.loss_kind = diffusion::loss_kind_from_string(*o.loss_kind);
  if (o.train_steps) c.train.steps = *o.train_steps;
  if (o.pretrain_steps) c.pretrain.steps = *o.pretrain_steps;
  if (o.num_samples) c.num_samples = *o.num_samples;
  if (o.num_steps) c.inference.num_steps = *o.num_steps;
  if (o.guidance_scale) c.inference.guidance_scale = *o.guidance_scale;
  if (o.generation_mode) c.generation_mode = *o.generation_mode;
  if (o.dsc_alpha) c.inference.dsc_alpha = *o.dsc_alpha;
  if (o.max_faces) c.max_faces = *o.max_faces;
  if (o.max_prompts) c.max_prompts = *o.max_prompts;
  if (o.workers) c.workers = *o.workers;
  c.validate();
  return c;
}

// Shared prefix of the staged verbs: inputs, encoder, frozen suite.
struct Session {
  ex::ExperimentConfig config;
  std::vector<ex::ManifestRecord> records;
  std::vector<ex::ManifestRecord> faces;
  ex::PromptSet prompts;
  std::unique_ptr<ex::RunLog> log;
  ex::EncoderArtifact encoder;
  std::unique_ptr<ex::FrozenSuite> suite;

  explicit Session(ex::ExperimentConfig c) : config(std::move(c)) {
    fs::create_directories(config.run_dir());
    log = std::make_unique<ex::RunLog>(config.run_dir() / "run.log", &std::cerr);
    ex::write_json_file(config.run_dir() / "config.json", config);
    records = ex::load_manifest(config.manifest);
    const auto eval = config.eval_manifest.empty() ? records : ex::load_manifest(config.eval_manifest);
    faces = ex::evaluation_faces(eval, config.max_faces);
    prompts = ex::PromptSet::load(config.prompts);
  }

  void load_encoder() {
    encoder = ex::pretrain_encoder(config, records, *log);
    suite = std::make_unique<ex::FrozenSuite>(config.fixtures, *encoder.encoder);
  }

  ex::MapperArtifact mapper() { return ex::train_mapper(config, records, encoder, *suite, *log); }
};

nlohmann::json provenance(const Session& s, const std::string& mapper_sha = "") {
  nlohmann::json j = {{"run_name", s.config.run_name},
                      {"seed", s.config.seed},
                      {"encoder_sha256", s.encoder.sha256}};
  if (!mapper_sha.empty()) j["mapper_sha256"] = mapper_sha;
  return j;
}

std::vector<evaluation::SampleReport> evaluate(Session& s, ex::MapperArtifact& mapper) {
  const auto generated = ex::generate_images(s.config, s.faces, s.prompts, mapper, *s.suite, *s.log);
  const auto reports = ex::evaluate_images(s.config, s.faces, s.prompts, generated, *s.suite);
  ex::write_evaluation(s.config, generated, reports, provenance(s, mapper.sha256));
  return reports;
}

// "f000_p01_s02" -> "f000_p01"; ids without a sample suffix form their own set.
std::string set_key(const std::string& image_id) {
  const auto pos = image_id.rfind("_s");
  return pos == std::string::npos ? image_id : image_id.substr(0, pos);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Identity-personalized text-to-image toolkit (toy-scale reference pipeline)"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides o;

  auto* pretrain = app.add_subcommand("pretrain-encoder", "train the multi-scale identity encoder");
  auto* train = app.add_subcommand("train-mapper", "train the identity-to-token mapper");
  auto* generate = app.add_subcommand("generate", "generate images for every (face, prompt) pair");
  auto* eval = app.add_subcommand("evaluate", "score generated images, write reports.csv and summary.json");
  auto* analyze = app.add_subcommand("analyze-encoder", "per-layer similarity histograms and AUC");
  auto* run = app.add_subcommand("run", "full pipeline");
  for (auto* cmd : {pretrain, train, generate, eval, analyze, run}) add_common(cmd, config_path, o);

  auto* upper = app.add_subcommand("upper-bound", "best-of-N curve from a reports CSV");
  std::string reports_path;
  std::string upper_out;
  std::vector<int> ns;
  upper->add_option("reports", reports_path, "reports.csv")->required()->check(CLI::ExistingFile);
  upper->add_option("-o,--output-dir", upper_out, "where to write upper_bound.{json,png}")->required();
  upper->add_option("--n", ns, "sample counts (default 1 2 4 8 16)");

  auto* synth = app.add_subcommand("synth-data", "write a procedural face dataset with manifest");
  std::string synth_dir;
  int identities = 32;
  int variations = 8;
  std::uint64_t identity_seed = 7;
  std::uint64_t variation_seed = 11;
  double strength = 0.5;
  synth->add_option("dir", synth_dir)->required();
  synth->add_option("--identities", identities)->check(CLI::PositiveNumber);
  synth->add_option("--variations", variations)->check(CLI::PositiveNumber);
  synth->add_option("--identity-seed", identity_seed);
  synth->add_option("--variation-seed", variation_seed);
  synth->add_option("--strength", strength, "nuisance strength");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      std::cout << ex::write_synthetic_dataset(synth_dir, identities, variations, identity_seed,
                                               variation_seed, strength)
                       .string()
                << '\n';
      return 0;
    }
    if (*upper) {
      const auto reports = evaluation::read_reports_csv(reports_path);
      std::map<std::string, std::vector<evaluation::SampleReport>> sets;
      for (const auto& r : reports) sets[set_key(r.image_id)].push_back(r);
      const auto curve = ns.empty() ? evaluation::upper_bound_curve(sets)
                                    : evaluation::upper_bound_curve(sets, ns);
      plots::PlotSummary summary;
      summary.curve = curve;
      summary.provenance = {{"reports", reports_path}};
      plots::emit_plots(summary, upper_out, [](const std::string& m) { std::cerr << "warning: " << m << '\n'; });
      for (const auto& [n, v] : curve.points) std::cout << n << '\t' << v << '\n';
      return 0;
    }
    if (*run) {
      std::cout << ex::run_experiment(resolve_config(config_path, o), &std::cerr).string() << '\n';
      return 0;
    }

    Session s(resolve_config(config_path, o));
    s.load_encoder();
    if (*pretrain) {
      std::cout << s.encoder.checkpoint.string() << '\n';
    } else if (*train) {
      std::cout << s.mapper().checkpoint.string() << '\n';
    } else if (*generate) {
      auto mapper = s.mapper();
      const auto out = ex::generate_images(s.config, s.faces, s.prompts, mapper, *s.suite, *s.log);
      std::cout << out.samples.size() << " samples, " << out.references.size() << " references in "
                << (s.config.run_dir() / "images").string() << '\n';
    } else if (*eval) {
      auto mapper = s.mapper();
      const auto reports = evaluate(s, mapper);
      const auto summary = evaluation::summarize(reports);
      std::cout << "images " << summary.count << "  hMean " << summary.hmean << "  gMean "
                << summary.gmean << '\n';
    } else if (*analyze) {
      plots::PlotSummary summary;
      summary.distributions = ex::analyze_encoder(*s.encoder.encoder, s.records, s.config.seed, *s.log);
      summary.provenance = provenance(s);
      plots::emit_plots(summary, s.config.run_dir() / "plots",
                        [&](const std::string& m) { s.log->warn("plots", m); });
      for (const auto& d : summary.distributions) {
        std::cout << "layer " << d.layer << "\tAUC " << identity::roc_auc(d) << '\n';
      }
    }
  } catch (const f2d::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
