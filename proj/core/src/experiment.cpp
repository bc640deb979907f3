#include "f2d/experiment.hpp"

#include "f2d/checkpoint.hpp"
#include "f2d/errors.hpp"
#include "f2d/parallel.hpp"
#include "f2d/plots.hpp"
#include "f2d/synthetic_faces.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

namespace f2d::identity {

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"margin_warmup_steps", c.margin_warmup_steps},
       {"horizontal_flip", c.horizontal_flip}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  const PretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.margin_warmup_steps = j.value("margin_warmup_steps", d.margin_warmup_steps);
  c.horizontal_flip = j.value("horizontal_flip", d.horizontal_flip);
}

}  // namespace f2d::identity

namespace f2d::experiment {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

std::string dataset_digest(const std::vector<ManifestRecord>& records) {
  std::string acc;
  for (const ManifestRecord& r : records) {
    acc += r.identity + ":" + sha256_file(r.image_path) + ":" + sha256_file(r.mask_path) + "\n";
  }
  return sha256_hex(acc);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

std::optional<nlohmann::json> try_read_json(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    return read_json_file(path);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

// Manifest --------------------------------------------------------------------

std::vector<ManifestRecord> load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed manifest record: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("manifest record is not an object", line_no);
    for (const char* key : {"image", "identity", "mask"}) {
      if (!j.contains(key)) {
        throw ParseError(std::string("manifest record is missing \"") + key + "\"", line_no);
      }
    }
    if (!j["image"].is_string() || !j["mask"].is_string()) {
      throw ParseError("image and mask must be path strings", line_no);
    }
    ManifestRecord r;
    const nlohmann::json& id = j["identity"];
    if (id.is_string()) {
      r.identity = id.get<std::string>();
    } else if (id.is_number_integer()) {
      r.identity = std::to_string(id.get<long long>());
    } else {
      throw ParseError("identity must be a string or integer", line_no);
    }
    r.image_path = resolve(base, j["image"].get<std::string>());
    r.mask_path = resolve(base, j["mask"].get<std::string>());
    try {
      r.image = load_png(r.image_path);
      r.mask = load_mask_png(r.mask_path);
    } catch (const std::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    if (r.mask.rows() != r.image.height() || r.mask.cols() != r.image.width()) {
      throw ParseError("mask size differs from image size", line_no);
    }
    out.push_back(std::move(r));
  }
  return out;
}

fs::path write_synthetic_dataset(const fs::path& dir, int identities, int variations,
                                 std::uint64_t identity_seed, std::uint64_t variation_seed,
                                 double strength) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const auto faces = synth::make_dataset(identities, variations, identity_seed, variation_seed,
                                         strength);
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw IoError("cannot write " + manifest.string());
  std::vector<int> seen(static_cast<std::size_t>(identities), 0);
  for (const auto& f : faces) {
    const std::string id = numbered("id", static_cast<std::size_t>(f.identity), 3);
    const std::string stem =
        id + numbered("_v", static_cast<std::size_t>(seen[static_cast<std::size_t>(f.identity)]++), 2);
    save_png(dir / "images" / (stem + ".png"), f.face.image);
    save_mask_png(dir / "masks" / (stem + ".png"), f.face.mask);
    const nlohmann::json rec = {{"image", "images/" + stem + ".png"},
                                {"identity", id},
                                {"mask", "masks/" + stem + ".png"}};
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + manifest.string());
  return manifest;
}

PromptSet PromptSet::parse(const std::string& text) {
  PromptSet set;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    try {
      set.templates.emplace_back(t);
    } catch (const TemplateError& e) {
      throw TemplateError("prompt line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return set;
}

PromptSet PromptSet::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open prompt file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// Configuration ---------------------------------------------------------------

namespace {

void fixtures_to_json(nlohmann::json& j, const FixtureConfig& c) {
  j = {{"seed", c.seed},
       {"text_width", c.text_width},
       {"text_max_length", c.text_max_length},
       {"expression_width", c.expression_width},
       {"denoiser_coupling", c.denoiser_coupling},
       {"recognizers", c.recognizers},
       {"siglip_scale", c.siglip_scale},
       {"siglip_bias", c.siglip_bias}};
}

void fixtures_from_json(const nlohmann::json& j, FixtureConfig& c) {
  const FixtureConfig d;
  c.seed = j.value("seed", d.seed);
  c.text_width = j.value("text_width", d.text_width);
  c.text_max_length = j.value("text_max_length", d.text_max_length);
  c.expression_width = j.value("expression_width", d.expression_width);
  c.denoiser_coupling = j.value("denoiser_coupling", d.denoiser_coupling);
  c.recognizers = j.value("recognizers", d.recognizers);
  c.siglip_scale = j.value("siglip_scale", d.siglip_scale);
  c.siglip_bias = j.value("siglip_bias", d.siglip_bias);
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json fixtures;
  fixtures_to_json(fixtures, c.fixtures);
  j = {{"run_name", c.run_name},
       {"seed", c.seed},
       {"manifest", c.manifest.string()},
       {"eval_manifest", c.eval_manifest.string()},
       {"prompts", c.prompts.string()},
       {"output_dir", c.output_dir.string()},
       {"encoder_checkpoint", c.encoder_checkpoint.string()},
       {"mapper_checkpoint", c.mapper_checkpoint.string()},
       {"encoder", c.encoder},
       {"pretrain", c.pretrain},
       {"mapper_dropout", c.mapper_dropout},
       {"train", c.train},
       {"inference", c.inference},
       {"generation_mode", c.generation_mode},
       {"fixtures", fixtures},
       {"num_samples", c.num_samples},
       {"max_faces", c.max_faces},
       {"max_prompts", c.max_prompts},
       {"class_phrase", c.class_phrase},
       {"reference_template", c.reference_template},
       {"reference_prompt", c.reference_prompt},
       {"upper_bound_ns", c.upper_bound_ns},
       {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  const ExperimentConfig d;
  try {
    c.run_name = j.value("run_name", d.run_name);
    c.seed = j.value("seed", d.seed);
    c.manifest = j.value("manifest", std::string());
    c.eval_manifest = j.value("eval_manifest", std::string());
    c.prompts = j.value("prompts", std::string());
    c.output_dir = j.value("output_dir", d.output_dir.string());
    c.encoder_checkpoint = j.value("encoder_checkpoint", std::string());
    c.mapper_checkpoint = j.value("mapper_checkpoint", std::string());
    c.encoder = j.contains("encoder") ? j["encoder"].get<identity::EncoderConfig>() : d.encoder;
    c.pretrain = j.contains("pretrain") ? j["pretrain"].get<identity::PretrainConfig>() : d.pretrain;
    c.mapper_dropout = j.value("mapper_dropout", d.mapper_dropout);
    c.train = j.contains("train") ? j["train"].get<diffusion::TrainStepConfig>() : d.train;
    c.inference =
        j.contains("inference") ? j["inference"].get<inference::InferenceConfig>() : d.inference;
    c.generation_mode = j.value("generation_mode", d.generation_mode);
    c.fixtures = d.fixtures;
    if (j.contains("fixtures")) fixtures_from_json(j["fixtures"], c.fixtures);
    c.num_samples = j.value("num_samples", d.num_samples);
    c.max_faces = j.value("max_faces", d.max_faces);
    c.max_prompts = j.value("max_prompts", d.max_prompts);
    c.class_phrase = j.value("class_phrase", d.class_phrase);
    c.reference_template = j.value("reference_template", d.reference_template);
    c.reference_prompt = j.value("reference_prompt", d.reference_prompt);
    c.upper_bound_ns = j.value("upper_bound_ns", d.upper_bound_ns);
    c.workers = j.value("workers", d.workers);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
}

void ExperimentConfig::validate() const {
  if (run_name.empty() || run_name.find('/') != std::string::npos) {
    throw ConfigError("run_name must be a non-empty name without '/'");
  }
  if (manifest.empty()) throw ConfigError("manifest path is required");
  if (prompts.empty()) throw ConfigError("prompt file path is required");
  for (const fs::path& p : {manifest, eval_manifest, prompts, encoder_checkpoint, mapper_checkpoint}) {
    if (!p.empty() && !fs::exists(p)) throw ConfigError("path does not exist: " + p.string());
  }
  if (num_samples < 1) throw ConfigError("num_samples must be at least 1");
  if (max_faces < 0 || max_prompts < 0) throw ConfigError("max_faces/max_prompts must be >= 0");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (!(mapper_dropout >= 0.0 && mapper_dropout < 1.0)) throw ConfigError("mapper_dropout must lie in [0, 1)");
  if (generation_mode != "standard" && generation_mode != "dsc") {
    throw ConfigError("generation_mode must be \"standard\" or \"dsc\"");
  }
  if (fixtures.recognizers.size() != 3) throw ConfigError("exactly three recognizer slots are required");
  for (int n : upper_bound_ns) {
    if (n < 1 || n > num_samples) throw ConfigError("upper_bound_ns entries must lie in [1, num_samples]");
  }
  mapping::PromptTemplate{reference_template};
  encoder.validate();
  train.validate();
  inference.validate();
}

std::vector<int> ExperimentConfig::effective_upper_bound_ns() const {
  if (!upper_bound_ns.empty()) return upper_bound_ns;
  std::vector<int> ns;
  for (int n = 1; n <= num_samples; n *= 2) ns.push_back(n);
  return ns;
}

ExperimentConfig load_config(const fs::path& path) {
  ExperimentConfig c = read_json_file(path).get<ExperimentConfig>();
  const fs::path base = path.parent_path();
  c.manifest = resolve(base, c.manifest);
  c.eval_manifest = resolve(base, c.eval_manifest);
  c.prompts = resolve(base, c.prompts);
  c.output_dir = resolve(base, c.output_dir);
  c.encoder_checkpoint = resolve(base, c.encoder_checkpoint);
  c.mapper_checkpoint = resolve(base, c.mapper_checkpoint);
  return c;
}

void apply_environment(ExperimentConfig& config) {
  if (const char* dir = std::getenv(kOutputDirEnv); dir != nullptr && *dir != '\0') {
    config.output_dir = dir;
  }
}

// Frozen models ---------------------------------------------------------------

FrozenSuite::FrozenSuite(const FixtureConfig& c, const identity::IdentityEncoder& encoder)
    : encoder_(&encoder), siglip_scale_(c.siglip_scale), siglip_bias_(c.siglip_bias) {
  const std::uint64_t s = c.seed;
  text_ = std::make_unique<mapping::ToyTextEncoder>(c.text_width, c.text_max_length, 1024,
                                                    derive_seed(s, "text"));
  expression_ = std::make_unique<expression::ToyExpressionExtractor>(
      encoder.config().image_size, c.expression_width, derive_seed(s, "expression"));
  schedule_ = std::make_unique<diffusion::NoiseSchedule>(diffusion::NoiseSchedule::scaled_linear());
  codec_ = std::make_unique<diffusion::HaarBlockCodec>(encoder.config().image_size);
  denoiser_ = std::make_unique<diffusion::StructuredToyDenoiser>(
      codec_->latent_shape(), c.text_max_length, c.text_width, *schedule_,
      derive_seed(s, "denoiser"), c.denoiser_coupling);
  for (const std::string& name : c.recognizers) {
    recognizers_.push_back(std::make_unique<evaluation::ToyFaceRecognizer>(
        name, derive_seed(s, "recognizer/" + name), encoder.config().image_size));
  }
  clip_image_ = std::make_unique<evaluation::ToyImageEmbedder>(derive_seed(s, "clip/image"),
                                                              encoder.config().image_size);
  clip_text_ = std::make_unique<evaluation::ToyTextEmbedder>(derive_seed(s, "clip/text"));
  siglip_image_ = std::make_unique<evaluation::ToyImageEmbedder>(derive_seed(s, "siglip/image"),
                                                                encoder.config().image_size);
  siglip_text_ = std::make_unique<evaluation::ToyTextEmbedder>(derive_seed(s, "siglip/text"));
}

diffusion::FrozenModels FrozenSuite::models() const {
  return {encoder_, expression_.get(), text_.get(), denoiser_.get(), codec_.get(), schedule_.get()};
}

evaluation::EvaluationModels FrozenSuite::metrics() const {
  evaluation::EvaluationModels m;
  for (std::size_t i = 0; i < 3 && i < recognizers_.size(); ++i) m.recognizers[i] = recognizers_[i].get();
  m.clip = {clip_image_.get(), clip_text_.get()};
  m.siglip = {siglip_image_.get(), siglip_text_.get(), siglip_scale_, siglip_bias_};
  return m;
}

// Run log ---------------------------------------------------------------------

RunLog::RunLog(const fs::path& path, std::ostream* echo) : echo_(echo) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open run log " + path.string());
}

void RunLog::write(const char* level, const std::string& stage, const std::string& msg) {
  const std::string line = std::string("[") + level + "] " + stage + ": " + msg + "\n";
  out_ << line;
  out_.flush();
  if (echo_) *echo_ << line << std::flush;
}

void RunLog::info(const std::string& stage, const std::string& msg) { write("info", stage, msg); }
void RunLog::warn(const std::string& stage, const std::string& msg) { write("warn", stage, msg); }
void RunLog::error(const std::string& stage, const std::string& msg) { write("error", stage, msg); }

// Stages ----------------------------------------------------------------------

std::vector<identity::LabeledImage> labeled_images(const std::vector<ManifestRecord>& records,
                                                   int* num_identities) {
  std::map<std::string, int> labels;
  std::vector<identity::LabeledImage> out;
  out.reserve(records.size());
  for (const ManifestRecord& r : records) {
    const auto [it, inserted] = labels.emplace(r.identity, static_cast<int>(labels.size()));
    out.push_back({r.image, it->second});
  }
  if (num_identities) *num_identities = static_cast<int>(labels.size());
  return out;
}

std::vector<ManifestRecord> evaluation_faces(const std::vector<ManifestRecord>& records,
                                             int max_faces) {
  std::set<std::string> seen;
  std::vector<ManifestRecord> out;
  for (const ManifestRecord& r : records) {
    if (max_faces > 0 && static_cast<int>(out.size()) >= max_faces) break;
    if (seen.insert(r.identity).second) out.push_back(r);
  }
  return out;
}

EncoderArtifact load_encoder(const fs::path& checkpoint) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  if (ckpt.kind != "encoder") throw ConfigError(checkpoint.string() + " is not an encoder checkpoint");
  const auto cfg = ckpt.metadata.at("config").get<identity::EncoderConfig>();
  EncoderArtifact a;
  a.encoder = std::make_unique<identity::IdentityEncoder>(cfg, 0);
  load_parameters(ckpt, a.encoder->parameters());
  a.encoder->set_train_steps(ckpt.metadata.value("train_steps", 0LL));
  a.checkpoint = checkpoint;
  a.sha256 = sha256_file(checkpoint);
  a.reused = true;
  return a;
}

EncoderArtifact pretrain_encoder(const ExperimentConfig& config,
                                 const std::vector<ManifestRecord>& records, RunLog& log) {
  if (!config.encoder_checkpoint.empty()) {
    log.info("pretrain-encoder", "loading " + config.encoder_checkpoint.string());
    return load_encoder(config.encoder_checkpoint);
  }
  if (records.empty()) throw EmptyInputError("manifest has no records");
  const std::string key = sha256_hex(nlohmann::json{{"encoder", config.encoder},
                                                    {"pretrain", config.pretrain},
                                                    {"seed", config.seed},
                                                    {"data", dataset_digest(records)}}
                                         .dump());
  const fs::path ckpt_path = config.run_dir() / "checkpoints" / "encoder.ckpt";
  if (fs::exists(ckpt_path)) {
    try {
      if (read_checkpoint(ckpt_path).metadata.value("stage_key", "") == key) {
        log.info("pretrain-encoder", "reusing matching checkpoint");
        return load_encoder(ckpt_path);
      }
    } catch (const Error& e) {
      log.warn("pretrain-encoder", std::string("ignoring unreadable checkpoint: ") + e.what());
    }
  }

  int classes = 0;
  const auto data = labeled_images(records, &classes);
  identity::EncoderConfig ec = config.encoder;
  ec.num_identities = classes;
  ec.validate();
  auto encoder = std::make_unique<identity::IdentityEncoder>(ec, derive_seed(config.seed, "encoder/init"));
  Rng head_rng(derive_seed(config.seed, "encoder/head"));
  identity::MarginHead head(ec.feature_width(), classes, head_rng);
  identity::PretrainConfig pc = config.pretrain;
  pc.seed = derive_seed(config.seed, "encoder/pretrain");

  fs::create_directories(ckpt_path.parent_path());
  std::ofstream csv(config.run_dir() / "encoder_loss.csv", std::ios::binary);
  csv << "step,loss\n";
  log.info("pretrain-encoder", std::to_string(records.size()) + " images, " +
                                   std::to_string(classes) + " identities, " +
                                   std::to_string(pc.steps) + " steps");
  identity::pretrain(*encoder, head, data, pc,
                     [&](int step, double loss) { csv << step << ',' << format_double(loss) << '\n'; });
  encoder->set_train_steps(pc.steps);

  write_checkpoint(ckpt_path, "encoder",
                   {{"stage_key", key},
                    {"config", ec},
                    {"seed", config.seed},
                    {"train_steps", pc.steps}},
                   encoder->parameters());
  EncoderArtifact a;
  a.encoder = std::move(encoder);
  a.checkpoint = ckpt_path;
  a.sha256 = sha256_file(ckpt_path);
  write_json_file(config.run_dir() / "encoder_loss.meta.json",
                  {{"seed", config.seed}, {"encoder_sha256", a.sha256}});
  return a;
}

MapperArtifact load_mapper(const fs::path& checkpoint) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  if (ckpt.kind != "mapper") throw ConfigError(checkpoint.string() + " is not a mapper checkpoint");
  const auto mc = ckpt.metadata.at("config").get<mapping::MapperConfig>();
  MapperArtifact a;
  a.state = mapping::MapperState(mc, ckpt.metadata.at("expression_width").get<int>(), 0);
  load_parameters(ckpt, a.state.parameters());
  a.state.steps = ckpt.metadata.value("steps", 0LL);
  a.checkpoint = checkpoint;
  a.sha256 = sha256_file(checkpoint);
  a.reused = true;
  return a;
}

MapperArtifact train_mapper(const ExperimentConfig& config,
                            const std::vector<ManifestRecord>& records,
                            const EncoderArtifact& encoder, const FrozenSuite& suite,
                            RunLog& log) {
  if (!config.mapper_checkpoint.empty()) {
    log.info("train-mapper", "loading " + config.mapper_checkpoint.string());
    return load_mapper(config.mapper_checkpoint);
  }
  if (records.empty()) throw EmptyInputError("manifest has no records");
  nlohmann::json fixtures;
  fixtures_to_json(fixtures, config.fixtures);
  const std::string key = sha256_hex(nlohmann::json{{"train", config.train},
                                                    {"mapper_dropout", config.mapper_dropout},
                                                    {"fixtures", fixtures},
                                                    {"seed", config.seed},
                                                    {"encoder", encoder.sha256},
                                                    {"data", dataset_digest(records)}}
                                         .dump());
  const fs::path ckpt_path = config.run_dir() / "checkpoints" / "mapper.ckpt";
  if (fs::exists(ckpt_path)) {
    try {
      if (read_checkpoint(ckpt_path).metadata.value("stage_key", "") == key) {
        log.info("train-mapper", "reusing matching checkpoint");
        return load_mapper(ckpt_path);
      }
    } catch (const Error& e) {
      log.warn("train-mapper", std::string("ignoring unreadable checkpoint: ") + e.what());
    }
  }

  mapping::MapperConfig mc;
  mc.input_width = static_cast<int>(encoder.encoder->config().feature_width()) + suite.expression_width();
  mc.output_width = suite.text().width();
  mc.dropout = config.mapper_dropout;
  mapping::MapperState state(mc, suite.expression_width(), derive_seed(config.seed, "mapper/init"));

  std::vector<diffusion::TrainingSample> samples;
  samples.reserve(records.size());
  for (const ManifestRecord& r : records) samples.push_back({r.image, r.mask});

  diffusion::MapperTrainer trainer(state, config.train, suite.models());
  Rng batch_rng(derive_seed(config.seed, "mapper/batches"));
  Rng step_rng(derive_seed(config.seed, "mapper/steps"));
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();

  fs::create_directories(ckpt_path.parent_path());
  std::ofstream csv(config.run_dir() / "train_loss.csv", std::ios::binary);
  csv << "step,loss,grad_norm\n";
  log.info("train-mapper", to_string(config.train.loss_kind) + " loss, " +
                               std::to_string(config.train.steps) + " steps");
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(config.train.batch_size),
                                                  samples.size());
  std::vector<diffusion::TrainingSample> current;
  for (int step = 0; step < config.train.steps; ++step) {
    current.clear();
    while (current.size() < batch) {
      if (cursor == order.size()) {
        shuffle(order, batch_rng);
        cursor = 0;
      }
      current.push_back(samples[order[cursor++]]);
    }
    const diffusion::LossReport r = trainer.step(current, step_rng);
    csv << step << ',' << format_double(r.loss) << ',' << format_double(r.grad_norm) << '\n';
  }

  write_checkpoint(ckpt_path, "mapper",
                   {{"stage_key", key},
                    {"config", mc},
                    {"expression_width", suite.expression_width()},
                    {"steps", state.steps},
                    {"train", config.train},
                    {"seed", config.seed},
                    {"encoder_sha256", encoder.sha256}},
                   state.parameters());
  MapperArtifact a;
  a.state = state;
  a.checkpoint = ckpt_path;
  a.sha256 = sha256_file(ckpt_path);
  write_json_file(config.run_dir() / "train_loss.meta.json",
                  {{"seed", config.seed}, {"encoder_sha256", encoder.sha256}, {"mapper_sha256", a.sha256}});
  return a;
}

GenerationOutputs generate_images(const ExperimentConfig& config,
                                  const std::vector<ManifestRecord>& faces,
                                  const PromptSet& prompts, const MapperArtifact& mapper,
                                  const FrozenSuite& suite, RunLog& log) {
  const std::size_t num_prompts =
      config.max_prompts > 0 ? std::min<std::size_t>(static_cast<std::size_t>(config.max_prompts),
                                                      prompts.templates.size())
                             : prompts.templates.size();
  if (faces.empty()) throw EmptyInputError("no faces to personalize");
  if (num_prompts == 0) throw EmptyInputError("prompt set is empty");

  GenerationOutputs out;
  const fs::path dir = config.run_dir() / "images";
  fs::create_directories(dir);
  const mapping::PromptTemplate reference(config.reference_template);

  for (std::size_t f = 0; f < faces.size(); ++f) {
    GenerationRecord r;
    r.face_index = f;
    r.image_id = numbered("f", f, 3) + "_reference";
    r.template_text = reference.text();
    out.references.push_back(r);
    for (std::size_t p = 0; p < num_prompts; ++p) {
      for (std::size_t s = 0; s < static_cast<std::size_t>(config.num_samples); ++s) {
        GenerationRecord g;
        g.face_index = f;
        g.prompt_index = p;
        g.sample_index = s;
        g.image_id = numbered("f", f, 3) + numbered("_p", p, 2) + numbered("_s", s, 2);
        g.template_text = prompts.templates[p].text();
        out.samples.push_back(g);
      }
    }
  }

  std::vector<GenerationRecord*> jobs;
  for (auto& r : out.references) jobs.push_back(&r);
  for (auto& r : out.samples) jobs.push_back(&r);
  const diffusion::FrozenModels frozen = suite.models();

  parallel_for(jobs.size(), config.workers, [&](std::size_t i) {
    GenerationRecord& r = *jobs[i];
    const bool is_reference = i < out.references.size();
    r.seed = derive_seed(config.seed, "generate/" + r.image_id);
    r.image = dir / (r.image_id + ".png");
    inference::InferenceConfig ic = config.inference;
    ic.seed = r.seed;
    const std::string mode = is_reference ? "standard" : config.generation_mode;
    const nlohmann::json sidecar = {{"image_id", r.image_id},
                                    {"template", r.template_text},
                                    {"face", faces[r.face_index].image_path.string()},
                                    {"run_seed", config.seed},
                                    {"seed", r.seed},
                                    {"generation_mode", mode},
                                    {"inference", ic},
                                    {"mapper_sha256", mapper.sha256}};
    const fs::path side_path = dir / (r.image_id + ".json");
    if (fs::exists(r.image)) {
      if (const auto prev = try_read_json(side_path); prev && *prev == sidecar) {
        r.reused = true;
        return;
      }
    }
    const mapping::PromptTemplate tpl(r.template_text);
    const inference::Generation g =
        mode == "dsc" ? inference::dsc_generate(faces[r.face_index].image, tpl, ic, frozen, mapper.state)
                      : inference::generate(faces[r.face_index].image, tpl, ic, frozen, mapper.state);
    save_png(r.image, g.image);
    write_json_file(side_path, sidecar);
  });

  std::size_t reused = 0;
  for (const GenerationRecord* r : jobs) reused += r->reused ? 1 : 0;
  log.info("generate", std::to_string(jobs.size()) + " images (" + std::to_string(reused) +
                           " reused)");
  return out;
}

std::vector<evaluation::SampleReport> evaluate_images(
    const ExperimentConfig& config, const std::vector<ManifestRecord>& faces,
    const PromptSet& prompts, const GenerationOutputs& generated, const FrozenSuite& suite) {
  const evaluation::EvaluationModels models = suite.metrics();
  std::vector<Image> references(generated.references.size());
  for (std::size_t i = 0; i < references.size(); ++i) {
    references[i] = load_png(generated.references[i].image);
  }
  std::vector<evaluation::SampleReport> reports(generated.samples.size());
  parallel_for(reports.size(), config.workers, [&](std::size_t i) {
    const GenerationRecord& r = generated.samples[i];
    const Image image = load_png(r.image);
    evaluation::SampleInputs in;
    in.image_id = r.image_id;
    in.input_face = &faces[r.face_index].image;
    in.generated = &image;
    in.prompt = prompts.templates[r.prompt_index].substituted(config.class_phrase);
    in.reference = &references[r.face_index];
    in.reference_prompt = config.reference_prompt;
    reports[i] = evaluation::evaluate_sample(in, models);
    reports[i].prompt_id = numbered("p", r.prompt_index, 2);
    reports[i].sample_idx = static_cast<int>(r.sample_index);
  });
  return reports;
}

evaluation::UpperBoundCurve write_evaluation(const ExperimentConfig& config,
                                             const GenerationOutputs& generated,
                                             const std::vector<evaluation::SampleReport>& reports,
                                             const nlohmann::json& provenance) {
  const fs::path dir = config.run_dir();
  evaluation::write_reports_csv(dir / "reports.csv", reports);
  write_json_file(dir / "reports.meta.json", provenance);
  const evaluation::UpperBoundCurve curve = evaluation::upper_bound_curve(
      group_reports(generated.samples, reports), config.effective_upper_bound_ns());
  nlohmann::json j = provenance;
  j["summary"] = evaluation::summarize(reports);
  j["upper_bound"] = curve;
  write_json_file(dir / "summary.json", j);
  return curve;
}

std::map<std::string, std::vector<evaluation::SampleReport>> group_reports(
    const std::vector<GenerationRecord>& samples,
    const std::vector<evaluation::SampleReport>& reports) {
  if (samples.size() != reports.size()) throw ShapeError("one report per sample is required");
  std::map<std::string, std::vector<evaluation::SampleReport>> sets;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    sets[numbered("f", samples[i].face_index, 3) + numbered("_p", samples[i].prompt_index, 2)]
        .push_back(reports[i]);
  }
  return sets;
}

std::vector<identity::SimilarityDistribution> analyze_encoder(
    const identity::IdentityEncoder& encoder, const std::vector<ManifestRecord>& records,
    std::uint64_t seed, RunLog& log) {
  const auto data = labeled_images(records);
  std::vector<identity::SimilarityDistribution> out;
  for (int depth : encoder.config().depth_set) {
    try {
      const identity::Gallery g = identity::build_gallery(encoder, data, depth);
      out.push_back(identity::similarity_distribution(
          g, depth, derive_seed(seed, "analysis/" + std::to_string(depth))));
      log.info("analyze-encoder", "layer " + std::to_string(depth) + " AUC " +
                                      format_double(identity::roc_auc(out.back())));
    } catch (const SamplingError& e) {
      log.warn("analyze-encoder", "layer " + std::to_string(depth) + ": " + e.what());
    }
  }
  return out;
}

fs::path run_experiment(const ExperimentConfig& config, std::ostream* echo) {
  config.validate();
  const fs::path dir = config.run_dir();
  fs::create_directories(dir);
  RunLog log(dir / "run.log", echo);
  write_json_file(dir / "config.json", config);

  auto stage = [&](const std::string& name, auto&& fn) {
    log.info(name, "start");
    try {
      fn();
    } catch (const std::exception& e) {
      log.error(name, e.what());
      throw StageError(name, e.what());
    }
    log.info(name, "done");
  };

  std::vector<ManifestRecord> records;
  std::vector<ManifestRecord> eval_records;
  PromptSet prompts;
  stage("load", [&] {
    records = load_manifest(config.manifest);
    eval_records = config.eval_manifest.empty() ? records : load_manifest(config.eval_manifest);
    prompts = PromptSet::load(config.prompts);
  });

  EncoderArtifact encoder;
  stage("pretrain-encoder", [&] { encoder = pretrain_encoder(config, records, log); });
  const FrozenSuite suite(config.fixtures, *encoder.encoder);

  MapperArtifact mapper;
  stage("train-mapper", [&] { mapper = train_mapper(config, records, encoder, suite, log); });

  const std::vector<ManifestRecord> faces = evaluation_faces(eval_records, config.max_faces);
  GenerationOutputs generated;
  stage("generate", [&] { generated = generate_images(config, faces, prompts, mapper, suite, log); });

  const nlohmann::json provenance = {{"run_name", config.run_name},
                                     {"seed", config.seed},
                                     {"encoder_sha256", encoder.sha256},
                                     {"mapper_sha256", mapper.sha256}};
  plots::PlotSummary plot_data;
  plot_data.provenance = provenance;

  stage("evaluate", [&] {
    const auto reports = evaluate_images(config, faces, prompts, generated, suite);
    plot_data.curve = write_evaluation(config, generated, reports, provenance);
    const evaluation::DatasetSummary summary = evaluation::summarize(reports);
    log.info("evaluate", "hMean " + format_double(summary.hmean) + ", gMean " +
                             format_double(summary.gmean) + " over " +
                             std::to_string(summary.count) + " images");
  });

  stage("analyze-encoder", [&] {
    plot_data.distributions = analyze_encoder(*encoder.encoder, records, config.seed, log);
  });

  stage("plots", [&] {
    plots::emit_plots(plot_data, dir / "plots",
                      [&](const std::string& msg) { log.warn("plots", msg); });
  });
  return dir;
}

}  // namespace f2d::experiment
