#include "efl/pipeline/stages.hpp"

#include "efl/data/synthetic.hpp"
#include "efl/enrich/enrichment.hpp"
#include "efl/eval/metrics.hpp"
#include "efl/io.hpp"
#include "efl/vllm/vllm.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <set>

namespace efl::pipeline {

using nn::Tensor;
using data::CuratedPair;
using data::Manifest;
using data::Split;

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::config:
    case Errc::malformed_template:
      return kConfigError;
    case Errc::missing_prerequisite:
      return kMissingPrerequisite;
    case Errc::numeric:
    case Errc::training_diverged:
      return kNumericFailure;
    default:
      return kFailure;
  }
}

const char* code_version() { return "efl-0.1.0"; }

// ---- config ----

RunConfig RunConfig::from(const KeyValueConfig& kv) {
  RunConfig c;
  c.raw = kv;
  c.seed = kv.get_u64("seed", c.seed);
  c.work_dir = kv.get_string("work_dir", c.work_dir.string());
  c.cache_file = kv.get_string("cache_file", (c.work_dir / "cache" / "enrichment.jsonl").string());
  c.resolution = static_cast<int>(kv.get_int("resolution", c.resolution));
  c.text_tokens = static_cast<int>(kv.get_int("N", c.text_tokens));
  c.image_tokens = static_cast<int>(kv.get_int("M", c.image_tokens));
  c.d_model = static_cast<int>(kv.get_int("D", c.d_model));
  c.d_llm = static_cast<int>(kv.get_int("D_llm", c.d_llm));
  c.diffusion_steps = static_cast<int>(kv.get_int("diffusion_steps", c.diffusion_steps));
  c.beta_start = kv.get_double("beta_start", c.beta_start);
  c.beta_end = kv.get_double("beta_end", c.beta_end);
  c.sample_steps = static_cast<int>(kv.get_int("sample_steps", c.sample_steps));
  c.dropout.p_img_only = kv.get_double("dropout_img_only", c.dropout.p_img_only);
  c.dropout.p_cond_only = kv.get_double("dropout_cond_only", c.dropout.p_cond_only);
  c.dropout.p_both = kv.get_double("dropout_both", c.dropout.p_both);
  c.guidance.s_x = kv.get_double("s_x", c.guidance.s_x);
  c.guidance.s_c = kv.get_double("s_c", c.guidance.s_c);
  c.mode = cond::parse_mode(kv.get_string("conditioning_mode", cond::to_string(c.mode)));
  c.test_fraction = kv.get_double("test_fraction", c.test_fraction);
  c.enrich_backend = kv.get_string("enrich_backend", c.enrich_backend);
  c.fixture_file = kv.get_string("fixture_file", (c.work_dir / "raw" / "fixtures.jsonl").string());
  c.enrich_endpoint = kv.get_string("enrich_endpoint", c.enrich_endpoint);
  c.vllm_epochs = static_cast<int>(kv.get_int("vllm_epochs", c.vllm_epochs));
  c.vllm_max_steps = kv.get_int("vllm_max_steps", c.vllm_max_steps);
  c.vllm_lr = kv.get_double("vllm_lr", c.vllm_lr);
  c.generate_max_len = static_cast<int>(kv.get_int("generate_max_len", c.generate_max_len));
  c.ae_steps = static_cast<int>(kv.get_int("ae_steps", c.ae_steps));
  c.ae_lr = kv.get_double("ae_lr", c.ae_lr);
  c.ldm_steps = kv.get_int("ldm_steps", c.ldm_steps);
  c.ldm_batch = static_cast<int>(kv.get_int("ldm_batch", c.ldm_batch));
  c.ldm_lr = kv.get_double("ldm_lr", c.ldm_lr);
  c.finetune_autoencoder = kv.get_bool("finetune_autoencoder", c.finetune_autoencoder);
  c.eval_contrastive_steps = static_cast<int>(kv.get_int("eval_contrastive_steps", c.eval_contrastive_steps));
  c.eval_bins = static_cast<int>(kv.get_int("eval_bins", c.eval_bins));

  EFL_CHECK(c.text_tokens > 0 && c.image_tokens > 0 && c.d_model > 0 && c.d_llm > 0, Errc::config,
            "N, M, D and D_llm must be positive");
  EFL_CHECK(c.resolution >= 16 && c.resolution % 16 == 0, Errc::config, "resolution must be a multiple of 16");
  EFL_CHECK((c.resolution / 16) * (c.resolution / 16) == c.image_tokens, Errc::config,
            "M must equal the number of 16-pixel patches, (resolution/16)^2");
  EFL_CHECK(c.test_fraction > 0.0 && c.test_fraction < 1.0, Errc::config, "test_fraction must lie in (0, 1)");
  EFL_CHECK(c.enrich_backend == "fixture" || c.enrich_backend == "remote", Errc::config,
            "enrich_backend must be fixture or remote");
  EFL_CHECK(c.sample_steps >= 1 && c.sample_steps <= c.diffusion_steps, Errc::config,
            "sample_steps must lie in [1, diffusion_steps]");
  EFL_CHECK(std::isfinite(c.guidance.s_x) && std::isfinite(c.guidance.s_c), Errc::config,
            "guidance scales must be finite");
  EFL_CHECK(c.ldm_batch >= 1 && c.ldm_steps >= 0 && c.ae_steps >= 0, Errc::config, "training budgets must be >= 0");
  c.dropout.validate();
  ldm::NoiseSchedule::linear(c.diffusion_steps, c.beta_start, c.beta_end);
  return c;
}

RunConfig load_run_config(const fs::path& config_file, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  KeyValueConfig kv = config_file.empty() ? KeyValueConfig() : KeyValueConfig::load(config_file);
  if (seed) kv.set("seed", std::to_string(*seed));
  for (const auto& o : overrides) kv.apply_override(o);
  return RunConfig::from(kv);
}

// ---- lock ----

WorkDirLock::WorkDirLock(const fs::path& work_dir) : path_(work_dir / ".efl.lock") {
  fs::create_directories(work_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  EFL_CHECK(fd >= 0, Errc::config,
            "work directory " + work_dir.string() + " is locked by another command (remove " + path_.string() +
                " if no command is running)");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

WorkDirLock::~WorkDirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---- provenance ----

std::string hash_path(const fs::path& p) {
  EFL_CHECK(fs::exists(p), Errc::missing_prerequisite, "missing file " + p.string());
  if (!fs::is_directory(p)) return io::hash_file(p);
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), p).generic_string());
  std::sort(rel.begin(), rel.end());
  std::string acc;
  for (const auto& r : rel) acc += r + ":" + io::hash_file(p / r) + "\n";
  return io::hash_bytes(acc);
}

fs::path Artifact::path_for(const RunConfig& cfg, const std::string& stage) {
  return cfg.work_dir / "artifacts" / (stage + ".json");
}

nlohmann::ordered_json Artifact::to_json(const RunConfig& cfg) const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["code_version"] = code_version();
  j["seed"] = cfg.seed;
  j["config"] = cfg.raw.echo();
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["summary"] = summary;
  return j;
}

namespace {

const std::map<std::string, std::string> kProducer = {
    {"synthesize", "efl synthesize"}, {"preprocess", "efl preprocess"}, {"curate", "efl curate"},
    {"train-vllm", "efl train-vllm"}, {"train-ldm", "efl train-ldm"},   {"generate", "efl generate"}};

std::string rel(const RunConfig& cfg, const fs::path& p) { return fs::relative(p, cfg.work_dir).generic_string(); }

void write_artifact(const RunConfig& cfg, Artifact a, const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs) {
  for (const auto& p : inputs) a.inputs[rel(cfg, p)] = hash_path(p);
  for (const auto& p : outputs) a.outputs[rel(cfg, p)] = hash_path(p);
  io::write_file_atomic(Artifact::path_for(cfg, a.stage), a.to_json(cfg).dump(2) + "\n");
}

void log_start(const RunConfig& cfg, const std::string& stage, std::ostream& log) {
  log << "[" << stage << "] seed " << cfg.seed << " work_dir " << cfg.work_dir.string() << "\n";
  log << "[" << stage << "] config " << cfg.raw.echo().dump() << "\n";
}

Manifest load_manifest(const RunConfig& cfg, Split split) {
  return data::manifest_from_jsonl(io::read_file(cfg.dir("manifests") / (data::to_string(split) + ".jsonl")), split);
}

Image load_frame(const RunConfig& cfg, const std::string& relpath) {
  return load_image(cfg.dir("manifests") / relpath);
}

std::map<std::string, std::string> load_descriptions(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& line : io::read_lines(cfg.dir("curate") / "descriptions.jsonl")) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out[j.at("key").get<std::string>()] = j.at("text").get<std::string>();
  }
  return out;
}

const std::string& description_for(const std::map<std::string, std::string>& d, const CuratedPair& p) {
  const auto it = d.find(p.instance.key());
  EFL_CHECK(it != d.end(), Errc::missing_prerequisite,
            "no curated description for " + p.instance.key() + "; re-run efl curate");
  return it->second;
}

vllm::VllmConfig vllm_config(const RunConfig& cfg) {
  vllm::VllmConfig v;
  v.resolution = cfg.resolution;
  v.d_llm = cfg.d_llm;
  v.text_tokens = cfg.text_tokens;
  v.seed = Rng(cfg.seed).derive("vllm-init").engine()();
  v.validate();
  return v;
}

cond::CondConfig cond_config(const RunConfig& cfg) {
  cond::CondConfig c;
  c.text_tokens = cfg.text_tokens;
  c.image_tokens = cfg.image_tokens;
  c.d_llm = cfg.d_llm;
  c.d_model = cfg.d_model;
  c.seed = Rng(cfg.seed).derive("cond-init").engine()();
  return c;
}

ldm::NoiseSchedule schedule_of(const RunConfig& cfg) {
  return ldm::NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
}

// The text ψ reads: the action label in labels_only mode, else the description.
std::string conditioning_text(cond::ConditioningMode mode, const std::string& label, const std::string& description) {
  return mode == cond::ConditioningMode::labels_only ? label : description;
}

struct Conditioned {
  std::optional<Tensor> h_i;
  std::optional<vllm::TextEmbedding> h_t;
};

Conditioned embeddings_for(const vllm::InstructModel& m, cond::ConditioningMode mode, const Image& x,
                           const std::vector<int>& description_tokens) {
  Conditioned c;
  if (cond::uses_image(mode)) c.h_i = m.extract_image_embedding(x).tokens;
  if (cond::uses_text_embedding(mode)) c.h_t = m.extract_text_embedding(description_tokens);
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Artifact read_artifact(const RunConfig& cfg, const std::string& stage) {
  const fs::path p = Artifact::path_for(cfg, stage);
  const auto it = kProducer.find(stage);
  const std::string cmd = it == kProducer.end() ? stage : it->second;
  EFL_CHECK(fs::exists(p), Errc::missing_prerequisite,
            "stage '" + stage + "' has not run in " + cfg.work_dir.string() + "; run `" + cmd + "` first");
  const auto j = nlohmann::json::parse(io::read_file(p));
  Artifact a;
  a.stage = j.at("stage").get<std::string>();
  a.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  a.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  return a;
}

void require_fresh(const RunConfig& cfg, const std::string& stage) {
  const Artifact a = read_artifact(cfg, stage);
  const auto it = kProducer.find(stage);
  const std::string cmd = it == kProducer.end() ? stage : it->second;
  auto check = [&](const std::map<std::string, std::string>& files, const char* what) {
    for (const auto& [path, hash] : files) {
      const fs::path full = cfg.work_dir / path;
      EFL_CHECK(fs::exists(full), Errc::missing_prerequisite,
                "stage '" + stage + "' " + what + " " + path + " is missing; re-run `" + cmd + "`");
      EFL_CHECK(hash_path(full) == hash, Errc::missing_prerequisite,
                "stage '" + stage + "' is stale (" + what + " " + path + " changed); re-run `" + cmd + "`");
    }
  };
  check(a.inputs, "input");
  check(a.outputs, "output");
}

bool is_test_video(const std::string& video_id, double test_fraction) {
  const std::string h = io::hash_bytes(video_id);
  const std::uint64_t v = std::stoull(h.substr(0, 16), nullptr, 16);
  return static_cast<double>(v % 1000000) / 1e6 < test_fraction;
}

// ---- synthesize ----

void cmd_synthesize(const RunConfig& cfg, std::ostream& log) {
  log_start(cfg, "synthesize", log);
  auto spec = data::SyntheticCorpusSpec::from(cfg.raw);
  spec.seed = cfg.seed;
  const auto scenes = data::make_corpus(spec);
  const fs::path raw = cfg.dir("raw");
  fs::remove_all(raw);
  data::write_raw_store(raw, scenes, spec.resolution);
  std::vector<data::ActionInstance> instances;
  std::vector<std::string> texts;
  for (const auto& s : scenes) {
    instances.push_back(s.instance);
    texts.push_back(s.description);
  }
  io::write_file_atomic(raw / "fixtures.jsonl", enrich::fixtures_to_jsonl(instances, texts));
  Artifact a{"synthesize", {}, {}, {{"instances", scenes.size()}}};
  write_artifact(cfg, a, {},
                 {raw / "instances.jsonl", raw / "frames.jsonl", raw / "descriptions.jsonl", raw / "fixtures.jsonl",
                  raw / "frames"});
  log << "[synthesize] " << scenes.size() << " instances -> " << raw.string() << "\n";
}

// ---- preprocess ----

void cmd_preprocess(const RunConfig& cfg, std::ostream& log) {
  require_fresh(cfg, "synthesize");
  log_start(cfg, "preprocess", log);
  const fs::path raw = cfg.dir("raw");
  const auto instances = data::read_instances(raw);
  std::vector<data::ActionInstance> train, test;
  for (const auto& inst : instances) (is_test_video(inst.video_id, cfg.test_fraction) ? test : train).push_back(inst);
  EFL_CHECK(!train.empty() && !test.empty(), Errc::empty_manifest,
            "the video split left one side empty; adjust test_fraction or n_instances");

  const data::DirectoryFrameSource frames(raw);
  const eval::PerceptualEncoder extractor;
  const data::SharpnessScorer scorer;
  data::PipelineConfig pc = data::PipelineConfig::from(cfg.raw);
  pc.seed = cfg.seed;
  pc.resolution = cfg.resolution;

  const fs::path out = cfg.dir("manifests");
  fs::remove_all(out);
  fs::create_directories(out / "frames");
  std::vector<data::Rejection> rejections;
  nlohmann::ordered_json summary;
  for (Split split : {Split::train, Split::test}) {
    pc.split = split;
    const auto& subset = split == Split::train ? train : test;
    auto result = data::build_manifest(subset, frames, extractor, scorer, pc);
    for (const auto& e : result.manifest.entries) {
      save_image(out / e.input_frame_path, e.input_frame.image);
      save_image(out / e.target_frame_path, e.target_frame.image);
    }
    io::write_file_atomic(out / (data::to_string(split) + ".jsonl"), data::manifest_to_jsonl(result.manifest));
    rejections.insert(rejections.end(), result.rejections.begin(), result.rejections.end());
    summary[data::to_string(split)] = {{"instances", subset.size()}, {"kept", result.manifest.entries.size()}};
    log << "[preprocess] " << data::to_string(split) << ": " << result.manifest.entries.size() << " of "
        << subset.size() << " kept\n";
  }
  io::write_file_atomic(out / "rejections.jsonl", data::rejections_to_jsonl(rejections));
  write_artifact(cfg, Artifact{"preprocess", {}, {}, summary},
                 {raw / "instances.jsonl", raw / "frames.jsonl", raw / "frames"},
                 {out / "train.jsonl", out / "test.jsonl", out / "rejections.jsonl", out / "frames"});
}

// ---- curate ----

void cmd_curate(const RunConfig& cfg, std::ostream& log) {
  require_fresh(cfg, "preprocess");
  log_start(cfg, "curate", log);
  std::unique_ptr<enrich::Backend> backend;
  std::vector<fs::path> inputs = {cfg.dir("manifests") / "train.jsonl", cfg.dir("manifests") / "test.jsonl"};
  if (cfg.enrich_backend == "fixture") {
    EFL_CHECK(fs::exists(cfg.fixture_file), Errc::missing_prerequisite,
              "fixture file " + cfg.fixture_file.string() + " not found; run `efl synthesize` or set fixture_file");
    backend = std::make_unique<enrich::FixtureBackend>(cfg.fixture_file);
    inputs.push_back(cfg.fixture_file);
  } else {
    enrich::RemoteConfig rc;
    rc.endpoint = cfg.enrich_endpoint;
    backend = std::make_unique<enrich::RemoteBackend>(rc);
  }
  fs::create_directories(cfg.cache_file.parent_path());
  enrich::EnrichmentCache cache(cfg.cache_file);

  std::map<std::string, data::ActionInstance> by_key;
  for (const auto& inst : data::read_instances(cfg.dir("raw"))) by_key.emplace(inst.key(), inst);
  inputs.push_back(cfg.dir("raw") / "instances.jsonl");

  std::string out;
  std::size_t n = 0;
  for (Split split : {Split::train, Split::test}) {
    for (const auto& e : load_manifest(cfg, split).entries) {
      const auto it = by_key.find(e.instance.key());
      EFL_CHECK(it != by_key.end(), Errc::missing_prerequisite,
                "instance " + e.instance.key() + " is not in the raw store; re-run `efl preprocess`");
      const auto d = enrich::enrich({it->second.action_label, it->second.boxes}, *backend, cache);
      nlohmann::ordered_json j;
      j["key"] = e.instance.key();
      j["split"] = data::to_string(split);
      j["label"] = e.instance.action_label;
      j["text"] = d.text;
      j["cache_key"] = d.cache_key;
      out += j.dump() + "\n";
      ++n;
    }
  }
  fs::create_directories(cfg.dir("curate"));
  io::write_file_atomic(cfg.dir("curate") / "descriptions.jsonl", out);
  write_artifact(cfg, Artifact{"curate", {}, {}, {{"descriptions", n}, {"backend", backend->id()}}}, inputs,
                 {cfg.dir("curate") / "descriptions.jsonl"});
  log << "[curate] " << n << " descriptions via " << backend->id() << "\n";
}

// ---- train-vllm ----

void cmd_train_vllm(const RunConfig& cfg, std::ostream& log) {
  require_fresh(cfg, "curate");
  log_start(cfg, "train-vllm", log);
  const auto descriptions = load_descriptions(cfg);
  std::vector<vllm::InstructSample> samples;
  for (const auto& e : load_manifest(cfg, Split::train).entries)
    samples.push_back({load_frame(cfg, e.input_frame_path), e.prompt, description_for(descriptions, e)});

  vllm::InstructModel model(vllm_config(cfg));
  vllm::VllmTrainConfig tc;
  tc.lr = cfg.vllm_lr;
  tc.epochs = cfg.vllm_epochs;
  tc.max_steps = cfg.vllm_max_steps;
  tc.seed = cfg.seed;
  vllm::VllmTrainer trainer(model, tc);

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
  double loss = 0.0;
  long step = 0;
  bool done = false;
  for (int epoch = 0; epoch < tc.epochs && !done; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng r = Rng(cfg.seed).derive("vllm-epoch").derive(static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), r.engine());
    for (std::size_t b = 0; b < order.size() && !done; b += bs) {
      std::vector<vllm::InstructSample> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + bs); ++k) batch.push_back(samples[order[k]]);
      loss = trainer.train_step(batch);
      ++step;
      if (step % 25 == 0) log << "[train-vllm] step " << step << " loss " << loss << std::endl;
      done = tc.max_steps > 0 && step >= tc.max_steps;
    }
  }
  fs::create_directories(cfg.dir("checkpoints"));
  const fs::path ckpt = cfg.dir("checkpoints") / "vllm.ckpt";
  model.save(ckpt);
  log << "[train-vllm] " << step << " steps, final loss " << loss << ", " << seconds_since(t0) << " s\n";
  write_artifact(cfg, Artifact{"train-vllm", {}, {}, {{"steps", step}, {"final_loss", eval::round4(loss)}}},
                 {cfg.dir("manifests") / "train.jsonl", cfg.dir("curate") / "descriptions.jsonl"}, {ckpt});
}

// ---- train-ldm ----

void cmd_train_ldm(const RunConfig& cfg, std::ostream& log) {
  require_fresh(cfg, "train-vllm");
  log_start(cfg, "train-ldm", log);
  const auto t0 = std::chrono::steady_clock::now();
  const auto descriptions = load_descriptions(cfg);
  const auto manifest = load_manifest(cfg, Split::train);
  const fs::path vllm_ckpt = cfg.dir("checkpoints") / "vllm.ckpt";
  const auto vl = vllm::InstructModel::load(vllm_ckpt);

  ldm::AutoencoderConfig ac;
  ac.resolution = cfg.resolution;
  ac.seed = Rng(cfg.seed).derive("ae-init").engine()();
  ldm::UNetConfig uc;
  uc.cond_dim = cfg.d_model;
  uc.T = cfg.diffusion_steps;
  uc.beta_start = cfg.beta_start;
  uc.beta_end = cfg.beta_end;
  uc.seed = Rng(cfg.seed).derive("unet-init").engine()();
  ldm::LdmBundle bundle(ac, uc, cond_config(cfg), cfg.mode);
  bundle.conditioner.set_pad_embedding(vl.pad_embedding());

  std::vector<Image> xs, ys;
  for (const auto& e : manifest.entries) {
    xs.push_back(load_frame(cfg, e.input_frame_path));
    ys.push_back(load_frame(cfg, e.target_frame_path));
  }
  std::vector<Image> frames = xs;
  frames.insert(frames.end(), ys.begin(), ys.end());
  ldm::AutoencoderTrainConfig atc;
  atc.steps = cfg.ae_steps;
  atc.lr = cfg.ae_lr;
  atc.seed = cfg.seed;
  const double ae_loss = bundle.ae.train(frames, atc);
  log << "[train-ldm] autoencoder loss " << ae_loss << " latent_scale " << bundle.ae.latent_scale << ", "
      << seconds_since(t0) << " s" << std::endl;

  std::vector<ldm::TrainItem> items;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    const std::string& desc = description_for(descriptions, e);
    ldm::TrainItem it;
    it.key = e.instance.key();
    it.z_input = bundle.ae.encode_latent(xs[i]);
    it.z_target = bundle.ae.encode_latent(ys[i]);
    it.z_input_flip = bundle.ae.encode_latent(hflip(xs[i]));
    it.z_target_flip = bundle.ae.encode_latent(hflip(ys[i]));
    it.text = conditioning_text(cfg.mode, e.instance.action_label, desc);
    auto emb = embeddings_for(vl, cfg.mode, xs[i], vllm::Tokenizer::encode(desc));
    it.h_i = std::move(emb.h_i);
    it.h_t = std::move(emb.h_t);
    if (cfg.finetune_autoencoder) {
      it.x_image = xs[i];
      it.y_image = ys[i];
    }
    items.push_back(std::move(it));
  }

  ldm::LdmTrainConfig tc;
  tc.lr = cfg.ldm_lr;
  tc.batch_size = cfg.ldm_batch;
  tc.steps = cfg.ldm_steps;
  tc.dropout = cfg.dropout;
  tc.mode = cfg.mode;
  tc.seed = cfg.seed;
  tc.finetune_autoencoder = cfg.finetune_autoencoder;
  ldm::LdmTrainer trainer(bundle.unet, bundle.conditioner, schedule_of(cfg), tc, &bundle.ae);
  const Rng batch_rng = Rng(cfg.seed).derive("ldm-batch");
  double loss = 0.0, ema = 0.0;
  for (long step = 0; step < tc.steps; ++step) {
    Rng r = batch_rng.derive(static_cast<std::uint64_t>(step));
    std::vector<ldm::TrainItem> batch;
    for (int b = 0; b < tc.batch_size; ++b) batch.push_back(items[r.index(items.size())]);
    loss = trainer.train_step(batch).loss;
    ema = step == 0 ? loss : 0.98 * ema + 0.02 * loss;
    if ((step + 1) % 100 == 0) log << "[train-ldm] step " << step + 1 << " loss " << loss << " ema " << ema << std::endl;
  }
  const fs::path ckpt = cfg.dir("checkpoints") / "ldm.ckpt";
  bundle.save(ckpt);
  log << "[train-ldm] " << tc.steps << " steps, " << seconds_since(t0) << " s\n";
  write_artifact(cfg,
                 Artifact{"train-ldm",
                          {},
                          {},
                          {{"steps", tc.steps},
                           {"final_loss_ema", eval::round4(ema)},
                           {"autoencoder_loss", eval::round4(ae_loss)}}},
                 {cfg.dir("manifests") / "train.jsonl", cfg.dir("curate") / "descriptions.jsonl", vllm_ckpt}, {ckpt});
}

// ---- generate ----

namespace {

struct Generator {
  const RunConfig& cfg;
  vllm::InstructModel vl;
  ldm::LdmBundle bundle;
  ldm::NoiseSchedule schedule;
  Tensor c_null;

  explicit Generator(const RunConfig& c)
      : cfg(c),
        vl(vllm::InstructModel::load(c.dir("checkpoints") / "vllm.ckpt")),
        bundle(ldm::LdmBundle::load(c.dir("checkpoints") / "ldm.ckpt")),
        schedule(schedule_of(c)),
        c_null(bundle.conditioner.null_conditioning(bundle.mode).matrix.value()) {
    EFL_CHECK(bundle.mode == cfg.mode, Errc::config,
              "checkpoint was trained with conditioning_mode " + cond::to_string(bundle.mode));
  }

  struct Output {
    Image image;
    std::string description;
    std::string sidecar;
  };

  Output run(const std::string& key, const Image& x, const std::string& label, const std::string& prompt) const {
    nn::NoGradGuard guard;
    const auto gen = vl.generate_description(x, prompt, cfg.generate_max_len);
    std::vector<int> toks = gen.tokens;
    if (!toks.empty() && toks.back() == vllm::Tokenizer::kEos) toks.pop_back();
    const auto emb = embeddings_for(vl, bundle.mode, x, toks);
    const Tensor c =
        bundle.conditioner.assemble(conditioning_text(bundle.mode, label, gen.text), emb.h_i, emb.h_t, bundle.mode)
            .matrix.value();
    ldm::SampleConfig sc;
    sc.steps = cfg.sample_steps;
    sc.scales = cfg.guidance;
    const std::uint64_t sample_seed = Rng(cfg.seed).derive("sample").derive(key).engine()();
    Rng rng(sample_seed);
    const Tensor z = ldm::sample_latent(bundle.unet, schedule, bundle.ae.encode_latent(x), c, c_null, sc, rng);
    return {bundle.ae.decode_latent(z), gen.text,
            ldm::sidecar_line({key, sample_seed, sc.steps, sc.scales.s_x, sc.scales.s_c, cond::to_string(bundle.mode)})};
  }
};

std::string slug(const std::string& s) {
  std::string out;
  for (char ch : s) out.push_back(std::isalnum(static_cast<unsigned char>(ch)) ? static_cast<char>(std::tolower(ch)) : '_');
  return out;
}

}  // namespace

void cmd_generate(const RunConfig& cfg, std::ostream& log) {
  require_fresh(cfg, "train-ldm");
  log_start(cfg, "generate", log);
  const auto t0 = std::chrono::steady_clock::now();
  const Generator g(cfg);
  const auto manifest = load_manifest(cfg, Split::test);
  const fs::path out = cfg.dir("generated");
  fs::remove_all(out / "images");
  fs::create_directories(out / "images");
  std::string sidecar, descs;
  for (const auto& e : manifest.entries) {
    const auto r = g.run(e.instance.key(), load_frame(cfg, e.input_frame_path), e.instance.action_label, e.prompt);
    save_image(out / "images" / (data::frame_file_stem(e.instance) + ".ppm"), r.image);
    sidecar += r.sidecar + "\n";
    nlohmann::ordered_json j;
    j["key"] = e.instance.key();
    j["generated_description"] = r.description;
    descs += j.dump() + "\n";
  }
  io::write_file_atomic(out / "sidecar.jsonl", sidecar);
  io::write_file_atomic(out / "descriptions.jsonl", descs);
  log << "[generate] " << manifest.entries.size() << " images, " << seconds_since(t0) << " s\n";
  write_artifact(cfg, Artifact{"generate", {}, {}, {{"images", manifest.entries.size()}}},
                 {cfg.dir("manifests") / "test.jsonl", cfg.dir("checkpoints") / "vllm.ckpt",
                  cfg.dir("checkpoints") / "ldm.ckpt"},
                 {out / "images", out / "sidecar.jsonl", out / "descriptions.jsonl"});
}

void cmd_generate_probe(const RunConfig& cfg, const ProbeRequest& probe, std::ostream& log) {
  require_fresh(cfg, "train-ldm");
  EFL_CHECK(!probe.actions.empty(), Errc::config, "probe needs at least one action");
  EFL_CHECK(fs::exists(probe.frame), Errc::missing_prerequisite, "probe frame " + probe.frame.string() + " not found");
  log_start(cfg, "generate", log);
  const Generator g(cfg);
  Image x = load_image(probe.frame);
  if (image_height(x) != cfg.resolution || image_width(x) != cfg.resolution)
    x = resize_bilinear(x, cfg.resolution, cfg.resolution);
  const fs::path out = probe.out_dir.empty() ? cfg.dir("generated") / "probe" : probe.out_dir;
  fs::create_directories(out);
  const auto templates = data::default_prompt_templates();
  std::string sidecar;
  for (std::size_t i = 0; i < probe.actions.size(); ++i) {
    const std::string& action = probe.actions[i];
    const std::string key = "probe:" + probe.frame.filename().string() + ":" + action;
    const auto r = g.run(key, x, action, data::fill_template(templates[0], action));
    const std::string name = std::to_string(i) + "_" + slug(action);
    save_image(out / (name + ".ppm"), r.image);
    io::write_file_atomic(out / (name + ".json"), r.sidecar + "\n");
    sidecar += r.sidecar + "\n";
    log << "[generate] probe '" << action << "' -> " << (out / (name + ".ppm")).string() << "\n";
  }
  io::write_file_atomic(out / "sidecar.jsonl", sidecar);
}

// ---- evaluate ----

void cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  require_fresh(cfg, "generate");
  log_start(cfg, "evaluate", log);
  const auto t0 = std::chrono::steady_clock::now();
  const auto descriptions = load_descriptions(cfg);
  const auto train = load_manifest(cfg, Split::train);
  const auto test = load_manifest(cfg, Split::test);

  std::vector<Image> bank_images;
  std::vector<std::string> bank_text;
  std::vector<Image> train_frames;
  for (const auto& e : train.entries) {
    bank_images.push_back(load_frame(cfg, e.target_frame_path));
    bank_text.push_back(description_for(descriptions, e));
    train_frames.push_back(load_frame(cfg, e.input_frame_path));
    train_frames.push_back(bank_images.back());
  }
  const std::uint64_t enc_seed = Rng(cfg.seed).derive("eval-encoder").engine()();
  eval::ContrastiveImageEncoder clip(enc_seed);
  eval::ContrastiveConfig cc;
  cc.steps = cfg.eval_contrastive_steps;
  cc.seed = enc_seed;
  clip.train(train_frames, cc);
  auto pe = std::make_shared<eval::PerceptualEncoder>();
  auto ce = std::make_shared<eval::ContrastiveImageEncoder>(clip);
  eval::EvalSuite suite{eval::PerceptualEncoder(), clip, eval::VideoEncoder(clip),
                        eval::NearestCaptioner("blip_b", pe), eval::NearestCaptioner("blip_l", ce),
                        eval::TrigramTextEncoder()};
  for (std::size_t i = 0; i < bank_images.size(); ++i) {
    suite.blip_b.add(bank_images[i], bank_text[i]);
    suite.blip_l.add(bank_images[i], bank_text[i]);
  }

  std::vector<eval::EvalSample> samples;
  for (const auto& e : test.entries) {
    const fs::path gen = cfg.dir("generated") / "images" / (data::frame_file_stem(e.instance) + ".ppm");
    EFL_CHECK(fs::exists(gen), Errc::missing_prerequisite,
              "generated image for " + e.instance.key() + " is missing; re-run `efl generate`");
    samples.push_back({e.instance.key(), e.delta_in + e.delta_out, load_frame(cfg, e.input_frame_path),
                       load_frame(cfg, e.target_frame_path), load_image(gen), description_for(descriptions, e)});
  }
  auto report = eval::metric_report(samples, suite, cfg.eval_bins);
  fs::create_directories(cfg.dir("reports"));
  const fs::path path = cfg.dir("reports") / "metrics.json";
  io::write_file_atomic(path, report.dump(2) + "\n");
  log << "[evaluate] " << samples.size() << " samples, " << seconds_since(t0) << " s\n";
  log << "[evaluate] metrics " << report["metrics"].dump() << "\n";
  write_artifact(cfg, Artifact{"evaluate", {}, {}, {{"n", samples.size()}}},
                 {cfg.dir("manifests") / "train.jsonl", cfg.dir("manifests") / "test.jsonl",
                  cfg.dir("curate") / "descriptions.jsonl", cfg.dir("generated") / "images"},
                 {path});
}

}  // namespace efl::pipeline
