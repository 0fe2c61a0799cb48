#include "efl/data/dataset.hpp"

#include "efl/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace efl::data {

std::string to_string(DatasetTag tag) { return tag == DatasetTag::ego4d_style ? "ego4d_style" : "ek_style"; }

DatasetTag parse_dataset_tag(const std::string& s) {
  if (s == "ego4d_style") return DatasetTag::ego4d_style;
  if (s == "ek_style") return DatasetTag::ek_style;
  throw Error(Errc::invalid_argument, "unknown dataset tag '" + s + "'");
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw Error(Errc::invalid_argument, "unknown split '" + s + "'");
}

void ActionInstance::validate() const {
  EFL_CHECK(t_start < t_end, Errc::degenerate_annotation, key() + ": t_start must precede t_end");
  if (t_pre) EFL_CHECK(*t_pre <= t_start, Errc::degenerate_annotation, key() + ": t_pre after t_start");
  if (t_pnr)
    EFL_CHECK(t_start <= *t_pnr && *t_pnr <= t_end, Errc::degenerate_annotation, key() + ": t_pnr outside action");
  for (const auto& b : boxes) {
    const auto& c = b.box;
    const bool ok = 0.0 <= c[0] && c[0] < c[2] && c[2] <= 1.0 && 0.0 <= c[1] && c[1] < c[3] && c[3] <= 1.0;
    EFL_CHECK(ok, Errc::degenerate_annotation, key() + ": box for '" + b.object_name + "' out of range");
  }
}

std::string ActionInstance::key() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "@%.3f", t_start);
  return video_id + buf;
}

nlohmann::json to_json(const ActionInstance& inst) {
  nlohmann::json j;
  j["video_id"] = inst.video_id;
  j["action_label"] = inst.action_label;
  j["t_start"] = inst.t_start;
  j["t_end"] = inst.t_end;
  j["t_pre"] = inst.t_pre ? nlohmann::json(*inst.t_pre) : nlohmann::json(nullptr);
  j["t_pnr"] = inst.t_pnr ? nlohmann::json(*inst.t_pnr) : nlohmann::json(nullptr);
  j["boxes"] = nlohmann::json::array();
  for (const auto& b : inst.boxes) j["boxes"].push_back({{"name", b.object_name}, {"box", b.box}});
  j["dataset_tag"] = to_string(inst.dataset_tag);
  return j;
}

ActionInstance instance_from_json(const nlohmann::json& j) {
  ActionInstance inst;
  inst.video_id = j.at("video_id").get<std::string>();
  inst.action_label = j.at("action_label").get<std::string>();
  inst.t_start = j.at("t_start").get<double>();
  inst.t_end = j.at("t_end").get<double>();
  if (j.contains("t_pre") && !j["t_pre"].is_null()) inst.t_pre = j["t_pre"].get<double>();
  if (j.contains("t_pnr") && !j["t_pnr"].is_null()) inst.t_pnr = j["t_pnr"].get<double>();
  if (j.contains("boxes"))
    for (const auto& b : j["boxes"]) inst.boxes.push_back({b.at("name").get<std::string>(), b.at("box").get<std::array<double, 4>>()});
  inst.dataset_tag = parse_dataset_tag(j.at("dataset_tag").get<std::string>());
  return inst;
}

std::vector<std::string> default_prompt_templates() {
  return {
      "How do I {action}?",
      "What are the steps to {action}?",
      "Show me how to {action}.",
      "Can you describe how to {action}?",
      "Explain how I should {action}.",
      "What does it look like when I {action}?",
      "Describe the hand motion needed to {action}.",
      "Guide me to {action}.",
      "What should my hands do to {action}?",
      "Tell me how to {action} from here.",
  };
}

PipelineConfig PipelineConfig::from(const KeyValueConfig& kv) {
  PipelineConfig c;
  c.resolution = static_cast<int>(kv.get_int("resolution", c.resolution));
  c.lambda_frac = kv.get_double("lambda_frac", c.lambda_frac);
  c.default_delta_in = kv.get_double("default_delta_in", c.default_delta_in);
  c.sim_lo = kv.get_double("sim_lo", c.sim_lo);
  c.sim_hi = kv.get_double("sim_hi", c.sim_hi);
  c.aesthetic_radius = static_cast<int>(kv.get_int("aesthetic_radius", c.aesthetic_radius));
  c.seed = kv.get_u64("seed", c.seed);
  EFL_CHECK(c.resolution > 0, Errc::config, "resolution must be positive");
  EFL_CHECK(-1.0 <= c.sim_lo && c.sim_lo < c.sim_hi && c.sim_hi <= 1.0, Errc::config, "need -1 <= sim_lo < sim_hi <= 1");
  EFL_CHECK(c.aesthetic_radius >= 0, Errc::config, "aesthetic_radius must be >= 0");
  return c;
}

Offsets compute_frame_offsets(const ActionInstance& inst, double lambda_frac, double default_delta_in) {
  Offsets o;
  if (inst.dataset_tag == DatasetTag::ego4d_style) {
    EFL_CHECK(inst.t_pre.has_value() && inst.t_pnr.has_value(), Errc::annotation_incomplete,
              inst.key() + ": ego4d-style instance needs t_pre and t_pnr");
    o.delta_in = inst.t_start - *inst.t_pre;
    o.delta_out = *inst.t_pnr - inst.t_start;
  } else {
    EFL_CHECK(lambda_frac > 0.0 && lambda_frac < 1.0, Errc::invalid_argument, "lambda_frac must lie in (0,1)");
    o.delta_in = default_delta_in;
    o.delta_out = lambda_frac * (inst.t_end - inst.t_start);
  }
  EFL_CHECK(o.delta_in > 0.0 && o.delta_out > 0.0, Errc::degenerate_annotation,
            inst.key() + ": frame offsets must be strictly positive");
  return o;
}

std::size_t select_best_frame_index(std::span<const FrameRecord> candidates, int center_index, int radius) {
  EFL_CHECK(!candidates.empty(), Errc::invalid_argument, "select_best_frame: no candidate frames");
  EFL_CHECK(radius >= 0, Errc::invalid_argument, "select_best_frame: negative radius");
  const int n = static_cast<int>(candidates.size());
  const int center = std::clamp(center_index, 0, n - 1);
  const int lo = std::max(0, center - radius);
  const int hi = std::min(n - 1, center + radius);
  int best = lo;
  for (int i = lo + 1; i <= hi; ++i) {
    const double s = candidates[static_cast<std::size_t>(i)].aesthetic_score;
    const double b = candidates[static_cast<std::size_t>(best)].aesthetic_score;
    if (s > b || (s == b && std::abs(i - center) < std::abs(best - center))) best = i;
  }
  return static_cast<std::size_t>(best);
}

const FrameRecord& select_best_frame(std::span<const FrameRecord> candidates, int center_index, int radius) {
  return candidates[select_best_frame_index(candidates, center_index, radius)];
}

bool filter_by_similarity(double similarity, double lo, double hi) { return lo <= similarity && similarity <= hi; }

bool filter_by_similarity(const CuratedPair& pair, double lo, double hi) {
  return filter_by_similarity(pair.similarity, lo, hi);
}

double embed_similarity(const FrameRecord& a, const FrameRecord& b, const FeatureExtractor& extractor) {
  EFL_CHECK(a.image.same_shape(b.image), Errc::shape_mismatch, "embed_similarity: frames differ in resolution");
  return cosine_similarity(extractor.features(a.image), extractor.features(b.image));
}

void validate_template(const std::string& tmpl) {
  static const std::string ph = "{action}";
  const auto first = tmpl.find(ph);
  EFL_CHECK(first != std::string::npos, Errc::malformed_template, "template lacks {action}: '" + tmpl + "'");
  EFL_CHECK(tmpl.find(ph, first + 1) == std::string::npos, Errc::malformed_template,
            "template has more than one {action}: '" + tmpl + "'");
}

const std::string& select_prompt_template(std::span<const std::string> templates, Rng& rng) {
  EFL_CHECK(!templates.empty(), Errc::invalid_argument, "no prompt templates");
  for (const auto& t : templates) validate_template(t);
  return templates[rng.index(templates.size())];
}

std::string fill_template(const std::string& tmpl, const std::string& action) {
  validate_template(tmpl);
  std::string out = tmpl;
  out.replace(out.find("{action}"), 8, action);
  return out;
}

std::string frame_file_stem(const ActionInstance& inst) {
  std::string id;
  for (char c : inst.video_id) id.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
  return id + "_" + std::to_string(std::llround(inst.t_start * 1000.0));
}

namespace {

std::size_t nearest_frame(std::span<const FrameRecord> frames, double t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < frames.size(); ++i)
    if (std::abs(frames[i].time - t) < std::abs(frames[best].time - t)) best = i;
  return best;
}

bool instance_less(const ActionInstance& a, const ActionInstance& b) {
  if (a.video_id != b.video_id) return a.video_id < b.video_id;
  return a.t_start < b.t_start;
}

}  // namespace

BuildResult build_manifest(std::span<const ActionInstance> instances, const FrameSource& source,
                           const FeatureExtractor& extractor, const AestheticScorer& scorer,
                           const PipelineConfig& config) {
  std::vector<ActionInstance> ordered(instances.begin(), instances.end());
  std::stable_sort(ordered.begin(), ordered.end(), instance_less);

  BuildResult result;
  result.manifest.split = config.split;
  result.manifest.seed = config.seed;
  std::set<std::string> seen;
  std::set<DatasetTag> tags;
  const Rng base(config.seed);

  for (const auto& inst : ordered) {
    const std::string key = inst.key();
    auto reject = [&](const std::string& reason) { result.rejections.push_back({key, reason}); };
    if (!seen.insert(key).second) {
      reject("duplicate_key");
      continue;
    }
    Offsets off;
    try {
      inst.validate();
      off = compute_frame_offsets(inst, config.lambda_frac, config.default_delta_in);
    } catch (const Error& e) {
      if (e.code() == Errc::annotation_incomplete) {
        reject("annotation_incomplete");
        continue;
      }
      if (e.code() == Errc::degenerate_annotation) {
        reject("degenerate_annotation");
        continue;
      }
      throw;
    }

    std::vector<FrameRecord> frames = source.frames(inst);
    if (frames.empty()) {
      reject("frames_unavailable");
      continue;
    }
    for (auto& f : frames) {
      f.image = resize_bilinear(f.image, config.resolution, config.resolution);
      f.aesthetic_score = scorer.score(f.image);
    }

    const auto in_center = static_cast<int>(nearest_frame(frames, inst.t_start - off.delta_in));
    const auto out_center = static_cast<int>(nearest_frame(frames, inst.t_start + off.delta_out));
    const FrameRecord& in = select_best_frame(frames, in_center, config.aesthetic_radius);
    const FrameRecord& out = select_best_frame(frames, out_center, config.aesthetic_radius);
    const double sim = embed_similarity(in, out, extractor);
    if (sim < config.sim_lo) {
      reject("similarity_low");
      continue;
    }
    if (sim > config.sim_hi) {
      reject("similarity_high");
      continue;
    }

    Rng rng = base.derive(key);
    CuratedPair pair;
    pair.instance = inst;
    pair.input_frame = in;
    pair.target_frame = out;
    pair.delta_in = off.delta_in;
    pair.delta_out = off.delta_out;
    pair.similarity = sim;
    pair.prompt = fill_template(select_prompt_template(config.templates, rng), inst.action_label);
    const std::string stem = frame_file_stem(inst);
    pair.input_frame_path = "frames/" + stem + "_in.ppm";
    pair.target_frame_path = "frames/" + stem + "_out.ppm";
    result.manifest.entries.push_back(std::move(pair));
    tags.insert(inst.dataset_tag);
  }
  EFL_CHECK(!result.manifest.entries.empty(), Errc::empty_manifest,
            "no instance survived curation (" + std::to_string(result.rejections.size()) + " rejected)");
  result.manifest.source_tags.assign(tags.begin(), tags.end());
  return result;
}

Manifest merge_manifests(const Manifest& a, const Manifest& b) {
  EFL_CHECK(a.split == b.split, Errc::split_mismatch, "cannot merge " + to_string(a.split) + " with " + to_string(b.split));
  Manifest out;
  out.split = a.split;
  out.seed = a.seed;
  out.source_tags = a.source_tags;
  for (auto t : b.source_tags)
    if (std::find(out.source_tags.begin(), out.source_tags.end(), t) == out.source_tags.end()) out.source_tags.push_back(t);
  std::set<std::string> keys;
  for (const auto* m : {&a, &b})
    for (const auto& e : m->entries) {
      EFL_CHECK(keys.insert(e.instance.key()).second, Errc::duplicate_key, "duplicate entry " + e.instance.key());
      out.entries.push_back(e);
    }
  std::stable_sort(out.entries.begin(), out.entries.end(),
                   [](const CuratedPair& x, const CuratedPair& y) { return instance_less(x.instance, y.instance); });
  return out;
}

std::string manifest_to_jsonl(const Manifest& m) {
  std::string out;
  for (const auto& e : m.entries) {
    nlohmann::ordered_json j;
    j["video_id"] = e.instance.video_id;
    j["t_start"] = e.instance.t_start;
    j["t_end"] = e.instance.t_end;
    j["action_label"] = e.instance.action_label;
    j["delta_in"] = e.delta_in;
    j["delta_out"] = e.delta_out;
    j["input_frame_path"] = e.input_frame_path;
    j["target_frame_path"] = e.target_frame_path;
    j["similarity"] = e.similarity;
    j["prompt"] = e.prompt;
    j["dataset_tag"] = to_string(e.instance.dataset_tag);
    out += j.dump() + "\n";
  }
  return out;
}

Manifest manifest_from_jsonl(const std::string& text, Split split) {
  Manifest m;
  m.split = split;
  std::istringstream in(text);
  std::string line;
  std::set<DatasetTag> tags;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CuratedPair p;
    p.instance.video_id = j.at("video_id").get<std::string>();
    p.instance.t_start = j.at("t_start").get<double>();
    p.instance.t_end = j.at("t_end").get<double>();
    p.instance.action_label = j.at("action_label").get<std::string>();
    p.instance.dataset_tag = parse_dataset_tag(j.at("dataset_tag").get<std::string>());
    p.delta_in = j.at("delta_in").get<double>();
    p.delta_out = j.at("delta_out").get<double>();
    p.input_frame_path = j.at("input_frame_path").get<std::string>();
    p.target_frame_path = j.at("target_frame_path").get<std::string>();
    p.similarity = j.at("similarity").get<double>();
    p.prompt = j.at("prompt").get<std::string>();
    tags.insert(p.instance.dataset_tag);
    m.entries.push_back(std::move(p));
  }
  m.source_tags.assign(tags.begin(), tags.end());
  return m;
}

std::string rejections_to_jsonl(std::span<const Rejection> rejections) {
  std::string out;
  for (const auto& r : rejections) {
    nlohmann::ordered_json j;
    j["key"] = r.key;
    j["reason"] = r.reason;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace efl::data
