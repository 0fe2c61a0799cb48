#include "efl/enrich/enrichment.hpp"

#include "efl/error.hpp"
#include "efl/io.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <sstream>

namespace efl::enrich {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::ordered_json record_json(const CacheRecord& r) {
  nlohmann::ordered_json j;
  j["cache_key"] = r.cache_key;
  j["label"] = r.label;
  j["boxes"] = r.boxes;
  j["text"] = r.text;
  j["backend_id"] = r.backend_id;
  j["timestamp"] = r.timestamp;
  return j;
}

}  // namespace

std::string to_string(Source s) { return s == Source::curation_llm ? "curation_llm" : "tuned_vllm"; }

std::string serialize_boxes(std::span<const Box> boxes) {
  std::string out;
  for (const auto& b : boxes) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), ": [%.2f, %.2f, %.2f, %.2f]", b.box[0], b.box[1], b.box[2], b.box[3]);
    if (!out.empty()) out += '\n';
    out += b.object_name + buf;
  }
  return out;
}

std::vector<Box> parse_boxes(const std::string& text) {
  std::vector<Box> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto sep = line.rfind(": [");
    EFL_CHECK(sep != std::string::npos && line.back() == ']', Errc::invalid_argument, "malformed box line '" + line + "'");
    Box b;
    b.object_name = line.substr(0, sep);
    const int n = std::sscanf(line.c_str() + sep + 3, "%lf, %lf, %lf, %lf]", &b.box[0], &b.box[1], &b.box[2], &b.box[3]);
    EFL_CHECK(n == 4, Errc::invalid_argument, "malformed box coordinates '" + line + "'");
    out.push_back(b);
  }
  return out;
}

std::string default_system_text() {
  return "You write detailed descriptions of actions seen from a head-mounted camera. Given an action label and "
         "the bounding boxes of the hands and objects involved, describe in one or two sentences what the hands "
         "do, which objects they touch, and how the objects move. Refer to positions using the boxes.";
}

std::vector<InContextExample> default_in_context_examples() {
  return {
      {"open drawer",
       {{"right hand", {0.55, 0.60, 0.75, 0.85}}, {"drawer", {0.30, 0.55, 0.80, 0.80}}},
       "The right hand grips the handle of the drawer in front of the body and pulls it straight out toward the "
       "camera."},
      {"cut onion",
       {{"left hand", {0.20, 0.50, 0.40, 0.75}}, {"right hand", {0.55, 0.45, 0.75, 0.70}}, {"onion", {0.35, 0.55, 0.50, 0.70}}},
       "The left hand holds the onion steady on the board while the right hand moves the knife down through it."},
      {"pick up cup",
       {{"right hand", {0.60, 0.50, 0.78, 0.72}}, {"cup", {0.62, 0.45, 0.74, 0.65}}},
       "The right hand wraps around the cup on the right of the counter and raises it off the surface."},
      {"wash plate",
       {{"left hand", {0.25, 0.45, 0.45, 0.70}}, {"right hand", {0.50, 0.45, 0.70, 0.70}}, {"plate", {0.30, 0.40, 0.65, 0.70}}},
       "Both hands hold the plate under the running tap and the right hand rubs its surface in circles."},
      {"close fridge",
       {{"left hand", {0.10, 0.30, 0.30, 0.60}}, {"fridge door", {0.00, 0.05, 0.45, 0.95}}},
       "The left hand pushes the open fridge door on the left side until it swings shut."},
      {"pour water",
       {{"right hand", {0.50, 0.25, 0.70, 0.50}}, {"bottle", {0.52, 0.20, 0.62, 0.50}}, {"glass", {0.40, 0.50, 0.52, 0.75}}},
       "The right hand tilts the bottle above the glass so water flows down into it."},
      {"stir pot",
       {{"right hand", {0.45, 0.30, 0.65, 0.55}}, {"spoon", {0.45, 0.35, 0.55, 0.65}}, {"pot", {0.30, 0.50, 0.75, 0.90}}},
       "The right hand moves the spoon in slow circles inside the pot at the bottom of the view."},
      {"take knife",
       {{"right hand", {0.62, 0.55, 0.82, 0.80}}, {"knife", {0.60, 0.60, 0.90, 0.66}}},
       "The right hand reaches to the knife lying on the right and lifts it by the handle."},
      {"put down bowl",
       {{"left hand", {0.25, 0.40, 0.45, 0.65}}, {"bowl", {0.28, 0.45, 0.50, 0.68}}},
       "The left hand lowers the bowl and sets it down on the table to the left."},
      {"turn on tap",
       {{"right hand", {0.48, 0.20, 0.64, 0.40}}, {"tap", {0.45, 0.15, 0.58, 0.35}}},
       "The right hand twists the tap handle above the sink until water starts running."},
      {"move pan",
       {{"right hand", {0.55, 0.50, 0.75, 0.75}}, {"pan", {0.30, 0.50, 0.70, 0.85}}},
       "The right hand holds the pan by its handle and slides it to the left across the stove."},
      {"throw paper",
       {{"left hand", {0.20, 0.55, 0.38, 0.80}}, {"paper", {0.22, 0.58, 0.34, 0.70}}, {"bin", {0.05, 0.75, 0.30, 1.00}}},
       "The left hand crumples the paper and drops it into the bin at the lower left."},
  };
}

std::string assemble_curation_prompt(const std::string& system_text, std::span<const InContextExample> examples,
                                     const Query& query) {
  EFL_CHECK(!examples.empty(), Errc::invalid_argument, "curation prompt needs at least one example");
  EFL_CHECK(!trim(query.action_label).empty(), Errc::invalid_argument, "query label is empty");
  std::string out = system_text + "\n";
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    EFL_CHECK(!trim(e.detailed_description).empty(), Errc::invalid_argument, "example description is empty");
    out += "\n### Example " + std::to_string(i + 1) + "\nAction: " + e.action_label + "\nObjects:\n" +
           serialize_boxes(e.boxes) + "\nDescription: " + e.detailed_description + "\n";
  }
  out += "\n### Query\nAction: " + query.action_label + "\nObjects:\n" + serialize_boxes(query.boxes) + "\nDescription:";
  return out;
}

std::string cache_key(const Query& query, const std::string& template_version) {
  return io::hash_bytes(query.action_label + '\x1f' + serialize_boxes(query.boxes) + '\x1f' + template_version);
}

std::string FixtureBackend::query_key(const std::string& label, const std::string& serialized_boxes) {
  return label + "\n" + serialized_boxes;
}

FixtureBackend::FixtureBackend(std::map<std::string, std::string> by_query, std::string id)
    : by_query_(std::move(by_query)), id_(std::move(id)) {}

FixtureBackend::FixtureBackend(const std::filesystem::path& fixture_file) {
  for (const auto& line : io::read_lines(fixture_file)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    by_query_[query_key(j.at("label").get<std::string>(), j.at("boxes").get<std::string>())] = j.at("text").get<std::string>();
  }
  id_ = "fixture:" + io::hash_file(fixture_file).substr(0, 16);
}

std::string FixtureBackend::complete(const std::string& prompt) {
  ++calls_;
  const auto q = prompt.rfind("### Query\nAction: ");
  EFL_CHECK(q != std::string::npos, Errc::transport, "fixture backend: prompt has no query block");
  const auto label_begin = q + std::string("### Query\nAction: ").size();
  const auto label_end = prompt.find('\n', label_begin);
  const auto objects = prompt.find("Objects:\n", label_end);
  const auto desc = prompt.rfind("\nDescription:");
  EFL_CHECK(label_end != std::string::npos && objects != std::string::npos && desc != std::string::npos && desc >= objects,
            Errc::transport, "fixture backend: malformed query block");
  const std::string label = prompt.substr(label_begin, label_end - label_begin);
  const auto boxes_begin = objects + 9;
  const std::string boxes = desc > boxes_begin ? prompt.substr(boxes_begin, desc - boxes_begin) : "";
  const auto it = by_query_.find(query_key(label, boxes));
  EFL_CHECK(it != by_query_.end(), Errc::transport, "fixture backend: no recorded completion for '" + label + "'");
  return it->second;
}

std::string fixtures_to_jsonl(std::span<const data::ActionInstance> instances, std::span<const std::string> texts) {
  EFL_CHECK(instances.size() == texts.size(), Errc::invalid_argument, "one fixture text per instance");
  std::string out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    nlohmann::ordered_json j;
    j["label"] = instances[i].action_label;
    j["boxes"] = serialize_boxes(instances[i].boxes);
    j["text"] = texts[i];
    out += j.dump() + "\n";
  }
  return out;
}

EnrichmentCache::EnrichmentCache(std::filesystem::path file) : file_(std::move(file)) {
  if (!std::filesystem::exists(*file_)) return;
  for (const auto& line : io::read_lines(*file_)) {
    if (trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CacheRecord r{j.at("cache_key"), j.at("label"), j.at("boxes"), j.at("text"), j.value("backend_id", ""),
                  j.value("timestamp", "")};
    records_[r.cache_key] = r;
  }
}

std::optional<CacheRecord> EnrichmentCache::lookup(const std::string& key) const {
  std::shared_lock lock(mu_);
  const auto it = records_.find(key);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

void EnrichmentCache::store(const CacheRecord& record) {
  std::unique_lock lock(mu_);
  if (file_) {
    if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
    std::FILE* f = std::fopen(file_->c_str(), "ab");
    EFL_CHECK(f != nullptr, Errc::io, "cannot append to cache " + file_->string());
    const std::string line = record_json(record).dump() + "\n";
    const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size();
    std::fclose(f);
    EFL_CHECK(ok, Errc::io, "short write to cache " + file_->string());
  }
  records_[record.cache_key] = record;
}

std::size_t EnrichmentCache::size() const {
  std::shared_lock lock(mu_);
  return records_.size();
}

CacheRecord EnrichmentCache::get_or_compute(const std::string& key, const std::function<CacheRecord()>& make) {
  if (auto hit = lookup(key)) return *hit;
  std::promise<CacheRecord> promise;
  std::shared_future<CacheRecord> pending;
  bool owner = false;
  {
    std::lock_guard lock(inflight_mu_);
    if (auto hit = lookup(key)) return *hit;
    const auto it = inflight_.find(key);
    if (it != inflight_.end()) {
      pending = it->second;
    } else {
      pending = promise.get_future().share();
      inflight_.emplace(key, pending);
      owner = true;
    }
  }
  if (!owner) return pending.get();
  try {
    CacheRecord r = make();
    store(r);
    promise.set_value(r);
  } catch (...) {
    promise.set_exception(std::current_exception());
  }
  {
    std::lock_guard lock(inflight_mu_);
    inflight_.erase(key);
  }
  return pending.get();
}

void validate_completion(const std::string& text, int max_words) {
  const std::string t = trim(text);
  EFL_CHECK(!t.empty(), Errc::validation, "completion is empty");
  std::istringstream in(t);
  int words = 0;
  for (std::string w; in >> w;) ++words;
  EFL_CHECK(words <= max_words, Errc::validation,
            "completion has " + std::to_string(words) + " words (limit " + std::to_string(max_words) + ")");
}

EnrichedDescription enrich(const Query& query, Backend& backend, EnrichmentCache& cache, const EnrichConfig& cfg) {
  const std::string key = cache_key(query, cfg.template_version);
  const CacheRecord r = cache.get_or_compute(key, [&] {
    const std::string prompt = assemble_curation_prompt(cfg.system_text, cfg.examples, query);
    std::string text = trim(backend.complete(prompt));
    validate_completion(text, cfg.max_words);
    return CacheRecord{key, query.action_label, serialize_boxes(query.boxes), std::move(text), backend.id(), utc_timestamp()};
  });
  return {r.text, Source::curation_llm, key};
}

}  // namespace efl::enrich
