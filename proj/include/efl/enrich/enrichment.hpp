#pragma once

#include "efl/data/dataset.hpp"

#include <atomic>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

namespace efl::enrich {

using data::Box;

struct InContextExample {
  std::string action_label;
  std::vector<Box> boxes;
  std::string detailed_description;
};

struct Query {
  std::string action_label;
  std::vector<Box> boxes;
};

enum class Source { curation_llm, tuned_vllm };
std::string to_string(Source s);

struct EnrichedDescription {
  std::string text;
  Source source = Source::curation_llm;
  std::string cache_key;
};

inline constexpr const char* kTemplateVersion = "curation-v1";

// "name: [x0, y0, x1, y1]" per object, two decimals, one object per line.
std::string serialize_boxes(std::span<const Box> boxes);
std::vector<Box> parse_boxes(const std::string& text);

std::string default_system_text();
// Twelve hand-written demonstrations.
std::vector<InContextExample> default_in_context_examples();

// System block, then each example as (label, boxes, description), then the
// query with an empty description slot.
std::string assemble_curation_prompt(const std::string& system_text, std::span<const InContextExample> examples,
                                     const Query& query);

std::string cache_key(const Query& query, const std::string& template_version = kTemplateVersion);

class Backend {
 public:
  virtual ~Backend() = default;
  // Throws Errc::transport on failure.
  virtual std::string complete(const std::string& prompt) = 0;
  virtual std::string id() const = 0;
};

// Recorded completions keyed by the query block at the end of the prompt.
class FixtureBackend final : public Backend {
 public:
  explicit FixtureBackend(const std::filesystem::path& fixture_file);
  FixtureBackend(std::map<std::string, std::string> by_query, std::string id);

  std::string complete(const std::string& prompt) override;
  std::string id() const override { return id_; }
  std::size_t calls() const { return calls_.load(); }

  // Key under which a query's completion is recorded.
  static std::string query_key(const std::string& label, const std::string& serialized_boxes);

 private:
  std::map<std::string, std::string> by_query_;
  std::string id_;
  std::atomic<std::size_t> calls_{0};
};

// Fixture lines {label, boxes, text}.
std::string fixtures_to_jsonl(std::span<const data::ActionInstance> instances, std::span<const std::string> texts);

// Wraps a callable; counts calls.
class ScriptedBackend final : public Backend {
 public:
  explicit ScriptedBackend(std::function<std::string(const std::string&)> fn, std::string id = "scripted")
      : fn_(std::move(fn)), id_(std::move(id)) {}
  std::string complete(const std::string& prompt) override {
    ++calls_;
    return fn_(prompt);
  }
  std::string id() const override { return id_; }
  std::size_t calls() const { return calls_.load(); }

 private:
  std::function<std::string(const std::string&)> fn_;
  std::string id_;
  std::atomic<std::size_t> calls_{0};
};

struct RemoteConfig {
  std::string endpoint;  // http://host:port/path
  std::string token_env = "EFL_LLM_TOKEN";
  double temperature = 0.7;
  int max_tokens = 256;
  int timeout_s = 30;
};

// POSTs {prompt, temperature, max_tokens} as JSON and reads {text}.
class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(RemoteConfig cfg);
  std::string complete(const std::string& prompt) override;
  std::string id() const override { return "remote:" + cfg_.endpoint; }

 private:
  RemoteConfig cfg_;
  std::string host_;
  int port_ = 80;
  std::string path_;
};

struct CacheRecord {
  std::string cache_key;
  std::string label;
  std::string boxes;
  std::string text;
  std::string backend_id;
  std::string timestamp;
};

// Append-only JSONL store; the newest record for a key wins. Readers share a
// lock; a single writer appends. Concurrent misses on one key coalesce.
class EnrichmentCache {
 public:
  EnrichmentCache() = default;  // in-memory only
  explicit EnrichmentCache(std::filesystem::path file);

  std::optional<CacheRecord> lookup(const std::string& key) const;
  void store(const CacheRecord& record);
  std::size_t size() const;

  // Returns the cached record or runs make() once per key, even when several
  // threads miss at the same time. Failures are not cached.
  CacheRecord get_or_compute(const std::string& key, const std::function<CacheRecord()>& make);

 private:
  std::optional<std::filesystem::path> file_;
  mutable std::shared_mutex mu_;
  std::map<std::string, CacheRecord> records_;
  std::mutex inflight_mu_;
  std::map<std::string, std::shared_future<CacheRecord>> inflight_;
};

struct EnrichConfig {
  int max_words = 128;
  std::string template_version = kTemplateVersion;
  std::string system_text = default_system_text();
  std::vector<InContextExample> examples = default_in_context_examples();
};

// Non-empty and at most max_words words; throws Errc::validation otherwise.
void validate_completion(const std::string& text, int max_words);

EnrichedDescription enrich(const Query& query, Backend& backend, EnrichmentCache& cache, const EnrichConfig& cfg = {});

}  // namespace efl::enrich
