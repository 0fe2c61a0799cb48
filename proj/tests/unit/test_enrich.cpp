#include <doctest.h>

#include "efl/enrich/enrichment.hpp"
#include "efl/error.hpp"
#include "efl/io.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <thread>

using namespace efl;
using namespace efl::enrich;
namespace fs = std::filesystem;

namespace {

std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

Query drawer_query() { return {"open drawer", {{"right hand", {0.5, 0.5, 0.7, 0.9}}, {"drawer", {0.2, 0.4, 0.8, 0.8}}}}; }

}  // namespace

TEST_CASE("box serialisation") {
  std::vector<Box> one{{"left hand", {0.10, 0.50, 0.30, 0.90}}};
  CHECK(serialize_boxes(one) == "left hand: [0.10, 0.50, 0.30, 0.90]");
  CHECK(serialize_boxes(std::vector<Box>{}).empty());
  CHECK(parse_boxes("").empty());

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> boxes;
    const int n = 1 + static_cast<int>(rng.index(4));
    for (int i = 0; i < n; ++i) {
      const double x0 = rng.uniform(0, 0.5), y0 = rng.uniform(0, 0.5);
      boxes.push_back({"obj: " + std::to_string(i), {x0, y0, x0 + rng.uniform(0.01, 0.5), y0 + rng.uniform(0.01, 0.5)}});
    }
    const auto back = parse_boxes(serialize_boxes(boxes));
    REQUIRE(back.size() == boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      CHECK(back[i].object_name == boxes[i].object_name);
      for (int c = 0; c < 4; ++c) CHECK(std::abs(back[i].box[c] - boxes[i].box[c]) <= 0.005 + 1e-12);
    }
  }
  CHECK_THROWS_AS(parse_boxes("cup [0.1, 0.2]"), Error);
}

TEST_CASE("curation prompt structure") {
  const auto examples = default_in_context_examples();
  CHECK(examples.size() == 12);
  const Query q = drawer_query();
  const std::vector<InContextExample> one(examples.begin(), examples.begin() + 1);
  const auto p1 = assemble_curation_prompt(default_system_text(), one, q);
  CHECK(count_of(p1, "Action: ") == 2);
  CHECK(p1 == assemble_curation_prompt(default_system_text(), one, q));

  const auto p12 = assemble_curation_prompt(default_system_text(), examples, q);
  CHECK(count_of(p12, "Action: ") == 13);
  CHECK(p12.rfind("Action: ") > p12.rfind("### Example 12"));
  CHECK(p12.substr(p12.rfind("Action: ")).find("open drawer") == 8);
  CHECK(p12.size() >= std::string("Description:").size());
  CHECK(p12.compare(p12.size() - 12, 12, "Description:") == 0);

  CHECK_THROWS_AS(assemble_curation_prompt("sys", std::vector<InContextExample>{}, q), Error);
  CHECK_THROWS_AS(assemble_curation_prompt("sys", one, Query{"  ", {}}), Error);

  // Length grows by the same amount per added example (numbering digits aside).
  std::vector<InContextExample> rep;
  std::vector<std::size_t> lengths;
  for (int k = 1; k <= 12; ++k) {
    rep.push_back(examples[0]);
    lengths.push_back(assemble_curation_prompt("sys", rep, q).size());
  }
  const auto step = lengths[1] - lengths[0];
  for (std::size_t k = 1; k < lengths.size(); ++k) {
    const auto d = lengths[k] - lengths[k - 1];
    CHECK((d == step || d == step + 1));
  }
}

TEST_CASE("cache keys do not collide") {
  std::set<std::string> keys;
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    Query q{"action " + std::to_string(i % 500), {{"hand", {rng.uniform(0, 0.4), 0.1, 0.6, 0.9}}}};
    q.boxes[0].box[1] = 0.01 * (i / 500);
    keys.insert(cache_key(q));
  }
  CHECK(keys.size() == 10000);
  CHECK(cache_key(drawer_query()) == cache_key(drawer_query()));
  CHECK(cache_key(drawer_query(), "v1") != cache_key(drawer_query(), "v2"));
}

TEST_CASE("enrich caches, validates and passes text through") {
  const std::string text = "The user opens the drawer with the right hand";
  ScriptedBackend backend([&](const std::string&) { return text; });
  EnrichmentCache cache;
  const auto d = enrich::enrich(drawer_query(), backend, cache);
  CHECK(d.text == text);
  CHECK(d.cache_key == cache_key(drawer_query()));
  CHECK(d.source == Source::curation_llm);
  CHECK(cache.lookup(d.cache_key)->text == text);
  CHECK(backend.calls() == 1);
  CHECK(enrich::enrich(drawer_query(), backend, cache).text == text);
  CHECK(backend.calls() == 1);

  ScriptedBackend empty([](const std::string&) { return std::string("   "); });
  EnrichmentCache c2;
  try {
    enrich::enrich(drawer_query(), empty, c2);
    FAIL("expected validation error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::validation);
  }
  CHECK(c2.size() == 0);

  std::string long_text;
  for (int i = 0; i < 129; ++i) long_text += "word ";
  ScriptedBackend wordy([&](const std::string&) { return long_text; });
  CHECK_THROWS_AS(enrich::enrich(drawer_query(), wordy, c2), Error);
  CHECK(c2.size() == 0);

  ScriptedBackend down([](const std::string&) -> std::string { throw Error(Errc::transport, "offline"); });
  try {
    enrich::enrich(drawer_query(), down, c2);
    FAIL("expected transport error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::transport);
  }
  CHECK(c2.size() == 0);
  // A later successful call is still possible for the same key.
  CHECK(enrich::enrich(drawer_query(), backend, c2).text == text);
}

TEST_CASE("concurrent misses on one key coalesce") {
  ScriptedBackend slow([](const std::string&) {
    std::this_thread::sleep_for(std::chrono::milliseconds(80));
    return std::string("The hand opens it.");
  });
  EnrichmentCache cache;
  std::vector<std::thread> threads;
  std::vector<std::string> got(8);
  for (int i = 0; i < 8; ++i)
    threads.emplace_back([&, i] { got[static_cast<std::size_t>(i)] = enrich::enrich(drawer_query(), slow, cache).text; });
  for (auto& t : threads) t.join();
  CHECK(slow.calls() == 1);
  for (const auto& g : got) CHECK(g == "The hand opens it.");

  // Distinct keys proceed independently.
  ScriptedBackend echo([](const std::string& p) { return "echo " + std::to_string(p.size()); });
  threads.clear();
  for (int i = 0; i < 6; ++i)
    threads.emplace_back([&, i] { enrich::enrich(Query{"task " + std::to_string(i), {}}, echo, cache); });
  for (auto& t : threads) t.join();
  CHECK(echo.calls() == 6);
}

TEST_CASE("file-backed cache persists and newest record wins") {
  const fs::path dir = fs::temp_directory_path() / "efl_test_cache";
  fs::remove_all(dir);
  const fs::path file = dir / "cache.jsonl";
  {
    EnrichmentCache cache(file);
    ScriptedBackend b([](const std::string&) { return std::string("first"); });
    enrich::enrich(drawer_query(), b, cache);
    cache.store({cache_key(drawer_query()), "open drawer", "", "second", "manual", "2026-01-01T00:00:00Z"});
  }
  EnrichmentCache reloaded(file);
  CHECK(reloaded.lookup(cache_key(drawer_query()))->text == "second");
  const auto line = nlohmann::json::parse(io::read_lines(file).front());
  for (const auto* f : {"cache_key", "label", "boxes", "text", "backend_id", "timestamp"}) CHECK(line.contains(f));
  ScriptedBackend never([](const std::string&) { return std::string("unused"); });
  CHECK(enrich::enrich(drawer_query(), never, reloaded).text == "second");
  CHECK(never.calls() == 0);
  fs::remove_all(dir);
}

TEST_CASE("fixture backend answers from recorded completions") {
  const Query q = drawer_query();
  std::map<std::string, std::string> rec{{FixtureBackend::query_key(q.action_label, serialize_boxes(q.boxes)), "Recorded."}};
  FixtureBackend fx(rec, "fixture:test");
  EnrichmentCache cache;
  CHECK(enrich::enrich(q, fx, cache).text == "Recorded.");
  try {
    enrich::enrich(Query{"unknown", {}}, fx, cache);
    FAIL("expected transport error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::transport);
  }

  data::ActionInstance inst;
  inst.action_label = q.action_label;
  inst.boxes = q.boxes;
  const std::vector<data::ActionInstance> insts{inst};
  const std::vector<std::string> texts{"From file."};
  const fs::path f = fs::temp_directory_path() / "efl_test_fixtures.jsonl";
  io::write_file_atomic(f, fixtures_to_jsonl(insts, texts));
  FixtureBackend from_file(f);
  EnrichmentCache c2;
  CHECK(enrich::enrich(q, from_file, c2).text == "From file.");
  CHECK(from_file.id().rfind("fixture:", 0) == 0);
  fs::remove(f);
}

TEST_CASE("remote backend speaks JSON over http") {
  httplib::Server server;
  std::string seen_auth;
  server.Post("/v1/complete", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    const bool ok = body.contains("prompt") && body.contains("temperature");
    res.set_content(nlohmann::json{{"text", ok ? "Remote text." : ""}}.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("EFL_TEST_TOKEN", "secret", 1);
  RemoteConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/complete";
  cfg.token_env = "EFL_TEST_TOKEN";
  RemoteBackend remote(cfg);
  EnrichmentCache cache;
  CHECK(enrich::enrich(drawer_query(), remote, cache).text == "Remote text.");
  CHECK(seen_auth == "Bearer secret");

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  RemoteBackend broken(cfg);
  try {
    broken.complete("x");
    FAIL("expected transport error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::transport);
  }
  server.stop();
  th.join();

  CHECK_THROWS_AS(RemoteBackend(RemoteConfig{"ftp://x", "T", 0.7, 10, 1}), Error);
}
