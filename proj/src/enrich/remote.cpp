#include "efl/enrich/enrichment.hpp"

#include "efl/error.hpp"

#include <httplib.h>

#include <cstdlib>
#include <regex>

namespace efl::enrich {

RemoteBackend::RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) {
  static const std::regex re(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  EFL_CHECK(std::regex_match(cfg_.endpoint, m, re), Errc::config,
            "remote endpoint must look like http://host[:port]/path, got '" + cfg_.endpoint + "'");
  host_ = m[1].str();
  port_ = m[2].matched ? std::stoi(m[2].str()) : 80;
  path_ = m[3].matched ? m[3].str() : "/";
}

std::string RemoteBackend::complete(const std::string& prompt) {
  httplib::Client client(host_, port_);
  client.set_connection_timeout(cfg_.timeout_s, 0);
  client.set_read_timeout(cfg_.timeout_s, 0);
  httplib::Headers headers;
  if (const char* token = std::getenv(cfg_.token_env.c_str()); token != nullptr && *token != '\0')
    headers.emplace("Authorization", std::string("Bearer ") + token);
  const nlohmann::json body = {{"prompt", prompt}, {"temperature", cfg_.temperature}, {"max_tokens", cfg_.max_tokens}};
  const auto res = client.Post(path_, headers, body.dump(), "application/json");
  EFL_CHECK(static_cast<bool>(res), Errc::transport, "remote backend: " + httplib::to_string(res.error()));
  EFL_CHECK(res->status == 200, Errc::transport, "remote backend: HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body).at("text").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::transport, std::string("remote backend: bad response body: ") + e.what());
  }
}

}  // namespace efl::enrich
