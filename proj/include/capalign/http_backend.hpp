#pragma once

// Text-completion endpoint client.
//
// Wire contract: POST <url> with JSON {"prompt": "...", "max_new_tokens": N};
// a 200 response carries JSON {"text": "..."}. The credential, when set, is
// read from CAPALIGN_API_KEY and sent as a bearer token.

#include <chrono>
#include <cstdlib>
#include <optional>
#include <string>

#include <httplib.h>

#include "capalign/llm_align.hpp"

namespace capalign::llm {

inline constexpr const char* kApiKeyEnv = "CAPALIGN_API_KEY";

struct Endpoint {
  std::string scheme_host_port;  // e.g. http://127.0.0.1:8080
  std::string path;              // e.g. /v1/complete
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("backend url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpBackend : public CompletionBackend {
 public:
  explicit HttpBackend(std::string url, std::chrono::milliseconds timeout = std::chrono::seconds(60))
      : url_(std::move(url)), endpoint_(parse_endpoint(url_)), timeout_(timeout) {
    if (const char* key = std::getenv(kApiKeyEnv); key && *key) api_key_ = key;
  }

  std::string name() const override { return "http:" + url_; }

  std::string complete(const CompletionRequest& request) override {
    httplib::Client client(endpoint_.scheme_host_port);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers headers;
    if (api_key_) headers.emplace("Authorization", "Bearer " + *api_key_);

    io::ordered_json body;
    body["prompt"] = request.prompt;
    body["max_new_tokens"] = request.max_new_tokens;
    auto res = client.Post(endpoint_.path, headers, body.dump(), "application/json");
    if (!res) throw TransientBackendError("request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
      throw TransientBackendError("backend returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) throw BackendUnavailable("backend returned HTTP " + std::to_string(res->status));
    io::json reply;
    try {
      reply = io::json::parse(res->body);
    } catch (const io::json::exception&) {
      throw EmptyResponse("backend reply is not JSON");
    }
    if (!reply.is_object() || !reply.contains("text") || !reply["text"].is_string()) {
      throw EmptyResponse("backend reply has no text field");
    }
    return reply["text"].get<std::string>();
  }

 private:
  std::string url_;
  Endpoint endpoint_;
  std::chrono::milliseconds timeout_;
  std::optional<std::string> api_key_;
};

}  // namespace capalign::llm
