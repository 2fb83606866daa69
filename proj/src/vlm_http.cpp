// SPDX-License-Identifier: Apache-2.0
#include <httplib.h>
#include <json.hpp>

#include "ehicl/retrieval.hpp"

namespace ehicl {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

SplitUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("VLM base URL lacks a scheme: '" + url + "'");
  const auto path = url.find('/', scheme + 3);
  SplitUrl out{url.substr(0, path), path == std::string::npos ? "" : url.substr(path)};
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

}  // namespace

HttpVlmClient::HttpVlmClient(HttpVlmOptions options) : options_(std::move(options)) {
  split_url(options_.base_url);
}

std::string HttpVlmClient::request_body(const HttpVlmOptions& options, const VlmRequest& request) {
  nlohmann::json messages = nlohmann::json::array();
  if (!request.system_prompt.empty()) messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
  messages.push_back({{"role", "user"},
                      {"content",
                       {{{"type", "text"}, {"text", request.user_prompt}},
                        {{"type", "image_url"}, {"image_url", {{"url", request.image_ref}}}}}}});
  return nlohmann::json{{"model", options.model}, {"messages", messages}, {"temperature", 0}}.dump();
}

std::string HttpVlmClient::parse_reply(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    for (const auto& part : content) {
      if (part.value("type", "") == "text") return part.at("text").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("VLM reply is not a chat completion: ") + e.what());
  }
  throw Error("VLM reply carries no text segment");
}

VlmResponse HttpVlmClient::complete(const VlmRequest& request) {
  const SplitUrl url = split_url(options_.base_url);
  const std::string endpoint = url.origin + url.prefix + "/chat/completions";
  httplib::Client cli(url.origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);
  const std::string body = request_body(options_, request);

  std::string last_error;
  for (int attempt = 0; attempt <= options_.retries; ++attempt) {
    auto res = cli.Post(url.prefix + "/chat/completions", headers, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw TransportError(endpoint, "HTTP " + std::to_string(res->status) + ": " + res->body);
    try {
      return {parse_reply(res->body)};
    } catch (const Error& e) {
      throw TransportError(endpoint, e.what());
    }
  }
  throw TransportError(endpoint, last_error);
}

}  // namespace ehicl
