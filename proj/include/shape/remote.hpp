#pragma once

// Chat-completions client used for real LVLM answer generation, winner
// summarisation and judging. POST {base}/v1/chat/completions, bearer token
// from SHAPE_API_KEY. Retries 429 and 5xx with exponential backoff; all
// requests made through one client share an in-flight ceiling.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "shape/core.hpp"
#include "shape/digest.hpp"
#include "shape/rng.hpp"

namespace shape {

inline constexpr const char* kSummaryPrompt =
    "Please provide a comprehensive summary based on the following candidate answers.";

struct RemoteConfig {
  std::string base_url;
  std::string model;
  int timeout_ms = 60000;
  int max_retries = 3;
  int max_in_flight = 4;
  int backoff_base_ms = 500;
  std::optional<double> temperature;  // unset: server default
  std::optional<int> max_tokens;
  std::string api_key;  // empty: taken from SHAPE_API_KEY
  std::uint64_t jitter_seed = 0;
};

inline void validate_remote_config(const RemoteConfig& cfg) {
  if (cfg.base_url.empty()) throw ValidationError("remote.base_url must be non-empty");
  if (cfg.timeout_ms < 1) throw ValidationError("remote.timeout_ms must be positive");
  if (cfg.max_retries < 0) throw ValidationError("remote.max_retries must be >= 0");
  if (cfg.max_in_flight < 1) throw ValidationError("remote.max_in_flight must be >= 1");
  if (cfg.backoff_base_ms < 0) throw ValidationError("remote.backoff_base_ms must be >= 0");
}

/// Failure of a remote call. `status` is the last HTTP status (0 when no
/// response arrived); `attempts` counts requests actually sent.
class RemoteError : public Error {
 public:
  RemoteError(std::string kind, const std::string& what, int status, int attempts)
      : Error(std::move(kind), what + " (status " + std::to_string(status) + ", attempt " +
                                   std::to_string(attempts) + ")"),
        status_(status),
        attempts_(attempts) {}
  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }

 private:
  int status_;
  int attempts_;
};

inline bool is_retryable_status(int status) { return status == 429 || (status >= 500 && status < 600); }

/// base * 2^attempt, scaled by a jitter factor in [0.8, 1.2] from `u` in [0,1).
inline std::chrono::milliseconds backoff_delay(int attempt, int base_ms, double u) {
  const double factor = 0.8 + 0.4 * u;
  const double ms = base_ms * std::ldexp(1.0, std::min(attempt, 30)) * factor;
  return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
}

/// Numbered candidates, one per line, followed by the prompt.
inline std::string build_summary_payload(std::span<const std::string> candidates,
                                         const std::string& prompt) {
  std::string out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out += std::to_string(i + 1) + ". " + candidates[i] + "\n";
  }
  out += prompt;
  return out;
}

struct ChatReply {
  std::string text;
  int attempts = 0;
};

class RemoteClient {
 public:
  explicit RemoteClient(RemoteConfig cfg)
      : cfg_(validated(std::move(cfg))),
        limiter_(cfg_.max_in_flight),
        jitter_(cfg_.jitter_seed) {
    if (cfg_.api_key.empty()) {
      if (const char* key = std::getenv("SHAPE_API_KEY")) cfg_.api_key = key;
    }
    split_url();
  }

  const RemoteConfig& config() const noexcept { return cfg_; }

  /// One user message with arbitrary content (string or content-part array).
  ChatReply chat(const nlohmann::json& user_content) {
    nlohmann::json body = {{"model", cfg_.model},
                           {"messages", nlohmann::json::array({{{"role", "user"},
                                                                {"content", user_content}}})}};
    if (cfg_.temperature) body["temperature"] = *cfg_.temperature;
    if (cfg_.max_tokens) body["max_tokens"] = *cfg_.max_tokens;
    const std::string payload = body.dump();

    int attempts = 0;
    for (int retry = 0;; ++retry) {
      ++attempts;
      const auto [status, response] = post_once(payload, attempts);
      if (status == 200) return ChatReply{parse_reply(response, status, attempts), attempts};
      if (!is_retryable_status(status)) {
        throw RemoteError("http", "non-retryable HTTP status from " + cfg_.base_url, status,
                          attempts);
      }
      if (retry >= cfg_.max_retries) {
        throw RemoteError("http", "retries exhausted against " + cfg_.base_url, status,
                          attempts);
      }
      double u = 0.0;
      {
        std::lock_guard lock(jitter_mu_);
        u = jitter_.uniform();
      }
      std::this_thread::sleep_for(backoff_delay(retry, cfg_.backoff_base_ms, u));
    }
  }

  /// The image goes in as a base64 PNG data URI next to the question text.
  ChatReply generate(std::span<const unsigned char> png_bytes, const std::string& question) {
    if (question.empty()) throw ValidationError("remote_generate needs a non-empty question");
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", question}});
    if (!png_bytes.empty()) {
      content.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:image/png;base64," + base64_encode(png_bytes)}}}});
    }
    return chat(content);
  }

  ChatReply summarize(std::span<const std::string> candidates, const std::string& prompt) {
    if (candidates.empty()) throw ValidationError("remote_summarize needs at least one candidate");
    return chat(build_summary_payload(candidates, prompt));
  }

 private:
  static RemoteConfig validated(RemoteConfig cfg) {
    validate_remote_config(cfg);
    return cfg;
  }

  std::pair<int, std::string> post_once(const std::string& payload, int attempts) {
    limiter_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{limiter_};

    httplib::Client client(scheme_host_port_);
    const auto secs = cfg_.timeout_ms / 1000;
    const auto usecs = (cfg_.timeout_ms % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

    auto res = client.Post(endpoint_, headers, payload, "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout ||
          err == httplib::Error::Write) {
        throw RemoteError("timeout",
                          "request timed out after the " + std::to_string(cfg_.timeout_ms) +
                              " ms deadline",
                          0, attempts);
      }
      throw RemoteError("connection", "request to " + cfg_.base_url + " failed: " +
                                          httplib::to_string(err),
                        0, attempts);
    }
    return {res->status, res->body};
  }

  static std::string parse_reply(const std::string& body, int status, int attempts) {
    try {
      const auto j = nlohmann::json::parse(body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (content.is_string()) return content.get<std::string>();
      if (content.is_array()) {
        std::string text;
        for (const auto& part : content) {
          if (part.value("type", "") == "text") text += part.at("text").get<std::string>();
        }
        return text;
      }
    } catch (const nlohmann::json::exception& e) {
      throw RemoteError("protocol", std::string("malformed chat-completions body: ") + e.what(),
                        status, attempts);
    }
    throw RemoteError("protocol", "malformed chat-completions body: content is neither text nor parts",
                      status, attempts);
  }

  void split_url() {
    std::string url = cfg_.base_url;
    while (!url.empty() && url.back() == '/') url.pop_back();
    const auto scheme_end = url.find("://");
    const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
    endpoint_ = prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, "/v1") == 0
                    ? prefix + "/chat/completions"
                    : prefix + "/v1/chat/completions";
  }

  RemoteConfig cfg_;
  std::counting_semaphore<> limiter_;
  std::mutex jitter_mu_;
  Rng jitter_;
  std::string scheme_host_port_;
  std::string endpoint_;
};

inline std::string remote_generate(RemoteClient& client, std::span<const unsigned char> image,
                                   const std::string& question) {
  return client.generate(image, question).text;
}

inline std::string remote_summarize(RemoteClient& client, std::span<const std::string> candidates,
                                    const std::string& prompt) {
  return client.summarize(candidates, prompt).text;
}

}  // namespace shape
