#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace densefuse {

// status 0 means no HTTP response (connect failure, timeout, reset).
struct HttpResponse {
  int status = 0;
  std::string body;
  std::string error;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& path, const std::string& body) = 0;
};

// cpp-httplib backed transport. `base_url` is scheme://host[:port][/prefix].
// Safe to share across threads; each call uses its own connection.
std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url, std::chrono::milliseconds timeout,
                                                   std::vector<std::pair<std::string, std::string>> headers = {});

// Timeouts, 429 and 5xx are worth retrying; other statuses are final.
inline bool is_retryable_status(int status) { return status == 0 || status == 429 || status >= 500; }

struct BackoffPolicy {
  std::int64_t initial_ms = 500;
  double factor = 2.0;
  std::int64_t cap_ms = 30'000;
  std::int64_t max_retries = 3;

  // Full jitter: uniform in [0, min(cap, initial * factor^(retry-1))] for retry >= 1.
  std::chrono::milliseconds delay(std::int64_t retry, std::mt19937_64& rng) const;
};

struct RetryOutcome {
  HttpResponse response;
  std::int64_t attempts = 0;
};

using SleepFn = std::function<void(std::chrono::milliseconds)>;

// Issues the call up to 1 + max_retries times, sleeping between retryable failures.
RetryOutcome post_with_retries(HttpTransport& transport, const std::string& path, const std::string& body,
                               const BackoffPolicy& policy, std::mt19937_64& rng, const SleepFn& sleep = {});

std::string base64_encode(std::string_view bytes);

}  // namespace densefuse
