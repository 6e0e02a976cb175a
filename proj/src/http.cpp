#include "densefuse/http.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <httplib.h>
#include <openssl/evp.h>

#include "densefuse/error.hpp"

namespace densefuse {

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  HttplibTransport(std::string base_url, std::chrono::milliseconds timeout,
                   std::vector<std::pair<std::string, std::string>> headers)
      : timeout_(timeout) {
    // Split "scheme://host:port/prefix" into the client origin and a path prefix.
    const auto scheme_end = base_url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = base_url.find('/', host_start);
    origin_ = base_url.substr(0, path_start);
    if (path_start != std::string::npos) prefix_ = base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    for (auto& [k, v] : headers) headers_.emplace(std::move(k), std::move(v));
  }

  HttpResponse post_json(const std::string& path, const std::string& body) override {
    httplib::Client client(origin_);
    if (!client.is_valid()) return {0, "", "invalid endpoint URL " + origin_};
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    auto res = client.Post(prefix_ + path, headers_, body, "application/json");
    if (!res) return {0, "", httplib::to_string(res.error())};
    return {res->status, res->body, ""};
  }

 private:
  std::string origin_;
  std::string prefix_;
  std::chrono::milliseconds timeout_;
  httplib::Headers headers_;
};

}  // namespace

std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url, std::chrono::milliseconds timeout,
                                                   std::vector<std::pair<std::string, std::string>> headers) {
  if (base_url.empty()) throw ConfigError("url", "endpoint URL is empty");
  return std::make_unique<HttplibTransport>(base_url, timeout, std::move(headers));
}

std::chrono::milliseconds BackoffPolicy::delay(std::int64_t retry, std::mt19937_64& rng) const {
  if (retry < 1) return std::chrono::milliseconds(0);
  const double ceiling =
      std::min(static_cast<double>(cap_ms), static_cast<double>(initial_ms) * std::pow(factor, double(retry - 1)));
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::chrono::milliseconds(static_cast<std::int64_t>(u * ceiling));
}

RetryOutcome post_with_retries(HttpTransport& transport, const std::string& path, const std::string& body,
                               const BackoffPolicy& policy, std::mt19937_64& rng, const SleepFn& sleep) {
  RetryOutcome out;
  for (std::int64_t attempt = 1;; ++attempt) {
    out.attempts = attempt;
    out.response = transport.post_json(path, body);
    const int s = out.response.status;
    if (s >= 200 && s < 300) return out;
    if (!is_retryable_status(s) || attempt > policy.max_retries) return out;
    const auto d = policy.delay(attempt, rng);
    if (sleep) {
      sleep(d);
    } else {
      std::this_thread::sleep_for(d);
    }
  }
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace densefuse
