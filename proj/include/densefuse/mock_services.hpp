#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace httplib {
class Server;
}

namespace densefuse::mock {

// Deterministic stand-in for the vision-expert service (POST /v1/annotate).
// Content depends only on (image_id, task, image size, vocabulary).
class ExpertServer {
 public:
  struct Options {
    std::set<std::string> failing_tasks;  // tasks answered with `failure_status`
    int failure_status = 500;
    // Optional override; return nullopt to fall back to generated content.
    std::function<std::optional<nlohmann::json>(const nlohmann::json& request)> responder;
  };

  ExpertServer();
  explicit ExpertServer(Options opts);
  ~ExpertServer();
  ExpertServer(const ExpertServer&) = delete;
  ExpertServer& operator=(const ExpertServer&) = delete;

  // Binds to 127.0.0.1 (port 0 picks a free one) and serves on a background thread.
  int start(int port = 0);
  void stop();
  // Blocks serving on the calling thread.
  void serve_forever(const std::string& host, int port);

  std::string url() const;
  std::size_t request_count() const { return requests_.load(); }

  static nlohmann::json generate(const nlohmann::json& request);

 private:
  void install_routes();

  Options opts_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> requests_{0};
};

// Scriptable chat-completion endpoint (POST /v1/chat/completions) that records
// request counts and the concurrent-request high-water mark.
class EngineServer {
 public:
  struct Options {
    int delay_ms = 0;
    // Statuses consumed in order by successive requests (any id); 200 once exhausted.
    std::vector<int> global_script;
    // Per image id, consumed by that id's successive requests.
    std::map<std::string, std::vector<int>> per_id_script;
    int default_status = 200;
    // Optional reply override for successful responses.
    std::function<std::optional<std::string>(const nlohmann::json& request)> reply;
  };

  EngineServer();
  explicit EngineServer(Options opts);
  ~EngineServer();
  EngineServer(const EngineServer&) = delete;
  EngineServer& operator=(const EngineServer&) = delete;

  int start(int port = 0);
  void stop();
  void serve_forever(const std::string& host, int port);
  std::string url() const;

  std::size_t request_count() const { return requests_.load(); }
  int max_concurrency() const { return high_water_.load(); }
  std::size_t requests_for(const std::string& image_id) const;
  void reset_counters();

  // Deterministic multi-sentence caption derived from the prompt sections.
  static std::string synthesize_caption(const std::string& prompt_text, const std::string& image_id);

 private:
  void install_routes();

  Options opts_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> requests_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> high_water_{0};
  mutable std::mutex mu_;
  std::size_t global_pos_ = 0;
  std::map<std::string, std::size_t> per_id_count_;
};

}  // namespace densefuse::mock
