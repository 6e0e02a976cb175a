#include "densefuse/mock_services.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include <httplib.h>

#include "densefuse/error.hpp"
#include "densefuse/fusion.hpp"

namespace densefuse::mock {

using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[rng() % v.size()];
}

const std::vector<std::string> kTagNames = {
    "Dog",    "cat",     "person",   "tree",    "car",      "building", "sky",    "grass",   "table",  "chair",
    "bottle", "cup",     "book",     "street",  "sign",     "window",   "flower", "mountain", "water", "boat",
    "bicycle", "laptop", "phone",    "poster",  "clock",    "lamp",     "shoe",   "bag",     "road",   "cloud"};

const std::vector<std::string> kClosedLabels = {"person", "car",    "chair", "cup",   "bottle", "dog",
                                                "cat",    "laptop", "book",  "clock", "bench",  "traffic light"};

const std::vector<std::string> kOcrPhrases = {"OPEN 24 HOURS", "SALE", "Main Street", "No Parking", "Cafe",
                                              "EXIT",          "2024", "Welcome",     "Fresh Bread", "STOP"};

json make_box(const std::string& label, std::int64_t w, std::int64_t h, bool small, double conf,
              std::mt19937_64& rng, const char* source) {
  const double frac = small ? 0.003 + 0.012 * unit(rng) : 0.05 + 0.35 * unit(rng);
  const double area = frac * static_cast<double>(w) * static_cast<double>(h);
  const double aspect = 0.5 + unit(rng);
  auto bw = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::sqrt(area * aspect)), 2, w);
  auto bh = std::clamp<std::int64_t>(static_cast<std::int64_t>(area / static_cast<double>(bw)), 2, h);
  const auto x1 = static_cast<std::int64_t>(unit(rng) * static_cast<double>(w - bw));
  const auto y1 = static_cast<std::int64_t>(unit(rng) * static_cast<double>(h - bh));
  return {{"label", label}, {"bbox", {x1, y1, x1 + bw, y1 + bh}}, {"score", conf}, {"source", source}};
}

void configure(httplib::Server& svr) {
  svr.new_task_queue = [] { return new httplib::ThreadPool(64); };
}

int start_server(httplib::Server& svr, std::thread& thread, int port) {
  int bound = port;
  if (port == 0) {
    bound = svr.bind_to_any_port("127.0.0.1");
  } else if (!svr.bind_to_port("127.0.0.1", port)) {
    bound = -1;
  }
  if (bound <= 0) throw IoError("mock server could not bind");
  thread = std::thread([&svr] { svr.listen_after_bind(); });
  for (int i = 0; i < 500 && !svr.is_running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(2));
  return bound;
}

}  // namespace

ExpertServer::ExpertServer() : ExpertServer(Options{}) {}

ExpertServer::ExpertServer(Options opts) : opts_(std::move(opts)), server_(std::make_unique<httplib::Server>()) {
  configure(*server_);
  install_routes();
}

ExpertServer::~ExpertServer() { stop(); }

json ExpertServer::generate(const json& request) {
  const std::string id = request.value("image_id", "");
  const json image = request.value("image", json::object());
  const std::int64_t w = std::max<std::int64_t>(16, image.value("width", 1024));
  const std::int64_t h = std::max<std::int64_t>(16, image.value("height", 1024));
  const auto tasks = request.value("tasks", std::vector<std::string>{});
  json out{{"tags", json::array()}, {"boxes", json::array()}, {"ocr", json::array()}};
  for (const auto& task : tasks) {
    std::mt19937_64 rng(fnv1a(id + "|" + task));
    if (task == "tags") {
      const int n = 3 + static_cast<int>(rng() % 4);
      for (int i = 0; i < n; ++i) {
        out["tags"].push_back({{"name", pick(kTagNames, rng)}, {"score", 0.5 + 0.49 * unit(rng)}});
      }
    } else if (task == "detect_closed") {
      const int n = 2 + static_cast<int>(rng() % 25);
      for (int i = 0; i < n; ++i) {
        const bool small = unit(rng) < 0.35;
        out["boxes"].push_back(make_box(pick(kClosedLabels, rng), w, h, small, 0.2 + 0.79 * unit(rng), rng,
                                        "closed_set"));
      }
    } else if (task == "detect_open") {
      const auto vocab = request.value("vocabulary", std::vector<std::string>{});
      for (std::size_t v = 0; v < std::min<std::size_t>(vocab.size(), 5); ++v) {
        const int n = static_cast<int>(rng() % 3);
        for (int i = 0; i < n; ++i) {
          out["boxes"].push_back(make_box(vocab[v], w, h, unit(rng) < 0.3, 0.2 + 0.7 * unit(rng), rng, "open_set"));
        }
      }
    } else if (task == "ocr") {
      if (unit(rng) < 0.7) {
        const int n = 1 + static_cast<int>(rng() % 3);
        for (int i = 0; i < n; ++i) {
          const double x = unit(rng) * static_cast<double>(w) * 0.6;
          const double y = unit(rng) * static_cast<double>(h) * 0.8;
          out["ocr"].push_back({{"text", pick(kOcrPhrases, rng)},
                                {"bbox", {x, y, x + static_cast<double>(w) * 0.2, y + static_cast<double>(h) * 0.05}},
                                {"score", 0.6 + 0.39 * unit(rng)}});
        }
      }
    }
  }
  return out;
}

void ExpertServer::install_routes() {
  server_->Post("/v1/annotate", [this](const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      res.status = 400;
      res.set_content(R"({"error":"invalid JSON"})", "application/json");
      return;
    }
    for (const auto& t : body.value("tasks", std::vector<std::string>{})) {
      if (opts_.failing_tasks.count(t)) {
        res.status = opts_.failure_status;
        res.set_content(json{{"error", "scripted failure for " + t}}.dump(), "application/json");
        return;
      }
    }
    std::optional<json> out;
    if (opts_.responder) out = opts_.responder(body);
    if (!out) out = generate(body);
    res.set_content(out->dump(), "application/json");
  });
}

int ExpertServer::start(int port) {
  port_ = start_server(*server_, thread_, port);
  return port_;
}

void ExpertServer::serve_forever(const std::string& host, int port) {
  port_ = port;
  if (!server_->listen(host, port)) throw IoError("mock expert server could not listen on port " + std::to_string(port));
}

void ExpertServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string ExpertServer::url() const { return "http://127.0.0.1:" + std::to_string(port_); }

EngineServer::EngineServer() : EngineServer(Options{}) {}

EngineServer::EngineServer(Options opts) : opts_(std::move(opts)), server_(std::make_unique<httplib::Server>()) {
  configure(*server_);
  install_routes();
}

EngineServer::~EngineServer() { stop(); }

std::string EngineServer::synthesize_caption(const std::string& prompt_text, const std::string& image_id) {
  std::mt19937_64 rng(fnv1a(image_id));
  static const std::vector<std::string> adjectives = {"bright", "small", "weathered", "red", "wooden", "large",
                                                      "dark", "smooth", "blue", "tall"};
  static const std::vector<std::string> places = {"left side", "center", "right side", "foreground",
                                                  "background", "upper corner"};
  std::optional<PromptSections> sections;
  for (auto kind : {PromptKind::engine, PromptKind::meta_gpt4v}) {
    try {
      sections = extract_sections(prompt_text, kind);
      break;
    } catch (const FormatError&) {
    }
  }
  std::string caption;
  if (!sections) return "A photograph with several visible objects arranged across the frame.";
  for (std::size_t i = 0; i < sections->box_lines.size() && i < 6; ++i) {
    const auto& line = sections->box_lines[i];
    const auto label = line.substr(0, line.find(':'));
    caption += "A " + pick(adjectives, rng) + " " + label + " sits in the " + pick(places, rng) + " of the image. ";
  }
  if (sections->box_lines.size() > 6) {
    caption += "There are " + std::to_string(sections->box_lines.size() - 6) + " more objects nearby. ";
  }
  for (const auto& text : sections->ocr_lines) caption += "A sign reads \"" + text + "\". ";
  if (caption.empty()) caption = "The scene shows a plain arrangement with soft light and muted colors. ";
  caption += "The overall composition is balanced, with the main subject at the " + pick(places, rng) + ".";
  return caption;
}

void EngineServer::install_routes() {
  server_->Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    const int now = ++in_flight_;
    int prev = high_water_.load();
    while (now > prev && !high_water_.compare_exchange_weak(prev, now)) {
    }
    struct Leave {
      std::atomic<int>& n;
      ~Leave() { --n; }
    } leave{in_flight_};

    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      res.status = 400;
      res.set_content(R"({"error":{"message":"invalid JSON"}})", "application/json");
      return;
    }
    std::string image_id, text;
    if (auto m = body.find("metadata"); m != body.end() && m->is_object()) image_id = m->value("image_id", "");
    try {
      for (const auto& part : body.at("messages").at(0).at("content")) {
        if (part.value("type", "") == "text") text = part.value("text", "");
      }
    } catch (const json::exception&) {
      res.status = 400;
      res.set_content(R"({"error":{"message":"missing messages"}})", "application/json");
      return;
    }

    int status = opts_.default_status;
    {
      std::lock_guard lock(mu_);
      const std::size_t nth = per_id_count_[image_id]++;
      if (global_pos_ < opts_.global_script.size()) {
        status = opts_.global_script[global_pos_++];
      } else if (auto it = opts_.per_id_script.find(image_id); it != opts_.per_id_script.end()) {
        status = nth < it->second.size() ? it->second[nth] : 200;
      }
    }
    if (opts_.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(opts_.delay_ms));
    if (status != 200) {
      res.status = status;
      res.set_content(json{{"error", {{"message", "scripted status " + std::to_string(status)}}}}.dump(),
                      "application/json");
      return;
    }
    std::optional<std::string> reply;
    if (opts_.reply) reply = opts_.reply(body);
    if (!reply) reply = synthesize_caption(text, image_id);
    const json out{{"id", "mock-" + image_id},
                   {"object", "chat.completion"},
                   {"model", body.value("model", "mock")},
                   {"choices", json::array({{{"index", 0},
                                             {"message", {{"role", "assistant"}, {"content", *reply}}},
                                             {"finish_reason", "stop"}}})}};
    res.set_content(out.dump(), "application/json");
  });
}

int EngineServer::start(int port) {
  port_ = start_server(*server_, thread_, port);
  return port_;
}

void EngineServer::serve_forever(const std::string& host, int port) {
  port_ = port;
  if (!server_->listen(host, port)) throw IoError("mock engine server could not listen on port " + std::to_string(port));
}

void EngineServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string EngineServer::url() const { return "http://127.0.0.1:" + std::to_string(port_); }

std::size_t EngineServer::requests_for(const std::string& image_id) const {
  std::lock_guard lock(mu_);
  auto it = per_id_count_.find(image_id);
  return it == per_id_count_.end() ? 0 : it->second;
}

void EngineServer::reset_counters() {
  std::lock_guard lock(mu_);
  requests_ = 0;
  high_water_ = in_flight_.load();
  per_id_count_.clear();
}

}  // namespace densefuse::mock
