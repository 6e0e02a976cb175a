#include "densefuse/captioner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "densefuse/error.hpp"
#include "densefuse/jsonl.hpp"
#include "densefuse/stats.hpp"

namespace densefuse {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(FailureClass c) { return c == FailureClass::permanent ? "permanent" : "transient"; }

namespace {

std::string mime_for(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

}  // namespace

std::string image_url_for(const std::string& image_ref) {
  if (image_ref.rfind("http://", 0) == 0 || image_ref.rfind("https://", 0) == 0 ||
      image_ref.rfind("data:", 0) == 0) {
    return image_ref;
  }
  std::error_code ec;
  const fs::path p = image_ref.rfind("file://", 0) == 0 ? fs::path(image_ref.substr(7)) : fs::path(image_ref);
  if (!image_ref.empty() && fs::is_regular_file(p, ec)) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return "data:" + mime_for(p) + ";base64," + base64_encode(ss.str());
  }
  return image_ref;
}

std::optional<std::string> completion_text(const std::string& body) {
  try {
    const auto j = json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) return std::nullopt;
    return content.get<std::string>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

json EngineClient::request_body(const std::string& image_id, const std::string& text,
                                const std::string& image_ref) const {
  json content = json::array({{{"type", "text"}, {"text", text}}});
  if (!image_ref.empty()) {
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url_for(image_ref)}}}});
  }
  return {{"model", model_},
          {"messages", json::array({{{"role", "user"}, {"content", std::move(content)}}})},
          {"metadata", {{"image_id", image_id}}}};
}

CaptionOutcome EngineClient::request_caption(const FusionPrompt& prompt, std::mt19937_64& rng) const {
  const auto body = request_body(prompt.image_id, prompt.text, prompt.image_ref).dump();
  const auto start = std::chrono::steady_clock::now();
  auto outcome = post_with_retries(transport_, "/v1/chat/completions", body, policy_, rng);
  const auto elapsed =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
  const auto& res = outcome.response;

  CaptionFailure failure;
  failure.image_id = prompt.image_id;
  failure.http_status = res.status;
  failure.attempt_count = outcome.attempts;
  failure.prompt_kind = prompt.kind;

  if (res.status >= 200 && res.status < 300) {
    auto text = completion_text(res.body);
    if (text && !text->empty()) {
      CaptionRecord r;
      r.image_id = prompt.image_id;
      r.caption = std::move(*text);
      r.engine_id = model_;
      r.latency_ms = elapsed;
      r.attempt_count = outcome.attempts;
      r.prompt_kind = prompt.kind;
      r.word_count = count_words(r.caption);
      return r;
    }
    failure.error_class = FailureClass::permanent;
    failure.message = "response has no caption text";
    return failure;
  }
  if (is_retryable_status(res.status)) {
    failure.error_class = FailureClass::transient;
    failure.message = res.status == 0 ? "no response: " + res.error : "HTTP " + std::to_string(res.status);
    failure.message += " after " + std::to_string(outcome.attempts) + " attempts";
  } else {
    failure.error_class = FailureClass::permanent;
    failure.message = "HTTP " + std::to_string(res.status);
  }
  return failure;
}

std::string EngineClient::complete(const std::string& image_id, const std::string& text,
                                   const std::string& image_ref, std::mt19937_64& rng) const {
  FusionPrompt p;
  p.image_id = image_id;
  p.image_ref = image_ref;
  p.text = text;
  auto outcome = request_caption(p, rng);
  if (auto* f = std::get_if<CaptionFailure>(&outcome)) {
    throw Error("engine call for \"" + image_id + "\" failed (" + to_string(f->error_class) + "): " + f->message);
  }
  return std::get<CaptionRecord>(outcome).caption;
}

json caption_to_json(const CaptionRecord& r) {
  return {{"image_id", r.image_id},     {"caption", r.caption},        {"engine_id", r.engine_id},
          {"latency_ms", r.latency_ms}, {"attempts", r.attempt_count}, {"kind", to_string(r.prompt_kind)},
          {"words", r.word_count}};
}

CaptionRecord caption_from_json(const json& j) {
  CaptionRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.engine_id = j.at("engine_id").get<std::string>();
  r.latency_ms = j.at("latency_ms").get<std::int64_t>();
  r.attempt_count = j.at("attempts").get<std::int64_t>();
  r.prompt_kind = prompt_kind_from_string(j.value("kind", "engine"));
  r.word_count = j.value("words", count_words(r.caption));
  return r;
}

json failure_to_json(const CaptionFailure& f) {
  return {{"image_id", f.image_id},      {"error_class", to_string(f.error_class)},
          {"http_status", f.http_status}, {"message", f.message},
          {"attempts", f.attempt_count},  {"kind", to_string(f.prompt_kind)}};
}

CaptionFailure failure_from_json(const json& j) {
  CaptionFailure f;
  f.image_id = j.at("image_id").get<std::string>();
  const auto cls = j.at("error_class").get<std::string>();
  if (cls != "permanent" && cls != "transient") throw FormatError("unknown error_class \"" + cls + "\"");
  f.error_class = cls == "permanent" ? FailureClass::permanent : FailureClass::transient;
  f.http_status = j.value("http_status", 0);
  f.message = j.value("message", "");
  f.attempt_count = j.at("attempts").get<std::int64_t>();
  f.prompt_kind = prompt_kind_from_string(j.value("kind", "engine"));
  return f;
}

fs::path failures_path_for(const fs::path& captions_path) {
  auto p = captions_path;
  p.replace_extension();
  return p.string() + ".failures.jsonl";
}

json report_to_json(const BatchReport& r) {
  return {{"input_count", r.input_count},
          {"succeeded", r.succeeded},
          {"failed_permanent", r.failed_permanent},
          {"failed_transient", r.failed_transient},
          {"resumed", r.resumed},
          {"new_records", r.new_records},
          {"complete", r.complete},
          {"p50_latency_ms", r.p50_latency_ms},
          {"p95_latency_ms", r.p95_latency_ms}};
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

BackoffPolicy engine_backoff(const PipelineConfig& c) {
  return {c.backoff_initial_ms, c.backoff_factor, c.backoff_cap_ms, c.engine_max_retries};
}

namespace {

struct Checkpoint {
  std::vector<CaptionRecord> captions;
  std::vector<CaptionFailure> failures;
};

template <typename Parse>
void load_rows(const fs::path& path, Parse&& parse) {
  if (!fs::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (!text.empty() && text.back() != '\n') {
    throw CheckpointError(path.string() + ": last line is truncated; rerun with --restart");
  }
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      parse(json::parse(line));
    } catch (const std::exception& e) {
      throw CheckpointError(path.string() + ":" + std::to_string(line_no) + ": unreadable checkpoint line (" +
                            e.what() + "); rerun with --restart");
    }
  }
}

Checkpoint load_checkpoint(const fs::path& out_path, const fs::path& failures_path) {
  Checkpoint ck;
  load_rows(out_path, [&](const json& j) { ck.captions.push_back(caption_from_json(j)); });
  load_rows(failures_path, [&](const json& j) { ck.failures.push_back(failure_from_json(j)); });
  return ck;
}

}  // namespace

std::vector<std::string> load_checkpoint_ids(const fs::path& out_path, const fs::path& failures_path) {
  const auto ck = load_checkpoint(out_path, failures_path);
  std::vector<std::string> ids;
  for (const auto& c : ck.captions) ids.push_back(c.image_id);
  for (const auto& f : ck.failures) ids.push_back(f.image_id);
  return ids;
}

BatchReport run_batch(const std::vector<FusionPrompt>& prompts, const EngineClient& client, const BatchOptions& opts) {
  if (opts.out_path.empty()) throw Error("run_batch: output path is required");
  if (opts.max_in_flight == 0) throw ConfigError("engine_max_in_flight", "must be a positive integer");
  const fs::path failures_path = opts.failures_path.empty() ? failures_path_for(opts.out_path) : opts.failures_path;
  if (opts.out_path.has_parent_path()) fs::create_directories(opts.out_path.parent_path());

  Checkpoint ck;
  if (opts.restart) {
    std::error_code ec;
    fs::remove(opts.out_path, ec);
    fs::remove(failures_path, ec);
  } else {
    ck = load_checkpoint(opts.out_path, failures_path);
  }

  std::unordered_set<std::string> input_ids, done;
  std::vector<const FusionPrompt*> pending;
  for (const auto& c : ck.captions) done.insert(c.image_id);
  for (const auto& f : ck.failures) done.insert(f.image_id);

  BatchReport report;
  std::vector<double> latencies;
  auto tally = [&](const CaptionOutcome& o) {
    if (auto* r = std::get_if<CaptionRecord>(&o)) {
      ++report.succeeded;
      latencies.push_back(static_cast<double>(r->latency_ms));
    } else if (std::get<CaptionFailure>(o).error_class == FailureClass::permanent) {
      ++report.failed_permanent;
    } else {
      ++report.failed_transient;
    }
  };

  for (const auto& p : prompts) {
    if (!input_ids.insert(p.image_id).second) continue;
    if (done.count(p.image_id)) {
      ++report.resumed;
    } else {
      pending.push_back(&p);
    }
  }
  report.input_count = input_ids.size();
  for (const auto& c : ck.captions) {
    if (input_ids.count(c.image_id)) tally(c);
  }
  for (const auto& f : ck.failures) {
    if (input_ids.count(f.image_id)) tally(f);
  }

  std::ofstream out(opts.out_path, std::ios::binary | std::ios::app);
  std::ofstream fail_out(failures_path, std::ios::binary | std::ios::app);
  if (!out || !fail_out) throw IoError("cannot open batch outputs next to " + opts.out_path.string());

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stopping{false};
  auto should_stop = [&] { return stopping.load() || (opts.cancel && opts.cancel->load()); };

  auto worker = [&](unsigned worker_idx) {
    std::mt19937_64 rng(opts.seed ^ (0x9E3779B97F4A7C15ULL * (worker_idx + 1)));
    for (;;) {
      if (should_stop()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      auto outcome = client.request_caption(*pending[i], rng);
      std::lock_guard lock(mu);
      if (should_stop()) return;  // a stopped run drops in-flight results, like a killed process
      if (auto* r = std::get_if<CaptionRecord>(&outcome)) {
        out << jsonl::dump_line(caption_to_json(*r)) << std::flush;
      } else {
        fail_out << jsonl::dump_line(failure_to_json(std::get<CaptionFailure>(outcome))) << std::flush;
      }
      if (!out || !fail_out) throw IoError("write failure on batch outputs");
      tally(outcome);
      ++report.new_records;
      if (opts.stop_after && report.new_records >= *opts.stop_after) stopping.store(true);
    }
  };

  const auto n_workers = static_cast<unsigned>(std::min(opts.max_in_flight, std::max<std::size_t>(pending.size(), 1)));
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (unsigned w = 0; w < n_workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        worker(w);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        stopping.store(true);
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  report.complete = report.succeeded + report.failed_permanent + report.failed_transient == report.input_count;
  report.p50_latency_ms = percentile(latencies, 50.0);
  report.p95_latency_ms = percentile(latencies, 95.0);
  return report;
}

}  // namespace densefuse
