#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "densefuse/config.hpp"
#include "densefuse/fusion.hpp"
#include "densefuse/http.hpp"

namespace densefuse {

struct CaptionRecord {
  std::string image_id;
  std::string caption;
  std::string engine_id;
  std::int64_t latency_ms = 0;
  std::int64_t attempt_count = 1;
  PromptKind prompt_kind = PromptKind::engine;
  std::int64_t word_count = 0;
};

enum class FailureClass { permanent, transient };
std::string to_string(FailureClass c);

struct CaptionFailure {
  std::string image_id;
  FailureClass error_class = FailureClass::transient;
  int http_status = 0;
  std::string message;
  std::int64_t attempt_count = 1;
  PromptKind prompt_kind = PromptKind::engine;
};

using CaptionOutcome = std::variant<CaptionRecord, CaptionFailure>;

// Chat-completion client for a multimodal endpoint (POST /v1/chat/completions).
// Thread-safe: callers supply their own RNG for backoff jitter.
class EngineClient {
 public:
  EngineClient(HttpTransport& transport, std::string model, BackoffPolicy policy)
      : transport_(transport), model_(std::move(model)), policy_(policy) {}

  const std::string& model() const noexcept { return model_; }
  const BackoffPolicy& policy() const noexcept { return policy_; }

  CaptionOutcome request_caption(const FusionPrompt& prompt, std::mt19937_64& rng) const;

  // Raw completion text for an arbitrary prompt. Throws Error when the call fails.
  std::string complete(const std::string& image_id, const std::string& text, const std::string& image_ref,
                       std::mt19937_64& rng) const;

  nlohmann::json request_body(const std::string& image_id, const std::string& text,
                              const std::string& image_ref) const;

 private:
  HttpTransport& transport_;
  std::string model_;
  BackoffPolicy policy_;
};

// Image reference for the request: local files become base64 data URLs, anything else passes through.
std::string image_url_for(const std::string& image_ref);

// First choice's message content, or nullopt if the body is not a completion.
std::optional<std::string> completion_text(const std::string& body);

nlohmann::json caption_to_json(const CaptionRecord& r);
CaptionRecord caption_from_json(const nlohmann::json& j);
nlohmann::json failure_to_json(const CaptionFailure& f);
CaptionFailure failure_from_json(const nlohmann::json& j);

// "<out stem>.failures.jsonl" next to the captions file.
std::filesystem::path failures_path_for(const std::filesystem::path& captions_path);

struct BatchOptions {
  std::size_t max_in_flight = 16;
  std::filesystem::path out_path;
  std::filesystem::path failures_path;  // defaults to failures_path_for(out_path)
  bool restart = false;                 // discard existing outputs instead of resuming
  std::optional<std::size_t> stop_after;  // stop after this many new records are persisted
  const std::atomic<bool>* cancel = nullptr;
  std::uint64_t seed = 0;
};

struct BatchReport {
  std::size_t input_count = 0;  // distinct image ids in the prompt stream
  std::size_t succeeded = 0;
  std::size_t failed_permanent = 0;
  std::size_t failed_transient = 0;
  std::size_t resumed = 0;      // ids already present in the outputs at start
  std::size_t new_records = 0;  // records persisted by this run
  bool complete = false;        // every input id has an output record
  double p50_latency_ms = 0.0;
  double p95_latency_ms = 0.0;
};

nlohmann::json report_to_json(const BatchReport& r);

// Ids already persisted in the captions and failures files. Throws
// CheckpointError on any unreadable line.
std::vector<std::string> load_checkpoint_ids(const std::filesystem::path& out_path,
                                             const std::filesystem::path& failures_path);

// Captions every prompt whose id is not yet persisted, with at most
// max_in_flight requests outstanding. Output files are append-only.
BatchReport run_batch(const std::vector<FusionPrompt>& prompts, const EngineClient& client, const BatchOptions& opts);

// Nearest-rank percentile of `values` (p in (0, 100]); 0 for empty input.
double percentile(std::vector<double> values, double p);

BackoffPolicy engine_backoff(const PipelineConfig& config);

}  // namespace densefuse
