#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "densefuse/captioner.hpp"
#include "densefuse/experts.hpp"

namespace densefuse {

enum class PosTag { noun, adj, adv, verb, num, other };
inline constexpr std::array<PosTag, 5> kCountedTags = {PosTag::noun, PosTag::adj, PosTag::adv, PosTag::verb,
                                                        PosTag::num};
std::string to_string(PosTag t);

struct PosFractions {
  double noun = 0.0, adj = 0.0, adv = 0.0, verb = 0.0, num = 0.0;
  double get(PosTag t) const;
};

struct CaptionStats {
  std::int64_t char_count = 0;      // Unicode scalar values, whitespace included
  std::int64_t word_count = 0;      // maximal non-whitespace runs
  std::int64_t sentence_count = 0;  // terminator groups
  PosFractions pos;                 // filled by pos_fractions
};

// Character, word and sentence counts. A sentence ends at a run of '.', '!' or
// '?' followed by whitespace or end of text; a '.' between two digits is not a
// terminator.
CaptionStats count_stats(std::string_view caption);

std::int64_t count_words(std::string_view text);
std::vector<std::string_view> split_words(std::string_view text);

class PosTagger {
 public:
  virtual ~PosTagger() = default;
  // `token` is one whitespace-delimited word with surrounding punctuation stripped.
  virtual PosTag tag(std::string_view token) const = 0;
};

// Approximate lexicon + suffix tagger. Deterministic; not a linguistic reference.
class HeuristicTagger final : public PosTagger {
 public:
  PosTag tag(std::string_view token) const override;
};

struct PosCounts {
  std::int64_t words = 0;
  std::array<std::int64_t, 5> counts{};  // indexed like kCountedTags
};

PosCounts pos_counts(std::string_view caption, const PosTagger& tagger);
PosFractions pos_fractions(std::string_view caption, const PosTagger& tagger);

// Category list used for image-type classification.
const std::vector<std::string>& category_labels();

// Case-insensitive containment match against category_labels(); the match
// appearing earliest in the reply wins. "unknown" when nothing matches.
std::string match_category(std::string_view reply);

std::string classification_prompt();

// Asks the engine for the image category. Failures propagate as Error.
std::string classify_category(const EngineClient& client, const std::string& image_id,
                              const std::string& image_ref, std::mt19937_64& rng);

struct CorpusReport {
  std::uint64_t sample_count = 0;
  double mean_chars = 0.0;
  double mean_words = 0.0;
  double mean_sentences = 0.0;
  PosFractions pos;
  double ocr_coverage = 0.0;
  std::optional<std::map<std::string, std::uint64_t>> category_histogram;
};

// Exact streaming aggregation: integer sums, divided once at the end.
class CorpusAggregator {
 public:
  explicit CorpusAggregator(const PosTagger& tagger) : tagger_(tagger) {}

  // `bundle` may be null when no annotation exists for the caption.
  void add(const CaptionRecord& record, const AnnotationBundle* bundle);
  void add_category(const std::string& label);
  void merge(const CorpusAggregator& other);

  std::uint64_t sample_count() const noexcept { return samples_; }
  // Throws Error on an empty stream.
  CorpusReport finish() const;

 private:
  const PosTagger& tagger_;
  std::uint64_t samples_ = 0;
  std::uint64_t chars_ = 0, words_ = 0, sentences_ = 0, ocr_ = 0;
  std::array<std::uint64_t, 5> pos_{};
  std::map<std::string, std::uint64_t> categories_;
};

// Joins bundles to records by image id. Throws Error on an empty record list.
CorpusReport aggregate(const std::vector<CaptionRecord>& records, const std::vector<AnnotationBundle>& bundles,
                       const PosTagger& tagger);

nlohmann::json corpus_report_to_json(const CorpusReport& r);

}  // namespace densefuse
