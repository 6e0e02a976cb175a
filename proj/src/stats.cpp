#include "densefuse/stats.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>
#include <unordered_set>

#include "densefuse/error.hpp"

namespace densefuse {

using nlohmann::json;

namespace {

bool ws(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
bool term(char c) { return c == '.' || c == '!' || c == '?'; }
bool digit(char c) { return c >= '0' && c <= '9'; }

std::size_t tag_index(PosTag t) { return static_cast<std::size_t>(t); }

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool ends_with(std::string_view s, std::string_view suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

std::string_view strip_punct(std::string_view w) {
  auto is_p = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
  while (!w.empty() && is_p(w.front())) w.remove_prefix(1);
  while (!w.empty() && is_p(w.back())) w.remove_suffix(1);
  return w;
}

using Lexicon = std::unordered_set<std::string_view>;

const Lexicon kFunctionWords = {
    "the", "a", "an", "this", "that", "these", "those", "and", "or", "but", "nor", "of", "in", "on", "at", "to",
    "with", "for", "from", "by", "as", "into", "onto", "over", "under", "above", "below", "behind", "near",
    "between", "through", "across", "around", "against", "along", "beside", "within", "without", "upon", "about",
    "its", "it", "their", "they", "them", "he", "she", "his", "her", "him", "we", "our", "you", "your", "i", "my",
    "which", "who", "whom", "whose", "while", "each", "some", "any", "both", "either", "neither", "every", "if",
    "than", "then", "so", "because", "where", "when", "what", "whether", "such", "other", "another", "own"};

const Lexicon kVerbs = {
    "is", "are", "was", "were", "be", "been", "am", "has", "have", "had", "do", "does", "did", "can", "could",
    "will", "would", "shall", "should", "may", "might", "must", "appears", "appear", "shows", "show", "features",
    "feature", "stands", "stand", "sits", "sit", "holds", "hold", "wears", "wear", "reads", "read", "says", "say",
    "lies", "lie", "hangs", "hang", "runs", "run", "contains", "contain", "includes", "include", "displays",
    "display", "depicts", "depict", "suggests", "suggest", "seems", "seem", "looks", "look", "made", "worn",
    "seen", "written", "set", "placed", "covered", "adds", "add", "surrounds", "surround", "extends", "extend",
    "rests", "rest", "faces", "face", "points", "point", "leans", "lean", "give", "gives", "take", "takes",
    "make", "makes", "go", "goes", "come", "comes", "see", "sees"};

const Lexicon kAdverbs = {"very", "also", "too", "quite", "just", "almost", "not", "here", "there", "often",
                          "together", "rather", "well", "nearly", "still", "even", "again", "away", "up", "down",
                          "out", "off", "back", "only", "slightly", "further", "prominently", "always", "never",
                          "perhaps", "once", "already", "somewhat", "partially", "directly"};

const Lexicon kAdjectives = {
    "red", "blue", "green", "yellow", "white", "black", "brown", "gray", "grey", "orange", "pink", "purple",
    "golden", "silver", "beige", "small", "large", "big", "tall", "short", "long", "wide", "narrow", "little",
    "huge", "tiny", "old", "new", "young", "bright", "dark", "light", "smooth", "rough", "wooden", "modern",
    "vintage", "clear", "visible", "prominent", "various", "several", "many", "few", "detailed", "open", "closed",
    "empty", "full", "round", "square", "flat", "high", "low", "soft", "hard", "warm", "cool", "cold", "hot",
    "clean", "dirty", "thin", "thick", "upper", "lower", "left", "right", "front", "rear", "main", "central",
    "same", "different", "single", "multiple", "other", "lovely", "friendly", "curly", "ugly", "silly", "likely",
    "elderly", "early", "daily", "good", "great", "fine", "pale", "deep", "vivid", "rich", "simple", "plain"};

const Lexicon kLyNouns = {"family", "belly", "jelly", "rally", "ally", "butterfly", "fly", "reply", "supply",
                          "italy", "assembly", "lily", "july", "bully", "gully", "holly", "anomaly"};

const Lexicon kNumberWords = {"zero",     "one",      "two",     "three",   "four",      "five",     "six",
                              "seven",    "eight",    "nine",    "ten",     "eleven",    "twelve",   "thirteen",
                              "fourteen", "fifteen",  "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
                              "thirty",   "forty",    "fifty",   "sixty",   "seventy",   "eighty",   "ninety",
                              "hundred",  "thousand", "million", "billion", "dozen"};

bool looks_numeric(std::string_view t) {
  bool any_digit = false;
  for (char c : t) {
    if (digit(c)) {
      any_digit = true;
    } else if (c != '.' && c != ',' && c != '%' && c != '-' && c != '/' && c != ':') {
      return false;
    }
  }
  return any_digit;
}

const std::vector<std::string> kCategories = {"photo", "visual art", "commercial design", "infographic"};

}  // namespace

std::string to_string(PosTag t) {
  switch (t) {
    case PosTag::noun: return "noun";
    case PosTag::adj: return "adj";
    case PosTag::adv: return "adv";
    case PosTag::verb: return "verb";
    case PosTag::num: return "num";
    case PosTag::other: return "other";
  }
  return "other";
}

double PosFractions::get(PosTag t) const {
  switch (t) {
    case PosTag::noun: return noun;
    case PosTag::adj: return adj;
    case PosTag::adv: return adv;
    case PosTag::verb: return verb;
    case PosTag::num: return num;
    case PosTag::other: return 0.0;
  }
  return 0.0;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && ws(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !ws(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

std::int64_t count_words(std::string_view text) { return static_cast<std::int64_t>(split_words(text).size()); }

CaptionStats count_stats(std::string_view caption) {
  CaptionStats s;
  for (char c : caption) {
    if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++s.char_count;
  }
  s.word_count = count_words(caption);
  const std::size_t n = caption.size();
  for (std::size_t i = 0; i < n;) {
    if (!term(caption[i])) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < n && term(caption[i])) ++i;
    const bool decimal_point = i - start == 1 && caption[start] == '.' && start > 0 && digit(caption[start - 1]) &&
                               i < n && digit(caption[i]);
    if (!decimal_point && (i == n || ws(caption[i]))) ++s.sentence_count;
  }
  return s;
}

PosTag HeuristicTagger::tag(std::string_view token) const {
  if (token.empty()) return PosTag::other;
  if (looks_numeric(token)) return PosTag::num;
  const std::string w = lower(token);
  if (kNumberWords.count(w)) return PosTag::num;
  if (kFunctionWords.count(w)) return PosTag::other;
  if (kVerbs.count(w)) return PosTag::verb;
  if (kAdverbs.count(w)) return PosTag::adv;
  if (kAdjectives.count(w)) return PosTag::adj;
  if (ends_with(w, "ly") && w.size() > 4 && !kLyNouns.count(w)) return PosTag::adv;
  if ((ends_with(w, "ing") && w.size() > 5) || (ends_with(w, "ed") && w.size() > 4)) return PosTag::verb;
  for (std::string_view suf : {"ous", "ful", "ive", "able", "ible", "less", "ical", "ish"}) {
    if (ends_with(w, suf) && w.size() > suf.size() + 2) return PosTag::adj;
  }
  return PosTag::noun;
}

PosCounts pos_counts(std::string_view caption, const PosTagger& tagger) {
  PosCounts pc;
  for (auto w : split_words(caption)) {
    ++pc.words;
    const auto t = tagger.tag(strip_punct(w));
    if (t != PosTag::other) ++pc.counts[tag_index(t)];
  }
  return pc;
}

PosFractions pos_fractions(std::string_view caption, const PosTagger& tagger) {
  const auto pc = pos_counts(caption, tagger);
  PosFractions f;
  if (pc.words == 0) return f;
  const double n = static_cast<double>(pc.words);
  f.noun = static_cast<double>(pc.counts[0]) / n;
  f.adj = static_cast<double>(pc.counts[1]) / n;
  f.adv = static_cast<double>(pc.counts[2]) / n;
  f.verb = static_cast<double>(pc.counts[3]) / n;
  f.num = static_cast<double>(pc.counts[4]) / n;
  return f;
}

const std::vector<std::string>& category_labels() { return kCategories; }

std::string match_category(std::string_view reply) {
  const std::string text = lower(reply);
  std::string best = "unknown";
  std::size_t best_pos = std::string::npos;
  for (const auto& label : kCategories) {
    const auto pos = text.find(label);
    if (pos != std::string::npos && (best_pos == std::string::npos || pos < best_pos)) {
      best_pos = pos;
      best = label;
    }
  }
  return best;
}

std::string classification_prompt() {
  std::string p = "Classify the category of this image. Answer with exactly one of:";
  for (std::size_t i = 0; i < kCategories.size(); ++i) p += (i ? ", " : " ") + kCategories[i];
  return p + ".";
}

std::string classify_category(const EngineClient& client, const std::string& image_id, const std::string& image_ref,
                              std::mt19937_64& rng) {
  return match_category(client.complete(image_id, classification_prompt(), image_ref, rng));
}

void CorpusAggregator::add(const CaptionRecord& record, const AnnotationBundle* bundle) {
  const auto s = count_stats(record.caption);
  const auto pc = pos_counts(record.caption, tagger_);
  ++samples_;
  chars_ += static_cast<std::uint64_t>(s.char_count);
  words_ += static_cast<std::uint64_t>(s.word_count);
  sentences_ += static_cast<std::uint64_t>(s.sentence_count);
  for (std::size_t i = 0; i < pos_.size(); ++i) pos_[i] += static_cast<std::uint64_t>(pc.counts[i]);
  if (bundle && !bundle->ocr.empty()) ++ocr_;
}

void CorpusAggregator::add_category(const std::string& label) { ++categories_[label]; }

void CorpusAggregator::merge(const CorpusAggregator& o) {
  samples_ += o.samples_;
  chars_ += o.chars_;
  words_ += o.words_;
  sentences_ += o.sentences_;
  ocr_ += o.ocr_;
  for (std::size_t i = 0; i < pos_.size(); ++i) pos_[i] += o.pos_[i];
  for (const auto& [k, v] : o.categories_) categories_[k] += v;
}

CorpusReport CorpusAggregator::finish() const {
  if (samples_ == 0) throw Error("cannot aggregate an empty caption stream");
  CorpusReport r;
  const double n = static_cast<double>(samples_);
  r.sample_count = samples_;
  r.mean_chars = static_cast<double>(chars_) / n;
  r.mean_words = static_cast<double>(words_) / n;
  r.mean_sentences = static_cast<double>(sentences_) / n;
  if (words_ > 0) {
    const double w = static_cast<double>(words_);
    r.pos.noun = static_cast<double>(pos_[0]) / w;
    r.pos.adj = static_cast<double>(pos_[1]) / w;
    r.pos.adv = static_cast<double>(pos_[2]) / w;
    r.pos.verb = static_cast<double>(pos_[3]) / w;
    r.pos.num = static_cast<double>(pos_[4]) / w;
  }
  r.ocr_coverage = static_cast<double>(ocr_) / n;
  if (!categories_.empty()) r.category_histogram = categories_;
  return r;
}

CorpusReport aggregate(const std::vector<CaptionRecord>& records, const std::vector<AnnotationBundle>& bundles,
                       const PosTagger& tagger) {
  std::unordered_map<std::string, const AnnotationBundle*> by_id;
  for (const auto& b : bundles) by_id.emplace(b.image_id, &b);
  CorpusAggregator agg(tagger);
  for (const auto& r : records) {
    auto it = by_id.find(r.image_id);
    agg.add(r, it == by_id.end() ? nullptr : it->second);
  }
  return agg.finish();
}

json corpus_report_to_json(const CorpusReport& r) {
  json j{{"sample_count", r.sample_count},
         {"mean_chars", r.mean_chars},
         {"mean_words", r.mean_words},
         {"mean_sentences", r.mean_sentences},
         {"pos_fractions",
          {{"noun", r.pos.noun}, {"adj", r.pos.adj}, {"adv", r.pos.adv}, {"verb", r.pos.verb}, {"num", r.pos.num}}},
         {"ocr_coverage", r.ocr_coverage},
         {"pos_tagger", "heuristic (approximate)"}};
  if (r.category_histogram) j["category_histogram"] = *r.category_histogram;
  return j;
}

}  // namespace densefuse
