// Reference routines used to cross-check the library. They deliberately avoid
// calling into densefuse and favour the slow, obvious formulation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace oracle {

inline long double dot_ld(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * static_cast<long double>(b[i]);
  return s;
}

inline std::vector<double> unit(const std::vector<double>& v) {
  const long double n = std::sqrt(dot_ld(v, v));
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i] / n);
  return out;
}

// Full pairwise similarity matrix, then the greedy scan expressed over matrix
// indices. Returns the kept ids.
struct DedupCase {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> vectors;  // unit vectors
  std::vector<double> centroid_sim;
};

inline std::set<std::string> semdedup_kept(const DedupCase& c, double epsilon) {
  const std::size_t n = c.ids.size();
  std::vector<std::vector<long double>> sim(n, std::vector<long double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sim[i][j] = dot_ld(c.vectors[i], c.vectors[j]);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(c.centroid_sim[a], c.ids[a]) < std::tie(c.centroid_sim[b], c.ids[b]);
  });
  const long double threshold = 1.0L - static_cast<long double>(epsilon);
  std::vector<bool> kept(n, false);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t i = order[pos];
    bool dup = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (kept[j] && sim[i][j] >= threshold) dup = true;
    }
    kept[i] = !dup;
  }
  std::set<std::string> out;
  for (std::size_t i = 0; i < n; ++i)
    if (kept[i]) out.insert(c.ids[i]);
  return out;
}

// Balanced box sampling, phrased as cap rounds of "take the best eligible box".
struct Box {
  std::string label;
  std::int64_t x1, y1, x2, y2;
  double conf;
  int source;  // 0 closed, 1 open
  std::int64_t area() const { return (x2 - x1) * (y2 - y1); }
};

inline bool better(const Box& a, const Box& b) {
  if (a.conf != b.conf) return a.conf > b.conf;
  return std::tie(a.label, a.x1, a.y1, a.x2, a.y2, a.source) < std::tie(b.label, b.x1, b.y1, b.x2, b.y2, b.source);
}

inline std::vector<Box> balanced_sample(std::vector<Box> boxes, std::int64_t w, std::int64_t h, std::size_t cap,
                                        double small_frac, double quota_frac) {
  std::vector<Box> out;
  if (boxes.size() <= cap) {
    out = boxes;
  } else {
    const std::size_t q = static_cast<std::size_t>(std::ceil(quota_frac * static_cast<double>(cap)));
    auto small = [&](const Box& b) {
      return static_cast<double>(b.area()) < small_frac * static_cast<double>(w) * static_cast<double>(h);
    };
    std::size_t small_taken = 0;
    while (out.size() < cap) {
      const bool want_small = small_taken < q && std::any_of(boxes.begin(), boxes.end(), small);
      int best = -1;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (want_small && !small(boxes[i])) continue;
        if (best < 0 || better(boxes[i], boxes[static_cast<std::size_t>(best)])) best = static_cast<int>(i);
      }
      if (small(boxes[static_cast<std::size_t>(best)]) && want_small) ++small_taken;
      out.push_back(boxes[static_cast<std::size_t>(best)]);
      boxes.erase(boxes.begin() + best);
    }
  }
  std::sort(out.begin(), out.end(), [](const Box& a, const Box& b) {
    if (a.area() != b.area()) return a.area() > b.area();
    return better(a, b);
  });
  return out;
}

// Mean by summing once, then correcting with the mean residual.
inline double two_pass_mean(const std::vector<double>& xs) {
  long double s = 0.0L;
  for (double x : xs) s += x;
  const long double m = s / static_cast<long double>(xs.size());
  long double r = 0.0L;
  for (double x : xs) r += static_cast<long double>(x) - m;
  return static_cast<double>(m + r / static_cast<long double>(xs.size()));
}

// Manifest line check written against the schema directly: a flat JSON object
// with string id/uri, positive integer width/height and optional string caption.
// Only the subset of JSON needed for the fixtures is understood.
inline bool manifest_line_ok(const std::string& line) {
  std::size_t i = 0;
  auto ws = [&] {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  };
  auto str = [&](std::string& out) {
    if (i >= line.size() || line[i] != '"') return false;
    ++i;
    out.clear();
    while (i < line.size() && line[i] != '"') {
      if (line[i] == '\\') {
        if (++i >= line.size()) return false;
      }
      out += line[i++];
    }
    if (i >= line.size()) return false;
    ++i;
    return true;
  };
  std::map<std::string, std::string> kinds;  // key -> "s" | "i" | "bad"
  std::map<std::string, long long> ints;
  std::string id_value;
  ws();
  if (i >= line.size() || line[i] != '{') return false;
  ++i;
  ws();
  if (i < line.size() && line[i] == '}') return false;
  for (;;) {
    ws();
    std::string key, sval;
    if (!str(key)) return false;
    ws();
    if (i >= line.size() || line[i] != ':') return false;
    ++i;
    ws();
    if (i < line.size() && line[i] == '"') {
      if (!str(sval)) return false;
      kinds[key] = "s";
      if (key == "id") id_value = sval;
    } else {
      std::size_t start = i;
      if (i < line.size() && line[i] == '-') ++i;
      while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
      if (i == start) return false;
      if (i < line.size() && (line[i] == '.' || line[i] == 'e' || line[i] == 'E')) {
        kinds[key] = "bad";
        while (i < line.size() && line[i] != ',' && line[i] != '}') ++i;
      } else {
        kinds[key] = "i";
        ints[key] = std::stoll(line.substr(start, i - start));
      }
    }
    ws();
    if (i < line.size() && line[i] == ',') {
      ++i;
      continue;
    }
    if (i < line.size() && line[i] == '}') {
      ++i;
      break;
    }
    return false;
  }
  ws();
  if (i != line.size()) return false;
  if (kinds["id"] != "s" || kinds["uri"] != "s" || id_value.empty()) return false;
  if (kinds["width"] != "i" || kinds["height"] != "i") return false;
  if (ints["width"] < 1 || ints["height"] < 1) return false;
  if (kinds.count("caption") && kinds["caption"] != "s") return false;
  return true;
}

}  // namespace oracle
