#include "densefuse/curator.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "densefuse/error.hpp"
#include "densefuse/jsonl.hpp"
#include "densefuse/parallel.hpp"

namespace densefuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Fixed-size point ranges so the partitioning never depends on thread count.
constexpr std::size_t kChunk = 512;

void assign_all(const EmbeddingStore& store, const ClusterModel& model, std::vector<Assignment>& out,
                unsigned threads) {
  const std::size_t n = store.size();
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t end = std::min(n, (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      auto [cid, sim] = nearest_centroid(model, store.row(i));
      out[i].cluster_id = cid;
      out[i].centroid_similarity = sim;
    }
  });
}

double objective(const std::vector<Assignment>& a) {
  double s = 0.0;
  for (const auto& x : a) s += 1.0 - x.centroid_similarity;
  return s;
}

}  // namespace

std::pair<std::size_t, double> nearest_centroid(const ClusterModel& model, std::span<const double> v) {
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < model.k; ++c) {
    const double s = cosine_similarity(model.centroid(c), v);
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return {best, best_sim};
}

std::vector<std::size_t> kmeans_init(const EmbeddingStore& store, std::size_t k, std::uint64_t seed) {
  const std::size_t n = store.size();
  if (k == 0) throw Error("k must be positive");
  if (n < k) {
    throw Error("store has " + std::to_string(n) + " embeddings, fewer than k=" + std::to_string(k));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::vector<char> taken(n, 0);
  std::vector<double> best_sim(n, -1.0);

  auto take = [&](std::size_t idx) {
    chosen.push_back(idx);
    taken[idx] = 1;
    const auto c = store.row(idx);
    for (std::size_t i = 0; i < n; ++i) best_sim[i] = std::max(best_sim[i], cosine_similarity(store.row(i), c));
  };

  take(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
  while (chosen.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!taken[i]) total += std::max(0.0, 1.0 - best_sim[i]);
    }
    const double u = uniform01(rng);
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = u * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        const double w = std::max(0.0, 1.0 - best_sim[i]);
        if (w <= 0.0) continue;
        acc += w;
        pick = i;
        if (acc > target) break;
      }
    }
    if (pick == n) {
      // Every remaining point coincides with a chosen one: pick uniformly among the rest.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i]) rest.push_back(i);
      }
      pick = rest[std::min(rest.size() - 1, static_cast<std::size_t>(u * static_cast<double>(rest.size())))];
    }
    take(pick);
  }
  return chosen;
}

KMeansResult kmeans_run(const EmbeddingStore& store, std::size_t k, std::uint64_t seed, const KMeansOptions& opts) {
  if (store.empty()) throw Error("cannot cluster an empty store");
  const std::size_t n = store.size();
  const std::size_t dim = store.dim();
  const unsigned threads = std::max(1u, opts.threads);

  KMeansResult res;
  ClusterModel& model = res.model;
  model.k = k;
  model.dim = dim;
  model.centroids.resize(k * dim);
  const auto init = kmeans_init(store, k, seed);
  for (std::size_t c = 0; c < k; ++c) {
    const auto r = store.row(init[c]);
    std::copy(r.begin(), r.end(), model.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }

  res.assignments.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.assignments[i].image_id = store.id(i);
  assign_all(store, model, res.assignments, threads);
  model.objective_history.push_back(objective(res.assignments));

  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t iter = 1; iter <= opts.max_iters; ++iter) {
    for (auto& m : members) m.clear();
    for (std::size_t i = 0; i < n; ++i) members[res.assignments[i].cluster_id].push_back(i);

    // Mean of each cluster, summed in point order, then projected back to the sphere.
    parallel_for(k, threads, [&](std::size_t c) {
      if (members[c].empty()) return;
      std::vector<double> sum(dim, 0.0);
      for (std::size_t i : members[c]) {
        const auto r = store.row(i);
        for (std::size_t d = 0; d < dim; ++d) sum[d] += r[d];
      }
      const double norm = l2_norm(sum);
      if (!(norm > 0.0)) return;  // antipodal members cancel out; keep the old centroid
      for (std::size_t d = 0; d < dim; ++d) model.centroids[c * dim + d] = sum[d] / norm;
    });

    // Empty clusters take the worst-fit points, worst first, ties by row.
    std::vector<std::size_t> empty;
    for (std::size_t c = 0; c < k; ++c) {
      if (members[c].empty()) empty.push_back(c);
    }
    if (!empty.empty()) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return res.assignments[a].centroid_similarity < res.assignments[b].centroid_similarity;
      });
      for (std::size_t e = 0; e < empty.size() && e < n; ++e) {
        const auto r = store.row(order[e]);
        std::copy(r.begin(), r.end(), model.centroids.begin() + static_cast<std::ptrdiff_t>(empty[e] * dim));
      }
    }

    assign_all(store, model, res.assignments, threads);
    const double obj = objective(res.assignments);
    const double prev = model.objective_history.back();
    model.objective_history.push_back(obj);
    model.iterations_run = iter;
    if (prev - obj < opts.tol) break;
  }
  model.final_objective = model.objective_history.back();
  return res;
}

std::vector<DedupDecision> semdedup_cluster(std::vector<DedupMember> members, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("dedup_epsilon", "must lie in (0, 1)");
  const double threshold = 1.0 - epsilon;
  std::sort(members.begin(), members.end(), [](const DedupMember& a, const DedupMember& b) {
    if (a.centroid_similarity != b.centroid_similarity) return a.centroid_similarity < b.centroid_similarity;
    return a.image_id < b.image_id;
  });
  std::vector<DedupDecision> out;
  out.reserve(members.size());
  std::vector<std::size_t> kept;  // indices into members
  for (std::size_t i = 0; i < members.size(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t witness = 0;
    for (std::size_t j : kept) {
      const double s = cosine_similarity(members[i].vector, members[j].vector);
      if (s > best) {
        best = s;
        witness = j;
      }
    }
    DedupDecision d;
    d.image_id = members[i].image_id;
    d.centroid_similarity = members[i].centroid_similarity;
    if (kept.empty() || best < threshold) {
      kept.push_back(i);
    } else {
      d.kept = false;
      d.duplicate_of = members[witness].image_id;
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<std::string> select_top_k(std::vector<RankedMember> members, std::size_t top_k) {
  const std::size_t take = std::min(top_k, members.size());
  auto before = [](const RankedMember& a, const RankedMember& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
  };
  std::partial_sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end(), before);
  std::vector<std::string> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(std::move(members[i].image_id));
  return out;
}

std::vector<ClusterDecision> dedup_all(const EmbeddingStore& store, const std::vector<Assignment>& assignments,
                                       double epsilon, unsigned threads) {
  std::map<std::size_t, std::vector<DedupMember>> by_cluster;
  for (const auto& a : assignments) {
    auto v = store.lookup(a.image_id);
    if (!v) throw Error("assignment for \"" + a.image_id + "\" has no embedding in the store");
    by_cluster[a.cluster_id].push_back({a.image_id, *v, a.centroid_similarity});
  }
  std::vector<std::pair<std::size_t, std::vector<DedupMember>>> work(by_cluster.begin(), by_cluster.end());
  std::vector<std::vector<DedupDecision>> results(work.size());
  parallel_for(work.size(), threads,
               [&](std::size_t i) { results[i] = semdedup_cluster(std::move(work[i].second), epsilon); });
  std::vector<ClusterDecision> out;
  out.reserve(assignments.size());
  for (std::size_t i = 0; i < work.size(); ++i) {
    for (auto& d : results[i]) out.push_back({work[i].first, std::move(d)});
  }
  return out;
}

std::vector<std::string> select_all(const std::vector<ClusterDecision>& decisions, std::size_t top_k,
                                    const std::function<double(const ClusterDecision&)>& score) {
  std::map<std::size_t, std::vector<RankedMember>> by_cluster;
  for (const auto& d : decisions) {
    if (d.decision.kept) by_cluster[d.cluster_id].push_back({d.decision.image_id, score(d)});
  }
  std::vector<std::string> out;
  for (auto& [cid, members] : by_cluster) {
    auto ids = select_top_k(std::move(members), top_k);
    std::move(ids.begin(), ids.end(), std::back_inserter(out));
  }
  return out;
}

double random_rank_score(const std::string& image_id, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char c : image_id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer
  h += 0x9E3779B97F4A7C15ULL;
  h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
  h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
  h ^= h >> 31;
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

void write_model(const fs::path& path, const KMeansResult& result, const fs::path& store_path) {
  const auto& m = result.model;
  json centroids = json::array();
  for (std::size_t c = 0; c < m.k; ++c) {
    const auto row = m.centroid(c);
    centroids.push_back(std::vector<double>(row.begin(), row.end()));
  }
  json assignments = json::array();
  for (const auto& a : result.assignments) {
    assignments.push_back({{"id", a.image_id}, {"cluster", a.cluster_id}, {"similarity", a.centroid_similarity}});
  }
  const json doc{{"format", "densefuse-kmeans-1"},
                 {"k", m.k},
                 {"dim", m.dim},
                 {"iterations_run", m.iterations_run},
                 {"final_objective", m.final_objective},
                 {"objective_history", m.objective_history},
                 {"store_path", store_path.string()},
                 {"centroids", std::move(centroids)},
                 {"assignments", std::move(assignments)}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write model " + path.string());
  out << doc.dump() << '\n';
  if (!out.flush()) throw IoError("write failure on " + path.string());
}

KMeansResult read_model(const fs::path& path, fs::path* store_path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model " + path.string());
  KMeansResult res;
  try {
    const json doc = json::parse(in);
    if (doc.at("format") != "densefuse-kmeans-1") throw FormatError("unknown model format");
    auto& m = res.model;
    m.k = doc.at("k").get<std::size_t>();
    m.dim = doc.at("dim").get<std::size_t>();
    m.iterations_run = doc.at("iterations_run").get<std::size_t>();
    m.final_objective = doc.at("final_objective").get<double>();
    m.objective_history = doc.at("objective_history").get<std::vector<double>>();
    for (const auto& row : doc.at("centroids")) {
      auto v = row.get<std::vector<double>>();
      if (v.size() != m.dim) throw FormatError("centroid dimension mismatch");
      m.centroids.insert(m.centroids.end(), v.begin(), v.end());
    }
    if (m.centroids.size() != m.k * m.dim) throw FormatError("centroid count mismatch");
    for (const auto& a : doc.at("assignments")) {
      res.assignments.push_back(
          {a.at("id").get<std::string>(), a.at("cluster").get<std::size_t>(), a.at("similarity").get<double>()});
    }
    if (store_path) *store_path = doc.at("store_path").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return res;
}

void write_decisions(const fs::path& path, const std::vector<ClusterDecision>& decisions) {
  std::vector<json> rows;
  rows.reserve(decisions.size());
  for (const auto& d : decisions) {
    json j{{"id", d.decision.image_id},
           {"cluster", d.cluster_id},
           {"kept", d.decision.kept},
           {"similarity", d.decision.centroid_similarity}};
    if (d.decision.duplicate_of) j["duplicate_of"] = *d.decision.duplicate_of;
    rows.push_back(std::move(j));
  }
  jsonl::write_all(path, rows);
}

std::vector<ClusterDecision> read_decisions(const fs::path& path) {
  std::vector<ClusterDecision> out;
  for (const auto& j : jsonl::read_all(path)) {
    try {
      ClusterDecision d;
      d.cluster_id = j.at("cluster").get<std::size_t>();
      d.decision.image_id = j.at("id").get<std::string>();
      d.decision.kept = j.at("kept").get<bool>();
      d.decision.centroid_similarity = j.value("similarity", 0.0);
      if (j.contains("duplicate_of")) d.decision.duplicate_of = j.at("duplicate_of").get<std::string>();
      if (d.decision.kept == d.decision.duplicate_of.has_value()) {
        throw FormatError("duplicate_of must be set iff kept is false");
      }
      out.push_back(std::move(d));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace densefuse
