#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "densefuse/curator.hpp"
#include "densefuse/error.hpp"
#include "oracles/oracles.hpp"
#include "unit/tmpdir.hpp"

using namespace densefuse;

namespace {

std::vector<double> gaussian(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(dim);
  for (auto& x : v) x = g(rng);
  return v;
}

// Points scattered around `groups` random directions.
EmbeddingStore blobs(std::size_t groups, std::size_t per_group, std::size_t dim, double noise, std::uint64_t seed,
                     std::vector<std::size_t>* truth = nullptr) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> centers;
  for (std::size_t g = 0; g < groups; ++g) centers.push_back(oracle::unit(gaussian(dim, rng)));
  EmbeddingStore s(dim);
  std::size_t n = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < per_group; ++i) {
      auto v = gaussian(dim, rng);
      for (std::size_t d = 0; d < dim; ++d) v[d] = centers[g][d] + noise * v[d];
      s.add("p" + std::to_string(n++), v);
      if (truth) truth->push_back(g);
    }
  }
  return s;
}

}  // namespace

TEST_CASE("kmeans is deterministic and thread-count invariant") {
  auto s = blobs(5, 40, 16, 0.3, 1);
  auto a = kmeans_run(s, 5, 42, {50, 1e-9, 1});
  auto b = kmeans_run(s, 5, 42, {50, 1e-9, 1});
  auto c = kmeans_run(s, 5, 42, {50, 1e-9, 4});
  CHECK(a.model.centroids == b.model.centroids);
  CHECK(a.model.centroids == c.model.centroids);
  CHECK(a.model.final_objective == c.model.final_objective);
  CHECK(kmeans_init(s, 5, 7) == kmeans_init(s, 5, 7));
}

TEST_CASE("kmeans k = N and k = 1") {
  auto s = blobs(2, 5, 6, 0.5, 2);
  auto r = kmeans_run(s, s.size(), 3);
  CHECK(std::abs(r.model.final_objective) < 1e-9);
  for (std::size_t c = 0; c < r.model.k; ++c) {
    bool matches = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      double diff = 0;
      for (std::size_t d = 0; d < s.dim(); ++d) diff = std::max(diff, std::abs(r.model.centroid(c)[d] - s.row(i)[d]));
      matches = matches || diff < 1e-12;
    }
    CHECK(matches);
  }

  EmbeddingStore two(2);
  two.add("x", std::vector<double>{1, 0});
  two.add("y", std::vector<double>{0, 1});
  auto one = kmeans_run(two, 1, 0);
  CHECK(one.model.centroid(0)[0] == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-15));
  CHECK(one.model.centroid(0)[1] == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-15));
}

TEST_CASE("kmeans final assignment is the argmax over final centroids") {
  std::vector<std::size_t> truth;
  auto s = blobs(3, 100, 24, 0.2, 5, &truth);
  auto r = kmeans_run(s, 3, 9);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t best = 0;
    long double best_sim = -2;
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> cv(r.model.centroid(c).begin(), r.model.centroid(c).end());
      std::vector<double> pv(s.row(i).begin(), s.row(i).end());
      auto sim = oracle::dot_ld(cv, pv);
      if (sim > best_sim) {
        best_sim = sim;
        best = c;
      }
    }
    CHECK(r.assignments[i].cluster_id == best);
  }
  // Well-separated blobs: each blob maps to one cluster.
  std::set<std::pair<std::size_t, std::size_t>> mapping;
  for (std::size_t i = 0; i < s.size(); ++i) mapping.insert({truth[i], r.assignments[i].cluster_id});
  CHECK(mapping.size() == 3);
  for (std::size_t i = 1; i < r.model.objective_history.size(); ++i) {
    CHECK(r.model.objective_history[i] <= r.model.objective_history[i - 1] + 1e-9);
  }
}

TEST_CASE("kmeans++ seeding spreads over separated groups") {
  // Three groups around orthogonal axes.
  std::mt19937_64 rng(8);
  std::vector<std::size_t> truth;
  EmbeddingStore s(12);
  for (std::size_t g = 0; g < 3; ++g) {
    for (int i = 0; i < 30; ++i) {
      auto v = gaussian(12, rng);
      for (auto& x : v) x *= 0.01;
      v[g] += 1.0;
      s.add("g" + std::to_string(g) + "-" + std::to_string(i), v);
      truth.push_back(g);
    }
  }
  int good = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto rows = kmeans_init(s, 3, seed);
    std::set<std::size_t> groups;
    for (auto r : rows) groups.insert(truth[r]);
    if (groups.size() == 3) ++good;
  }
  CHECK(good >= 45);
}

TEST_CASE("semdedup basic geometry") {
  std::vector<double> a{1, 0}, b{1, 0}, c{0, 1};
  auto d = semdedup_cluster({{"a", a, 0.5}, {"b", b, 0.5}}, 0.4);
  REQUIRE(d.size() == 2);
  CHECK(d[0].kept);
  CHECK_FALSE(d[1].kept);
  CHECK(d[1].duplicate_of == std::optional<std::string>("a"));
  auto e = semdedup_cluster({{"a", a, 0.1}, {"c", c, 0.2}}, 0.4);
  CHECK(e[0].kept);
  CHECK(e[1].kept);
  CHECK(semdedup_cluster({}, 0.4).empty());
  CHECK_THROWS_AS(semdedup_cluster({}, 1.5), ConfigError);
}

TEST_CASE("semdedup matches the matrix oracle on 32 random vectors") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 8;
    oracle::DedupCase c;
    auto base = gaussian(dim, rng);
    for (std::size_t i = 0; i < 32; ++i) {
      auto v = gaussian(dim, rng);
      for (std::size_t d = 0; d < dim; ++d) v[d] = base[d] + 0.8 * v[d];
      c.ids.push_back("m" + std::to_string(i));
      c.vectors.push_back(oracle::unit(v));
      c.centroid_sim.push_back(std::round(std::uniform_real_distribution<double>(0, 1)(rng) * 10) / 10);
    }
    std::vector<DedupMember> members;
    for (std::size_t i = 0; i < 32; ++i) members.push_back({c.ids[i], c.vectors[i], c.centroid_sim[i]});
    std::set<std::string> kept;
    for (const auto& d : semdedup_cluster(members, 0.4))
      if (d.kept) kept.insert(d.image_id);
    CHECK(kept == oracle::semdedup_kept(c, 0.4));
  }
}

TEST_CASE("select_top_k") {
  std::vector<RankedMember> five;
  for (int i = 0; i < 5; ++i) five.push_back({"x" + std::to_string(i), 0.1 * i});
  CHECK(select_top_k(five, 20).size() == 5);

  std::vector<RankedMember> thirty;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 30; ++i) thirty.push_back({"id" + std::to_string(i), std::uniform_real_distribution<>(0, 1)(rng)});
  auto sorted = thirty;
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.score > b.score; });
  std::vector<std::string> want;
  for (int i = 0; i < 20; ++i) want.push_back(sorted[static_cast<std::size_t>(i)].image_id);
  CHECK(select_top_k(thirty, 20) == want);

  CHECK(select_top_k({{"b", 0.5}, {"a", 0.5}, {"c", 0.9}}, 2) == std::vector<std::string>{"c", "a"});
}

TEST_CASE("model and decision files round trip") {
  TmpDir tmp;
  auto s = blobs(2, 10, 4, 0.3, 3);
  auto r = kmeans_run(s, 2, 1);
  write_model(tmp / "m.df", r, "/some/store.dfemb");
  std::filesystem::path sp;
  auto back = read_model(tmp / "m.df", &sp);
  CHECK(sp == "/some/store.dfemb");
  CHECK(back.model.centroids == r.model.centroids);
  CHECK(back.assignments.size() == r.assignments.size());
  CHECK(back.assignments[3].cluster_id == r.assignments[3].cluster_id);

  auto dec = dedup_all(s, r.assignments, 0.4, 2);
  CHECK(dec.size() == s.size());
  write_decisions(tmp / "d.jsonl", dec);
  auto dback = read_decisions(tmp / "d.jsonl");
  REQUIRE(dback.size() == dec.size());
  for (std::size_t i = 0; i < dec.size(); ++i) {
    CHECK(dback[i].cluster_id == dec[i].cluster_id);
    CHECK(dback[i].decision.kept == dec[i].decision.kept);
    CHECK(dback[i].decision.duplicate_of == dec[i].decision.duplicate_of);
    CHECK(dback[i].decision.centroid_similarity == dec[i].decision.centroid_similarity);
  }
}

TEST_CASE("random ranking score is deterministic") {
  CHECK(random_rank_score("a", 1) == random_rank_score("a", 1));
  CHECK(random_rank_score("a", 1) != random_rank_score("a", 2));
  const double x = random_rank_score("zz", 9);
  CHECK(x >= 0.0);
  CHECK(x < 1.0);
}
