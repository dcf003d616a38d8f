#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "refquery/errors.hpp"
#include "refquery/hungarian.hpp"
#include "refquery/rng.hpp"

using namespace refquery;

namespace {

// Exhaustive oracle: minimum over all permutations.
std::pair<std::vector<int>, double> brute_force(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  std::vector<int> perm(n), best(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int i = 0; i < n; ++i) c += cost[i][perm[i]];
    if (c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best, best_cost};
}

std::vector<std::vector<double>> random_cost(int n, Rng& rng, double lo = -5.0, double hi = 5.0) {
  std::vector<std::vector<double>> c(n, std::vector<double>(n));
  for (auto& row : c)
    for (auto& v : row) v = rng.uniform(static_cast<float>(lo), static_cast<float>(hi));
  return c;
}

}  // namespace

TEST_CASE("identity-favoring cost yields identity permutation") {
  std::vector<std::vector<double>> cost = {{0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
  auto a = hungarian(cost);
  CHECK(a.permutation == std::vector<int>{0, 1, 2});
  CHECK(a.total_cost == 0.0);
}

TEST_CASE("hand example solved optimally") {
  std::vector<std::vector<double>> cost = {{4, 1, 3}, {2, 0, 5}, {3, 2, 2}};
  auto a = hungarian(cost);
  auto [bperm, bcost] = brute_force(cost);
  CHECK(a.total_cost == bcost);
  CHECK(a.total_cost == 5.0);
  CHECK(a.permutation == std::vector<int>{1, 0, 2});
  CHECK(a.permutation == bperm);
}

TEST_CASE("constant shift preserves the optimal permutation") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto cost = random_cost(5, rng);
    auto shifted = cost;
    const double k = rng.uniform(-3.0f, 3.0f);
    for (auto& row : shifted)
      for (auto& v : row) v += k;
    CHECK(hungarian(cost).permutation == hungarian(shifted).permutation);
  }
}

TEST_CASE("matches brute force on random matrices up to N=7") {
  Rng rng(42);
  for (int n = 2; n <= 7; ++n) {
    for (int trial = 0; trial < 50; ++trial) {
      auto cost = random_cost(n, rng);
      auto a = hungarian(cost);
      auto [bperm, bcost] = brute_force(cost);
      CAPTURE(n);
      CAPTURE(trial);
      CHECK(a.total_cost == bcost);
      // permutation is a bijection
      std::vector<bool> seen(n, false);
      for (int j : a.permutation) {
        CHECK(!seen[j]);
        seen[j] = true;
      }
      // reported total equals the sum of selected entries
      double s = 0;
      for (int i = 0; i < n; ++i) s += cost[i][a.permutation[i]];
      CHECK(a.total_cost == s);
    }
  }
}

TEST_CASE("ties broken toward the lexicographically smallest permutation") {
  // all-equal matrix: every permutation optimal, identity is lex-smallest
  std::vector<std::vector<double>> flat(4, std::vector<double>(4, 2.5));
  CHECK(hungarian(flat).permutation == std::vector<int>{0, 1, 2, 3});

  // two optima (1,0,2)... and (0,2,1); the latter is lex-smaller
  std::vector<std::vector<double>> tied = {{0, 0, 1}, {0, 1, 0}, {1, 0, 0}};
  auto a = hungarian(tied);
  CHECK(a.total_cost == 0.0);
  CHECK(a.permutation == std::vector<int>{0, 2, 1});
}

TEST_CASE("validation errors") {
  CHECK_THROWS_AS(hungarian({{1, 2}, {3}}), ValidationError);
  CHECK_THROWS_AS(hungarian({{1, 2}, {3, std::numeric_limits<double>::infinity()}}), ValidationError);
  CHECK_THROWS_AS(hungarian({{std::nan(""), 1}, {1, 0}}), ValidationError);
}

TEST_CASE("empty matrix yields empty assignment") {
  auto a = hungarian({});
  CHECK(a.permutation.empty());
  CHECK(a.total_cost == 0.0);
}
