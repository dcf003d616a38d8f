#include "refquery/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "refquery/errors.hpp"

namespace refquery {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Augmenting-path search over tight edges only. `adj` lists tight columns per
// row in ascending order; `fixed_col` marks columns frozen by the
// lexicographic pass. Returns true if `row` could be (re)matched.
bool augment(int row, const std::vector<std::vector<int>>& adj, const std::vector<bool>& fixed_col,
             std::vector<int>& owner, std::vector<bool>& visited) {
  for (int j : adj[static_cast<std::size_t>(row)]) {
    if (fixed_col[static_cast<std::size_t>(j)] || visited[static_cast<std::size_t>(j)]) continue;
    visited[static_cast<std::size_t>(j)] = true;
    if (owner[static_cast<std::size_t>(j)] < 0 ||
        augment(owner[static_cast<std::size_t>(j)], adj, fixed_col, owner, visited)) {
      owner[static_cast<std::size_t>(j)] = row;
      return true;
    }
  }
  return false;
}

}  // namespace

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != n)
      throw ValidationError("hungarian: cost matrix is not square (" + std::to_string(n) + " rows, row of length " +
                            std::to_string(row.size()) + ")");
    for (double v : row)
      if (!std::isfinite(v)) throw ValidationError("hungarian: non-finite cost entry");
  }
  Assignment result;
  if (n == 0) return result;

  // Shortest augmenting paths with potentials (1-indexed internals).
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, kInf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> perm(static_cast<std::size_t>(n), -1);  // row -> col, 0-indexed
  for (int j = 1; j <= n; ++j) perm[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;

  // Lexicographic refinement. By complementary slackness every optimal
  // assignment lives on edges with zero reduced cost; any perfect matching on
  // those edges is optimal. Scan rows in order, greedily trying smaller
  // columns while a perfect completion still exists.
  double cmax = 0.0;
  for (const auto& row : cost)
    for (double x : row) cmax = std::max(cmax, std::abs(x));
  double tau = 1e-9 * (1.0 + cmax);
  for (int i = 0; i < n; ++i) {
    const double r = cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] -
                     u[static_cast<std::size_t>(i) + 1] - v[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) + 1];
    tau = std::max(tau, std::abs(r) * 2.0);
  }
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double r = cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] -
                       u[static_cast<std::size_t>(i) + 1] - v[static_cast<std::size_t>(j) + 1];
      if (std::abs(r) <= tau) adj[static_cast<std::size_t>(i)].push_back(j);
    }

  std::vector<int> owner(static_cast<std::size_t>(n));  // column -> row
  for (int i = 0; i < n; ++i) owner[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  std::vector<bool> fixed_col(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    const int cur = perm[static_cast<std::size_t>(i)];
    for (int j : adj[static_cast<std::size_t>(i)]) {
      if (j >= cur) break;  // adjacency is ascending; current column is feasible
      if (fixed_col[static_cast<std::size_t>(j)]) continue;  // claimed by an earlier row
      // Tentatively move row i to column j and re-route the displaced row.
      const int displaced = owner[static_cast<std::size_t>(j)];
      owner[static_cast<std::size_t>(j)] = i;
      owner[static_cast<std::size_t>(cur)] = -1;
      std::vector<bool> visited(static_cast<std::size_t>(n), false);
      visited[static_cast<std::size_t>(j)] = true;
      std::vector<bool> fixed_plus = fixed_col;
      fixed_plus[static_cast<std::size_t>(j)] = true;
      if (augment(displaced, adj, fixed_plus, owner, visited)) {
        // Commit: rebuild row->col view from owner.
        for (int jj = 0; jj < n; ++jj)
          if (owner[static_cast<std::size_t>(jj)] >= 0) perm[static_cast<std::size_t>(owner[static_cast<std::size_t>(jj)])] = jj;
        break;
      }
      owner[static_cast<std::size_t>(j)] = displaced;
      owner[static_cast<std::size_t>(cur)] = i;
    }
    fixed_col[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = true;
  }

  result.permutation = perm;
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  result.total_cost = total;
  return result;
}

}  // namespace refquery
