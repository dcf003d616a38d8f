#pragma once

#include <vector>

namespace refquery {

// Minimum-cost perfect assignment on a square cost matrix.
struct Assignment {
  std::vector<int> permutation;  // row index -> column index, a bijection
  double total_cost = 0.0;       // sum of selected entries, row order
};

// Exact O(N^3) solver (shortest augmenting paths with potentials). Among
// equally optimal assignments the lexicographically smallest permutation is
// returned (rows scanned in order, smallest column preferred), which pins
// down behaviour on tied inputs. Throws ValidationError for non-square or
// non-finite input.
Assignment hungarian(const std::vector<std::vector<double>>& cost);

}  // namespace refquery
