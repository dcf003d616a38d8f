#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "refquery/tensor.hpp"

namespace refquery {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::string message;  // non-empty when the check could not run (non-finite output etc.)
  std::vector<GradCheckEntry> params;
};

// Compares tape gradients of a scalar-valued function against central finite
// differences. `f` must be callable as Tensor<S> f(std::vector<Tensor<S>>&)
// for S = float (tape side) and S = double (difference side); evaluating the
// difference quotient on the double twin keeps the stated tolerances honest
// for a 32-bit engine. Relative error is measured against
// max(|g_tape|, |g_fd|, floor) with a floor tied to the largest gradient seen,
// so float rounding on near-zero entries does not mask real adjoint bugs on
// the entries that matter.
template <typename Fn>
GradCheckReport finite_diff_check(Fn&& f, const std::vector<Tensor<float>>& params,
                                  double step = 1e-3, double tol = 1e-4,
                                  std::vector<std::string> names = {}) {
  GradCheckReport report;
  const std::size_t np = params.size();
  while (names.size() < np) names.push_back("param" + std::to_string(names.size()));

  // Tape side (float engine).
  std::vector<Tensor<float>> pf;
  pf.reserve(np);
  for (const auto& p : params) {
    Tensor<float> c = Tensor<float>::from(p.shape(), p.value());
    c.set_requires_grad(true);
    pf.push_back(c);
  }
  std::vector<std::vector<double>> tape_grad(np);
  {
    Tape<float> tape;
    typename Tape<float>::Scope scope(tape);
    Tensor<float> loss = f(pf);
    if (loss.size() != 1) {
      report.message = "function output is not scalar";
      return report;
    }
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      report.message = "non-finite function output";
      return report;
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < np; ++i) {
      tape_grad[i].assign(pf[i].size() > 0 ? static_cast<std::size_t>(pf[i].size()) : 0, 0.0);
      if (pf[i].has_grad())
        for (std::int64_t j = 0; j < pf[i].size(); ++j)
          tape_grad[i][static_cast<std::size_t>(j)] = static_cast<double>(pf[i].grad()[static_cast<std::size_t>(j)]);
    }
  }

  // Difference side (double twin, no tape).
  std::vector<Tensor<double>> pd;
  pd.reserve(np);
  for (const auto& p : params) pd.push_back(cast_tensor<float, double>(p));
  auto eval = [&]() -> double {
    Tensor<double> out = f(pd);
    return out.item();
  };
  std::vector<std::vector<double>> fd_grad(np);
  for (std::size_t i = 0; i < np; ++i) {
    fd_grad[i].assign(static_cast<std::size_t>(pd[i].size()), 0.0);
    for (std::int64_t j = 0; j < pd[i].size(); ++j) {
      const double orig = pd[i].raw()[static_cast<std::size_t>(j)];
      pd[i].raw()[static_cast<std::size_t>(j)] = orig + step;
      const double fp = eval();
      pd[i].raw()[static_cast<std::size_t>(j)] = orig - step;
      const double fm = eval();
      pd[i].raw()[static_cast<std::size_t>(j)] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.message = "non-finite output while differencing " + names[i];
        return report;
      }
      fd_grad[i][static_cast<std::size_t>(j)] = (fp - fm) / (2.0 * step);
    }
  }

  double gmax = 0.0;
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t j = 0; j < fd_grad[i].size(); ++j)
      gmax = std::max(gmax, std::max(std::abs(fd_grad[i][j]), std::abs(tape_grad[i][j])));
  const double floor = std::max(1e-6, 0.01 * gmax);

  report.pass = true;
  for (std::size_t i = 0; i < np; ++i) {
    GradCheckEntry e;
    e.name = names[i];
    for (std::size_t j = 0; j < fd_grad[i].size(); ++j) {
      const double a = tape_grad[i][j], b = fd_grad[i][j];
      const double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
      e.max_rel_err = std::max(e.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    if (e.max_rel_err > tol) report.pass = false;
    report.params.push_back(std::move(e));
  }
  return report;
}

}  // namespace refquery
