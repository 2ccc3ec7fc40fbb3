#pragma once

// Independent reference computations used only by the tests.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <vector>

#include "psl/dataset.hpp"

namespace psl::oracle {

using Composition = std::vector<std::size_t>;

/// Exact law of the first GPSL step by walking every sequence of B
/// depletion-weighted categorical draws.
inline std::map<Composition, double> gpsl_draw_paths(const std::vector<std::size_t>& sizes,
                                                     std::size_t draws) {
  std::map<Composition, double> law;
  Composition counts(sizes.size(), 0);
  std::vector<std::size_t> remaining = sizes;
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t left,
                                                                   std::size_t total, double p) {
    if (left == 0) {
      law[counts] += p;
      return;
    }
    for (std::size_t k = 0; k < remaining.size(); ++k) {
      if (remaining[k] == 0) continue;
      const double pk = static_cast<double>(remaining[k]) / static_cast<double>(total);
      --remaining[k];
      ++counts[k];
      walk(left - 1, total - 1, p * pk);
      ++remaining[k];
      --counts[k];
    }
  };
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  walk(draws, total, 1.0);
  return law;
}

inline double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

/// Multivariate hypergeometric pmf: prod_k C(D_k, c_k) / C(D_0, B).
inline double mv_hypergeometric_pmf(const std::vector<std::size_t>& sizes, const Composition& c) {
  std::size_t pool = 0, batch = 0;
  double num = 1.0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    pool += sizes[k];
    batch += c[k];
    num *= binomial(sizes[k], c[k]);
  }
  return num / binomial(pool, batch);
}

inline double total_variation(const std::map<Composition, double>& a,
                              const std::map<Composition, double>& b) {
  double tv = 0.0;
  for (const auto& [k, p] : a) {
    const auto it = b.find(k);
    tv += std::abs(p - (it == b.end() ? 0.0 : it->second));
  }
  for (const auto& [k, p] : b)
    if (!a.count(k)) tv += p;
  return 0.5 * tv;
}

/// Central difference of f at x along coordinate i with step h.
template <typename F>
double central_difference(F&& f, std::vector<double> x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

/// Small labelled dataset with explicit labels and deterministic features.
inline LabeledDataset labels_only(const std::vector<ClassId>& labels, int classes, int dim = 2) {
  LabeledDataset ds;
  ds.num_classes = classes;
  ds.labels = labels;
  ds.features = RowMatrix::Zero(static_cast<Eigen::Index>(labels.size()), dim);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (int d = 0; d < dim; ++d)
      ds.features(static_cast<Eigen::Index>(i), d) =
          std::sin(0.7 * static_cast<double>(i) + 1.3 * d) + labels[i];
  return ds;
}

}  // namespace psl::oracle
