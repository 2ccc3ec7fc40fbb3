#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "psl/engine.hpp"

namespace psl::gradcheck {

inline RowMatrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Full-model loss for explicit per-client parameter vectors; the reference
// the analytic gradients are checked against.
inline double composed_loss(const SplitModel& m, const std::vector<Eigen::VectorXd>& client_params,
                     const Eigen::VectorXd& server_params, const std::vector<RowMatrix>& xs,
                     const std::vector<ClassId>& labels) {
  Eigen::Index rows = 0;
  for (const auto& x : xs) rows += x.rows();
  RowMatrix acts(rows, m.client_net.output_dim());
  Eigen::Index at = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    acts.middleRows(at, xs[k].rows()) = m.client_net.forward(client_params[k], xs[k], nullptr);
    at += xs[k].rows();
  }
  return softmax_cross_entropy(m.server_net.forward(server_params, acts, nullptr), labels, nullptr);
}

struct GradCheckResult {
  std::size_t checked = 0;
  double worst = 0.0;
};

inline GradCheckResult check_split_gradients(const Architecture& arch, std::uint64_t seed) {
  // Two clients, four samples each: B = 8.
  SplitModel model = SplitModel::create(arch, 2, seed);
  const std::vector<RowMatrix> xs{gaussian_matrix(4, arch.input_dim, seed + 1),
                                  gaussian_matrix(4, arch.input_dim, seed + 2)};
  const std::vector<ClassId> labels{0, 1, 2, 1, 2, 0, 0, 1};
  const SplitModel before = model;

  SplitTrainer trainer(model, OptimizerConfig{}, {4, 4});
  std::vector<RowMatrix> acts;
  for (std::size_t k = 0; k < 2; ++k) acts.push_back(trainer.client_forward(k, xs[k]));
  trainer.server_forward_loss(acts, labels);
  const auto cut = trainer.server_backward();
  const Eigen::VectorXd server_grad = trainer.last_server_gradient();
  std::vector<Eigen::VectorXd> client_grads;
  for (std::size_t k = 0; k < 2; ++k) client_grads.push_back(trainer.client_backward(k, cut[k]));

  GradCheckResult res;
  auto compare = [&](double analytic, double numeric) {
    if (std::abs(analytic) <= 1e-6) return;
    ++res.checked;
    res.worst = std::max(res.worst, std::abs(analytic - numeric) /
                                        std::max(std::abs(analytic), std::abs(numeric)));
  };
  for (Eigen::Index i = 0; i < before.server_params.size(); ++i) {
    Eigen::VectorXd w = before.server_params;
    const double h = 1e-5 * std::max(1.0, std::abs(w(i)));
    w(i) += h;
    const double up = composed_loss(before, before.client_params, w, xs, labels);
    w(i) -= 2 * h;
    const double down = composed_loss(before, before.client_params, w, xs, labels);
    compare(server_grad(i), (up - down) / (2 * h));
  }
  for (std::size_t k = 0; k < 2; ++k) {
    for (Eigen::Index i = 0; i < before.client_params[k].size(); ++i) {
      auto cp = before.client_params;
      const double h = 1e-5 * std::max(1.0, std::abs(cp[k](i)));
      cp[k](i) += h;
      const double up = composed_loss(before, cp, before.server_params, xs, labels);
      cp[k](i) -= 2 * h;
      const double down = composed_loss(before, cp, before.server_params, xs, labels);
      compare(client_grads[k](i), (up - down) / (2 * h));
    }
  }
  return res;
}

}  // namespace psl::gradcheck
