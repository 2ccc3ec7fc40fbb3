#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "psl/dataset.hpp"
#include "psl/model.hpp"
#include "psl/partition.hpp"
#include "psl/sampling.hpp"

namespace psl {

/// Weights of the server-side client-gradient average. `dataset_size` uses
/// D_k / D_0; `step_batch` uses B_k^(t) / B^(t) and exists for ablations.
enum class GradientWeighting { dataset_size, step_batch };

struct StepTrace {
  std::size_t step = 0;
  std::vector<std::vector<std::size_t>> local_batches;  // sample indices per client
  std::size_t global_batch = 0;
  double loss = 0.0;
  double cut_grad_norm = 0.0;
  double client_grad_norm = 0.0;
};

struct LossResult {
  double loss = 0.0;
  RowMatrix logits;
};

/// Mean softmax cross-entropy and its gradient with respect to the logits.
double softmax_cross_entropy(const RowMatrix& logits, std::span<const ClassId> labels,
                             RowMatrix* grad_logits);

/// sum_k w_k g_k accumulated in ascending client order.
Eigen::VectorXd average_client_gradients(std::span<const Eigen::VectorXd> gradients,
                                         std::span<const double> weights);
/// D_k / D_0 weights.
std::vector<double> dataset_size_weights(std::span<const std::size_t> client_sizes);

/// Applies one shared optimizer step to every replica. All replicas must be
/// bit-identical beforehand ("client desync" otherwise) and stay so.
void client_update(std::span<Eigen::VectorXd> replicas, const Eigen::VectorXd& averaged_gradient,
                   SgdMomentum& optimizer);

/// Runs the six-substep parallel split learning protocol on a SplitModel.
/// The trainer owns the server optimizer and the single client optimizer
/// whose velocity drives every replica.
class SplitTrainer {
 public:
  SplitTrainer(SplitModel& model, const OptimizerConfig& optimizer,
               std::vector<std::size_t> client_sizes,
               GradientWeighting weighting = GradientWeighting::dataset_size,
               unsigned workers = 1);

  SplitModel& model() { return *model_; }
  const SplitModel& model() const { return *model_; }
  std::size_t num_clients() const { return model_->num_clients(); }

  /// Substep 1 for one client: cut-layer activations, one row per sample.
  RowMatrix client_forward(std::size_t client, const RowMatrix& features);

  /// Substep 2: concatenate activations in ascending client order and take
  /// the mean loss over the global batch.
  LossResult server_forward_loss(std::span<const RowMatrix> activations,
                                 std::span<const ClassId> labels);

  /// Substep 3: backpropagate through the server layers, update them, and
  /// return the cut-layer gradient split back into per-client slices.
  /// Gradients are taken at the pre-update server parameters.
  std::vector<RowMatrix> server_backward();

  /// Substep 4: client gradient from the cut-layer gradient slice. Does not
  /// update parameters.
  Eigen::VectorXd client_backward(std::size_t client, const RowMatrix& cut_gradient);

  /// Substeps 1 to 6 on explicit local batches (sample indices per client).
  StepTrace step(const LabeledDataset& dataset,
                 const std::vector<std::vector<std::size_t>>& local_batches);

  /// Server gradient from the most recent server_backward.
  const Eigen::VectorXd& last_server_gradient() const { return server_grad_; }
  const SgdMomentum& client_optimizer() const { return client_opt_; }

 private:
  template <typename Fn>
  void for_each_client(const std::vector<std::size_t>& clients, Fn&& fn);

  SplitModel* model_;
  SgdMomentum server_opt_;
  SgdMomentum client_opt_;
  std::vector<std::size_t> client_sizes_;
  GradientWeighting weighting_;
  unsigned workers_;

  std::vector<Subnet::Cache> client_caches_;
  std::vector<char> client_ready_;
  std::vector<Eigen::Index> client_rows_;
  Subnet::Cache server_cache_;
  RowMatrix grad_logits_;
  bool server_ready_ = false;
  Eigen::VectorXd server_grad_;
};

/// One epoch following `schedule`. Client k draws its local batches from its
/// partition shard with the stream client_draw_rng(seed, k).
std::vector<StepTrace> train_epoch(SplitTrainer& trainer, const LabeledDataset& dataset,
                                   const Partition& partition, const BatchSchedule& schedule,
                                   std::uint64_t seed);

/// Centralized baseline: the same model and optimizer semantics with all
/// data pooled at one site.
class CentralizedTrainer {
 public:
  CentralizedTrainer(SplitModel& model, const OptimizerConfig& optimizer);

  SplitModel& model() { return *model_; }
  StepTrace step(const LabeledDataset& dataset, std::span<const std::size_t> batch);

 private:
  SplitModel* model_;
  SgdMomentum server_opt_;
  SgdMomentum client_opt_;
};

/// One epoch over centralized_batches(D_0, B, seed).
std::vector<StepTrace> centralized_train_epoch(CentralizedTrainer& trainer,
                                               const LabeledDataset& dataset,
                                               std::size_t global_batch, std::uint64_t seed);

/// Runs the given batches in order.
std::vector<StepTrace> centralized_train_batches(
    CentralizedTrainer& trainer, const LabeledDataset& dataset,
    const std::vector<std::vector<std::size_t>>& batches);

/// Top-1 accuracy using client replica 0.
double evaluate(const SplitModel& model, const LabeledDataset& test);
double top1_accuracy(const RowMatrix& logits, std::span<const ClassId> labels);

}  // namespace psl
