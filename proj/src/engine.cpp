#include "psl/engine.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace psl {

double softmax_cross_entropy(const RowMatrix& logits, std::span<const ClassId> labels,
                             RowMatrix* grad_logits) {
  const Eigen::Index n = logits.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size())
    throw std::invalid_argument("loss: logits rows (" + std::to_string(n) + ") != labels (" +
                                std::to_string(labels.size()) + ")");
  if (grad_logits) grad_logits->resize(n, logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw std::invalid_argument("loss: label out of range");
    const double peak = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd shifted = logits.row(r).array() - peak;
    const double log_norm = std::log(shifted.array().exp().sum());
    total += log_norm - shifted(y);
    if (grad_logits) {
      grad_logits->row(r) = (shifted.array() - log_norm).exp();
      (*grad_logits)(r, y) -= 1.0;
    }
  }
  if (grad_logits) *grad_logits /= static_cast<double>(n);
  return total / static_cast<double>(n);
}

Eigen::VectorXd average_client_gradients(std::span<const Eigen::VectorXd> gradients,
                                         std::span<const double> weights) {
  if (gradients.empty() || gradients.size() != weights.size())
    throw std::invalid_argument("gradient averaging: need one weight per client gradient");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(gradients.front().size());
  for (std::size_t k = 0; k < gradients.size(); ++k) {
    if (gradients[k].size() != out.size())
      throw std::invalid_argument("gradient averaging: shape mismatch");
    out += weights[k] * gradients[k];
  }
  return out;
}

std::vector<double> dataset_size_weights(std::span<const std::size_t> client_sizes) {
  const std::size_t pool =
      std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0});
  if (pool == 0) throw std::invalid_argument("gradient averaging: empty pool");
  std::vector<double> w;
  for (std::size_t d : client_sizes) w.push_back(static_cast<double>(d) / static_cast<double>(pool));
  return w;
}

void client_update(std::span<Eigen::VectorXd> replicas, const Eigen::VectorXd& averaged_gradient,
                   SgdMomentum& optimizer) {
  if (replicas.empty()) throw std::invalid_argument("client update: no replicas");
  const auto& first = replicas.front();
  for (const auto& r : replicas)
    if (r.size() != first.size() ||
        std::memcmp(r.data(), first.data(), static_cast<std::size_t>(r.size()) * sizeof(double)))
      throw std::runtime_error("client desync");
  const Eigen::VectorXd delta = optimizer.advance(first, averaged_gradient);
  for (auto& r : replicas) r -= delta;
}

SplitTrainer::SplitTrainer(SplitModel& model, const OptimizerConfig& optimizer,
                           std::vector<std::size_t> client_sizes, GradientWeighting weighting,
                           unsigned workers)
    : model_(&model),
      server_opt_(optimizer, model.server_params.size()),
      client_opt_(optimizer, static_cast<Eigen::Index>(model.client_net.num_params())),
      client_sizes_(std::move(client_sizes)),
      weighting_(weighting),
      workers_(std::max(1u, workers)),
      client_caches_(model.num_clients()),
      client_ready_(model.num_clients(), 0),
      client_rows_(model.num_clients(), 0) {
  if (client_sizes_.size() != model.num_clients())
    throw std::invalid_argument("trainer: client sizes do not match the model's replicas");
}

template <typename Fn>
void SplitTrainer::for_each_client(const std::vector<std::size_t>& clients, Fn&& fn) {
  const unsigned n = std::min<unsigned>(workers_, static_cast<unsigned>(clients.size()));
  if (n <= 1) {
    for (std::size_t k : clients) fn(k);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(n);
  for (unsigned w = 0; w < n; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < clients.size(); i += n) fn(clients[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

RowMatrix SplitTrainer::client_forward(std::size_t client, const RowMatrix& features) {
  if (client >= num_clients()) throw std::out_of_range("client index out of range");
  if (features.rows() == 0) throw std::invalid_argument("client forward: empty batch");
  RowMatrix act = model_->client_net.forward(model_->client_params[client], features,
                                             &client_caches_[client]);
  client_ready_[client] = 1;
  return act;
}

LossResult SplitTrainer::server_forward_loss(std::span<const RowMatrix> activations,
                                             std::span<const ClassId> labels) {
  if (activations.size() != num_clients())
    throw std::invalid_argument("server forward: need one activation block per client");
  const auto width = static_cast<Eigen::Index>(model_->client_net.output_dim());
  Eigen::Index rows = 0;
  for (std::size_t k = 0; k < activations.size(); ++k) {
    if (activations[k].rows() > 0 && activations[k].cols() != width)
      throw std::invalid_argument("server forward: activation width mismatch");
    client_rows_[k] = activations[k].rows();
    rows += activations[k].rows();
  }
  if (rows == 0 || static_cast<std::size_t>(rows) != labels.size())
    throw std::invalid_argument("server forward: activation rows (" + std::to_string(rows) +
                                ") != labels (" + std::to_string(labels.size()) + ")");
  RowMatrix global(rows, width);
  Eigen::Index at = 0;
  for (const auto& a : activations) {
    if (a.rows() == 0) continue;
    global.middleRows(at, a.rows()) = a;
    at += a.rows();
  }
  LossResult out;
  out.logits = model_->server_net.forward(model_->server_params, global, &server_cache_);
  out.loss = softmax_cross_entropy(out.logits, labels, &grad_logits_);
  server_ready_ = true;
  return out;
}

std::vector<RowMatrix> SplitTrainer::server_backward() {
  if (!server_ready_) throw std::logic_error("server backward called without a forward pass");
  const RowMatrix cut = model_->server_net.backward(model_->server_params, server_cache_,
                                                    grad_logits_, server_grad_);
  server_opt_.step(model_->server_params, server_grad_);
  server_ready_ = false;

  std::vector<RowMatrix> slices(num_clients());
  Eigen::Index at = 0;
  for (std::size_t k = 0; k < slices.size(); ++k) {
    slices[k] = cut.middleRows(at, client_rows_[k]);
    at += client_rows_[k];
  }
  return slices;
}

Eigen::VectorXd SplitTrainer::client_backward(std::size_t client, const RowMatrix& cut_gradient) {
  if (client >= num_clients()) throw std::out_of_range("client index out of range");
  if (!client_ready_[client])
    throw std::logic_error("client backward without a matching forward pass");
  const auto& cache = client_caches_[client];
  if (cut_gradient.rows() != cache.pre.back().rows() ||
      cut_gradient.cols() != model_->client_net.output_dim())
    throw std::invalid_argument("client backward: cut gradient slice has the wrong shape");
  Eigen::VectorXd grad;
  model_->client_net.backward(model_->client_params[client], cache, cut_gradient, grad);
  client_ready_[client] = 0;
  return grad;
}

StepTrace SplitTrainer::step(const LabeledDataset& dataset,
                             const std::vector<std::vector<std::size_t>>& local_batches) {
  const std::size_t k_count = num_clients();
  if (local_batches.size() != k_count)
    throw std::invalid_argument("step: need one local batch per client");

  std::vector<std::size_t> active;
  std::vector<ClassId> labels;
  for (std::size_t k = 0; k < k_count; ++k) {
    if (local_batches[k].empty()) continue;
    active.push_back(k);
    const auto l = dataset.gather_labels(local_batches[k]);
    labels.insert(labels.end(), l.begin(), l.end());
  }
  if (active.empty()) throw std::invalid_argument("step: empty global batch");

  const auto width = static_cast<Eigen::Index>(model_->client_net.output_dim());
  std::vector<RowMatrix> acts(k_count, RowMatrix(0, width));
  for_each_client(active, [&](std::size_t k) {
    acts[k] = client_forward(k, dataset.gather_features(local_batches[k]));
  });

  StepTrace trace;
  trace.local_batches = local_batches;
  trace.global_batch = labels.size();
  trace.loss = server_forward_loss(acts, labels).loss;

  const auto cut = server_backward();
  double cut_sq = 0.0;
  for (const auto& c : cut) cut_sq += c.squaredNorm();
  trace.cut_grad_norm = std::sqrt(cut_sq);

  const auto n_params = static_cast<Eigen::Index>(model_->client_net.num_params());
  std::vector<Eigen::VectorXd> grads(k_count, Eigen::VectorXd::Zero(n_params));
  for_each_client(active, [&](std::size_t k) { grads[k] = client_backward(k, cut[k]); });

  std::vector<double> weights;
  if (weighting_ == GradientWeighting::dataset_size) {
    weights = dataset_size_weights(client_sizes_);
  } else {
    for (std::size_t k = 0; k < k_count; ++k)
      weights.push_back(static_cast<double>(local_batches[k].size()) /
                        static_cast<double>(trace.global_batch));
  }
  const Eigen::VectorXd averaged = average_client_gradients(grads, weights);
  trace.client_grad_norm = averaged.norm();
  client_update(model_->client_params, averaged, client_opt_);
  return trace;
}

std::vector<StepTrace> train_epoch(SplitTrainer& trainer, const LabeledDataset& dataset,
                                   const Partition& partition, const BatchSchedule& schedule,
                                   std::uint64_t seed) {
  if (static_cast<std::size_t>(partition.num_clients()) != trainer.num_clients())
    throw std::invalid_argument("schedule/partition mismatch: client count differs from model");
  schedule.validate(partition.client_sizes);

  DepletionState state(partition.client_indices);
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < state.num_clients(); ++k) rngs.push_back(client_draw_rng(seed, k));

  std::vector<StepTrace> traces;
  traces.reserve(schedule.num_steps());
  for (std::size_t t = 0; t < schedule.num_steps(); ++t) {
    std::vector<std::vector<std::size_t>> batches(state.num_clients());
    for (std::size_t k = 0; k < batches.size(); ++k)
      batches[k] = state.draw(k, schedule.steps[t][k], rngs[k]);
    traces.push_back(trainer.step(dataset, batches));
    traces.back().step = t;
  }
  return traces;
}

CentralizedTrainer::CentralizedTrainer(SplitModel& model, const OptimizerConfig& optimizer)
    : model_(&model),
      server_opt_(optimizer, model.server_params.size()),
      client_opt_(optimizer, static_cast<Eigen::Index>(model.client_net.num_params())) {
  if (model.num_clients() != 1)
    throw std::invalid_argument("centralized trainer: model must hold a single replica");
}

StepTrace CentralizedTrainer::step(const LabeledDataset& dataset,
                                   std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("centralized step: empty batch");
  auto& m = *model_;
  const RowMatrix x = dataset.gather_features(batch);
  const auto labels = dataset.gather_labels(batch);

  Subnet::Cache lower, upper;
  const RowMatrix hidden = m.client_net.forward(m.client_params[0], x, &lower);
  const RowMatrix logits = m.server_net.forward(m.server_params, hidden, &upper);
  RowMatrix grad_logits;
  StepTrace trace;
  trace.loss = softmax_cross_entropy(logits, labels, &grad_logits);
  trace.global_batch = batch.size();
  trace.local_batches = {std::vector<std::size_t>(batch.begin(), batch.end())};

  Eigen::VectorXd server_grad, client_grad;
  const RowMatrix grad_hidden = m.server_net.backward(m.server_params, upper, grad_logits, server_grad);
  server_opt_.step(m.server_params, server_grad);
  m.client_net.backward(m.client_params[0], lower, grad_hidden, client_grad);
  client_opt_.step(m.client_params[0], client_grad);
  trace.cut_grad_norm = grad_hidden.norm();
  trace.client_grad_norm = client_grad.norm();
  return trace;
}

std::vector<StepTrace> centralized_train_batches(
    CentralizedTrainer& trainer, const LabeledDataset& dataset,
    const std::vector<std::vector<std::size_t>>& batches) {
  std::vector<StepTrace> traces;
  traces.reserve(batches.size());
  for (std::size_t t = 0; t < batches.size(); ++t) {
    traces.push_back(trainer.step(dataset, batches[t]));
    traces.back().step = t;
  }
  return traces;
}

std::vector<StepTrace> centralized_train_epoch(CentralizedTrainer& trainer,
                                               const LabeledDataset& dataset,
                                               std::size_t global_batch, std::uint64_t seed) {
  return centralized_train_batches(trainer, dataset,
                                   centralized_batches(dataset.size(), global_batch, seed));
}

double top1_accuracy(const RowMatrix& logits, std::span<const ClassId> labels) {
  if (logits.rows() == 0 || static_cast<std::size_t>(logits.rows()) != labels.size())
    throw std::invalid_argument("accuracy: logits rows and labels disagree");
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

double evaluate(const SplitModel& model, const LabeledDataset& test) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  return top1_accuracy(model.logits(test.features), test.labels);
}

}  // namespace psl
