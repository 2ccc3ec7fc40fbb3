#include "psl/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace psl {
namespace {

constexpr double kNormEpsilon = 1e-5;

using ConstMatMap = Eigen::Map<const RowMatrix>;
using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;

RowMatrix activate(const RowMatrix& z, Activation act) {
  switch (act) {
    case Activation::linear: return z;
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::tanh: return z.array().tanh().matrix();
  }
  return z;
}

RowMatrix activation_backward(const RowMatrix& z, const RowMatrix& grad, Activation act) {
  switch (act) {
    case Activation::linear: return grad;
    case Activation::relu: return (z.array() > 0.0).select(grad, 0.0);
    case Activation::tanh: return (grad.array() * (1.0 - z.array().tanh().square())).matrix();
  }
  return grad;
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "linear";
}

Activation activation_from_string(const std::string& s) {
  if (s == "linear") return Activation::linear;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

}  // namespace

Subnet::Subnet(int input_dim, std::vector<LayerSpec> layers)
    : input_dim_(input_dim), layers_(std::move(layers)) {
  if (input_dim < 1) throw std::invalid_argument("subnet: input width must be positive");
  if (layers_.empty()) throw std::invalid_argument("subnet: needs at least one layer");
  int width = input_dim;
  for (const auto& layer : layers_) {
    Slot slot;
    slot.in = width;
    slot.offset = num_params_;
    if (layer.kind == LayerSpec::Kind::dense) {
      if (layer.units < 1) throw std::invalid_argument("subnet: dense layer needs units >= 1");
      slot.out = layer.units;
      num_params_ += static_cast<std::size_t>(slot.out) * (static_cast<std::size_t>(slot.in) + 1);
    } else {
      if (layer.groups < 1 || width % layer.groups != 0)
        throw std::invalid_argument("subnet: group count must divide the layer width");
      slot.out = width;
      num_params_ += 2 * static_cast<std::size_t>(width);
    }
    width = slot.out;
    slots_.push_back(slot);
  }
  output_dim_ = width;
}

RowMatrix Subnet::forward(const Eigen::VectorXd& params, const RowMatrix& x, Cache* cache) const {
  if (static_cast<std::size_t>(params.size()) != num_params_)
    throw std::invalid_argument("subnet: parameter vector has the wrong size");
  if (x.cols() != input_dim_)
    throw std::invalid_argument("subnet: input has " + std::to_string(x.cols()) +
                                " columns, expected " + std::to_string(input_dim_));
  if (cache) {
    cache->inputs.assign(layers_.size(), {});
    cache->pre.assign(layers_.size(), {});
    cache->normalized.assign(layers_.size(), {});
    cache->inv_std.assign(layers_.size(), {});
  }

  RowMatrix a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const auto& slot = slots_[l];
    const double* p = params.data() + slot.offset;
    RowMatrix z;
    if (layer.kind == LayerSpec::Kind::dense) {
      ConstMatMap w(p, slot.out, slot.in);
      ConstRowMap b(p + static_cast<std::ptrdiff_t>(slot.out) * slot.in, slot.out);
      z = a * w.transpose();
      z.rowwise() += b;
    } else {
      ConstRowMap scale(p, slot.out);
      ConstRowMap shift(p + slot.out, slot.out);
      const int groups = layer.groups;
      const int size = slot.out / groups;
      RowMatrix xhat(a.rows(), a.cols());
      RowMatrix inv_std(a.rows(), groups);
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (int g = 0; g < groups; ++g) {
          const auto seg = a.row(r).segment(g * size, size);
          const double mean = seg.mean();
          const double var = (seg.array() - mean).square().sum() / size;
          const double istd = 1.0 / std::sqrt(var + kNormEpsilon);
          xhat.row(r).segment(g * size, size) = (seg.array() - mean) * istd;
          inv_std(r, g) = istd;
        }
      }
      z = xhat.array().rowwise() * scale.array();
      z.rowwise() += shift;
      if (cache) {
        cache->normalized[l] = std::move(xhat);
        cache->inv_std[l] = std::move(inv_std);
      }
    }
    if (cache) {
      cache->inputs[l] = std::move(a);
      cache->pre[l] = z;
    }
    a = activate(z, layer.activation);
  }
  return a;
}

RowMatrix Subnet::backward(const Eigen::VectorXd& params, const Cache& cache,
                           const RowMatrix& grad_out, Eigen::VectorXd& grad_params) const {
  if (cache.inputs.size() != layers_.size())
    throw std::logic_error("subnet: backward without a matching forward pass");
  grad_params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_params_));
  if (grad_out.rows() != cache.pre.back().rows() || grad_out.cols() != output_dim_)
    throw std::invalid_argument("subnet: output gradient has the wrong shape");

  RowMatrix grad = grad_out;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& layer = layers_[l];
    const auto& slot = slots_[l];
    const double* p = params.data() + slot.offset;
    double* gp = grad_params.data() + slot.offset;
    const RowMatrix dz = activation_backward(cache.pre[l], grad, layer.activation);
    if (layer.kind == LayerSpec::Kind::dense) {
      ConstMatMap w(p, slot.out, slot.in);
      Eigen::Map<RowMatrix> gw(gp, slot.out, slot.in);
      Eigen::Map<Eigen::RowVectorXd> gb(gp + static_cast<std::ptrdiff_t>(slot.out) * slot.in,
                                        slot.out);
      gw.noalias() = dz.transpose() * cache.inputs[l];
      gb = dz.colwise().sum();
      grad = dz * w;
    } else {
      ConstRowMap scale(p, slot.out);
      Eigen::Map<Eigen::RowVectorXd> gscale(gp, slot.out);
      Eigen::Map<Eigen::RowVectorXd> gshift(gp + slot.out, slot.out);
      const RowMatrix& xhat = cache.normalized[l];
      gscale = (dz.array() * xhat.array()).colwise().sum();
      gshift = dz.colwise().sum();
      const RowMatrix dxhat = dz.array().rowwise() * scale.array();
      const int groups = layer.groups;
      const int size = slot.out / groups;
      RowMatrix dx(dz.rows(), dz.cols());
      for (Eigen::Index r = 0; r < dz.rows(); ++r) {
        for (int g = 0; g < groups; ++g) {
          const auto dseg = dxhat.row(r).segment(g * size, size).array();
          const auto xseg = xhat.row(r).segment(g * size, size).array();
          const double sum_d = dseg.sum();
          const double sum_dx = (dseg * xseg).sum();
          dx.row(r).segment(g * size, size) =
              (cache.inv_std[l](r, g) / size) * (size * dseg - sum_d - xseg * sum_dx);
        }
      }
      grad = std::move(dx);
    }
  }
  return grad;
}

Eigen::VectorXd Subnet::init_params(Rng& rng) const {
  Eigen::VectorXd params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_params_));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& slot = slots_[l];
    double* p = params.data() + slot.offset;
    if (layers_[l].kind == LayerSpec::Kind::dense) {
      const double limit = std::sqrt(6.0 / slot.in);
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(slot.out) * slot.in; ++i)
        p[i] = dist(rng);
    } else {
      for (int i = 0; i < slot.out; ++i) p[i] = 1.0;
    }
  }
  return params;
}

Architecture default_mlp(int input_dim, int client_hidden, int server_hidden, int classes,
                         bool client_group_norm, int norm_groups) {
  Architecture arch;
  arch.input_dim = input_dim;
  if (client_group_norm) {
    arch.client_layers = {LayerSpec::dense(client_hidden, Activation::linear),
                          LayerSpec::group_norm(norm_groups, Activation::relu)};
  } else {
    arch.client_layers = {LayerSpec::dense(client_hidden, Activation::relu)};
  }
  arch.server_layers = {LayerSpec::dense(server_hidden, Activation::relu),
                        LayerSpec::dense(classes, Activation::linear)};
  return arch;
}

SplitModel SplitModel::create(const Architecture& arch, int clients, std::uint64_t seed) {
  if (clients < 1) throw std::invalid_argument("model: client count must be >= 1");
  SplitModel m;
  m.arch = arch;
  m.client_net = Subnet(arch.input_dim, arch.client_layers);
  m.server_net = Subnet(m.client_net.output_dim(), arch.server_layers);
  Rng rng = make_rng(seed, stream::kInit);
  const Eigen::VectorXd client = m.client_net.init_params(rng);
  m.client_params.assign(static_cast<std::size_t>(clients), client);
  m.server_params = m.server_net.init_params(rng);
  return m;
}

bool SplitModel::replicas_in_sync() const {
  for (const auto& p : client_params)
    if (p.size() != client_params.front().size() ||
        std::memcmp(p.data(), client_params.front().data(),
                    static_cast<std::size_t>(p.size()) * sizeof(double)) != 0)
      return false;
  return true;
}

RowMatrix SplitModel::logits(const RowMatrix& x, std::size_t client) const {
  const RowMatrix act = client_net.forward(client_params.at(client), x, nullptr);
  return server_net.forward(server_params, act, nullptr);
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("optimizer: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer: weight decay must be >= 0");
}

SgdMomentum::SgdMomentum(OptimizerConfig config, Eigen::Index size)
    : config_(config), velocity_(Eigen::VectorXd::Zero(size)) {
  config_.validate();
}

Eigen::VectorXd SgdMomentum::advance(const Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (grad.size() != velocity_.size() || params.size() != velocity_.size())
    throw std::invalid_argument("optimizer: shape mismatch");
  velocity_ = config_.momentum * velocity_ + grad + config_.weight_decay * params;
  return config_.learning_rate * velocity_;
}

void SgdMomentum::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  params -= advance(params, grad);
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
}

void to_json(nlohmann::json& j, const LayerSpec& l) {
  if (l.kind == LayerSpec::Kind::dense)
    j = nlohmann::json{{"type", "dense"}, {"units", l.units}, {"activation", to_string(l.activation)}};
  else
    j = nlohmann::json{{"type", "group_norm"}, {"groups", l.groups}, {"activation", to_string(l.activation)}};
}

void from_json(const nlohmann::json& j, LayerSpec& l) {
  const auto type = j.at("type").get<std::string>();
  const auto act = activation_from_string(j.value("activation", std::string("linear")));
  if (type == "dense")
    l = LayerSpec::dense(j.at("units").get<int>(), act);
  else if (type == "group_norm")
    l = LayerSpec::group_norm(j.at("groups").get<int>(), act);
  else
    throw std::invalid_argument("unknown layer type '" + type + "'");
}

void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"input_dim", a.input_dim},
                     {"client_layers", a.client_layers},
                     {"server_layers", a.server_layers}};
}

void from_json(const nlohmann::json& j, Architecture& a) {
  a.input_dim = j.at("input_dim").get<int>();
  a.client_layers = j.at("client_layers").get<std::vector<LayerSpec>>();
  a.server_layers = j.at("server_layers").get<std::vector<LayerSpec>>();
}

namespace {

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vector(const std::vector<double>& v, std::size_t expected) {
  if (v.size() != expected) throw std::invalid_argument("checkpoint: parameter count mismatch");
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

nlohmann::json checkpoint_to_json(const SplitModel& model) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& p : model.client_params) clients.push_back(to_vector(p));
  return nlohmann::json{{"format", "psl-checkpoint"},
                        {"version", kCheckpointVersion},
                        {"architecture", model.arch},
                        {"cut_layer", model.cut_layer()},
                        {"client_params", clients},
                        {"server_params", to_vector(model.server_params)}};
}

SplitModel checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "psl-checkpoint")
    throw std::invalid_argument("checkpoint: not a psl checkpoint");
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion)
    throw std::invalid_argument("checkpoint: unsupported version " + std::to_string(version));
  SplitModel m;
  m.arch = j.at("architecture").get<Architecture>();
  m.client_net = Subnet(m.arch.input_dim, m.arch.client_layers);
  m.server_net = Subnet(m.client_net.output_dim(), m.arch.server_layers);
  for (const auto& c : j.at("client_params"))
    m.client_params.push_back(from_vector(c.get<std::vector<double>>(), m.client_net.num_params()));
  if (m.client_params.empty()) throw std::invalid_argument("checkpoint: no client replicas");
  m.server_params = from_vector(j.at("server_params").get<std::vector<double>>(),
                                m.server_net.num_params());
  return m;
}

void save_checkpoint(const SplitModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open checkpoint '" + path + "' for writing");
  out << checkpoint_to_json(model).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

SplitModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace psl
