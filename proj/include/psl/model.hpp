#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "psl/dataset.hpp"
#include "psl/random.hpp"

namespace psl {

enum class Activation { linear, relu, tanh };

struct LayerSpec {
  enum class Kind { dense, group_norm };
  Kind kind = Kind::dense;
  int units = 0;   // dense output width; ignored for group_norm
  int groups = 1;  // group_norm only; must divide the input width
  Activation activation = Activation::linear;

  static LayerSpec dense(int units, Activation act) { return {Kind::dense, units, 1, act}; }
  static LayerSpec group_norm(int groups, Activation act = Activation::linear) {
    return {Kind::group_norm, 0, groups, act};
  }
  bool operator==(const LayerSpec&) const = default;
};

/// A stack of layers whose parameters live in one flat vector. Dense layers
/// store W (row-major, out x in) followed by b; group-norm layers store the
/// per-feature scale followed by the shift.
class Subnet {
 public:
  struct Cache {
    std::vector<RowMatrix> inputs;      // input to each layer
    std::vector<RowMatrix> pre;         // pre-activation output of each layer
    std::vector<RowMatrix> normalized;  // group-norm only: centred, scaled input
    std::vector<RowMatrix> inv_std;     // group-norm only: rows x groups
  };

  Subnet() = default;
  Subnet(int input_dim, std::vector<LayerSpec> layers);

  int input_dim() const { return input_dim_; }
  int output_dim() const { return output_dim_; }
  std::size_t num_params() const { return num_params_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  RowMatrix forward(const Eigen::VectorXd& params, const RowMatrix& x, Cache* cache) const;

  /// Backpropagates `grad_out` through the cached forward pass. Writes the
  /// parameter gradient into `grad_params` (resized) and returns the
  /// gradient with respect to the input.
  RowMatrix backward(const Eigen::VectorXd& params, const Cache& cache, const RowMatrix& grad_out,
                     Eigen::VectorXd& grad_params) const;

  /// He-style uniform fan-in initialization; biases and shifts start at 0,
  /// group-norm scales at 1.
  Eigen::VectorXd init_params(Rng& rng) const;

 private:
  struct Slot {
    int in = 0;
    int out = 0;
    std::size_t offset = 0;
  };

  int input_dim_ = 0;
  int output_dim_ = 0;
  std::size_t num_params_ = 0;
  std::vector<LayerSpec> layers_;
  std::vector<Slot> slots_;
};

struct Architecture {
  int input_dim = 0;
  std::vector<LayerSpec> client_layers;
  std::vector<LayerSpec> server_layers;

  bool operator==(const Architecture&) const = default;
};

/// input -> dense+ReLU [-> group norm] | cut | dense+ReLU -> dense logits.
Architecture default_mlp(int input_dim, int client_hidden, int server_hidden, int classes,
                         bool client_group_norm = false, int norm_groups = 4);

/// Client replicas of the lower layers plus one copy of the upper layers.
struct SplitModel {
  Architecture arch;
  Subnet client_net;
  Subnet server_net;
  std::vector<Eigen::VectorXd> client_params;
  Eigen::VectorXd server_params;

  /// Every replica is a copy of one seeded draw.
  static SplitModel create(const Architecture& arch, int clients, std::uint64_t seed);

  std::size_t num_clients() const { return client_params.size(); }
  /// Index of the first server-side layer in the composed network.
  std::size_t cut_layer() const { return arch.client_layers.size(); }
  bool replicas_in_sync() const;

  /// f_s(f_c(x; w_c); w_s) using client replica `client`.
  RowMatrix logits(const RowMatrix& x, std::size_t client = 0) const;
};

struct OptimizerConfig {
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

/// SGD with heavy-ball momentum and l2 weight decay folded into the
/// gradient: v <- mu v + (g + lambda w); w <- w - lr v.
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(OptimizerConfig config, Eigen::Index size);

  const OptimizerConfig& config() const { return config_; }
  const Eigen::VectorXd& velocity() const { return velocity_; }

  /// Advances the velocity for parameters `params` and returns the step to
  /// subtract (lr * v).
  Eigen::VectorXd advance(const Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

 private:
  OptimizerConfig config_;
  Eigen::VectorXd velocity_;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);
void to_json(nlohmann::json& j, const LayerSpec& l);
void from_json(const nlohmann::json& j, LayerSpec& l);
void to_json(nlohmann::json& j, const Architecture& a);
void from_json(const nlohmann::json& j, Architecture& a);

inline constexpr int kCheckpointVersion = 1;

/// Versioned checkpoint: architecture header plus every flat parameter
/// vector. Doubles are written in shortest round-trip form.
nlohmann::json checkpoint_to_json(const SplitModel& model);
SplitModel checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const SplitModel& model, const std::string& path);
SplitModel load_checkpoint(const std::string& path);

}  // namespace psl
