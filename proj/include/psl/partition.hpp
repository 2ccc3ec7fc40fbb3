#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "psl/dataset.hpp"

namespace psl {

enum class PartitionKind { iid, extended_dirichlet };

struct PartitionSpec {
  PartitionKind kind = PartitionKind::iid;
  int clients = 1;
  int classes_per_client = 1;  // extended Dirichlet only
  double alpha = 1.0;          // extended Dirichlet only
  std::uint64_t seed = 0;

  void validate(int num_classes) const;
  bool operator==(const PartitionSpec&) const = default;
};

/// Disjoint per-client index sets covering a dataset.
struct Partition {
  PartitionSpec spec;
  std::vector<std::vector<std::size_t>> client_indices;
  std::vector<std::size_t> client_sizes;
  std::vector<ClassDistribution> client_distributions;
  /// Set when some client received fewer than C classes because a class had
  /// fewer samples than assigned clients.
  bool short_class_warning = false;
  /// Set when a zero allocation was repaired by moving one sample over.
  bool reallocated = false;

  int num_clients() const { return static_cast<int>(client_indices.size()); }
  std::size_t pool_size() const;

  /// Checks disjointness, coverage of [0, dataset.size()) and that sizes
  /// and distributions agree with the indices.
  void validate(const LabeledDataset& dataset) const;
};

/// Builds a partition from explicit index sets, filling sizes and
/// distributions. Clients with no samples get an all-zero distribution.
Partition make_partition(const LabeledDataset& dataset,
                         std::vector<std::vector<std::size_t>> client_indices,
                         PartitionSpec spec = {});

Partition iid_partition(const LabeledDataset& dataset, int clients, std::uint64_t seed);

/// Every client gets exactly `classes_per_client` classes (when each class has
/// enough samples), chosen greedily from the least-assigned classes; each
/// class is then split over its clients by one Dirichlet(alpha) draw.
Partition extended_dirichlet_partition(const LabeledDataset& dataset, const PartitionSpec& spec);

/// Dispatches on spec.kind.
Partition build_partition(const LabeledDataset& dataset, const PartitionSpec& spec);

/// Distinct classes present in client k.
int distinct_classes(const Partition& partition, int client);

std::string to_string(PartitionKind kind);
PartitionKind partition_kind_from_string(const std::string& s);

void to_json(nlohmann::json& j, const PartitionSpec& s);
void from_json(const nlohmann::json& j, PartitionSpec& s);

/// {K, C, alpha, seed, kind, client_indices, flags}. Distributions are
/// recomputed from the dataset on import.
nlohmann::json partition_to_json(const Partition& p);
Partition partition_from_json(const nlohmann::json& j, const LabeledDataset& dataset);
/// Index sets only, for callers that have no dataset at hand.
std::vector<std::vector<std::size_t>> partition_indices_from_json(const nlohmann::json& j);

}  // namespace psl
