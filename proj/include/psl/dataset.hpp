#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace psl {

using ClassId = int;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Indexed sample store. Rows of `features` are samples; `labels[i]` is the
/// class of row i and lies in [0, num_classes).
struct LabeledDataset {
  RowMatrix features;
  std::vector<ClassId> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Eigen::Index feature_dim() const { return features.cols(); }

  /// Throws std::invalid_argument when rows and labels disagree or a label
  /// is out of range.
  void validate() const;

  /// Gathers the given rows, preserving order.
  RowMatrix gather_features(std::span<const std::size_t> rows) const;
  std::vector<ClassId> gather_labels(std::span<const std::size_t> rows) const;
};

/// Per-class sample fractions of a label vector.
struct ClassDistribution {
  std::vector<double> probs;

  int num_classes() const { return static_cast<int>(probs.size()); }
  void validate() const;
};

ClassDistribution class_distribution(std::span<const ClassId> labels, int num_classes);

/// Per-class counts, used where exact integer arithmetic matters.
std::vector<std::size_t> class_counts(std::span<const ClassId> labels, int num_classes);

/// Gaussian-mixture generator standing in for an image dataset: one mean per
/// class drawn on a sphere of radius `class_separation`, isotropic noise.
struct SyntheticSpec {
  int classes = 10;
  std::size_t per_class_count = 1000;
  std::size_t test_per_class_count = 200;
  int feature_dim = 32;
  double class_separation = 3.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;
};

struct SyntheticData {
  LabeledDataset train;
  LabeledDataset test;
};

/// Rows are grouped by class in ascending class order. Train and test share
/// the class means.
SyntheticData make_synthetic(const SyntheticSpec& spec);

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

}  // namespace psl
