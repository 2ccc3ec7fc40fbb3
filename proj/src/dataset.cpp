#include "psl/dataset.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "psl/random.hpp"

namespace psl {

void LabeledDataset::validate() const {
  if (num_classes < 1) throw std::invalid_argument("dataset: num_classes must be positive");
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw std::invalid_argument("dataset: feature rows (" + std::to_string(features.rows()) +
                                ") != labels (" + std::to_string(labels.size()) + ")");
  for (ClassId y : labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("dataset: label " + std::to_string(y) + " out of range");
}

RowMatrix LabeledDataset::gather_features(std::span<const std::size_t> rows) const {
  RowMatrix out(static_cast<Eigen::Index>(rows.size()), features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<ClassId> LabeledDataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<ClassId> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels[r]);
  return out;
}

void ClassDistribution::validate() const {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("class distribution: negative entry");
    sum += p;
  }
  if (probs.empty() || std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("class distribution: entries do not sum to 1");
}

std::vector<std::size_t> class_counts(std::span<const ClassId> labels, int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("class count must be positive");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (ClassId y : labels) {
    if (y < 0 || y >= num_classes)
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes) + ")");
    ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

ClassDistribution class_distribution(std::span<const ClassId> labels, int num_classes) {
  if (labels.empty()) throw std::invalid_argument("empty distribution");
  const auto counts = class_counts(labels, num_classes);
  ClassDistribution dist;
  dist.probs.reserve(counts.size());
  const double n = static_cast<double>(labels.size());
  for (std::size_t c : counts) dist.probs.push_back(static_cast<double>(c) / n);
  return dist;
}

namespace {

LabeledDataset sample_mixture(const RowMatrix& means, std::size_t per_class, double sigma,
                              Rng& rng) {
  const auto classes = static_cast<int>(means.rows());
  LabeledDataset ds;
  ds.num_classes = classes;
  ds.features.resize(static_cast<Eigen::Index>(per_class) * classes, means.cols());
  ds.labels.reserve(per_class * static_cast<std::size_t>(classes));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Index row = 0;
  for (int m = 0; m < classes; ++m) {
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      for (Eigen::Index d = 0; d < means.cols(); ++d)
        ds.features(row, d) = means(m, d) + sigma * normal(rng);
      ds.labels.push_back(m);
    }
  }
  return ds;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.feature_dim < 1 || spec.per_class_count < 1)
    throw std::invalid_argument("synthetic spec: classes, feature_dim and per_class_count must be positive");
  if (!(spec.noise_sigma >= 0.0) || !(spec.class_separation >= 0.0))
    throw std::invalid_argument("synthetic spec: separation and noise must be non-negative");

  Rng mean_rng = make_rng(spec.seed, 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrix means(spec.classes, spec.feature_dim);
  for (int m = 0; m < spec.classes; ++m) {
    for (int d = 0; d < spec.feature_dim; ++d) means(m, d) = normal(mean_rng);
    const double norm = means.row(m).norm();
    if (norm > 0.0) means.row(m) *= spec.class_separation / norm;
  }

  Rng train_rng = make_rng(spec.seed, 2);
  Rng test_rng = make_rng(spec.seed, 3);
  SyntheticData out;
  out.train = sample_mixture(means, spec.per_class_count, spec.noise_sigma, train_rng);
  out.test = sample_mixture(means, spec.test_per_class_count, spec.noise_sigma, test_rng);
  return out;
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"classes", s.classes},
                     {"per_class_count", s.per_class_count},
                     {"test_per_class_count", s.test_per_class_count},
                     {"feature_dim", s.feature_dim},
                     {"class_separation", s.class_separation},
                     {"noise_sigma", s.noise_sigma},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  SyntheticSpec d;
  s.classes = j.value("classes", d.classes);
  s.per_class_count = j.value("per_class_count", d.per_class_count);
  s.test_per_class_count = j.value("test_per_class_count", d.test_per_class_count);
  s.feature_dim = j.value("feature_dim", d.feature_dim);
  s.class_separation = j.value("class_separation", d.class_separation);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.seed = j.value("seed", d.seed);
}

}  // namespace psl
