#include "psl/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "psl/random.hpp"

namespace psl {

void PartitionSpec::validate(int num_classes) const {
  if (clients < 1) throw std::invalid_argument("partition: client count must be >= 1");
  if (kind != PartitionKind::extended_dirichlet) return;
  if (classes_per_client < 1 || classes_per_client > num_classes)
    throw std::invalid_argument("partition: classes per client must lie in [1, M]");
  if (!(alpha > 0.0)) throw std::invalid_argument("partition: alpha must be positive");
  if (static_cast<long long>(clients) * classes_per_client < num_classes)
    throw std::invalid_argument("class uncovered: K*C < M");
}

std::size_t Partition::pool_size() const {
  return std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0});
}

void Partition::validate(const LabeledDataset& dataset) const {
  const std::size_t k = client_indices.size();
  if (client_sizes.size() != k || client_distributions.size() != k)
    throw std::logic_error("partition: inconsistent client count");
  std::vector<char> seen(dataset.size(), 0);
  std::size_t total = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (client_sizes[c] != client_indices[c].size())
      throw std::logic_error("partition: client size mismatch");
    for (std::size_t idx : client_indices[c]) {
      if (idx >= dataset.size()) throw std::logic_error("partition: index out of range");
      if (seen[idx]) throw std::logic_error("partition: index assigned twice");
      seen[idx] = 1;
    }
    total += client_sizes[c];
    if (!client_indices[c].empty()) {
      const auto labels = dataset.gather_labels(client_indices[c]);
      if (class_distribution(labels, dataset.num_classes).probs != client_distributions[c].probs)
        throw std::logic_error("partition: stale client distribution");
    }
  }
  if (total != dataset.size()) throw std::logic_error("partition: pool not covered");
}

Partition make_partition(const LabeledDataset& dataset,
                         std::vector<std::vector<std::size_t>> client_indices,
                         PartitionSpec spec) {
  Partition p;
  p.spec = spec;
  p.spec.clients = static_cast<int>(client_indices.size());
  p.client_indices = std::move(client_indices);
  for (const auto& idx : p.client_indices) {
    p.client_sizes.push_back(idx.size());
    if (idx.empty()) {
      p.client_distributions.push_back(
          {std::vector<double>(static_cast<std::size_t>(dataset.num_classes), 0.0)});
    } else {
      p.client_distributions.push_back(
          class_distribution(dataset.gather_labels(idx), dataset.num_classes));
    }
  }
  return p;
}

Partition iid_partition(const LabeledDataset& dataset, int clients, std::uint64_t seed) {
  if (clients < 1) throw std::invalid_argument("iid partition: client count must be >= 1");
  const std::size_t n = dataset.size();
  const auto k = static_cast<std::size_t>(clients);
  if (k > n) throw std::invalid_argument("iid partition: more clients than samples");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, stream::kPartition);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> chunks(k);
  const std::size_t base = n / k;
  const std::size_t extra = n % k;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t len = base + (c < extra ? 1 : 0);
    chunks[c].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                     order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }

  PartitionSpec spec;
  spec.kind = PartitionKind::iid;
  spec.clients = clients;
  spec.seed = seed;
  return make_partition(dataset, std::move(chunks), spec);
}

namespace {

// C distinct classes per client, always from the currently least-assigned
// ones, with seeded tie-breaks.
std::vector<std::vector<int>> assign_classes(int clients, int per_client, int num_classes,
                                             Rng& rng) {
  std::vector<int> load(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(clients));
  std::vector<int> ties;
  for (auto& mine : out) {
    std::vector<char> taken(static_cast<std::size_t>(num_classes), 0);
    for (int c = 0; c < per_client; ++c) {
      int best = std::numeric_limits<int>::max();
      ties.clear();
      for (int m = 0; m < num_classes; ++m) {
        if (taken[static_cast<std::size_t>(m)]) continue;
        const int l = load[static_cast<std::size_t>(m)];
        if (l < best) {
          best = l;
          ties.clear();
        }
        if (l == best) ties.push_back(m);
      }
      const int pick = ties[uniform_below(rng, ties.size())];
      taken[static_cast<std::size_t>(pick)] = 1;
      ++load[static_cast<std::size_t>(pick)];
      mine.push_back(pick);
    }
    std::sort(mine.begin(), mine.end());
  }
  return out;
}

// Largest-remainder rounding of total * weights; ties go to the lower index.
std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  const std::size_t n = weights.size();
  std::vector<std::size_t> alloc(n, 0);
  std::vector<double> frac(n, 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    alloc[i] = std::min(total, static_cast<std::size_t>(std::floor(exact)));
    frac[i] = exact - static_cast<double>(alloc[i]);
    assigned += alloc[i];
  }
  // Floating point can push the floors past the total in pathological cases.
  while (assigned > total) {
    const auto it = std::max_element(alloc.begin(), alloc.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % n) {
    ++alloc[order[i]];
    ++assigned;
  }
  return alloc;
}

}  // namespace

Partition extended_dirichlet_partition(const LabeledDataset& dataset, const PartitionSpec& spec) {
  if (spec.kind != PartitionKind::extended_dirichlet)
    throw std::invalid_argument("extended Dirichlet partition: wrong spec kind");
  dataset.validate();
  const int num_classes = dataset.num_classes;
  spec.validate(num_classes);

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < dataset.size(); ++i)
    by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
  for (const auto& members : by_class)
    if (members.empty())
      throw std::invalid_argument("extended Dirichlet partition: a class has no samples");

  Rng rng = make_rng(spec.seed, stream::kPartition);
  const auto client_classes =
      assign_classes(spec.clients, spec.classes_per_client, num_classes, rng);

  std::vector<std::vector<int>> holders(static_cast<std::size_t>(num_classes));
  for (int k = 0; k < spec.clients; ++k)
    for (int m : client_classes[static_cast<std::size_t>(k)])
      holders[static_cast<std::size_t>(m)].push_back(k);

  std::vector<std::vector<std::size_t>> chunks(static_cast<std::size_t>(spec.clients));
  bool reallocated = false;
  bool short_class = false;
  std::gamma_distribution<double> gamma(spec.alpha, 1.0);

  for (int m = 0; m < num_classes; ++m) {
    auto& members = by_class[static_cast<std::size_t>(m)];
    const auto& owners = holders[static_cast<std::size_t>(m)];
    std::shuffle(members.begin(), members.end(), rng);

    std::vector<double> weights(owners.size());
    for (double& w : weights) w = gamma(rng);
    if (std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0) {
      // Every gamma variate underflowed (alpha extremely small): the
      // Dirichlet limit puts all mass on one owner.
      std::fill(weights.begin(), weights.end(), 0.0);
      weights[uniform_below(rng, weights.size())] = 1.0;
    }
    auto alloc = largest_remainder(members.size(), weights);

    if (members.size() >= owners.size()) {
      for (std::size_t i = 0; i < alloc.size(); ++i) {
        if (alloc[i] != 0) continue;
        const auto donor = static_cast<std::size_t>(
            std::max_element(alloc.begin(), alloc.end()) - alloc.begin());
        --alloc[donor];
        ++alloc[i];
        reallocated = true;
      }
    } else {
      short_class = true;
    }

    std::size_t pos = 0;
    for (std::size_t i = 0; i < owners.size(); ++i) {
      auto& dst = chunks[static_cast<std::size_t>(owners[i])];
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                 members.begin() + static_cast<std::ptrdiff_t>(pos + alloc[i]));
      pos += alloc[i];
    }
  }

  for (auto& c : chunks) std::sort(c.begin(), c.end());
  Partition p = make_partition(dataset, std::move(chunks), spec);
  p.reallocated = reallocated;
  p.short_class_warning = short_class;
  return p;
}

Partition build_partition(const LabeledDataset& dataset, const PartitionSpec& spec) {
  switch (spec.kind) {
    case PartitionKind::iid:
      return iid_partition(dataset, spec.clients, spec.seed);
    case PartitionKind::extended_dirichlet:
      return extended_dirichlet_partition(dataset, spec);
  }
  throw std::invalid_argument("unknown partition kind");
}

int distinct_classes(const Partition& partition, int client) {
  const auto& dist = partition.client_distributions.at(static_cast<std::size_t>(client));
  return static_cast<int>(std::count_if(dist.probs.begin(), dist.probs.end(),
                                        [](double p) { return p > 0.0; }));
}

std::string to_string(PartitionKind kind) {
  return kind == PartitionKind::iid ? "iid" : "dirichlet";
}

PartitionKind partition_kind_from_string(const std::string& s) {
  if (s == "iid") return PartitionKind::iid;
  if (s == "dirichlet" || s == "extended_dirichlet") return PartitionKind::extended_dirichlet;
  throw std::invalid_argument("unknown partition kind '" + s + "'");
}

void to_json(nlohmann::json& j, const PartitionSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},
                     {"K", s.clients},
                     {"C", s.classes_per_client},
                     {"alpha", s.alpha},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, PartitionSpec& s) {
  PartitionSpec d;
  s.kind = partition_kind_from_string(j.value("kind", to_string(d.kind)));
  s.clients = j.value("K", d.clients);
  s.classes_per_client = j.value("C", d.classes_per_client);
  s.alpha = j.value("alpha", d.alpha);
  s.seed = j.value("seed", d.seed);
}

nlohmann::json partition_to_json(const Partition& p) {
  nlohmann::json j = p.spec;
  j["K"] = p.num_clients();
  j["client_indices"] = p.client_indices;
  j["short_class_warning"] = p.short_class_warning;
  j["reallocated"] = p.reallocated;
  return j;
}

std::vector<std::vector<std::size_t>> partition_indices_from_json(const nlohmann::json& j) {
  return j.at("client_indices").get<std::vector<std::vector<std::size_t>>>();
}

Partition partition_from_json(const nlohmann::json& j, const LabeledDataset& dataset) {
  Partition p = make_partition(dataset, partition_indices_from_json(j), j.get<PartitionSpec>());
  p.short_class_warning = j.value("short_class_warning", false);
  p.reallocated = j.value("reallocated", false);
  p.validate(dataset);
  return p;
}

}  // namespace psl
