#pragma once

// Baseline subset selection: random sampling and herding.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmatch/data.hpp"
#include "gradmatch/eval.hpp"
#include "gradmatch/models.hpp"

namespace gradmatch::coreset {

struct CoresetResult {
  std::vector<std::vector<std::size_t>> per_class;  // dataset positions, ipc per class
  std::string method;
  std::uint64_t seed = 0;

  std::size_t ipc() const { return per_class.empty() ? 0 : per_class.front().size(); }
  // Throws ContractError unless every class holds ipc distinct, in-range
  // indices that belong to that class.
  void validate(const data::Dataset& ds) const;

  nlohmann::json to_json() const;
  static CoresetResult from_json(const nlohmann::json& j);
};

// Uniform per-class selection without replacement; the same draw as
// init_synthetic(ds, ipc, real_sample, seed).
CoresetResult random_coreset(const data::Dataset& ds, std::size_t ipc, std::uint64_t seed);

enum class HerdingFeatures { pixel, model_embedding };

struct HerdingOptions {
  HerdingFeatures features = HerdingFeatures::pixel;
  // model_embedding: network trained briefly on the whole dataset; its
  // penultimate activation is the feature space.
  std::optional<models::ModelSpec> spec;
  eval::TrainConfig embedding_training{.epochs = 5, .batch_size = 256, .lr = 0.01, .lr_decay_epochs = {}};
};

// Greedy mean matching over the rows of `features` (n x d, row-major): step k
// adds the unselected row that brings the running mean of the selection
// closest to the mean of all rows. Ties go to the lowest row. Returns row
// positions in selection order.
std::vector<std::size_t> herding_select(const std::vector<double>& features, std::size_t rows, std::size_t k);

CoresetResult herding_coreset(const data::Dataset& ds, std::size_t ipc, const HerdingOptions& options,
                              std::uint64_t seed);

// The selected images as a (fixed) synthetic set, class-major.
data::SyntheticSet to_synthetic(const data::Dataset& ds, const CoresetResult& coreset);

}  // namespace gradmatch::coreset
