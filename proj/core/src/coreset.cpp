#include "gradmatch/coreset.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include "gradmatch/errors.hpp"
#include "gradmatch/random.hpp"

namespace gradmatch::coreset {

namespace {

void require_class_sizes(const data::Dataset& ds, std::size_t ipc, const char* op) {
  if (ipc < 1) throw ContractError(std::string(op) + ": ipc must be >= 1");
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    if (ds.class_index[c].size() < ipc) {
      throw ContractError(std::string(op) + ": class " + std::to_string(c) + " has " +
                          std::to_string(ds.class_index[c].size()) + " samples, fewer than ipc " + std::to_string(ipc));
    }
  }
}

// Row-major [n, d] features of the given dataset positions.
std::vector<double> pixel_features(const data::Dataset& ds, const std::vector<std::size_t>& positions) {
  const std::size_t d = numel(ds.sample_shape());
  std::vector<double> out(positions.size() * d);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::copy_n(ds.images.raw() + positions[i] * d, d, out.data() + i * d);
  }
  return out;
}

std::vector<double> embedding_features(const data::Dataset& ds, const std::vector<std::size_t>& positions,
                                       const models::ModelSpec& spec, const models::ParamSet& params) {
  constexpr std::size_t kChunk = 256;
  ad::NoGradGuard no_grad;
  std::vector<double> out;
  for (std::size_t start = 0; start < positions.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, positions.size() - start);
    const data::Batch b = ds.gather(std::span(positions).subspan(start, len));
    const Tensor f = models::features(spec, params, ad::Var(b.images)).value();
    out.insert(out.end(), f.raw(), f.raw() + f.numel());
  }
  return out;
}

}  // namespace

void CoresetResult::validate(const data::Dataset& ds) const {
  if (per_class.size() != ds.num_classes) {
    throw ContractError("coreset: " + std::to_string(per_class.size()) + " classes, dataset has " +
                        std::to_string(ds.num_classes));
  }
  const std::size_t k = ipc();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& sel = per_class[c];
    if (sel.size() != k || k == 0) throw ContractError("coreset: class " + std::to_string(c) + " is not balanced");
    if (std::set<std::size_t>(sel.begin(), sel.end()).size() != sel.size()) {
      throw ContractError("coreset: duplicate index in class " + std::to_string(c));
    }
    for (std::size_t i : sel) {
      if (i >= ds.size() || ds.labels[i] != static_cast<int>(c)) {
        throw ContractError("coreset: index " + std::to_string(i) + " is not a sample of class " + std::to_string(c));
      }
    }
  }
}

nlohmann::json CoresetResult::to_json() const {
  return {{"method", method}, {"seed", seed}, {"ipc", ipc()}, {"per_class", per_class}};
}

CoresetResult CoresetResult::from_json(const nlohmann::json& j) {
  try {
    CoresetResult r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.per_class = j.at("per_class").get<std::vector<std::vector<std::size_t>>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("coreset json: ") + e.what());
  }
}

CoresetResult random_coreset(const data::Dataset& ds, std::size_t ipc, std::uint64_t seed) {
  require_class_sizes(ds, ipc, "random_coreset");
  CoresetResult r{{}, "random", seed};
  Rng rng(seed);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    r.per_class.push_back(data::sample_without_replacement(ds.class_index[c], ipc, rng));
  }
  return r;
}

std::vector<std::size_t> herding_select(const std::vector<double>& features, std::size_t rows, std::size_t k) {
  if (rows == 0) throw ContractError("herding: no candidates");
  if (features.size() % rows != 0) throw DimensionError("herding: feature matrix is not rectangular");
  if (k > rows) throw ContractError("herding: asked for " + std::to_string(k) + " of " + std::to_string(rows) + " rows");
  const std::size_t d = features.size() / rows;
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += features[i * d + j];
  for (double& m : mu) m /= static_cast<double>(rows);

  std::vector<double> sum(d, 0.0);
  std::vector<bool> taken(rows, false);
  std::vector<std::size_t> order;
  for (std::size_t step = 1; step <= k; ++step) {
    const double inv = 1.0 / static_cast<double>(step);
    std::size_t best = rows;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rows; ++i) {
      if (taken[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = mu[j] - (sum[j] + features[i * d + j]) * inv;
        dist += e * e;
      }
      if (dist < best_dist) {
        best = i;
        best_dist = dist;
      }
    }
    taken[best] = true;
    order.push_back(best);
    for (std::size_t j = 0; j < d; ++j) sum[j] += features[best * d + j];
  }
  return order;
}

CoresetResult herding_coreset(const data::Dataset& ds, std::size_t ipc, const HerdingOptions& options,
                              std::uint64_t seed) {
  require_class_sizes(ds, ipc, "herding_coreset");
  CoresetResult r{{}, "herding", seed};
  std::optional<models::ParamSet> params;
  if (options.features == HerdingFeatures::model_embedding) {
    r.method = "herding_embedding";
    if (!options.spec) throw ContractError("herding_coreset: model_embedding features need a model spec");
    eval::TrainConfig cfg = options.embedding_training;
    cfg.seed = seed;
    params = eval::train_from_scratch(*options.spec, ds.all(), cfg);
  }
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    const auto& pool = ds.class_index[c];
    const std::vector<double> f =
        params ? embedding_features(ds, pool, *options.spec, *params) : pixel_features(ds, pool);
    std::vector<std::size_t> picked;
    for (std::size_t row : herding_select(f, pool.size(), ipc)) picked.push_back(pool[row]);
    r.per_class.push_back(std::move(picked));
  }
  return r;
}

data::SyntheticSet to_synthetic(const data::Dataset& ds, const CoresetResult& coreset) {
  coreset.validate(ds);
  const std::size_t ipc = coreset.ipc();
  const Shape s = ds.sample_shape();
  const std::size_t per = numel(s);
  Tensor images({ds.num_classes * ipc, s[0], s[1], s[2]});
  for (std::size_t c = 0; c < ds.num_classes; ++c)
    for (std::size_t k = 0; k < ipc; ++k) {
      std::copy_n(ds.images.raw() + coreset.per_class[c][k] * per, per, images.raw() + (c * ipc + k) * per);
    }
  return data::make_synthetic(std::move(images), ipc, ds.num_classes);
}

}  // namespace gradmatch::coreset
