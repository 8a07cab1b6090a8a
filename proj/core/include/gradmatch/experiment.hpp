#pragma once

// Experiment configuration and the recipes behind the command-line front end.
//
// A config is a JSON object with the sections below; every key is optional
// and unknown keys are rejected. Defaults (see `default_config()`):
//
//   seed                      0
//   precision                 64          (or 32)
//   jobs                      1
//   dataset.kind              "idx"       (or "blobs")
//   dataset.root              $GRADMATCH_DATA_DIR, else "data/mnist-desk"
//   dataset.train_images      "train-images-idx3-ubyte"   (relative to root)
//   dataset.train_labels      "train-labels-idx1-ubyte"
//   dataset.test_images       "t10k-images-idx3-ubyte"
//   dataset.test_labels       "t10k-labels-idx1-ubyte"
//   dataset.limit_per_class   1000        (null: everything)
//   dataset.blobs             {classes 2, per_class 500, test_per_class 5000,
//                              dim 2, separation 4.0}
//   model                     {arch "convnet_lite", hidden 128, conv_width 32,
//                              conv_depth 3}; the input shape comes from the data
//   condense                  CondenseConfig fields; theta_policy "fixed:1",
//                             distance "d1+d2", mode "multi_level",
//                             init "noise", lambda null (= classes)
//   eval                      TrainConfig fields plus runs 10,
//                             synthetic_sets 2, arch null (= model.arch)
//   coreset                   {method "random" | "herding" | "whole",
//                              features "pixel" | "model_embedding"}
//   ablate                    {axis "mode" | "distance" | "theta_policy",
//                              values [...]}
//   xarch                     {sources [...], targets [...]}
//   output                    {dir "runs/default", trace false}

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/condenser.hpp"
#include "gradmatch/data.hpp"
#include "gradmatch/eval.hpp"
#include "gradmatch/models.hpp"

namespace gradmatch::experiment {

struct BlobsConfig {
  std::size_t classes = 2;
  std::size_t per_class = 500;
  std::size_t test_per_class = 5000;
  std::size_t dim = 2;
  double separation = 4.0;
};

struct DatasetConfig {
  std::string kind = "idx";
  std::filesystem::path root;
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::optional<std::size_t> limit_per_class = 1000;
  BlobsConfig blobs;
};

struct EvalSection {
  eval::TrainConfig train;
  std::size_t runs = 10;
  std::size_t synthetic_sets = 2;
  std::optional<models::Arch> arch;
};

struct CoresetSection {
  std::string method = "random";
  std::string features = "pixel";
};

struct AblateSection {
  std::string axis;
  std::vector<std::string> values;
};

struct XArchSection {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
};

struct OutputSection {
  std::filesystem::path dir = "runs/default";
  bool trace = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ad::Precision precision = ad::Precision::f64;
  std::size_t jobs = 1;
  DatasetConfig dataset;
  models::ModelSpec model;
  condense::CondenseConfig condense;
  EvalSection eval;
  CoresetSection coreset;
  AblateSection ablate;
  XArchSection xarch;
  OutputSection output;
};

// Default data root: $GRADMATCH_DATA_DIR when set, else data/mnist-desk.
std::filesystem::path default_data_root();

ExperimentConfig default_config();

// Parses and validates a config. Every unknown key and every ill-typed or
// out-of-range value is reported in one ConfigError. With check_paths the
// dataset files must exist.
ExperimentConfig parse_config(const nlohmann::json& j, bool check_paths = true);
ExperimentConfig load_config(const std::filesystem::path& path, bool check_paths = true);

// Fully resolved config (every default materialized); parse_config of the
// result gives back the same config.
nlohmann::json to_json(const ExperimentConfig& cfg);

struct LoadedData {
  data::Dataset train;
  data::Dataset test;
};

LoadedData load_data(const ExperimentConfig& cfg);

// Model spec with the input shape and class count taken from the data.
models::ModelSpec model_for(const ExperimentConfig& cfg, const data::Dataset& train,
                            std::optional<models::Arch> arch = std::nullopt);

}  // namespace gradmatch::experiment
