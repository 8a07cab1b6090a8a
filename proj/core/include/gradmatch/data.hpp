#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "gradmatch/random.hpp"
#include "gradmatch/tensor.hpp"

namespace gradmatch::data {

// Per-channel statistics used to normalize images: x' = (x - mean) / std.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static NormStats identity(std::size_t channels);
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

// Images with labels; the common currency of training and evaluation.
struct Batch {
  Tensor images;            // [N, C, H, W]
  std::vector<int> labels;  // N entries
  std::vector<std::size_t> indices;  // source positions, when sampled from a Dataset

  std::size_t size() const noexcept { return labels.size(); }
};

// A labelled image set with a per-class index.
struct Dataset {
  Tensor images;  // [N, C, H, W], normalized
  std::vector<int> labels;
  std::vector<std::vector<std::size_t>> class_index;
  std::size_t num_classes = 0;
  NormStats stats;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t class_size(int c) const { return class_index.at(static_cast<std::size_t>(c)).size(); }

  // Throws ContractError if labels, class_index and images disagree.
  void validate() const;
  Batch gather(std::span<const std::size_t> positions) const;
  Batch all() const;
};

// Builds the class index; labels must lie in [0, num_classes).
Dataset make_dataset(Tensor images, std::vector<int> labels, std::size_t num_classes, NormStats stats);

// ---- IDX files ---------------------------------------------------------------

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);

// Loads an IDX image/label pair, scales to [0, 1], optionally keeps the first
// limit_per_class samples of every class, and normalizes. With `stats` unset
// the statistics are fitted on the loaded (truncated) split; pass the training
// split's statistics when loading its test split.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::optional<std::size_t> limit_per_class = std::nullopt,
                 const std::optional<NormStats>& stats = std::nullopt);

// Population mean/std per channel of [N, C, H, W] images.
NormStats fit_norm_stats(const Tensor& images);
void normalize_in_place(Tensor& images, const NormStats& stats);
// Inverse of normalize, clamped to [0, 1] (for image dumps).
Tensor denormalize_clamped(const Tensor& images, const NormStats& stats);

// First k samples of every class (in dataset order).
Dataset truncate_per_class(const Dataset& ds, std::size_t k);

// ---- synthetic toy data ------------------------------------------------------

// Class c is centred at separation * u_c with unit isotropic noise. u_c is the
// c-th basis vector when num_classes <= dim, otherwise a fixed pseudo-random
// unit vector. Images are shaped [N, 1, 1, dim]; statistics are the identity.
Dataset gaussian_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim, double separation,
                       std::uint64_t seed);
std::vector<double> blob_direction(std::size_t c, std::size_t num_classes, std::size_t dim);

// ---- sampling ----------------------------------------------------------------

// Partial Fisher-Yates: the first min(n, |pool|) entries of a uniform random
// permutation of pool.
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t n, Rng& rng);

// n samples of class c uniformly without replacement; the whole class
// (shuffled) when n >= its size.
Batch sample_class_batch(const Dataset& ds, int c, std::size_t n, Rng& rng);

// n samples from the whole dataset uniformly without replacement.
Batch sample_batch(const Dataset& ds, std::size_t n, Rng& rng);

// ---- synthetic set -----------------------------------------------------------

enum class InitMode { noise, real_sample };

// The learnable set S. Rows are class-major: rows [c*ipc, (c+1)*ipc) hold
// class c, and labels never change.
struct SyntheticSet {
  Tensor images;  // [num_classes * ipc, C, H, W]
  std::vector<int> labels;
  std::size_t ipc = 0;
  std::size_t num_classes = 0;

  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t sample_numel() const { return images.numel() / images.dim(0); }
  Tensor class_images(std::size_t c) const;
  void set_class_images(std::size_t c, const Tensor& values);
  Batch as_batch() const;
  void validate() const;
};

SyntheticSet make_synthetic(Tensor images, std::size_t ipc, std::size_t num_classes);

// noise: entries ~ N(0, 1). real_sample: per class, the first ipc entries of
// sample_without_replacement(class_index[c]) from one Rng(seed) stream, class
// by class (the same draw as a random coreset with that seed).
SyntheticSet init_synthetic(const Dataset& ds, std::size_t ipc, InitMode mode, std::uint64_t seed);

}  // namespace gradmatch::data
