#include "gradmatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gradmatch/errors.hpp"

namespace gradmatch::data {

namespace {

constexpr std::uint32_t kIdxImageMagic = 2051;
constexpr std::uint32_t kIdxLabelMagic = 2049;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw FormatError(path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

NormStats NormStats::identity(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

// ---- Dataset -------------------------------------------------------------------

void Dataset::validate() const {
  if (images.rank() != 4) throw ContractError("dataset images must be [N, C, H, W], got " + to_string(images.shape()));
  if (images.dim(0) != labels.size()) throw ContractError("dataset: image and label counts differ");
  if (class_index.size() != num_classes) throw ContractError("dataset: class index size differs from num_classes");
  std::vector<bool> seen(labels.size(), false);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t pos : class_index[c]) {
      if (pos >= labels.size() || seen[pos] || labels[pos] != static_cast<int>(c)) {
        throw ContractError("dataset: class index does not partition the samples");
      }
      seen[pos] = true;
    }
  }
  if (!std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) {
    throw ContractError("dataset: class index does not cover every sample");
  }
}

Batch Dataset::gather(std::span<const std::size_t> positions) const {
  const Shape s = sample_shape();
  const std::size_t per = numel(s);
  Batch b;
  b.images = Tensor({positions.size(), s[0], s[1], s[2]});
  b.labels.reserve(positions.size());
  b.indices.assign(positions.begin(), positions.end());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const std::size_t p = positions[i];
    std::copy_n(images.raw() + p * per, per, b.images.raw() + i * per);
    b.labels.push_back(labels[p]);
  }
  return b;
}

Batch Dataset::all() const {
  std::vector<std::size_t> positions(size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  return gather(positions);
}

Dataset make_dataset(Tensor images, std::vector<int> labels, std::size_t num_classes, NormStats stats) {
  Dataset ds;
  ds.images = std::move(images);
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  ds.stats = std::move(stats);
  ds.class_index.assign(num_classes, {});
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const int y = ds.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError("label " + std::to_string(y) + " at sample " + std::to_string(i) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    ds.class_index[static_cast<std::size_t>(y)].push_back(i);
  }
  ds.validate();
  return ds;
}

// ---- IDX -------------------------------------------------------------------------

IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::uint32_t magic = read_be32(bytes, 0, path);
  if (magic != kIdxImageMagic) {
    throw FormatError(path.string() + ": bad IDX image magic " + std::to_string(magic) + " (expected 2051)");
  }
  IdxImages out;
  out.count = read_be32(bytes, 4, path);
  out.rows = read_be32(bytes, 8, path);
  out.cols = read_be32(bytes, 12, path);
  const std::size_t payload = out.count * out.rows * out.cols;
  if (bytes.size() != 16 + payload) {
    throw FormatError(path.string() + ": payload has " + std::to_string(bytes.size() - 16) + " bytes, header promises " +
                      std::to_string(payload));
  }
  out.pixels.assign(bytes.begin() + 16, bytes.end());
  return out;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::uint32_t magic = read_be32(bytes, 0, path);
  if (magic != kIdxLabelMagic) {
    throw FormatError(path.string() + ": bad IDX label magic " + std::to_string(magic) + " (expected 2049)");
  }
  const std::size_t count = read_be32(bytes, 4, path);
  if (bytes.size() != 8 + count) {
    throw FormatError(path.string() + ": payload has " + std::to_string(bytes.size() - 8) + " bytes, header promises " +
                      std::to_string(count));
  }
  return {bytes.begin() + 8, bytes.end()};
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::optional<std::size_t> limit_per_class, const std::optional<NormStats>& stats) {
  const IdxImages raw = read_idx_images(images_path);
  const auto raw_labels = read_idx_labels(labels_path);
  if (raw.count != raw_labels.size()) {
    throw FormatError("IDX image/label count mismatch: " + std::to_string(raw.count) + " images, " +
                      std::to_string(raw_labels.size()) + " labels");
  }
  const int max_label = raw_labels.empty() ? 0 : *std::max_element(raw_labels.begin(), raw_labels.end());
  const std::size_t num_classes = static_cast<std::size_t>(max_label) + 1;

  std::vector<std::size_t> keep;
  std::vector<std::size_t> taken(num_classes, 0);
  for (std::size_t i = 0; i < raw.count; ++i) {
    if (limit_per_class && taken[raw_labels[i]] >= *limit_per_class) continue;
    ++taken[raw_labels[i]];
    keep.push_back(i);
  }

  const std::size_t per = raw.rows * raw.cols;
  Tensor images({keep.size(), 1, raw.rows, raw.cols});
  std::vector<int> labels;
  labels.reserve(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const std::uint8_t* src = raw.pixels.data() + keep[k] * per;
    for (std::size_t j = 0; j < per; ++j) images[k * per + j] = src[j] / 255.0;
    labels.push_back(raw_labels[keep[k]]);
  }
  NormStats s = stats ? *stats : fit_norm_stats(images);
  normalize_in_place(images, s);
  return make_dataset(std::move(images), std::move(labels), num_classes, std::move(s));
}

NormStats fit_norm_stats(const Tensor& images) {
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  NormStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < hw; ++j) total += images[(i * c + ch) * hw + j];
    const double mu = total / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = images[(i * c + ch) * hw + j] - mu;
        sq += d * d;
      }
    s.mean[ch] = mu;
    s.stddev[ch] = std::sqrt(sq / count);
    if (!(s.stddev[ch] > 0.0)) throw ContractError("fit_norm_stats: channel " + std::to_string(ch) + " is constant");
  }
  return s;
}

void normalize_in_place(Tensor& images, const NormStats& stats) {
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  if (stats.mean.size() != c || stats.stddev.size() != c) throw ContractError("normalize: channel count mismatch");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = images.raw() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] - stats.mean[ch]) / stats.stddev[ch];
    }
}

Tensor denormalize_clamped(const Tensor& images, const NormStats& stats) {
  Tensor out = images;
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.raw() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = std::clamp(p[j] * stats.stddev[ch] + stats.mean[ch], 0.0, 1.0);
    }
  return out;
}

Dataset truncate_per_class(const Dataset& ds, std::size_t k) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0, n = ds.size(); i < n; ++i) {
    const auto& idx = ds.class_index[static_cast<std::size_t>(ds.labels[i])];
    // position of i within its class list
    const auto rank = static_cast<std::size_t>(std::lower_bound(idx.begin(), idx.end(), i) - idx.begin());
    if (rank < k) keep.push_back(i);
  }
  Batch b = ds.gather(keep);
  return make_dataset(std::move(b.images), std::move(b.labels), ds.num_classes, ds.stats);
}

// ---- blobs -----------------------------------------------------------------------

std::vector<double> blob_direction(std::size_t c, std::size_t num_classes, std::size_t dim) {
  std::vector<double> u(dim, 0.0);
  if (num_classes <= dim) {
    u[c] = 1.0;
    return u;
  }
  Rng rng(derive_seed(0x626c6f6273ULL, c));
  std::normal_distribution<double> normal(0.0, 1.0);
  double norm = 0.0;
  for (double& v : u) {
    v = normal(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : u) v /= norm;
  return u;
}

Dataset gaussian_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim, double separation,
                       std::uint64_t seed) {
  if (num_classes < 2) throw ContractError("gaussian_blobs: need at least 2 classes");
  if (per_class < 1) throw ContractError("gaussian_blobs: per_class must be >= 1");
  if (dim < 1) throw ContractError("gaussian_blobs: dim must be >= 1");
  if (!(separation >= 0.0)) throw ContractError("gaussian_blobs: separation must be non-negative");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = num_classes * per_class;
  Tensor images({n, 1, 1, dim});
  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto u = blob_direction(c, num_classes, dim);
    for (std::size_t i = 0; i < per_class; ++i) {
      double* row = images.raw() + labels.size() * dim;
      for (std::size_t d = 0; d < dim; ++d) row[d] = separation * u[d] + normal(rng);
      labels.push_back(static_cast<int>(c));
    }
  }
  return make_dataset(std::move(images), std::move(labels), num_classes, NormStats::identity(1));
}

// ---- sampling --------------------------------------------------------------------

std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t n, Rng& rng) {
  n = std::min(n, pool.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  return pool;
}

Batch sample_class_batch(const Dataset& ds, int c, std::size_t n, Rng& rng) {
  if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes) {
    throw ContractError("sample_class_batch: class " + std::to_string(c) + " out of range");
  }
  const auto& pool = ds.class_index[static_cast<std::size_t>(c)];
  if (pool.empty()) throw ContractError("sample_class_batch: class " + std::to_string(c) + " is empty");
  return ds.gather(sample_without_replacement(pool, n, rng));
}

Batch sample_batch(const Dataset& ds, std::size_t n, Rng& rng) {
  if (ds.size() == 0) throw ContractError("sample_batch: empty dataset");
  std::vector<std::size_t> pool(ds.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  return ds.gather(sample_without_replacement(std::move(pool), n, rng));
}

// ---- synthetic set ---------------------------------------------------------------

Tensor SyntheticSet::class_images(std::size_t c) const {
  const Shape s = sample_shape();
  const std::size_t per = sample_numel();
  Tensor out({ipc, s[0], s[1], s[2]});
  std::copy_n(images.raw() + c * ipc * per, ipc * per, out.raw());
  return out;
}

void SyntheticSet::set_class_images(std::size_t c, const Tensor& values) {
  const std::size_t per = sample_numel();
  if (values.numel() != ipc * per) throw DimensionError("set_class_images: wrong number of values");
  std::copy_n(values.raw(), ipc * per, images.raw() + c * ipc * per);
}

Batch SyntheticSet::as_batch() const { return Batch{images, labels, {}}; }

void SyntheticSet::validate() const {
  if (images.rank() != 4 || images.dim(0) != ipc * num_classes || labels.size() != ipc * num_classes) {
    throw ContractError("synthetic set: shape " + to_string(images.shape()) + " does not hold " +
                        std::to_string(num_classes) + " x " + std::to_string(ipc) + " images");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != static_cast<int>(i / ipc)) throw ContractError("synthetic set: labels are not class-major");
  }
}

SyntheticSet make_synthetic(Tensor images, std::size_t ipc, std::size_t num_classes) {
  SyntheticSet s;
  s.images = std::move(images);
  s.ipc = ipc;
  s.num_classes = num_classes;
  s.labels.resize(ipc * num_classes);
  for (std::size_t i = 0; i < s.labels.size(); ++i) s.labels[i] = static_cast<int>(i / ipc);
  s.validate();
  return s;
}

SyntheticSet init_synthetic(const Dataset& ds, std::size_t ipc, InitMode mode, std::uint64_t seed) {
  if (ipc < 1) throw ContractError("init_synthetic: ipc must be >= 1");
  const Shape s = ds.sample_shape();
  Tensor images({ds.num_classes * ipc, s[0], s[1], s[2]});
  Rng rng(seed);
  if (mode == InitMode::noise) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : images.data()) v = normal(rng);
  } else {
    const std::size_t per = numel(s);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      if (ds.class_index[c].size() < ipc) {
        throw ContractError("init_synthetic: class " + std::to_string(c) + " has " +
                            std::to_string(ds.class_index[c].size()) + " samples, ipc is " + std::to_string(ipc));
      }
      const auto picked = sample_without_replacement(ds.class_index[c], ipc, rng);
      for (std::size_t k = 0; k < ipc; ++k) {
        std::copy_n(ds.images.raw() + picked[k] * per, per, images.raw() + (c * ipc + k) * per);
      }
    }
  }
  return make_synthetic(std::move(images), ipc, ds.num_classes);
}

}  // namespace gradmatch::data
