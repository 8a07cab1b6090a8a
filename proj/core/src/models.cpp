#include "gradmatch/models.hpp"

#include <cmath>

#include "gradmatch/errors.hpp"
#include "gradmatch/random.hpp"

namespace gradmatch::models {

using ad::Var;
using gradmatch::to_string;

namespace {

constexpr std::size_t kLenetConv1 = 6;
constexpr std::size_t kLenetConv2 = 16;
constexpr std::size_t kLenetHidden = 84;

struct LenetDims {
  std::size_t h1, w1;  // after conv1 + pool
  std::size_t h2, w2;  // after conv2 + pool
};

LenetDims lenet_dims(const ModelSpec& s) {
  LenetDims d{};
  d.h1 = s.height / 2;
  d.w1 = s.width / 2;
  if (d.h1 < 5 || d.w1 < 5) {
    throw ContractError("lenet_lite: input " + to_string(s.input_shape()) + " too small for the second 5x5 conv");
  }
  d.h2 = (d.h1 - 4) / 2;
  d.w2 = (d.w1 - 4) / 2;
  if (d.h2 < 1 || d.w2 < 1) throw ContractError("lenet_lite: input " + to_string(s.input_shape()) + " too small");
  return d;
}

std::pair<std::size_t, std::size_t> convnet_out_hw(const ModelSpec& s) {
  std::size_t h = s.height, w = s.width;
  for (std::size_t l = 0; l < s.conv_depth; ++l) {
    if (h < 2 || w < 2) {
      throw ContractError("convnet_lite: input " + to_string(s.input_shape()) + " too small for " +
                          std::to_string(s.conv_depth) + " pooling stages");
    }
    h /= 2;
    w /= 2;
  }
  return {h, w};
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  return ad::bias_add(ad::matmul(x, ad::transpose(weight)), bias);
}

void check_batch(const ModelSpec& spec, const Var& batch) {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != spec.channels || s[2] != spec.height || s[3] != spec.width) {
    throw DimensionError("forward: batch shape " + to_string(s) + " does not match model input [N, " +
                         std::to_string(spec.channels) + ", " + std::to_string(spec.height) + ", " +
                         std::to_string(spec.width) + "]");
  }
}

// Runs every layer but the last linear one.
Var body(const ModelSpec& spec, const ParamSet& p, const Var& batch) {
  check_batch(spec, batch);
  switch (spec.arch) {
    case Arch::logistic:
      return ad::flatten(batch);
    case Arch::mlp:
      return ad::relu(linear(ad::flatten(batch), p[0].value, p[1].value));
    case Arch::convnet_lite: {
      Var x = batch;
      for (std::size_t l = 0; l < spec.conv_depth; ++l) {
        x = ad::conv2d(x, p[2 * l].value, {.stride = 1, .padding = 1});
        x = ad::avg_pool2d(ad::relu(ad::bias_add(x, p[2 * l + 1].value)), 2);
      }
      return ad::flatten(x);
    }
    case Arch::lenet_lite: {
      Var x = ad::conv2d(batch, p[0].value, {.stride = 1, .padding = 2});
      x = ad::avg_pool2d(ad::relu(ad::bias_add(x, p[1].value)), 2);
      x = ad::conv2d(x, p[2].value, {.stride = 1, .padding = 0});
      x = ad::avg_pool2d(ad::relu(ad::bias_add(x, p[3].value)), 2);
      return ad::relu(linear(ad::flatten(x), p[4].value, p[5].value));
    }
  }
  throw ContractError("unknown architecture");
}

}  // namespace

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::logistic: return "logistic";
    case Arch::mlp: return "mlp";
    case Arch::convnet_lite: return "convnet_lite";
    case Arch::lenet_lite: return "lenet_lite";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::logistic, Arch::mlp, Arch::convnet_lite, Arch::lenet_lite}) {
    if (name == to_string(a)) return a;
  }
  throw ContractError("unknown architecture '" + std::string(name) +
                      "' (expected logistic, mlp, convnet_lite or lenet_lite)");
}

std::string_view to_string(ParamRole role) { return role == ParamRole::weight ? "weight" : "bias"; }

void ModelSpec::validate() const {
  if (num_classes < 2) throw ContractError("model: num_classes must be >= 2");
  if (channels == 0 || height == 0 || width == 0) throw ContractError("model: empty input shape");
  switch (arch) {
    case Arch::logistic: break;
    case Arch::mlp:
      if (hidden == 0) throw ContractError("mlp: hidden width must be positive");
      break;
    case Arch::convnet_lite:
      if (conv_width == 0 || conv_depth == 0) throw ContractError("convnet_lite: width and depth must be positive");
      convnet_out_hw(*this);
      break;
    case Arch::lenet_lite:
      lenet_dims(*this);
      break;
  }
}

std::vector<ParamShape> layout(const ModelSpec& spec) {
  spec.validate();
  const std::size_t c = spec.num_classes;
  std::vector<ParamShape> out;
  auto dense = [&](std::string id, std::size_t in, std::size_t o) {
    out.push_back({id, ParamRole::weight, {o, in}, in});
    out.push_back({std::move(id), ParamRole::bias, {o}, in});
  };
  auto conv = [&](std::string id, std::size_t in, std::size_t o, std::size_t k) {
    out.push_back({id, ParamRole::weight, {o, in, k, k}, in * k * k});
    out.push_back({std::move(id), ParamRole::bias, {o}, in * k * k});
  };
  switch (spec.arch) {
    case Arch::logistic:
      dense("fc", spec.input_dim(), c);
      break;
    case Arch::mlp:
      dense("fc1", spec.input_dim(), spec.hidden);
      dense("fc2", spec.hidden, c);
      break;
    case Arch::convnet_lite: {
      std::size_t in = spec.channels;
      for (std::size_t l = 0; l < spec.conv_depth; ++l) {
        conv("conv" + std::to_string(l + 1), in, spec.conv_width, 3);
        in = spec.conv_width;
      }
      const auto [h, w] = convnet_out_hw(spec);
      dense("fc", spec.conv_width * h * w, c);
      break;
    }
    case Arch::lenet_lite: {
      const LenetDims d = lenet_dims(spec);
      conv("conv1", spec.channels, kLenetConv1, 5);
      conv("conv2", kLenetConv1, kLenetConv2, 5);
      dense("fc1", kLenetConv2 * d.h2 * d.w2, kLenetHidden);
      dense("fc2", kLenetHidden, c);
      break;
    }
  }
  return out;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> v;
  v.reserve(entries_.size());
  for (const auto& e : entries_) v.push_back(e.value);
  return v;
}

std::vector<Tensor> ParamSet::values() const {
  std::vector<Tensor> v;
  v.reserve(entries_.size());
  for (const auto& e : entries_) v.push_back(e.value.value());
  return v;
}

ParamSet ParamSet::with_values(std::vector<Tensor> values) const {
  if (values.size() != entries_.size()) throw DimensionError("ParamSet::with_values: entry count differs");
  std::vector<ParamEntry> next;
  next.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (values[i].shape() != entries_[i].value.shape()) {
      throw DimensionError("ParamSet::with_values: shape of " + entries_[i].layer_id + " changed from " +
                           to_string(entries_[i].value.shape()) + " to " + to_string(values[i].shape()));
    }
    next.push_back({entries_[i].layer_id, entries_[i].role, Var(std::move(values[i]), true)});
  }
  return ParamSet(std::move(next));
}

bool ParamSet::bit_identical(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.layer_id != b.layer_id || a.role != b.role || a.value.value() != b.value.value()) return false;
  }
  return true;
}

ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ParamEntry> entries;
  for (const ParamShape& ps : layout(spec)) {
    Tensor t(ps.shape, 0.0);
    if (ps.role == ParamRole::weight) {
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(ps.fan_in)));
      for (double& v : t.data()) v = normal(rng);
    }
    entries.push_back({ps.layer_id, ps.role, Var(std::move(t), true)});
  }
  return ParamSet(std::move(entries));
}

Var forward(const ModelSpec& spec, const ParamSet& params, const Var& batch) {
  const Var h = body(spec, params, batch);
  const std::size_t n = params.size();
  return linear(h, params[n - 2].value, params[n - 1].value);
}

Var features(const ModelSpec& spec, const ParamSet& params, const Var& batch) { return body(spec, params, batch); }

}  // namespace gradmatch::models
