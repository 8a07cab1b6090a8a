#pragma once

// Network architectures used as the source network during condensation and as
// target networks during evaluation.
//
// Layer lists (conv kernels are laid out [out, in, kh, kw], linear weights
// [out, in]):
//   logistic      flatten -> fc(C)
//   mlp           flatten -> fc1(hidden) -> relu -> fc2(C)
//   convnet_lite  depth x [conv 3x3 pad 1 (width) -> relu -> avgpool 2] -> fc(C)
//   lenet_lite    conv1 5x5 pad 2 (6) -> relu -> avgpool 2
//                 -> conv2 5x5 (16) -> relu -> avgpool 2
//                 -> fc1(84) -> relu -> fc2(C)
// No normalization layers.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradmatch/autodiff.hpp"

namespace gradmatch::models {

enum class Arch { logistic, mlp, convnet_lite, lenet_lite };

std::string_view to_string(Arch arch);
// Throws ContractError on an unknown name.
Arch parse_arch(std::string_view name);

struct ModelSpec {
  Arch arch = Arch::convnet_lite;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t num_classes = 10;
  std::size_t hidden = 128;      // mlp
  std::size_t conv_width = 32;   // convnet_lite
  std::size_t conv_depth = 3;    // convnet_lite

  Shape input_shape() const { return {channels, height, width}; }
  std::size_t input_dim() const { return channels * height * width; }
  // Throws ContractError when the architecture cannot consume the input.
  void validate() const;
};

enum class ParamRole { weight, bias };

std::string_view to_string(ParamRole role);

struct ParamEntry {
  std::string layer_id;
  ParamRole role;
  ad::Var value;
};

struct ParamShape {
  std::string layer_id;
  ParamRole role;
  Shape shape;
  std::size_t fan_in;
};

// Fixed parameter layout of an architecture, in forward order.
std::vector<ParamShape> layout(const ModelSpec& spec);

// Ordered parameter list. Entries are leaf Vars that require gradients;
// updates produce a new ParamSet rather than mutating nodes.
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(std::vector<ParamEntry> entries) : entries_(std::move(entries)) {}

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const ParamEntry& operator[](std::size_t i) const { return entries_[i]; }

  std::vector<ad::Var> vars() const;
  std::vector<Tensor> values() const;
  // Same layout, new leaf values.
  ParamSet with_values(std::vector<Tensor> values) const;

  bool bit_identical(const ParamSet& other) const;

 private:
  std::vector<ParamEntry> entries_;
};

// Kaiming-normal weights (stddev sqrt(2 / fan_in)), zero biases.
ParamSet init_params(const ModelSpec& spec, std::uint64_t seed);

// Logits [N, num_classes]. Differentiable w.r.t. both params and batch.
ad::Var forward(const ModelSpec& spec, const ParamSet& params, const ad::Var& batch);

// Penultimate activation (the input of the last linear layer), flattened.
ad::Var features(const ModelSpec& spec, const ParamSet& params, const ad::Var& batch);

}  // namespace gradmatch::models
