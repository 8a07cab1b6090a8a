#pragma once

// Distances between per-layer parameter gradients and the multi-level
// (intra-class + inter-class) matching loss.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/models.hpp"

namespace gradmatch::matching {

// Gradients w.r.t. every entry of a ParamSet, in the same order.
struct GradEntry {
  std::string layer_id;
  models::ParamRole role;
  ad::Var grad;
};
using GradientSet = std::vector<GradEntry>;

// Gradient of `loss` w.r.t. every parameter. With create_graph the entries
// stay differentiable (needed for the meta-gradient w.r.t. synthetic images).
GradientSet gradients(const ad::Var& loss, const models::ParamSet& params, bool create_graph);
GradientSet detached(const GradientSet& g);

enum class DistanceKind { d1_cosine, d2_euclid, d3_sq, d4_mse };

struct DistanceTerm {
  DistanceKind kind;
  double weight = 1.0;
  friend bool operator==(const DistanceTerm&, const DistanceTerm&) = default;
};

// Weighted sum of row-wise distance terms, parsed from strings such as
// "d1", "d1+d2", "d1+100*d4", "d1+0.1*d2" (a weight may also prefix the name
// directly, as in "100d4").
struct DistanceSpec {
  std::vector<DistanceTerm> terms;

  static DistanceSpec parse(std::string_view text);
  std::string to_string() const;
  // At least one term, every weight finite.
  void validate() const;
  friend bool operator==(const DistanceSpec&, const DistanceSpec&) = default;
};

// The distance-function variants compared in the ablation (plain, squared,
// scaled-MSE and their combinations with the cosine term).
std::vector<std::string> reference_distance_specs();

// Floor of the cosine denominator: the d1 row term is 1 - a.b / (|a||b|) when
// |a||b| >= eps; rows below the floor count as orthogonal and pass no gradient.
inline constexpr double kCosineEps = 1e-6;

// (out, ...) gradient -> (out, rest) matrix. Bias vectors become (out, 1).
ad::Var row_view(const ad::Var& g);

// Sum over rows of the weighted terms. A and B are [rows, k].
ad::Var layer_distance(const ad::Var& a, const ad::Var& b, const DistanceSpec& spec);

// Sum over layers of layer_distance(row_view(gS_l), row_view(gT_l)).
ad::Var gradset_distance(const GradientSet& gs, const GradientSet& gt, const DistanceSpec& spec);

struct ClassGradients {
  GradientSet grads;
  std::size_t batch_size = 1;
};

// Gradient of the mean loss over the union of the per-class batches:
// sum_c |B_c| g_c / sum_c |B_c|.
GradientSet union_gradient(std::span<const ClassGradients> per_class);

struct MultiLevelLoss {
  ad::Var total;
  ad::Var intra;  // sum_c D(gS_c, gT_c)
  ad::Var inter;  // D(union gS, union gT), unweighted
};

// intra + lambda * inter. With lambda == 0 the total is exactly the intra term.
MultiLevelLoss multi_level_loss(std::span<const ClassGradients> per_class_s, std::span<const ClassGradients> per_class_t,
                                const DistanceSpec& spec, double lambda);

}  // namespace gradmatch::matching
