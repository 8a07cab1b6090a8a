#pragma once

// Gradient-matching condensation: K outer iterations (fresh network
// initializations), each with T inner iterations that alternate an update of
// the synthetic set S and a phase of network updates trained on S.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gradmatch/data.hpp"
#include "gradmatch/errors.hpp"
#include "gradmatch/matching.hpp"
#include "gradmatch/models.hpp"

namespace gradmatch::condense {

enum class MatchMode { intra, inter, interleaved, multi_level };

std::string_view to_string(MatchMode mode);
// Throws ConfigError on an unknown name.
MatchMode parse_mode(std::string_view name);

// 50 - 10t for t < 4, 10 for 4 <= t < 10, 5 afterwards.
std::size_t zeta_schedule(std::size_t t);

enum class PolicyKind { fixed, schedule, overfit_criterion };

// How many network updates follow each synthetic update.
struct ThetaPolicy {
  PolicyKind kind = PolicyKind::fixed;
  std::size_t steps = 1;  // fixed
  std::size_t cap = 50;   // overfit_criterion

  static ThetaPolicy fixed(std::size_t steps) { return {PolicyKind::fixed, steps, 50}; }
  static ThetaPolicy schedule() { return {PolicyKind::schedule, 1, 50}; }
  static ThetaPolicy overfit(std::size_t cap = 50) { return {PolicyKind::overfit_criterion, 1, cap}; }

  // "fixed:50", "schedule", "overfit" or "overfit:20".
  static ThetaPolicy parse(std::string_view text);
  std::string to_string() const;
  void validate() const;
  // Steps for inner iteration t; for the overfit criterion this is the cap.
  std::size_t planned_steps(std::size_t t) const;

  friend bool operator==(const ThetaPolicy&, const ThetaPolicy&) = default;
};

// Number of network updates in one outer iteration. The last inner iteration
// performs none. For the overfit criterion the result is an upper bound.
std::size_t count_theta_updates(std::size_t T, const ThetaPolicy& policy);

struct CondenseConfig {
  std::size_t outer_iterations = 50;  // K
  std::size_t inner_iterations = 1;   // T
  std::size_t synthetic_steps = 1;    // zeta_S
  ThetaPolicy theta_policy = ThetaPolicy::fixed(1);
  double lr_synthetic = 0.1;   // eta_S
  double lr_theta = 0.01;      // eta_theta
  double momentum_synthetic = 0.0;
  double momentum_theta = 0.0;
  std::optional<double> lambda;  // unset: number of classes
  MatchMode mode = MatchMode::multi_level;
  matching::DistanceSpec distance = matching::DistanceSpec::parse("d1+d2");
  std::size_t real_batch_per_class = 64;
  std::size_t validation_batch = 256;  // overfit criterion only
  std::size_t ipc = 1;
  data::InitMode init = data::InitMode::noise;
  std::uint64_t seed = 0;

  double lambda_for(std::size_t num_classes) const {
    return lambda.value_or(static_cast<double>(num_classes));
  }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct TraceRecord {
  std::size_t outer = 0;
  std::size_t inner = 0;
  MatchMode mode_used = MatchMode::multi_level;
  double loss = 0.0;   // loss of the last synthetic step
  double intra = 0.0;
  double inter = 0.0;  // unweighted
  std::size_t theta_steps = 0;
  std::vector<double> validation_losses;  // overfit criterion only
};

struct CondenseTrace {
  std::vector<TraceRecord> records;
};

// Divergence during condensation; carries the trace up to the failure.
class CondenseDivergence : public DivergenceError {
 public:
  CondenseDivergence(const std::string& what, CondenseTrace trace)
      : DivergenceError(what), trace_(std::move(trace)) {}
  const CondenseTrace& trace() const noexcept { return trace_; }

 private:
  CondenseTrace trace_;
};

// Mutable optimizer state of S (momentum buffers), kept across iterations.
struct SyntheticState {
  data::SyntheticSet set;
  Tensor velocity;
};

struct StepRecord {
  MatchMode mode_used;
  double loss = 0.0;
  double intra = 0.0;
  double inter = 0.0;
};

// zeta_S updates of S against freshly sampled real batches, one per class.
// `counter` selects intra/inter for the interleaved mode (even: intra).
StepRecord synthetic_step(SyntheticState& state, const data::Dataset& real, const models::ModelSpec& spec,
                          const models::ParamSet& theta, const CondenseConfig& cfg, std::size_t counter, Rng& rng);

// The matching loss for the given per-class synthetic images (differentiable
// w.r.t. them) and real batches.
matching::MultiLevelLoss matching_loss(const std::vector<ad::Var>& synthetic_by_class,
                                       const std::vector<data::Batch>& real_by_class,
                                       const models::ModelSpec& spec, const models::ParamSet& theta,
                                       const matching::DistanceSpec& distance, double lambda);

// Loss of a real batch under the current parameters.
using ValidationLoss = std::function<double(const models::ParamSet&)>;

struct ThetaPhaseResult {
  models::ParamSet theta;
  std::size_t steps = 0;
  std::vector<double> validation_losses;
};

// Network updates trained on S for inner iteration t. `velocity` holds the
// momentum buffers of the current outer iteration. `validation` is consulted
// only by the overfit criterion: before the first step and after each step,
// stopping after the first increase (the increasing step is kept) or at the cap.
ThetaPhaseResult theta_phase(const data::SyntheticSet& s, const models::ModelSpec& spec, models::ParamSet theta,
                             std::vector<Tensor>& velocity, const CondenseConfig& cfg, std::size_t t,
                             const ValidationLoss& validation);

using TraceSink = std::function<void(const TraceRecord&)>;

struct CondenseResult {
  data::SyntheticSet set;
  CondenseTrace trace;
};

// Runs the full bilevel loop. Deterministic given cfg.seed.
CondenseResult condense(const data::Dataset& real, const CondenseConfig& cfg, const models::ModelSpec& spec,
                        const TraceSink& sink = {});

}  // namespace gradmatch::condense
