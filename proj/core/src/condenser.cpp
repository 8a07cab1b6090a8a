#include "gradmatch/condenser.hpp"

#include <charconv>
#include <cmath>

#include "gradmatch/random.hpp"

namespace gradmatch::condense {

using ad::Var;
using gradmatch::to_string;

namespace {

std::size_t parse_count(std::string_view text, std::string_view what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("theta policy: bad " + std::string(what) + " '" + std::string(text) + "'");
  }
  return v;
}

Var class_loss(const models::ModelSpec& spec, const models::ParamSet& theta, const Var& images, int label) {
  return ad::softmax_cross_entropy(models::forward(spec, theta, images),
                                   std::vector<int>(images.shape()[0], label));
}

// SGD with optional heavy-ball momentum: v = mu v + g; w -= lr v.
void sgd_update(Tensor& w, Tensor& v, const Tensor& g, double lr, double momentum) {
  if (momentum == 0.0) {
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= lr * g[i];
    return;
  }
  for (std::size_t i = 0; i < w.numel(); ++i) {
    v[i] = momentum * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

double loss_on(const models::ModelSpec& spec, const models::ParamSet& theta, const data::Batch& b) {
  ad::NoGradGuard no_grad;
  return ad::softmax_cross_entropy(models::forward(spec, theta, Var(b.images)), b.labels).item();
}

}  // namespace

std::string_view to_string(MatchMode mode) {
  switch (mode) {
    case MatchMode::intra: return "intra";
    case MatchMode::inter: return "inter";
    case MatchMode::interleaved: return "interleaved";
    case MatchMode::multi_level: return "multi_level";
  }
  return "?";
}

MatchMode parse_mode(std::string_view name) {
  for (MatchMode m : {MatchMode::intra, MatchMode::inter, MatchMode::interleaved, MatchMode::multi_level}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown matching mode '" + std::string(name) +
                    "' (expected intra, inter, interleaved or multi_level)");
}

std::size_t zeta_schedule(std::size_t t) {
  if (t < 4) return 50 - 10 * t;
  if (t < 10) return 10;
  return 5;
}

ThetaPolicy ThetaPolicy::parse(std::string_view text) {
  const auto colon = text.find(':');
  const std::string_view head = text.substr(0, colon);
  const std::optional<std::string_view> arg =
      colon == std::string_view::npos ? std::nullopt : std::optional(text.substr(colon + 1));
  ThetaPolicy p;
  if (head == "fixed") {
    if (!arg) throw ConfigError("theta policy 'fixed' needs a step count, as in fixed:50");
    p = fixed(parse_count(*arg, "step count"));
  } else if (head == "schedule") {
    if (arg) throw ConfigError("theta policy 'schedule' takes no argument");
    p = schedule();
  } else if (head == "overfit") {
    p = overfit(arg ? parse_count(*arg, "cap") : 50);
  } else {
    throw ConfigError("unknown theta policy '" + std::string(text) + "' (expected fixed:N, schedule or overfit[:cap])");
  }
  p.validate();
  return p;
}

std::string ThetaPolicy::to_string() const {
  switch (kind) {
    case PolicyKind::fixed: return "fixed:" + std::to_string(steps);
    case PolicyKind::schedule: return "schedule";
    case PolicyKind::overfit_criterion: return "overfit:" + std::to_string(cap);
  }
  return "?";
}

void ThetaPolicy::validate() const {
  if (kind == PolicyKind::fixed && steps < 1) throw ConfigError("theta policy: fixed step count must be >= 1");
  if (kind == PolicyKind::overfit_criterion && cap < 1) throw ConfigError("theta policy: overfit cap must be >= 1");
}

std::size_t ThetaPolicy::planned_steps(std::size_t t) const {
  switch (kind) {
    case PolicyKind::fixed: return steps;
    case PolicyKind::schedule: return zeta_schedule(t);
    case PolicyKind::overfit_criterion: return cap;
  }
  return 0;
}

std::size_t count_theta_updates(std::size_t T, const ThetaPolicy& policy) {
  std::size_t total = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) total += policy.planned_steps(t);
  return total;
}

void CondenseConfig::validate() const {
  if (outer_iterations < 1) throw ConfigError("condense.outer_iterations must be >= 1");
  if (inner_iterations < 1) throw ConfigError("condense.inner_iterations must be >= 1");
  if (synthetic_steps < 1) throw ConfigError("condense.synthetic_steps must be >= 1");
  theta_policy.validate();
  if (!(lr_synthetic >= 0.0) || !std::isfinite(lr_synthetic)) {
    throw ConfigError("condense.lr_synthetic must be finite and >= 0");
  }
  if (!(lr_theta >= 0.0) || !std::isfinite(lr_theta)) throw ConfigError("condense.lr_theta must be finite and >= 0");
  if (!(momentum_synthetic >= 0.0 && momentum_synthetic < 1.0)) {
    throw ConfigError("condense.momentum_synthetic must lie in [0, 1)");
  }
  if (!(momentum_theta >= 0.0 && momentum_theta < 1.0)) throw ConfigError("condense.momentum_theta must lie in [0, 1)");
  if (lambda && (!std::isfinite(*lambda) || *lambda < 0.0)) throw ConfigError("condense.lambda must be finite and >= 0");
  distance.validate();
  if (real_batch_per_class < 1) throw ConfigError("condense.real_batch_per_class must be >= 1");
  if (validation_batch < 1) throw ConfigError("condense.validation_batch must be >= 1");
  if (ipc < 1) throw ConfigError("condense.ipc must be >= 1");
}

matching::MultiLevelLoss matching_loss(const std::vector<Var>& synthetic_by_class,
                                       const std::vector<data::Batch>& real_by_class, const models::ModelSpec& spec,
                                       const models::ParamSet& theta, const matching::DistanceSpec& distance,
                                       double lambda) {
  if (synthetic_by_class.size() != real_by_class.size()) {
    throw ContractError("matching_loss: class counts differ");
  }
  std::vector<matching::ClassGradients> gs, gt;
  for (std::size_t c = 0; c < synthetic_by_class.size(); ++c) {
    const int label = static_cast<int>(c);
    const data::Batch& r = real_by_class[c];
    const Var real_loss = ad::softmax_cross_entropy(models::forward(spec, theta, Var(r.images)), r.labels);
    gt.push_back({matching::gradients(real_loss, theta, false), r.size()});
    const Var& sc = synthetic_by_class[c];
    gs.push_back({matching::gradients(class_loss(spec, theta, sc, label), theta, true), sc.shape()[0]});
  }
  return matching::multi_level_loss(gs, gt, distance, lambda);
}

StepRecord synthetic_step(SyntheticState& state, const data::Dataset& real, const models::ModelSpec& spec,
                          const models::ParamSet& theta, const CondenseConfig& cfg, std::size_t counter, Rng& rng) {
  data::SyntheticSet& s = state.set;
  if (state.velocity.shape() != s.images.shape()) state.velocity = Tensor(s.images.shape(), 0.0);
  const double lambda = cfg.lambda_for(s.num_classes);
  StepRecord rec{};
  rec.mode_used = cfg.mode;
  if (cfg.mode == MatchMode::interleaved) rec.mode_used = counter % 2 == 0 ? MatchMode::intra : MatchMode::inter;

  for (std::size_t step = 0; step < cfg.synthetic_steps; ++step) {
    std::vector<Var> sv;
    std::vector<data::Batch> rb;
    for (std::size_t c = 0; c < s.num_classes; ++c) {
      sv.emplace_back(s.class_images(c), true);
      rb.push_back(data::sample_class_batch(real, static_cast<int>(c), cfg.real_batch_per_class, rng));
    }
    std::vector<Var> grads;
    try {
      const auto ml = matching_loss(sv, rb, spec, theta, cfg.distance, lambda);
      Var loss;
      switch (rec.mode_used) {
        case MatchMode::intra: loss = ml.intra; break;
        case MatchMode::inter: loss = ad::scale(ml.inter, lambda); break;
        default: loss = ml.total; break;
      }
      rec.loss = loss.item();
      rec.intra = ml.intra.item();
      rec.inter = ml.inter.item();
      grads = ad::grad(loss, sv);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("synthetic update produced a non-finite value: ") + e.what());
    }
    if (!std::isfinite(rec.loss)) throw DivergenceError("synthetic update: non-finite matching loss");

    const std::size_t per = s.ipc * s.sample_numel();
    for (std::size_t c = 0; c < s.num_classes; ++c) {
      Tensor w = s.class_images(c);
      Tensor v({per}, std::vector<double>(state.velocity.raw() + c * per, state.velocity.raw() + (c + 1) * per));
      sgd_update(w, v, grads[c].value(), cfg.lr_synthetic, cfg.momentum_synthetic);
      if (!w.all_finite()) throw DivergenceError("synthetic update: non-finite synthetic image values");
      s.set_class_images(c, w);
      std::copy_n(v.raw(), per, state.velocity.raw() + c * per);
    }
  }
  return rec;
}

ThetaPhaseResult theta_phase(const data::SyntheticSet& s, const models::ModelSpec& spec, models::ParamSet theta,
                             std::vector<Tensor>& velocity, const CondenseConfig& cfg, std::size_t t,
                             const ValidationLoss& validation) {
  ThetaPhaseResult out;
  if (t + 1 >= cfg.inner_iterations) {
    out.theta = std::move(theta);
    return out;
  }
  if (velocity.size() != theta.size()) {
    velocity.clear();
    for (const auto& e : theta.entries()) velocity.emplace_back(e.value.shape(), 0.0);
  }
  const bool overfit = cfg.theta_policy.kind == PolicyKind::overfit_criterion;
  if (overfit && !validation) throw ContractError("theta_phase: the overfit criterion needs a validation loss");
  const std::size_t limit = cfg.theta_policy.planned_steps(t);
  const Var images(s.images);

  double previous = 0.0;
  if (overfit) {
    previous = validation(theta);
    out.validation_losses.push_back(previous);
  }
  for (std::size_t i = 0; i < limit; ++i) {
    std::vector<Var> grads;
    try {
      const Var loss = ad::softmax_cross_entropy(models::forward(spec, theta, images), s.labels);
      const auto vars = theta.vars();
      grads = ad::grad(loss, vars);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("network update produced a non-finite value: ") + e.what());
    }
    std::vector<Tensor> next = theta.values();
    for (std::size_t p = 0; p < next.size(); ++p) {
      sgd_update(next[p], velocity[p], grads[p].value(), cfg.lr_theta, cfg.momentum_theta);
      if (!next[p].all_finite()) throw DivergenceError("network update: non-finite parameters");
    }
    theta = theta.with_values(std::move(next));
    ++out.steps;
    if (overfit) {
      const double current = validation(theta);
      out.validation_losses.push_back(current);
      if (current > previous) break;
      previous = current;
    }
  }
  out.theta = std::move(theta);
  return out;
}

CondenseResult condense(const data::Dataset& real, const CondenseConfig& cfg, const models::ModelSpec& spec,
                        const TraceSink& sink) {
  cfg.validate();
  spec.validate();
  real.validate();
  if (real.num_classes != spec.num_classes) {
    throw ContractError("condense: dataset has " + std::to_string(real.num_classes) + " classes, model expects " +
                        std::to_string(spec.num_classes));
  }
  if (real.sample_shape() != spec.input_shape()) {
    throw ContractError("condense: dataset samples " + to_string(real.sample_shape()) + " do not match model input " +
                        to_string(spec.input_shape()));
  }

  Rng sampler(derive_seed(cfg.seed, 1));
  SyntheticState state{data::init_synthetic(real, cfg.ipc, cfg.init, derive_seed(cfg.seed, 0)), Tensor()};
  CondenseResult result;
  const bool overfit = cfg.theta_policy.kind == PolicyKind::overfit_criterion;
  const std::size_t T = cfg.inner_iterations;

  std::size_t k = 0, t = 0;
  try {
    for (k = 0; k < cfg.outer_iterations; ++k) {
      models::ParamSet theta = models::init_params(spec, derive_seed(cfg.seed, 1000 + k));
      std::vector<Tensor> velocity;
      ValidationLoss validation;
      if (overfit) {
        auto batch = std::make_shared<data::Batch>(
            data::sample_batch(real, std::min(cfg.validation_batch, real.size()), sampler));
        validation = [&spec, batch](const models::ParamSet& p) { return loss_on(spec, p, *batch); };
      }
      for (t = 0; t < T; ++t) {
        const StepRecord step = synthetic_step(state, real, spec, theta, cfg, k * T + t, sampler);
        ThetaPhaseResult phase = theta_phase(state.set, spec, std::move(theta), velocity, cfg, t, validation);
        theta = std::move(phase.theta);
        TraceRecord rec{k, t, step.mode_used, step.loss, step.intra, step.inter, phase.steps,
                        std::move(phase.validation_losses)};
        if (sink) sink(rec);
        result.trace.records.push_back(std::move(rec));
      }
    }
  } catch (const CondenseDivergence&) {
    throw;
  } catch (const DivergenceError& e) {
    throw CondenseDivergence("condensation diverged at outer iteration " + std::to_string(k) + ", inner iteration " +
                                 std::to_string(t) + ": " + e.what(),
                             std::move(result.trace));
  }
  result.set = std::move(state.set);
  return result;
}

}  // namespace gradmatch::condense
