#include "gradmatch/matching.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "gradmatch/errors.hpp"

namespace gradmatch::matching {

using ad::Var;

GradientSet gradients(const Var& loss, const models::ParamSet& params, bool create_graph) {
  const std::vector<Var> vars = params.vars();
  const std::vector<Var> grads = ad::grad(loss, vars, create_graph);
  GradientSet out;
  out.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) out.push_back({params[i].layer_id, params[i].role, grads[i]});
  return out;
}

GradientSet detached(const GradientSet& g) {
  GradientSet out = g;
  for (auto& e : out) e.grad = e.grad.detach();
  return out;
}

// ---- DistanceSpec ----------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string_view name_of(DistanceKind k) {
  switch (k) {
    case DistanceKind::d1_cosine: return "d1";
    case DistanceKind::d2_euclid: return "d2";
    case DistanceKind::d3_sq: return "d3";
    case DistanceKind::d4_mse: return "d4";
  }
  return "?";
}

DistanceTerm parse_term(std::string_view text, std::string_view whole) {
  std::string_view t = trim(text);
  double weight = 1.0;
  const std::size_t d = t.find('d');
  if (d == std::string_view::npos) throw ConfigError("distance '" + std::string(whole) + "': term '" + std::string(t) + "' names no d1..d4");
  std::string_view prefix = trim(t.substr(0, d));
  std::string_view name = trim(t.substr(d));
  if (!prefix.empty()) {
    if (prefix.back() == '*') prefix = trim(prefix.substr(0, prefix.size() - 1));
    const std::string num(prefix);
    std::size_t used = 0;
    try {
      weight = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != num.size() || num.empty()) {
      throw ConfigError("distance '" + std::string(whole) + "': bad weight '" + num + "'");
    }
  }
  for (DistanceKind k : {DistanceKind::d1_cosine, DistanceKind::d2_euclid, DistanceKind::d3_sq, DistanceKind::d4_mse}) {
    if (name == name_of(k)) return {k, weight};
  }
  throw ConfigError("distance '" + std::string(whole) + "': unknown term '" + std::string(name) + "'");
}

}  // namespace

DistanceSpec DistanceSpec::parse(std::string_view text) {
  DistanceSpec spec;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t plus = text.find('+', start);
    const std::string_view part = text.substr(start, plus == std::string_view::npos ? std::string_view::npos : plus - start);
    if (trim(part).empty()) throw ConfigError("distance '" + std::string(text) + "': empty term");
    spec.terms.push_back(parse_term(part, text));
    if (plus == std::string_view::npos) break;
    start = plus + 1;
  }
  spec.validate();
  return spec;
}

std::string DistanceSpec::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (i) os << '+';
    if (terms[i].weight != 1.0) os << terms[i].weight << '*';
    os << name_of(terms[i].kind);
  }
  return os.str();
}

void DistanceSpec::validate() const {
  if (terms.empty()) throw ConfigError("distance: at least one term required");
  for (const auto& t : terms) {
    if (!std::isfinite(t.weight)) throw ConfigError("distance: non-finite weight");
  }
}

std::vector<std::string> reference_distance_specs() {
  return {"d1", "d2", "d3", "100*d4", "d1+d2", "d1+d3", "d1+100*d4"};
}

// ---- distances --------------------------------------------------------------------

Var row_view(const Var& g) {
  const Shape& s = g.shape();
  if (s.empty()) throw DimensionError("row_view: scalar gradient has no output dimension");
  const std::size_t out = s[0];
  return ad::reshape(g, Shape{out, out == 0 ? 0 : g.numel() / out});
}

Var layer_distance(const Var& a, const Var& b, const DistanceSpec& spec) {
  if (a.shape() != b.shape()) {
    throw DimensionError("layer_distance: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.value().rank() != 2) throw DimensionError("layer_distance: expected [rows, k] matrices, got " + to_string(a.shape()));
  spec.validate();
  const double rows = static_cast<double>(a.shape()[0]);
  const double len = static_cast<double>(a.shape()[1]);
  Var total;
  auto accumulate = [&](Var term, double weight) {
    term = ad::scale(term, weight);
    total = total.defined() ? ad::add(total, term) : term;
  };
  Var diff, sq;  // shared between the magnitude terms
  for (const DistanceTerm& t : spec.terms) {
    if (t.kind != DistanceKind::d1_cosine && !diff.defined()) {
      diff = ad::sub(a, b);
      sq = ad::row_sum(ad::mul(diff, diff));
    }
    switch (t.kind) {
      case DistanceKind::d1_cosine: {
        const Var norms = ad::mul(ad::l2_norm_rows(a), ad::l2_norm_rows(b));
        // Rows whose norm product falls below the floor count as orthogonal and
        // pass no gradient; otherwise length-1 (bias) rows, whose cosine is a
        // sign, would get a spike of slope |b| / eps around a = 0.
        Tensor live(norms.shape(), 0.0);
        for (std::size_t i = 0; i < live.numel(); ++i) live[i] = norms.value()[i] >= kCosineEps ? 1.0 : 0.0;
        Var cos_rows = ad::mul(ad::div(ad::row_dot(a, b), ad::clamp_min(norms, kCosineEps)), ad::Var(std::move(live)));
        // Rounding can push |cos| just past 1; keep each row term inside [0, 2].
        cos_rows = ad::neg(ad::clamp_min(ad::neg(ad::clamp_min(cos_rows, -1.0)), -1.0));
        const Var cosine = ad::sum(cos_rows);
        accumulate(ad::add_scalar(ad::neg(cosine), rows), t.weight);
        break;
      }
      case DistanceKind::d2_euclid:
        accumulate(ad::sum(ad::sqrt(sq)), t.weight);
        break;
      case DistanceKind::d3_sq:
        accumulate(ad::sum(sq), t.weight);
        break;
      case DistanceKind::d4_mse:
        accumulate(ad::scale(ad::sum(sq), 1.0 / len), t.weight);
        break;
    }
  }
  return total;
}

namespace {

void require_same_structure(const GradientSet& a, const GradientSet& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": gradient sets have " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " entries");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].layer_id != b[i].layer_id || a[i].role != b[i].role || a[i].grad.shape() != b[i].grad.shape()) {
      throw DimensionError(std::string(op) + ": structure differs at entry " + std::to_string(i) + " (" + a[i].layer_id +
                           "." + std::string(models::to_string(a[i].role)) + " " + to_string(a[i].grad.shape()) +
                           " vs " + b[i].layer_id + "." + std::string(models::to_string(b[i].role)) + " " +
                           to_string(b[i].grad.shape()) + ")");
    }
  }
}

}  // namespace

Var gradset_distance(const GradientSet& gs, const GradientSet& gt, const DistanceSpec& spec) {
  require_same_structure(gs, gt, "gradset_distance");
  if (gs.empty()) throw ContractError("gradset_distance: empty gradient set");
  Var total;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const Var d = layer_distance(row_view(gs[i].grad), row_view(gt[i].grad), spec);
    total = total.defined() ? ad::add(total, d) : d;
  }
  return total;
}

GradientSet union_gradient(std::span<const ClassGradients> per_class) {
  if (per_class.empty()) throw ContractError("union_gradient: no classes");
  std::size_t total = 0;
  bool equal_sizes = true;
  for (const auto& c : per_class) {
    require_same_structure(per_class.front().grads, c.grads, "union_gradient");
    if (c.batch_size == 0) throw ContractError("union_gradient: empty batch");
    total += c.batch_size;
    equal_sizes = equal_sizes && c.batch_size == per_class.front().batch_size;
  }
  GradientSet out = per_class.front().grads;
  for (std::size_t e = 0; e < out.size(); ++e) {
    Var acc;
    for (const auto& c : per_class) {
      // Equal batch sizes reduce to the plain class mean.
      const Var term = equal_sizes ? c.grads[e].grad : ad::scale(c.grads[e].grad, static_cast<double>(c.batch_size));
      acc = acc.defined() ? ad::add(acc, term) : term;
    }
    const double denom = equal_sizes ? static_cast<double>(per_class.size()) : static_cast<double>(total);
    out[e].grad = ad::scale(acc, 1.0 / denom);
  }
  return out;
}

MultiLevelLoss multi_level_loss(std::span<const ClassGradients> per_class_s, std::span<const ClassGradients> per_class_t,
                                const DistanceSpec& spec, double lambda) {
  if (per_class_s.size() != per_class_t.size()) {
    throw ContractError("multi_level_loss: " + std::to_string(per_class_s.size()) + " synthetic classes vs " +
                        std::to_string(per_class_t.size()) + " real classes");
  }
  if (per_class_s.empty()) throw ContractError("multi_level_loss: no classes");
  MultiLevelLoss out;
  for (std::size_t c = 0; c < per_class_s.size(); ++c) {
    const Var d = gradset_distance(per_class_s[c].grads, per_class_t[c].grads, spec);
    out.intra = out.intra.defined() ? ad::add(out.intra, d) : d;
  }
  out.inter = gradset_distance(union_gradient(per_class_s), union_gradient(per_class_t), spec);
  out.total = lambda == 0.0 ? out.intra : ad::add(out.intra, ad::scale(out.inter, lambda));
  return out;
}

}  // namespace gradmatch::matching
