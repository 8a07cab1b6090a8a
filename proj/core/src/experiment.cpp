#include "gradmatch/experiment.hpp"

#include <cstdlib>
#include <functional>
#include <set>

#include "gradmatch/errors.hpp"
#include "gradmatch/persist.hpp"
#include "gradmatch/random.hpp"

namespace gradmatch::experiment {

using nlohmann::json;

namespace {

// Non-negative integer, whether the JSON value is stored signed or unsigned.
bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads the keys of one JSON object, collecting every problem instead of
// stopping at the first.
class Section {
 public:
  Section(const json& j, std::string prefix, std::vector<std::string>& errors)
      : j_(j), prefix_(std::move(prefix)), errors_(errors) {
    if (!j_.is_object()) {
      fail("", "expected an object");
      ok_ = false;
    }
  }

  ~Section() {
    if (!ok_) return;
    for (const auto& [key, _] : j_.items()) {
      if (!known_.contains(key)) errors_.push_back(prefix_ + key + ": unknown key");
    }
  }

  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  // The sub-object at key (an empty object when absent).
  const json& child(const std::string& key) {
    known_.insert(key);
    static const json empty = json::object();
    return ok_ && j_.contains(key) ? j_.at(key) : empty;
  }

  void size(const std::string& key, std::size_t& out) {
    if (const json* v = get(key)) {
      if (is_count(*v)) out = v->get<std::size_t>();
      else fail(key, "expected a non-negative integer");
    }
  }
  void number(const std::string& key, double& out) {
    if (const json* v = get(key)) {
      if (v->is_number()) out = v->get<double>();
      else fail(key, "expected a number");
    }
  }
  void text(const std::string& key, std::string& out) {
    if (const json* v = get(key)) {
      if (v->is_string()) out = v->get<std::string>();
      else fail(key, "expected a string");
    }
  }
  void flag(const std::string& key, bool& out) {
    if (const json* v = get(key)) {
      if (v->is_boolean()) out = v->get<bool>();
      else fail(key, "expected true or false");
    }
  }
  void optional_size(const std::string& key, std::optional<std::size_t>& out) {
    if (const json* v = get(key)) {
      if (v->is_null()) out.reset();
      else if (is_count(*v)) out = v->get<std::size_t>();
      else fail(key, "expected a non-negative integer or null");
    }
  }
  void optional_number(const std::string& key, std::optional<double>& out) {
    if (const json* v = get(key)) {
      if (v->is_null()) out.reset();
      else if (v->is_number()) out = v->get<double>();
      else fail(key, "expected a number or null");
    }
  }
  void sizes(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = get(key)) {
      bool good = v->is_array();
      if (good) {
        for (const auto& e : *v) good = good && is_count(e);
      }
      if (good) out = v->get<std::vector<std::size_t>>();
      else fail(key, "expected an array of non-negative integers");
    }
  }
  void texts(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = get(key)) {
      bool good = v->is_array();
      if (good) {
        for (const auto& e : *v) good = good && e.is_string();
      }
      if (good) out = v->get<std::vector<std::string>>();
      else fail(key, "expected an array of strings");
    }
  }
  void precision(const std::string& key, ad::Precision& out) {
    if (const json* v = get(key)) {
      if (is_count(*v) && (*v == 32 || *v == 64)) out = static_cast<ad::Precision>(v->get<int>());
      else fail(key, "expected 32 or 64");
    }
  }
  template <class T, class Parse>
  void optional_parsed(const std::string& key, std::optional<T>& out, Parse parse) {
    if (const json* v = get(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      if (!v->is_string()) {
        fail(key, "expected a string or null");
        return;
      }
      try {
        out = parse(v->get<std::string>());
      } catch (const Error& e) {
        fail(key, e.what());
      }
    }
  }
  // A string converted by `parse`; conversion errors are collected.
  template <class T, class Parse>
  void parsed(const std::string& key, T& out, Parse parse) {
    if (const json* v = get(key)) {
      if (!v->is_string()) {
        fail(key, "expected a string");
        return;
      }
      try {
        out = parse(v->get<std::string>());
      } catch (const Error& e) {
        fail(key, e.what());
      }
    }
  }

  void fail(const std::string& key, const std::string& what) { errors_.push_back(prefix_ + key + ": " + what); }

 private:
  const json* get(const std::string& key) {
    known_.insert(key);
    if (!ok_ || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  const json& j_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::set<std::string> known_;
  bool ok_ = true;
};

void check(std::vector<std::string>& errors, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    errors.emplace_back(e.what());
  }
}

std::string init_name(data::InitMode m) { return m == data::InitMode::noise ? "noise" : "real_sample"; }

data::InitMode parse_init(const std::string& s) {
  if (s == "noise") return data::InitMode::noise;
  if (s == "real_sample") return data::InitMode::real_sample;
  throw ConfigError("unknown init '" + s + "' (expected noise or real_sample)");
}

}  // namespace

std::filesystem::path default_data_root() {
  if (const char* env = std::getenv("GRADMATCH_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return "data/mnist-desk";
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.dataset.root = default_data_root();
  return cfg;
}

ExperimentConfig parse_config(const json& j, bool check_paths) {
  ExperimentConfig cfg = default_config();
  std::vector<std::string> errors;
  {
    Section top(j, "", errors);
    std::size_t seed = cfg.seed;
    top.size("seed", seed);
    cfg.seed = seed;
    top.precision("precision", cfg.precision);
    top.size("jobs", cfg.jobs);
    if (cfg.jobs < 1) top.fail("jobs", "must be >= 1");

    {
      Section ds(top.child("dataset"), "dataset.", errors);
      auto& d = cfg.dataset;
      ds.text("kind", d.kind);
      std::string root = d.root.string();
      ds.text("root", root);
      d.root = root;
      ds.text("train_images", d.train_images);
      ds.text("train_labels", d.train_labels);
      ds.text("test_images", d.test_images);
      ds.text("test_labels", d.test_labels);
      ds.optional_size("limit_per_class", d.limit_per_class);
      {
        Section b(ds.child("blobs"), "dataset.blobs.", errors);
        b.size("classes", d.blobs.classes);
        b.size("per_class", d.blobs.per_class);
        b.size("test_per_class", d.blobs.test_per_class);
        b.size("dim", d.blobs.dim);
        b.number("separation", d.blobs.separation);
      }
      if (d.kind != "idx" && d.kind != "blobs") ds.fail("kind", "expected idx or blobs");
      if (d.kind == "blobs") {
        if (d.blobs.classes < 2) ds.fail("blobs.classes", "must be >= 2");
        if (d.blobs.per_class < 1 || d.blobs.test_per_class < 1) ds.fail("blobs", "class sizes must be >= 1");
        if (d.blobs.dim < 1) ds.fail("blobs.dim", "must be >= 1");
        if (!(d.blobs.separation >= 0.0)) ds.fail("blobs.separation", "must be >= 0");
      }
      if (d.limit_per_class && *d.limit_per_class < 1) ds.fail("limit_per_class", "must be >= 1 or null");
      if (d.kind == "idx" && check_paths) {
        for (const auto& [key, name] : {std::pair{"train_images", d.train_images}, {"train_labels", d.train_labels},
                                        {"test_images", d.test_images}, {"test_labels", d.test_labels}}) {
          if (!std::filesystem::is_regular_file(d.root / name)) {
            ds.fail(key, "file not found: " + (d.root / name).string());
          }
        }
      }
    }
    {
      Section m(top.child("model"), "model.", errors);
      m.parsed("arch", cfg.model.arch, [](const std::string& s) { return models::parse_arch(s); });
      m.size("hidden", cfg.model.hidden);
      m.size("conv_width", cfg.model.conv_width);
      m.size("conv_depth", cfg.model.conv_depth);
    }
    {
      Section c(top.child("condense"), "condense.", errors);
      auto& k = cfg.condense;
      c.size("outer_iterations", k.outer_iterations);
      c.size("inner_iterations", k.inner_iterations);
      c.size("synthetic_steps", k.synthetic_steps);
      c.parsed("theta_policy", k.theta_policy, [](const std::string& s) { return condense::ThetaPolicy::parse(s); });
      c.number("lr_synthetic", k.lr_synthetic);
      c.number("lr_theta", k.lr_theta);
      c.number("momentum_synthetic", k.momentum_synthetic);
      c.number("momentum_theta", k.momentum_theta);
      c.optional_number("lambda", k.lambda);
      c.parsed("mode", k.mode, [](const std::string& s) { return condense::parse_mode(s); });
      c.parsed("distance", k.distance, [](const std::string& s) { return matching::DistanceSpec::parse(s); });
      c.size("real_batch_per_class", k.real_batch_per_class);
      c.size("validation_batch", k.validation_batch);
      c.size("ipc", k.ipc);
      c.parsed("init", k.init, parse_init);
    }
    {
      Section e(top.child("eval"), "eval.", errors);
      auto& t = cfg.eval.train;
      e.size("epochs", t.epochs);
      e.size("batch_size", t.batch_size);
      e.number("lr", t.lr);
      e.sizes("lr_decay_epochs", t.lr_decay_epochs);
      e.number("lr_decay", t.lr_decay);
      e.number("momentum", t.momentum);
      e.number("weight_decay", t.weight_decay);
      e.size("runs", cfg.eval.runs);
      e.size("synthetic_sets", cfg.eval.synthetic_sets);
      if (cfg.eval.runs < 1) e.fail("runs", "must be >= 1");
      if (cfg.eval.synthetic_sets < 1) e.fail("synthetic_sets", "must be >= 1");
      e.optional_parsed("arch", cfg.eval.arch, [](const std::string& s) { return models::parse_arch(s); });
    }
    {
      Section c(top.child("coreset"), "coreset.", errors);
      c.text("method", cfg.coreset.method);
      c.text("features", cfg.coreset.features);
      if (cfg.coreset.method != "random" && cfg.coreset.method != "herding" && cfg.coreset.method != "whole") {
        c.fail("method", "expected random, herding or whole");
      }
      if (cfg.coreset.features != "pixel" && cfg.coreset.features != "model_embedding") {
        c.fail("features", "expected pixel or model_embedding");
      }
    }
    {
      Section a(top.child("ablate"), "ablate.", errors);
      a.text("axis", cfg.ablate.axis);
      a.texts("values", cfg.ablate.values);
      const auto& ab = cfg.ablate;
      if (!ab.axis.empty() && ab.axis != "mode" && ab.axis != "distance" && ab.axis != "theta_policy") {
        a.fail("axis", "expected mode, distance or theta_policy");
      }
      for (const auto& v : ab.values) {
        if (ab.axis == "mode") check(errors, [&] { condense::parse_mode(v); });
        if (ab.axis == "distance") check(errors, [&] { matching::DistanceSpec::parse(v); });
        if (ab.axis == "theta_policy") check(errors, [&] { condense::ThetaPolicy::parse(v); });
      }
    }
    {
      Section x(top.child("xarch"), "xarch.", errors);
      x.texts("sources", cfg.xarch.sources);
      x.texts("targets", cfg.xarch.targets);
      for (const auto& v : cfg.xarch.sources) check(errors, [&] { models::parse_arch(v); });
      for (const auto& v : cfg.xarch.targets) check(errors, [&] { models::parse_arch(v); });
    }
    {
      Section o(top.child("output"), "output.", errors);
      std::string dir = cfg.output.dir.string();
      o.text("dir", dir);
      cfg.output.dir = dir;
      o.flag("trace", cfg.output.trace);
    }
  }
  check(errors, [&] { cfg.condense.validate(); });
  check(errors, [&] {
    try {
      cfg.eval.train.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("eval.") + e.what());
    }
  });
  if (!errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" + (errors.size() > 1 ? "s" : "") + "):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, bool check_paths) {
  json j;
  try {
    j = persist::read_json(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j, check_paths);
}

json to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  const auto& k = cfg.condense;
  const auto& t = cfg.eval.train;
  json j;
  j["seed"] = cfg.seed;
  j["precision"] = static_cast<int>(cfg.precision);
  j["jobs"] = cfg.jobs;
  j["dataset"] = {{"kind", d.kind},
                  {"root", d.root.string()},
                  {"train_images", d.train_images},
                  {"train_labels", d.train_labels},
                  {"test_images", d.test_images},
                  {"test_labels", d.test_labels},
                  {"limit_per_class", d.limit_per_class ? json(*d.limit_per_class) : json()},
                  {"blobs",
                   {{"classes", d.blobs.classes},
                    {"per_class", d.blobs.per_class},
                    {"test_per_class", d.blobs.test_per_class},
                    {"dim", d.blobs.dim},
                    {"separation", d.blobs.separation}}}};
  j["model"] = {{"arch", models::to_string(cfg.model.arch)},
                {"hidden", cfg.model.hidden},
                {"conv_width", cfg.model.conv_width},
                {"conv_depth", cfg.model.conv_depth}};
  j["condense"] = {{"outer_iterations", k.outer_iterations},
                   {"inner_iterations", k.inner_iterations},
                   {"synthetic_steps", k.synthetic_steps},
                   {"theta_policy", k.theta_policy.to_string()},
                   {"lr_synthetic", k.lr_synthetic},
                   {"lr_theta", k.lr_theta},
                   {"momentum_synthetic", k.momentum_synthetic},
                   {"momentum_theta", k.momentum_theta},
                   {"lambda", k.lambda ? json(*k.lambda) : json()},
                   {"mode", condense::to_string(k.mode)},
                   {"distance", k.distance.to_string()},
                   {"real_batch_per_class", k.real_batch_per_class},
                   {"validation_batch", k.validation_batch},
                   {"ipc", k.ipc},
                   {"init", init_name(k.init)}};
  j["eval"] = {{"epochs", t.epochs},
               {"batch_size", t.batch_size},
               {"lr", t.lr},
               {"lr_decay_epochs", t.lr_decay_epochs},
               {"lr_decay", t.lr_decay},
               {"momentum", t.momentum},
               {"weight_decay", t.weight_decay},
               {"runs", cfg.eval.runs},
               {"synthetic_sets", cfg.eval.synthetic_sets},
               {"arch", cfg.eval.arch ? json(models::to_string(*cfg.eval.arch)) : json()}};
  j["coreset"] = {{"method", cfg.coreset.method}, {"features", cfg.coreset.features}};
  j["ablate"] = {{"axis", cfg.ablate.axis}, {"values", cfg.ablate.values}};
  j["xarch"] = {{"sources", cfg.xarch.sources}, {"targets", cfg.xarch.targets}};
  j["output"] = {{"dir", cfg.output.dir.string()}, {"trace", cfg.output.trace}};
  return j;
}

LoadedData load_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  if (d.kind == "blobs") {
    const auto& b = d.blobs;
    return {data::gaussian_blobs(b.classes, b.per_class, b.dim, b.separation, derive_seed(cfg.seed, 77)),
            data::gaussian_blobs(b.classes, b.test_per_class, b.dim, b.separation, derive_seed(cfg.seed, 78))};
  }
  LoadedData out;
  out.train = data::load_idx(d.root / d.train_images, d.root / d.train_labels, d.limit_per_class);
  out.test = data::load_idx(d.root / d.test_images, d.root / d.test_labels, std::nullopt, out.train.stats);
  if (out.test.num_classes != out.train.num_classes || out.test.sample_shape() != out.train.sample_shape()) {
    throw FormatError("test split does not match the training split's classes or image shape");
  }
  return out;
}

models::ModelSpec model_for(const ExperimentConfig& cfg, const data::Dataset& train, std::optional<models::Arch> arch) {
  models::ModelSpec spec = cfg.model;
  if (arch) spec.arch = *arch;
  const Shape s = train.sample_shape();
  spec.channels = s[0];
  spec.height = s[1];
  spec.width = s[2];
  spec.num_classes = train.num_classes;
  try {
    spec.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return spec;
}

}  // namespace gradmatch::experiment
