#include "scaling_lab/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "scaling_lab/errors.hpp"

namespace scaling_lab::config {

using nlohmann::ordered_json;

namespace {

template <class T>
std::string type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_unsigned_v<T>) return "a nonnegative integer";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else return "a list";
}

// Walks one YAML map, remembering which keys were consumed so leftovers can be
// reported with a suggestion.
class Reader {
 public:
  Reader(YAML::Node node, std::string path, std::vector<Issue>* issues)
      : node_(std::move(node)), path_(std::move(path)), issues_(issues) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) {
      issue("", "expected a mapping");
      node_ = YAML::Node();
    }
  }

  bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }
  bool present() const { return node_ && node_.IsMap(); }
  const std::string& path() const { return path_; }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void issue(const std::string& key, const std::string& message) const {
    issues_->push_back({key.empty() ? path_ : at(key), message});
  }

  template <class T>
  bool field(const std::string& key, T& out) {
    known_.push_back(key);
    if (!has(key)) return false;
    try {
      out = node_[key].template as<T>();
      return true;
    } catch (const YAML::Exception&) {
      issue(key, "expected " + type_name<T>());
      return false;
    }
  }

  YAML::Node node(const std::string& key) {
    known_.push_back(key);
    return has(key) ? node_[key] : YAML::Node();
  }

  Reader child(const std::string& key) { return Reader(node(key), at(key), issues_); }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (std::find(known_.begin(), known_.end(), key) != known_.end()) continue;
      // Always point at the closest known key, however far.
      std::string best;
      std::size_t best_d = std::string::npos;
      for (const auto& k : known_) {
        const auto d = levenshtein(key, k);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      issue(key, best.empty() ? "unknown key" : "unknown key (did you mean \"" + best + "\"?)");
    }
  }

 private:
  YAML::Node node_;
  std::string path_;
  std::vector<Issue>* issues_;
  std::vector<std::string> known_;
};

template <class T>
void positive(Reader& r, const std::string& key, T value) {
  if (!(value > T{0})) r.issue(key, "must be positive");
}

sources::Source parse_source(Reader r, const sources::Source& fallback) {
  std::string type;
  if (!r.field("type", type)) {
    if (!r.has("type") && r.present()) r.issue("type", "required");
    r.finish();
    return fallback;
  }
  try {
    if (type == "uniform") {
      int vocab = 4;
      r.field("vocab_size", vocab);
      r.finish();
      return sources::Source::uniform(vocab);
    }
    if (type == "iid") {
      std::vector<double> probs;
      if (!r.field("probs", probs)) r.issue("probs", "required");
      r.finish();
      return sources::Source::iid(probs);
    }
    if (type == "markov") {
      std::vector<std::vector<double>> t;
      if (!r.field("transition", t)) r.issue("transition", "required");
      r.finish();
      return sources::Source::markov(t);
    }
    if (type == "block_stationary") {
      int width = 0;
      if (!r.field("width", width)) r.issue("width", "required");
      const auto base = parse_source(r.child("base"), sources::Source::uniform(4));
      r.finish();
      return sources::Source::block_stationary(base, width);
    }
    if (type == "planted_copy") {
      int lag = 1;
      double p = 0.5;
      std::vector<double> bg = {0.25, 0.25, 0.25, 0.25};
      r.field("lag", lag);
      r.field("copy_prob", p);
      r.field("background", bg);
      r.finish();
      return sources::Source::planted_copy(lag, p, bg);
    }
    r.issue("type", "unknown source type \"" + type + "\" (uniform, iid, markov, block_stationary, planted_copy)");
    r.finish();
  } catch (const ParameterError& e) {
    r.issue("", e.what());
  } catch (const Error& e) {
    r.issue("", e.what());
  }
  return fallback;
}

nanoformer::ModelConfig parse_model(Reader r, nanoformer::ModelConfig m) {
  r.field("vocab_size", m.vocab_size);
  r.field("num_layers", m.num_layers);
  r.field("model_dim", m.model_dim);
  r.field("key_dim", m.key_dim);
  r.field("ffn_hidden_dim", m.ffn_hidden_dim);
  r.field("context_cap", m.context_cap);
  r.field("cap_q", m.cap_q);
  r.field("cap_k", m.cap_k);
  r.field("cap_v", m.cap_v);
  std::string act = nanoformer::to_string(m.ffn_activation);
  if (r.field("activation", act)) {
    try {
      m.ffn_activation = nanoformer::parse_activation(act);
    } catch (const Error&) {
      r.issue("activation", "expected tanh or hardtanh");
    }
  }
  r.field("temperature", m.temperature);
  std::string scale = nanoformer::to_string(m.logit_scale);
  if (r.field("logit_scale", scale)) {
    try {
      m.logit_scale = nanoformer::parse_logit_scale(scale);
    } catch (const Error&) {
      r.issue("logit_scale", "expected sqrt or linear");
    }
  }
  r.field("enforce_bounds", m.enforce_bounds);
  r.finish();
  try {
    m.validate();
  } catch (const ParameterError& e) {
    r.issue("", e.what());
  }
  return m;
}

void parse_training(Reader r, nanoformer::TrainHyper& h, double& epochs) {
  r.field("learning_rate", h.learning_rate);
  r.field("batch_size", h.batch_size);
  r.field("seq_len", h.seq_len);
  r.field("epochs", epochs);
  r.finish();
  positive(r, "learning_rate", h.learning_rate);
  positive(r, "batch_size", h.batch_size);
  if (h.seq_len < 2) r.issue("seq_len", "must be at least 2");
  positive(r, "epochs", epochs);
}

template <class F>
void check_plan(std::vector<Issue>& issues, const std::string& section, F&& validate) {
  try {
    validate();
  } catch (const Error& e) {
    issues.push_back({section, e.what()});
  }
}

}  // namespace

std::string to_string(Kind k) {
  switch (k) {
    case Kind::clt:
      return "clt";
    case Kind::biasvar:
      return "biasvar";
    case Kind::emergence:
      return "emergence";
    case Kind::assumptions:
      break;
  }
  return "assumptions";
}

void AssumptionsPlan::validate() const {
  model.validate();
  if (source.vocab_size() != model.vocab_size) throw PlanError("source: vocab_size differs from the model");
  if (batch_sequences < 1) throw PlanError("batch_sequences: must be positive");
  if (seq_len < 2 || seq_len > static_cast<std::size_t>(model.context_cap)) {
    throw PlanError("seq_len: must lie in [2, model.context_cap]");
  }
  if (pairs < 1) throw PlanError("pairs: must be positive");
  if (train_tokens < 0) throw PlanError("train_tokens: must be nonnegative");
  if (train_tokens > 0 && train_tokens < static_cast<std::int64_t>(hyper.batch_size) * hyper.seq_len) {
    throw PlanError("train_tokens: smaller than one batch");
  }
}

void ExperimentConfig::apply(std::uint64_t master_seed, int jobs) {
  seed = master_seed;
  clt.seed = master_seed;
  clt.jobs = jobs;
  biasvar.seed = master_seed;
  biasvar.jobs = jobs;
  emergence.seed = master_seed;
  emergence.jobs = jobs;
  assumptions.seed = master_seed;
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

LoadResult parse_config(const std::string& text) {
  LoadResult out;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    out.issues.push_back({"", std::string("not valid YAML: ") + e.what()});
    return out;
  }
  if (!root.IsMap()) {
    out.issues.push_back({"", "expected a mapping at the top level"});
    return out;
  }
  // A manifest carries the resolved config under "config".
  if (root["manifest_version"] && root["config"]) {
    out.from_manifest = true;
    root = root["config"];
  }
  auto& issues = out.issues;
  Reader top(root, "", &issues);
  ExperimentConfig cfg;

  std::string kind;
  bool kind_ok = false;
  if (!top.field("kind", kind)) {
    if (!top.has("kind")) top.issue("kind", "required (clt, biasvar, emergence or assumptions)");
  } else if (kind == "clt") {
    cfg.kind = Kind::clt;
    kind_ok = true;
  } else if (kind == "biasvar") {
    cfg.kind = Kind::biasvar;
    kind_ok = true;
  } else if (kind == "emergence") {
    cfg.kind = Kind::emergence;
    kind_ok = true;
  } else if (kind == "assumptions") {
    cfg.kind = Kind::assumptions;
    kind_ok = true;
  } else {
    top.issue("kind", "unknown experiment kind \"" + kind + "\"");
  }
  top.field("seed", cfg.seed);
  top.field("output_dir", cfg.output_dir);
  top.field("plots", cfg.plots);
  if (!kind_ok) return out;

  const auto models_of = [&](const std::string& key) {
    std::vector<nanoformer::ModelConfig> models;
    const auto list = top.node(key);
    if (!list) {
      top.issue(key, "required");
    } else if (!list.IsSequence()) {
      top.issue(key, "expected a list of model configs");
    } else {
      for (std::size_t i = 0; i < list.size(); ++i) {
        models.push_back(parse_model(Reader(list[i], key + "[" + std::to_string(i) + "]", &issues), {}));
      }
    }
    return models;
  };

  switch (cfg.kind) {
    case Kind::clt: {
      auto& p = cfg.clt;
      p.source = parse_source(top.child("source"), p.source);
      p.model = parse_model(top.child("model"), p.model);
      Reader r = top.child("clt");
      r.field("model_seed", p.model_seed);
      r.field("uniform_attention", p.uniform_attention);
      r.field("contexts", p.contexts);
      r.field("replicates", p.replicates);
      r.field("layers", p.layers);
      r.field("diagnostic_layer", p.diagnostic_layer);
      r.field("block_width", p.block_width);
      r.field("bootstrap_reps", p.bootstrap_reps);
      r.field("projections", p.projections);
      r.field("lilliefors_resamples", p.lilliefors_resamples);
      r.field("alpha", p.alpha);
      r.field("epsilons", p.epsilons);
      r.field("kappa", p.kappa);
      r.finish();
      positive(r, "replicates", p.replicates);
      positive(r, "block_width", p.block_width);
      positive(r, "bootstrap_reps", p.bootstrap_reps);
      positive(r, "projections", p.projections);
      if (p.contexts.empty()) r.issue("contexts", "required");
      break;
    }
    case Kind::biasvar: {
      auto& p = cfg.biasvar;
      p.source = parse_source(top.child("source"), p.source);
      p.capacities = models_of("models");
      parse_training(top.child("training"), p.hyper, p.epochs);
      Reader r = top.child("biasvar");
      r.field("data_sizes", p.data_sizes);
      r.field("reference_size", p.reference_size);
      r.field("seeds", p.seeds);
      r.field("reference_seeds", p.reference_seeds);
      r.field("eval_tokens", p.eval_tokens);
      r.finish();
      if (p.data_sizes.empty()) r.issue("data_sizes", "required");
      positive(r, "reference_size", p.reference_size);
      positive(r, "seeds", p.seeds);
      positive(r, "reference_seeds", p.reference_seeds);
      positive(r, "eval_tokens", p.eval_tokens);
      break;
    }
    case Kind::emergence: {
      auto& p = cfg.emergence;
      p.source = parse_source(top.child("source"), p.source);
      p.capacities = models_of("models");
      parse_training(top.child("training"), p.hyper, p.epochs);
      Reader r = top.child("emergence");
      r.field("data_sizes", p.data_sizes);
      r.field("seeds", p.seeds);
      r.field("per_class", p.snr.per_class);
      r.field("context_len", p.snr.context_len);
      r.field("layer", p.snr.layer);
      r.field("snr_bootstrap", p.snr.bootstrap_reps);
      r.field("min_class", p.snr.min_class);
      r.field("eval_positions", p.eval_positions);
      r.field("criterion", p.criterion);
      r.field("dominance", p.dominance);
      r.finish();
      if (p.data_sizes.empty()) r.issue("data_sizes", "required");
      positive(r, "seeds", p.seeds);
      positive(r, "per_class", p.snr.per_class);
      break;
    }
    case Kind::assumptions: {
      auto& p = cfg.assumptions;
      p.source = parse_source(top.child("source"), p.source);
      p.model = parse_model(top.child("model"), p.model);
      parse_training(top.child("training"), p.hyper, p.epochs);
      Reader r = top.child("assumptions");
      r.field("model_seed", p.model_seed);
      r.field("train_tokens", p.train_tokens);
      r.field("batch_sequences", p.batch_sequences);
      r.field("seq_len", p.seq_len);
      r.field("pairs", p.pairs);
      r.finish();
      positive(r, "batch_sequences", p.batch_sequences);
      positive(r, "pairs", p.pairs);
      if (p.train_tokens < 0) r.issue("train_tokens", "must be nonnegative");
      break;
    }
  }
  top.finish();

  if (issues.empty()) {
    const std::string section = to_string(cfg.kind);
    switch (cfg.kind) {
      case Kind::clt:
        check_plan(issues, section, [&] { cfg.clt.validate(); });
        break;
      case Kind::biasvar:
        check_plan(issues, section, [&] { cfg.biasvar.validate(); });
        break;
      case Kind::emergence:
        check_plan(issues, section, [&] { cfg.emergence.validate(); });
        break;
      case Kind::assumptions:
        check_plan(issues, section, [&] { cfg.assumptions.validate(); });
        break;
    }
  }
  cfg.apply(cfg.seed, 1);
  out.config = cfg;
  return out;
}

LoadResult load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return parse_config(ss.str());
}

ordered_json to_json(const sources::Source& s) {
  ordered_json j;
  switch (s.kind()) {
    case sources::SourceKind::iid:
      j["type"] = "iid";
      j["probs"] = s.probs();
      break;
    case sources::SourceKind::markov:
      j["type"] = "markov";
      j["transition"] = s.transition();
      break;
    case sources::SourceKind::block_stationary:
      j["type"] = "block_stationary";
      j["width"] = s.width();
      j["base"] = to_json(s.base());
      break;
    case sources::SourceKind::planted_copy:
      j["type"] = "planted_copy";
      j["lag"] = s.lag();
      j["copy_prob"] = s.copy_prob();
      j["background"] = s.background();
      break;
  }
  return j;
}

ordered_json to_json(const nanoformer::ModelConfig& m) {
  return ordered_json{{"vocab_size", m.vocab_size},
                      {"num_layers", m.num_layers},
                      {"model_dim", m.model_dim},
                      {"key_dim", m.key_dim},
                      {"ffn_hidden_dim", m.ffn_hidden_dim},
                      {"context_cap", m.context_cap},
                      {"cap_q", m.cap_q},
                      {"cap_k", m.cap_k},
                      {"cap_v", m.cap_v},
                      {"activation", nanoformer::to_string(m.ffn_activation)},
                      {"temperature", m.temperature},
                      {"logit_scale", nanoformer::to_string(m.logit_scale)},
                      {"enforce_bounds", m.enforce_bounds}};
}

namespace {

ordered_json training_json(const nanoformer::TrainHyper& h, double epochs) {
  return ordered_json{{"learning_rate", h.learning_rate},
                      {"batch_size", h.batch_size},
                      {"seq_len", h.seq_len},
                      {"epochs", epochs}};
}

ordered_json models_json(const std::vector<nanoformer::ModelConfig>& models) {
  ordered_json list = ordered_json::array();
  for (const auto& m : models) list.push_back(to_json(m));
  return list;
}

}  // namespace

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["kind"] = to_string(c.kind);
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["plots"] = c.plots;
  switch (c.kind) {
    case Kind::clt: {
      const auto& p = c.clt;
      j["source"] = to_json(p.source);
      j["model"] = to_json(p.model);
      j["clt"] = ordered_json{{"model_seed", p.model_seed},
                              {"uniform_attention", p.uniform_attention},
                              {"contexts", p.contexts},
                              {"replicates", p.replicates},
                              {"layers", p.layers},
                              {"diagnostic_layer", p.diagnostic_layer},
                              {"block_width", p.block_width},
                              {"bootstrap_reps", p.bootstrap_reps},
                              {"projections", p.projections},
                              {"lilliefors_resamples", p.lilliefors_resamples},
                              {"alpha", p.alpha},
                              {"epsilons", p.epsilons},
                              {"kappa", p.kappa}};
      break;
    }
    case Kind::biasvar: {
      const auto& p = c.biasvar;
      j["source"] = to_json(p.source);
      j["models"] = models_json(p.capacities);
      j["training"] = training_json(p.hyper, p.epochs);
      j["biasvar"] = ordered_json{{"data_sizes", p.data_sizes},
                                  {"reference_size", p.reference_size},
                                  {"seeds", p.seeds},
                                  {"reference_seeds", p.reference_seeds},
                                  {"eval_tokens", p.eval_tokens}};
      break;
    }
    case Kind::emergence: {
      const auto& p = c.emergence;
      j["source"] = to_json(p.source);
      j["models"] = models_json(p.capacities);
      j["training"] = training_json(p.hyper, p.epochs);
      j["emergence"] = ordered_json{{"data_sizes", p.data_sizes},
                                    {"seeds", p.seeds},
                                    {"per_class", p.snr.per_class},
                                    {"context_len", p.snr.context_len},
                                    {"layer", p.snr.layer},
                                    {"snr_bootstrap", p.snr.bootstrap_reps},
                                    {"min_class", p.snr.min_class},
                                    {"eval_positions", p.eval_positions},
                                    {"criterion", p.criterion},
                                    {"dominance", p.dominance}};
      break;
    }
    case Kind::assumptions: {
      const auto& p = c.assumptions;
      j["source"] = to_json(p.source);
      j["model"] = to_json(p.model);
      j["training"] = training_json(p.hyper, p.epochs);
      j["assumptions"] = ordered_json{{"model_seed", p.model_seed},
                                      {"train_tokens", p.train_tokens},
                                      {"batch_sequences", p.batch_sequences},
                                      {"seq_len", p.seq_len},
                                      {"pairs", p.pairs}};
      break;
    }
  }
  return j;
}

}  // namespace scaling_lab::config
