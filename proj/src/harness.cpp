#include "qforget/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "qforget/error.hpp"

namespace qforget::harness {

using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Strict field reader: known keys only, types checked, path in every error.

class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where() + " must be an object");
  }

  void get(const char* key, std::size_t& out) { visit(key, [&](const json& v) {
      if (!v.is_number_unsigned()) throw ConfigError(at(key) + " must be a non-negative integer");
      out = v.get<std::size_t>();
    }); }
  void get(const char* key, std::uint64_t& out, int) { visit(key, [&](const json& v) {
      if (!v.is_number_unsigned()) throw ConfigError(at(key) + " must be a non-negative integer");
      out = v.get<std::uint64_t>();
    }); }
  void get(const char* key, int& out) { visit(key, [&](const json& v) {
      if (!v.is_number_integer()) throw ConfigError(at(key) + " must be an integer");
      out = v.get<int>();
    }); }
  void get(const char* key, double& out) { visit(key, [&](const json& v) {
      if (!v.is_number()) throw ConfigError(at(key) + " must be a number");
      out = v.get<double>();
    }); }
  void get(const char* key, bool& out) { visit(key, [&](const json& v) {
      if (!v.is_boolean()) throw ConfigError(at(key) + " must be a boolean");
      out = v.get<bool>();
    }); }
  void get(const char* key, std::string& out) { visit(key, [&](const json& v) {
      if (!v.is_string()) throw ConfigError(at(key) + " must be a string");
      out = v.get<std::string>();
    }); }

  /// Calls fn(value, path) when the key is present.
  template <typename Fn>
  void with(const char* key, Fn fn) {
    visit(key, [&](const json& v) { fn(v, at(key)); });
  }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& item : node_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(at(item.key()) + ": unknown field");
    }
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename Fn>
  void visit(const char* key, Fn fn) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      fn(*it);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(at(key) + ": " + e.what());
    }
  }
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T, typename Parse>
T parse_enum(const json& v, const std::string& path, Parse parse) {
  if (!v.is_string()) throw ConfigError(path + " must be a string");
  try {
    return parse(v.get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

json dataset_json(const data::DatasetConfig& d) {
  return {{"n_entities", d.n_entities},   {"n_attributes", d.n_attributes},
          {"value_vocab", d.value_vocab}, {"forget_entities", d.forget_entities},
          {"holdout_entities", d.holdout_entities}, {"entity_offset", d.entity_offset},
          {"seed", d.seed}};
}

data::DatasetConfig dataset_from(const json& j, const std::string& path) {
  data::DatasetConfig d;
  Reader r(j, path);
  r.get("n_entities", d.n_entities);
  r.get("n_attributes", d.n_attributes);
  r.get("value_vocab", d.value_vocab);
  r.get("forget_entities", d.forget_entities);
  r.get("holdout_entities", d.holdout_entities);
  r.get("entity_offset", d.entity_offset);
  r.get("seed", d.seed, 0);
  r.finish();
  return d;
}

json model_json(const model::ModelConfig& m) {
  return {{"entity_vocab", m.entity_vocab}, {"attribute_vocab", m.attribute_vocab},
          {"value_vocab", m.value_vocab},   {"embed_dim", m.embed_dim},
          {"hidden_dim", m.hidden_dim},     {"adapter_rank", m.adapter_rank},
          {"adapter_scale", m.adapter_scale}, {"adapter_targets", m.adapter_targets}};
}

model::ModelConfig model_from(const json& j, const std::string& path) {
  model::ModelConfig m;
  Reader r(j, path);
  r.get("entity_vocab", m.entity_vocab);
  r.get("attribute_vocab", m.attribute_vocab);
  r.get("value_vocab", m.value_vocab);
  r.get("embed_dim", m.embed_dim);
  r.get("hidden_dim", m.hidden_dim);
  r.get("adapter_rank", m.adapter_rank);
  r.get("adapter_scale", m.adapter_scale);
  r.with("adapter_targets", [&](const json& v, const std::string& p) {
    if (!v.is_array()) throw ConfigError(p + " must be an array of strings");
    m.adapter_targets.clear();
    for (const auto& t : v) {
      if (!t.is_string()) throw ConfigError(p + " must be an array of strings");
      m.adapter_targets.push_back(t.get<std::string>());
    }
  });
  r.finish();
  return m;
}

json pretrain_json(const unlearn::PretrainConfig& p) {
  return {{"epochs", p.epochs},         {"lr", p.lr},
          {"batch_size", p.batch_size}, {"weight_decay", p.weight_decay},
          {"clip_norm", p.clip_norm},   {"train_adapters", p.train_adapters}};
}

unlearn::PretrainConfig pretrain_from(const json& j, const std::string& path) {
  unlearn::PretrainConfig p;
  Reader r(j, path);
  r.get("epochs", p.epochs);
  r.get("lr", p.lr);
  r.get("batch_size", p.batch_size);
  r.get("weight_decay", p.weight_decay);
  r.get("clip_norm", p.clip_norm);
  r.get("train_adapters", p.train_adapters);
  r.finish();
  return p;
}

json method_json(const unlearn::MethodConfig& m) {
  json j = {{"method", unlearn::method_name(m.method)},
            {"lr", m.optimizer.lr},
            {"beta1", m.optimizer.beta1},
            {"beta2", m.optimizer.beta2},
            {"eps", m.optimizer.eps},
            {"weight_decay", m.optimizer.weight_decay},
            {"clip_norm", m.optimizer.clip_norm},
            {"total_steps", m.optimizer.total_steps},
            {"cosine", m.optimizer.cosine},
            {"batch_size", m.batch_size},
            {"train_scope", unlearn::train_scope_name(m.train_scope)}};
  j["lambda"] = m.lambda ? json(*m.lambda) : json(nullptr);
  j["npo_beta"] = m.npo_beta;
  j["salun_fraction"] = m.salun_fraction;
  j["scrub_kl_weight"] = m.scrub_kl_weight;
  j["taskarith_eta"] = m.taskarith_eta;
  j["taskarith_ft_steps"] = m.taskarith_ft_steps;
  j["alpha_max"] = m.alpha_max;
  j["warmup"] = m.warmup;
  j["warmup_enabled"] = m.warmup_enabled;
  j["ste_scope"] = quant::scope_name(m.ste_scope);
  j["ste_bits"] = m.ste_bits;
  return j;
}

unlearn::MethodConfig method_from(const json& j, const std::string& path) {
  unlearn::MethodConfig m;
  Reader r(j, path);
  r.with("method", [&](const json& v, const std::string& p) { m.method = parse_enum<unlearn::Method>(v, p, unlearn::parse_method); });
  r.get("lr", m.optimizer.lr);
  r.get("beta1", m.optimizer.beta1);
  r.get("beta2", m.optimizer.beta2);
  r.get("eps", m.optimizer.eps);
  r.get("weight_decay", m.optimizer.weight_decay);
  r.get("clip_norm", m.optimizer.clip_norm);
  r.get("total_steps", m.optimizer.total_steps);
  r.get("cosine", m.optimizer.cosine);
  r.get("batch_size", m.batch_size);
  r.with("train_scope", [&](const json& v, const std::string& p) {
    m.train_scope = parse_enum<unlearn::TrainScope>(v, p, unlearn::parse_train_scope);
  });
  r.with("lambda", [&](const json& v, const std::string& p) {
    if (v.is_null()) {
      m.lambda.reset();
    } else if (v.is_number()) {
      m.lambda = v.get<double>();
    } else {
      throw ConfigError(p + " must be a number or null");
    }
  });
  r.get("npo_beta", m.npo_beta);
  r.get("salun_fraction", m.salun_fraction);
  r.get("scrub_kl_weight", m.scrub_kl_weight);
  r.get("taskarith_eta", m.taskarith_eta);
  r.get("taskarith_ft_steps", m.taskarith_ft_steps);
  r.get("alpha_max", m.alpha_max);
  r.get("warmup", m.warmup);
  r.get("warmup_enabled", m.warmup_enabled);
  r.with("ste_scope", [&](const json& v, const std::string& p) { m.ste_scope = parse_enum<quant::Scope>(v, p, quant::parse_scope); });
  r.get("ste_bits", m.ste_bits);
  r.finish();
  return m;
}

json spec_json(const quant::QuantSpec& s) {
  return {{"bits", s.bits}, {"granularity", quant::granularity_name(s.granularity)}, {"scope", quant::scope_name(s.scope)}};
}

quant::QuantSpec spec_from(const json& j, const std::string& path, quant::QuantSpec s) {
  Reader r(j, path);
  r.get("bits", s.bits);
  r.with("granularity", [&](const json& v, const std::string& p) {
    s.granularity = parse_enum<quant::Granularity>(v, p, quant::parse_granularity);
  });
  r.with("scope", [&](const json& v, const std::string& p) { s.scope = parse_enum<quant::Scope>(v, p, quant::parse_scope); });
  r.finish();
  return s;
}

json finetune_json(const attacks::FinetuneConfig& f) {
  return {{"steps", f.steps},
          {"lr", f.lr},
          {"batch_size", f.batch_size},
          {"weight_decay", f.weight_decay},
          {"clip_norm", f.clip_norm},
          {"record_every", f.record_every},
          {"train_scope", unlearn::train_scope_name(f.train_scope)}};
}

attacks::FinetuneConfig finetune_from(const json& j, const std::string& path) {
  attacks::FinetuneConfig f;
  Reader r(j, path);
  r.get("steps", f.steps);
  r.get("lr", f.lr);
  r.get("batch_size", f.batch_size);
  r.get("weight_decay", f.weight_decay);
  r.get("clip_norm", f.clip_norm);
  r.get("record_every", f.record_every);
  r.with("train_scope", [&](const json& v, const std::string& p) {
    f.train_scope = parse_enum<unlearn::TrainScope>(v, p, unlearn::parse_train_scope);
  });
  r.finish();
  return f;
}

json config_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (const auto& m : c.methods) methods.push_back(method_json(m));
  json precisions = json::array();
  for (auto p : c.precisions) precisions.push_back(eval::precision_name(p));
  return {{"schema_version", kSchemaVersion},
          {"name", c.name},
          {"dataset", dataset_json(c.dataset)},
          {"unrelated", dataset_json(c.unrelated)},
          {"model", model_json(c.model)},
          {"pretrain", pretrain_json(c.pretrain)},
          {"methods", methods},
          {"quant", {{"int8", spec_json(c.int8)}, {"int4", spec_json(c.int4)}}},
          {"precisions", precisions},
          {"epsilon", c.epsilon},
          {"seeds", c.seeds},
          {"sweep", {{"alpha", c.sweep.alpha}, {"lambda", c.sweep.lambda}, {"probe_step", c.sweep.probe_step}}},
          {"attacks",
           {{"quant", c.attacks.quant},
            {"finetune", c.attacks.finetune},
            {"adapter_vs_merged", c.attacks.adapter_vs_merged},
            {"finetune_config", finetune_json(c.attacks.finetune_config)}}},
          {"output_dir", c.output_dir},
          {"record_wall_time", c.record_wall_time}};
}

std::vector<double> numbers_from(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + " must be an array of numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ConfigError(path + " must be an array of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config.

void ExperimentConfig::validate() const {
  if (methods.empty()) throw ConfigError("methods: at least one method is required");
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (precisions.empty()) throw ConfigError("precisions: at least one precision is required");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must be in [0, 1]");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (int8.bits != 8) throw ConfigError("quant.int8.bits must be 8");
  if (int4.bits != 4) throw ConfigError("quant.int4.bits must be 4");
  model.validate();
  if (model.value_vocab != dataset.value_vocab) throw ConfigError("model.value_vocab must equal dataset.value_vocab");
  if (model.attribute_vocab < dataset.n_attributes) throw ConfigError("model.attribute_vocab is below dataset.n_attributes");
  if (model.entity_vocab < dataset.entity_offset + dataset.n_entities) {
    throw ConfigError("model.entity_vocab does not cover the dataset entities");
  }
  if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    try {
      methods[i].validate();
    } catch (const ConfigError& e) {
      throw ConfigError("methods[" + std::to_string(i) + "]: " + e.what());
    }
  }
  if (attacks.finetune) {
    if (unrelated.value_vocab != dataset.value_vocab) throw ConfigError("unrelated.value_vocab must equal dataset.value_vocab");
    if (unrelated.n_attributes > model.attribute_vocab) throw ConfigError("unrelated.n_attributes exceeds model.attribute_vocab");
    if (model.entity_vocab < unrelated.entity_offset + unrelated.n_entities) {
      throw ConfigError("model.entity_vocab does not cover the unrelated entities");
    }
    const std::size_t forget_end = dataset.entity_offset + dataset.forget_entities;
    if (unrelated.entity_offset < forget_end && dataset.entity_offset < unrelated.entity_offset + unrelated.n_entities) {
      throw ConfigError("unrelated: entity range overlaps the forget split");
    }
    if (attacks.finetune_config.batch_size == 0) throw ConfigError("attacks.finetune_config.batch_size must be positive");
  }
}

eval::EvalOptions ExperimentConfig::eval_options() const {
  eval::EvalOptions o;
  o.int8 = int8;
  o.int4 = int4;
  o.epsilon = epsilon;
  o.precisions = precisions;
  return o;
}

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "");
  int version = 0;
  r.get("schema_version", version);
  if (!j.contains("schema_version")) throw ConfigError("schema_version: missing");
  if (version != kSchemaVersion) {
    throw ConfigError("schema_version: expected " + std::to_string(kSchemaVersion) + ", got " + std::to_string(version));
  }
  r.get("name", c.name);
  r.with("dataset", [&](const json& v, const std::string& p) { c.dataset = dataset_from(v, p); });
  r.with("unrelated", [&](const json& v, const std::string& p) { c.unrelated = dataset_from(v, p); });
  r.with("model", [&](const json& v, const std::string& p) { c.model = model_from(v, p); });
  r.with("pretrain", [&](const json& v, const std::string& p) { c.pretrain = pretrain_from(v, p); });
  r.with("methods", [&](const json& v, const std::string& p) {
    if (!v.is_array()) throw ConfigError(p + " must be an array");
    c.methods.clear();
    for (std::size_t i = 0; i < v.size(); ++i) c.methods.push_back(method_from(v[i], p + "[" + std::to_string(i) + "]"));
  });
  r.with("quant", [&](const json& v, const std::string& p) {
    Reader q(v, p);
    q.with("int8", [&](const json& s, const std::string& sp) { c.int8 = spec_from(s, sp, c.int8); });
    q.with("int4", [&](const json& s, const std::string& sp) { c.int4 = spec_from(s, sp, c.int4); });
    q.finish();
  });
  r.with("precisions", [&](const json& v, const std::string& p) {
    if (!v.is_array()) throw ConfigError(p + " must be an array of strings");
    c.precisions.clear();
    for (const auto& x : v) c.precisions.push_back(parse_enum<eval::Precision>(x, p, eval::parse_precision));
  });
  r.get("epsilon", c.epsilon);
  r.with("seeds", [&](const json& v, const std::string& p) {
    if (!v.is_array()) throw ConfigError(p + " must be an array of non-negative integers");
    c.seeds.clear();
    for (const auto& x : v) {
      if (!x.is_number_unsigned()) throw ConfigError(p + " must be an array of non-negative integers");
      c.seeds.push_back(x.get<std::uint64_t>());
    }
  });
  r.with("sweep", [&](const json& v, const std::string& p) {
    Reader s(v, p);
    s.with("alpha", [&](const json& x, const std::string& xp) { c.sweep.alpha = numbers_from(x, xp); });
    s.with("lambda", [&](const json& x, const std::string& xp) { c.sweep.lambda = numbers_from(x, xp); });
    s.get("probe_step", c.sweep.probe_step);
    s.finish();
  });
  r.with("attacks", [&](const json& v, const std::string& p) {
    Reader a(v, p);
    a.get("quant", c.attacks.quant);
    a.get("finetune", c.attacks.finetune);
    a.get("adapter_vs_merged", c.attacks.adapter_vs_merged);
    a.with("finetune_config", [&](const json& x, const std::string& xp) { c.attacks.finetune_config = finetune_from(x, xp); });
    a.finish();
  });
  r.get("output_dir", c.output_dir);
  r.get("record_wall_time", c.record_wall_time);
  r.finish();
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& config) { return config_json(config).dump(2) + "\n"; }

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return config_from_json(text.str());
}

std::string apply_override(const std::string& config_text, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json doc;
  try {
    doc = json::parse(config_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  std::string pointer;
  std::stringstream parts(key);
  for (std::string part; std::getline(parts, part, '.');) pointer += "/" + part;
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;  // bare word: a string
  }
  try {
    doc.at(json::json_pointer(pointer)) = value;
  } catch (const json::exception&) {
    throw ConfigError(key + ": no such field to override");
  }
  return doc.dump(2) + "\n";
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string fingerprint(const ExperimentConfig& config) { return sha256_hex(config_json(config).dump()); }

std::string run_fingerprint(const ExperimentConfig& config, const unlearn::MethodConfig& method, std::uint64_t seed) {
  json precisions = json::array();
  for (auto p : config.precisions) precisions.push_back(eval::precision_name(p));
  const json j = {{"schema_version", kSchemaVersion},
                  {"dataset", dataset_json(config.dataset)},
                  {"unrelated", dataset_json(config.unrelated)},
                  {"model", model_json(config.model)},
                  {"pretrain", pretrain_json(config.pretrain)},
                  {"method", method_json(method)},
                  {"int8", spec_json(config.int8)},
                  {"int4", spec_json(config.int4)},
                  {"precisions", precisions},
                  {"epsilon", config.epsilon},
                  {"probe_step", config.sweep.probe_step},
                  {"attacks",
                   {{"quant", config.attacks.quant},
                    {"finetune", config.attacks.finetune},
                    {"adapter_vs_merged", config.attacks.adapter_vs_merged},
                    {"finetune_config", finetune_json(config.attacks.finetune_config)}}},
                  {"seed", seed}};
  return sha256_hex(j.dump());
}

std::filesystem::path output_root(const ExperimentConfig& config) {
  const char* env = std::getenv(kOutputRootEnv);
  if (env && *env) return env;
  return config.output_dir;
}

void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Records.

namespace {

json outcome_json(const NamedOutcome& n) {
  const auto& o = n.outcome;
  json trajectory = json::array();
  for (const auto& p : o.trajectory) trajectory.push_back({p.step, p.fa, p.ra});
  json j = {{"label", n.label},
            {"kind", attacks::attack_kind_name(o.kind)},
            {"fa_before", o.fa_before},
            {"fa_after", o.fa_after},
            {"ra_before", o.ra_before},
            {"ra_after", o.ra_after}};
  if (o.spec) j["spec"] = spec_json(*o.spec);
  if (o.finetune) j["finetune"] = finetune_json(*o.finetune);
  if (!o.trajectory.empty()) j["trajectory"] = trajectory;
  return j;
}

NamedOutcome outcome_from(const json& j) {
  NamedOutcome n;
  n.label = j.at("label").get<std::string>();
  const std::string kind = j.at("kind").get<std::string>();
  n.outcome.kind = kind == attacks::attack_kind_name(attacks::AttackKind::Finetune) ? attacks::AttackKind::Finetune
                                                                                 : attacks::AttackKind::Quant;
  n.outcome.fa_before = j.at("fa_before").get<double>();
  n.outcome.fa_after = j.at("fa_after").get<double>();
  n.outcome.ra_before = j.at("ra_before").get<double>();
  n.outcome.ra_after = j.at("ra_after").get<double>();
  if (j.contains("spec")) n.outcome.spec = spec_from(j["spec"], "spec", quant::QuantSpec{});
  if (j.contains("finetune")) n.outcome.finetune = finetune_from(j["finetune"], "finetune");
  if (j.contains("trajectory")) {
    for (const auto& p : j["trajectory"]) {
      n.outcome.trajectory.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>(), p.at(2).get<double>()});
    }
  }
  return n;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

}  // namespace

std::string record_to_json(const RunRecord& r, bool with_wall_time) {
  json attacks = json::array();
  for (const auto& a : r.attacks) attacks.push_back(outcome_json(a));
  json j = {{"fingerprint", r.fingerprint},
            {"method", r.method},
            {"seed", r.seed},
            {"alpha", r.alpha},
            {"lambda", r.lambda},
            {"variant", r.variant},
            {"report",
             {{"fa", r.report.fa},
              {"ra", r.report.ra},
              {"q_int8", r.report.q_int8},
              {"q_int4", r.report.q_int4},
              {"ra_int4", r.report.ra_int4},
              {"mia_auc", r.report.mia_auc},
              {"kappa", r.report.kappa},
              {"cert", r.report.cert},
              {"recovery_ratio", opt_json(r.report.recovery_ratio)}}},
            {"fa_at_probe", opt_json(r.fa_at_probe)},
            {"attacks", attacks},
            {"theta0_path", r.theta0_path},
            {"checkpoint_path", r.checkpoint_path},
            {"error", r.error}};
  if (with_wall_time) j["wall_seconds"] = r.wall_seconds;
  return j.dump(2) + "\n";
}

RunRecord record_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    RunRecord r;
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.alpha = j.at("alpha").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.variant = j.at("variant").get<std::string>();
    const json& rep = j.at("report");
    r.report.fa = rep.at("fa").get<double>();
    r.report.ra = rep.at("ra").get<double>();
    r.report.q_int8 = rep.at("q_int8").get<double>();
    r.report.q_int4 = rep.at("q_int4").get<double>();
    r.report.ra_int4 = rep.at("ra_int4").get<double>();
    r.report.mia_auc = rep.at("mia_auc").get<double>();
    r.report.kappa = rep.at("kappa").get<double>();
    r.report.cert = rep.at("cert").get<bool>();
    r.report.recovery_ratio = opt_from(rep, "recovery_ratio");
    r.fa_at_probe = opt_from(j, "fa_at_probe");
    for (const auto& a : j.at("attacks")) r.attacks.push_back(outcome_from(a));
    r.theta0_path = j.at("theta0_path").get<std::string>();
    r.checkpoint_path = j.at("checkpoint_path").get<std::string>();
    r.error = j.at("error").get<std::string>();
    if (j.contains("wall_seconds")) r.wall_seconds = j["wall_seconds"].get<double>();
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed run record: ") + e.what());
  }
}

std::string run_csv_header() { return "method,seed,alpha,lambda,fa,ra,q_int8,q_int4,ra_int4,mia_auc,kappa,cert,runtime_s"; }

std::string run_csv_row(const RunRecord& r, bool with_wall_time) {
  std::string row = r.method + "," + std::to_string(r.seed) + "," + num(r.alpha) + "," + num(r.lambda);
  for (double v : {r.report.fa, r.report.ra, r.report.q_int8, r.report.q_int4, r.report.ra_int4, r.report.mia_auc,
                   r.report.kappa}) {
    row += "," + num(v);
  }
  row += r.report.cert ? ",1," : ",0,";
  if (with_wall_time) row += num(r.wall_seconds);
  return row;
}

// ---------------------------------------------------------------------------
// Runs.

data::FactDataset make_dataset(const ExperimentConfig& config) { return data::FactDataset::generate(config.dataset); }

std::vector<data::Fact> unrelated_facts(const ExperimentConfig& config) {
  return data::FactDataset::generate(config.unrelated).facts();
}

ParamSet pretrain_or_load(const ExperimentConfig& config, std::uint64_t seed, std::string* path_out) {
  const json key = {{"dataset", dataset_json(config.dataset)},
                    {"model", model_json(config.model)},
                    {"pretrain", pretrain_json(config.pretrain)},
                    {"seed", seed}};
  const std::string rel = "cache/theta0_" + sha256_hex(key.dump()).substr(0, 16) + ".bin";
  const std::filesystem::path path = output_root(config) / rel;
  if (path_out) *path_out = rel;
  if (std::filesystem::exists(path)) return load_params(path);
  unlearn::PretrainConfig pc = config.pretrain;
  pc.seed = seed;
  ParamSet theta0 = unlearn::pretrain(config.model, make_dataset(config), pc);
  std::filesystem::create_directories(path.parent_path());
  save_params(theta0, path);
  return theta0;
}

namespace {

bool uses_alpha(unlearn::Method m) { return m == unlearn::Method::SAF; }
bool uses_lambda(unlearn::Method m) {
  return m != unlearn::Method::GA && m != unlearn::Method::TaskArith && m != unlearn::Method::SCRUB;
}

std::string run_stem(const RunRecord& r) {
  std::string stem = r.method + "_s" + std::to_string(r.seed);
  if (!r.variant.empty()) stem += "_" + r.variant;
  return stem;
}

void append_timing(const std::filesystem::path& root, const RunRecord& r) {
  std::filesystem::create_directories(root);
  std::ofstream log(root / "timing.log", std::ios::app);
  log << r.fingerprint.substr(0, 16) << ' ' << run_stem(r) << ' ' << num(r.wall_seconds) << '\n';
}

// Stale records from an earlier invocation would leak into the report.
void reset_runs(const std::filesystem::path& dir) { std::filesystem::remove_all(dir / "runs"); }

// Persists one record as <dir>/runs/<index>_<stem>.json.
void persist(const std::filesystem::path& dir, std::size_t index, const RunRecord& r, bool with_wall_time) {
  char prefix[16];
  std::snprintf(prefix, sizeof prefix, "%03zu_", index);
  atomic_write(dir / "runs" / (prefix + run_stem(r) + ".json"), record_to_json(r, with_wall_time));
}

const unlearn::MethodConfig& first_saf(const ExperimentConfig& config) {
  for (const auto& m : config.methods) {
    if (m.method == unlearn::Method::SAF) return m;
  }
  throw ConfigError("methods: this command needs a SAF method entry");
}

RunRecord failed_record(const ExperimentConfig& config, const unlearn::MethodConfig& method, std::uint64_t seed,
                        const std::string& variant, const std::string& error) {
  RunRecord r;
  r.fingerprint = run_fingerprint(config, method, seed);
  r.method = unlearn::method_name(method.method);
  r.seed = seed;
  r.alpha = uses_alpha(method.method) ? method.alpha_max : 0.0;
  r.lambda = uses_lambda(method.method) ? method.effective_lambda() : 0.0;
  r.variant = variant;
  r.error = error;
  return r;
}

// Runs one configured method across seeds, sharing theta0 per seed.
template <typename Emit>
void for_each_seed(const ExperimentConfig& config, Emit emit) {
  for (std::uint64_t seed : config.seeds) {
    std::string theta0_path;
    std::optional<ParamSet> theta0;
    std::string error;
    try {
      theta0 = pretrain_or_load(config, seed, &theta0_path);
    } catch (const std::exception& e) {
      error = std::string("pretraining failed: ") + e.what();
    }
    emit(seed, theta0 ? &*theta0 : nullptr, theta0_path, error);
  }
}

}  // namespace

RunRecord run_one(const ExperimentConfig& config, unlearn::MethodConfig method, std::uint64_t seed,
                  const ParamSet& theta0, const std::string& theta0_path, const data::FactDataset& dataset,
                  const std::string& variant) {
  method.seed = seed;
  RunRecord r;
  r.fingerprint = run_fingerprint(config, method, seed);
  r.method = unlearn::method_name(method.method);
  r.seed = seed;
  r.alpha = uses_alpha(method.method) ? method.alpha_max : 0.0;
  r.lambda = uses_lambda(method.method) ? method.effective_lambda() : 0.0;
  r.variant = variant;
  r.theta0_path = theta0_path;
  const auto start = std::chrono::steady_clock::now();
  try {
    method.validate();
    const auto forget = dataset.split_facts(data::Split::Forget);
    const auto retain = dataset.split_facts(data::Split::Retain);
    const std::size_t probe = config.sweep.probe_step;
    ParamSet theta = unlearn::run_method(method, theta0, config.model, dataset, [&](std::size_t step, const ParamSet& p) {
      if (step == probe) r.fa_at_probe = eval::accuracy(p, config.model, forget);
    });
    const std::string subdir = variant.empty() ? "checkpoints" : "checkpoints/" + variant;
    r.checkpoint_path = subdir + "/" + r.method + "_s" + std::to_string(seed) + ".bin";
    const std::filesystem::path ckpt = output_root(config) / r.checkpoint_path;
    std::filesystem::create_directories(ckpt.parent_path());
    save_params(theta, ckpt);

    r.report = eval::evaluate(theta, config.model, dataset, config.eval_options());
    if (config.attacks.quant) {
      r.attacks.push_back({"quant-int8", attacks::quant_attack(theta, config.model, config.int8, forget, retain)});
      r.attacks.push_back({"quant-int4", attacks::quant_attack(theta, config.model, config.int4, forget, retain)});
    }
    if (config.attacks.adapter_vs_merged && theta.has_adapters()) {
      auto [adapters, merged] = attacks::adapter_vs_merged(theta, config.model, config.int4, forget, retain);
      r.attacks.push_back({"adapters-only", std::move(adapters)});
      r.attacks.push_back({"merged", std::move(merged)});
    }
    if (config.attacks.finetune) {
      attacks::FinetuneConfig ft = config.attacks.finetune_config;
      ft.seed = seed;
      r.attacks.push_back(
          {"finetune", attacks::finetune_attack(theta, config.model, unrelated_facts(config), forget, retain, ft)});
    }
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<RunRecord> run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::filesystem::path root = output_root(config);
  atomic_write(root / "config.json", config_to_json(config));
  reset_runs(root);
  const data::FactDataset dataset = make_dataset(config);
  std::vector<RunRecord> records;
  for_each_seed(config, [&](std::uint64_t seed, const ParamSet* theta0, const std::string& path,
                                     const std::string& error) {
    for (const auto& method : config.methods) {
      RunRecord r = theta0 ? run_one(config, method, seed, *theta0, path, dataset)
                           : failed_record(config, method, seed, "", error);
      append_timing(root, r);
      persist(root, records.size(), r, config.record_wall_time);
      records.push_back(std::move(r));
    }
  });
  write_report(root, config.record_wall_time);
  return records;
}

SweepAxis parse_sweep_axis(const std::string& text) {
  if (text == "alpha") return SweepAxis::Alpha;
  if (text == "lambda") return SweepAxis::Lambda;
  throw ConfigError("unknown sweep axis '" + text + "' (expected alpha or lambda)");
}

namespace {

struct Means {
  double fa = 0, ra = 0, q_int8 = 0, q_int4 = 0, ra_int4 = 0;
  std::size_t certified = 0, count = 0;
};

Means seed_means(const std::vector<RunRecord>& records) {
  Means m;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    m.fa += r.report.fa;
    m.ra += r.report.ra;
    m.q_int8 += r.report.q_int8;
    m.q_int4 += r.report.q_int4;
    m.ra_int4 += r.report.ra_int4;
    m.certified += r.report.cert ? 1 : 0;
    ++m.count;
  }
  if (m.count) {
    const double n = static_cast<double>(m.count);
    m.fa /= n;
    m.ra /= n;
    m.q_int8 /= n;
    m.q_int4 /= n;
    m.ra_int4 /= n;
  }
  return m;
}

}  // namespace

std::vector<RunRecord> sweep(const ExperimentConfig& config, SweepAxis axis) {
  config.validate();
  const unlearn::MethodConfig& base = first_saf(config);
  const bool is_alpha = axis == SweepAxis::Alpha;
  const std::vector<double>& grid = is_alpha ? config.sweep.alpha : config.sweep.lambda;
  if (grid.empty()) throw ConfigError(std::string("sweep.") + (is_alpha ? "alpha" : "lambda") + " is empty");
  const std::string name = is_alpha ? "alpha" : "lambda";
  const std::filesystem::path root = output_root(config);
  const std::filesystem::path dir = root / ("sweep_" + name);
  const data::FactDataset dataset = make_dataset(config);
  reset_runs(dir);

  std::vector<std::vector<RunRecord>> by_point(grid.size());
  std::vector<RunRecord> all;
  for_each_seed(config, [&](std::uint64_t seed, const ParamSet* theta0, const std::string& path,
                                     const std::string& error) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      unlearn::MethodConfig m = base;
      if (is_alpha) {
        m.alpha_max = grid[i];
      } else {
        m.lambda = grid[i];
      }
      const std::string variant = name + "=" + num(grid[i]);
      RunRecord r = theta0 ? run_one(config, m, seed, *theta0, path, dataset, variant)
                           : failed_record(config, m, seed, variant, error);
      append_timing(root, r);
      persist(dir, all.size(), r, config.record_wall_time);
      by_point[i].push_back(r);
      all.push_back(std::move(r));
    }
  });

  std::string csv = "alpha,lambda,fa,ra,q_int8,q_int4,ra_int4,cert,runs\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Means m = seed_means(by_point[i]);
    const RunRecord& first = by_point[i].front();
    csv += num(first.alpha) + "," + num(first.lambda) + "," + num(m.fa) + "," + num(m.ra) + "," +
           num(m.q_int8) + "," + num(m.q_int4) + "," + num(m.ra_int4) + "," + std::to_string(m.certified) + "/" +
           std::to_string(m.count) + "," + std::to_string(by_point[i].size()) + "\n";
  }
  atomic_write(dir / "frontier.csv", csv);
  write_report(dir, config.record_wall_time);
  return all;
}

std::vector<RunRecord> ablation_suite(const ExperimentConfig& config) {
  config.validate();
  const unlearn::MethodConfig& base = first_saf(config);
  const std::filesystem::path root = output_root(config);
  const std::filesystem::path dir = root / "ablation";
  const data::FactDataset dataset = make_dataset(config);
  const std::uint64_t seed = config.seeds.front();
  std::string theta0_path;
  const ParamSet theta0 = pretrain_or_load(config, seed, &theta0_path);
  reset_runs(dir);

  std::vector<RunRecord> all;
  auto run = [&](const unlearn::MethodConfig& m, const std::string& variant) -> const RunRecord& {
    RunRecord r = run_one(config, m, seed, theta0, theta0_path, dataset, variant);
    append_timing(root, r);
    persist(dir, all.size(), r, config.record_wall_time);
    all.push_back(std::move(r));
    return all.back();
  };
  auto metrics = [](const RunRecord& r) {
    if (!r.ok()) return std::string(",,,,,");
    return "," + num(r.report.fa) + "," + num(r.report.ra) + "," + num(r.report.q_int4) + "," + num(r.report.ra_int4) +
           "," + (r.report.cert ? "1" : "0");
  };

  const std::string probe = "fa_at_step_" + std::to_string(config.sweep.probe_step);
  std::string warm = "warmup," + probe + ",fa,ra,q_int4,ra_int4,cert\n";
  for (bool on : {true, false}) {
    unlearn::MethodConfig m = base;
    m.warmup_enabled = on;
    const RunRecord& r = run(m, std::string("warmup=") + (on ? "on" : "off"));
    warm += std::string(on ? "on" : "off") + "," + (r.fa_at_probe ? num(*r.fa_at_probe) : "") + metrics(r) + "\n";
  }
  atomic_write(dir / "ablation_warmup.csv", warm);

  std::string scope = "ste_scope,fa,ra,q_int4,ra_int4,cert\n";
  for (quant::Scope s : {quant::Scope::AdaptersOnly, quant::Scope::AllTrainable}) {
    unlearn::MethodConfig m = base;
    m.ste_scope = s;
    const RunRecord& r = run(m, std::string("ste=") + quant::scope_name(s));
    scope += std::string(quant::scope_name(s)) + metrics(r) + "\n";
  }
  atomic_write(dir / "ablation_ste_scope.csv", scope);

  std::string lam = "lambda,alpha,fa,ra,q_int4,ra_int4,cert\n";
  for (double l : config.sweep.lambda) {
    unlearn::MethodConfig m = base;
    m.lambda = l;
    const RunRecord& r = run(m, "lambda=" + num(l));
    lam += num(l) + "," + num(m.alpha_max) + metrics(r) + "\n";
  }
  atomic_write(dir / "ablation_lambda.csv", lam);
  write_report(dir, config.record_wall_time);
  return all;
}

// ---------------------------------------------------------------------------
// Reports.

namespace {

struct Group {
  std::string method;
  double alpha = 0, lambda = 0;
  std::string variant;
  std::vector<const RunRecord*> members;
};

std::vector<Group> group_records(const std::vector<RunRecord>& records) {
  std::vector<Group> groups;
  for (const auto& r : records) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return g.method == r.method && g.alpha == r.alpha && g.lambda == r.lambda && g.variant == r.variant;
    });
    if (it == groups.end()) {
      groups.push_back({r.method, r.alpha, r.lambda, r.variant, {}});
      it = std::prev(groups.end());
    }
    it->members.push_back(&r);
  }
  return groups;
}

constexpr const char* kFields[] = {"fa", "ra", "q_int8", "q_int4", "ra_int4", "mia_auc", "kappa"};

struct GroupStats {
  eval::Aggregate agg;
  std::optional<eval::FieldStats> runtime;
  std::size_t failed = 0;
};

GroupStats group_stats(const Group& g, bool with_wall_time) {
  GroupStats s;
  std::vector<eval::EvalReport> reports;
  std::vector<double> times;
  for (const RunRecord* r : g.members) {
    if (!r->ok()) {
      ++s.failed;
      continue;
    }
    reports.push_back(r->report);
    times.push_back(r->wall_seconds);
  }
  if (!reports.empty()) s.agg = eval::seed_aggregate(reports);
  if (with_wall_time && !times.empty()) s.runtime = eval::mean_std(times);
  return s;
}

}  // namespace

std::string aggregate_csv(const std::vector<RunRecord>& records, bool with_wall_time) {
  std::string csv = "method,alpha,lambda,variant,n";
  for (const char* f : kFields) csv += std::string(",") + f + "_mean," + f + "_std";
  csv += ",cert_rate,runtime_s_mean,runtime_s_std,failed\n";
  for (const Group& g : group_records(records)) {
    const GroupStats s = group_stats(g, with_wall_time);
    csv += g.method + "," + num(g.alpha) + "," + num(g.lambda) + "," + g.variant + "," + std::to_string(s.agg.count);
    for (const char* f : kFields) {
      const auto it = s.agg.fields.find(f);
      csv += it == s.agg.fields.end() ? std::string(",,") : "," + num(it->second.mean) + "," + num(it->second.std);
    }
    csv += "," + (s.agg.count ? num(s.agg.cert_rate) : std::string());
    csv += s.runtime ? "," + num(s.runtime->mean) + "," + num(s.runtime->std) : std::string(",,");
    csv += "," + std::to_string(s.failed) + "\n";
  }
  return csv;
}

std::string summary_json(const std::vector<RunRecord>& records, bool with_wall_time) {
  json runs = json::array();
  for (const auto& r : records) runs.push_back(json::parse(record_to_json(r, with_wall_time)));
  json aggregates = json::array();
  for (const Group& g : group_records(records)) {
    const GroupStats s = group_stats(g, with_wall_time);
    json fields = json::object();
    for (const char* f : kFields) {
      const auto it = s.agg.fields.find(f);
      if (it != s.agg.fields.end()) fields[f] = {{"mean", it->second.mean}, {"std", it->second.std}};
    }
    json a = {{"method", g.method},   {"alpha", g.alpha},         {"lambda", g.lambda},
              {"variant", g.variant}, {"n", s.agg.count},         {"failed", s.failed},
              {"fields", fields},     {"certified", s.agg.certified}, {"cert_rate", s.agg.cert_rate}};
    if (s.runtime) a["runtime_s"] = {{"mean", s.runtime->mean}, {"std", s.runtime->std}};
    aggregates.push_back(a);
  }
  return json({{"schema_version", kSchemaVersion}, {"runs", runs}, {"aggregates", aggregates}}).dump(2) + "\n";
}

std::vector<RunRecord> write_report(const std::filesystem::path& dir, bool with_wall_time) {
  const std::filesystem::path runs = dir / "runs";
  if (!std::filesystem::is_directory(runs)) throw IoError("no run records under " + runs.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(runs)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> records;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::ostringstream text;
    text << in.rdbuf();
    records.push_back(record_from_json(text.str()));
  }
  std::string csv = run_csv_header() + "\n";
  for (const auto& r : records) {
    if (r.ok()) csv += run_csv_row(r, with_wall_time) + "\n";
  }
  atomic_write(dir / "report.csv", csv);
  atomic_write(dir / "aggregate.csv", aggregate_csv(records, with_wall_time));
  atomic_write(dir / "summary.json", summary_json(records, with_wall_time));
  return records;
}

}  // namespace qforget::harness
