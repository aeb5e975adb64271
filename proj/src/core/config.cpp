#include "config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>

#include "error.hpp"
#include "rng.hpp"

namespace mwpgen {

namespace {

double to_double(const std::string& key, const std::string& v) {
  double d = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size()) fail_usage("config '" + key + "': expected a number, got '" + v + "'");
  return d;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t u = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), u);
  if (ec != std::errc() || p != v.data() + v.size()) {
    fail_usage("config '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return u;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail_usage("config '" + key + "': expected true or false, got '" + v + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string& key, const std::string& value)>;

template <typename T>
Setter size_field(T TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) {
    c.*field = static_cast<T>(to_uint(k, v));
  };
}
Setter double_field(double TrainConfig::*field) {
  return [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = to_double(k, v); };
}

void add_decoder_setters(std::map<std::string, Setter>& m, const std::string& prefix,
                         DecoderConfig TrainConfig::*dc) {
  m[prefix + ".n_layers"] = [dc](TrainConfig& c, const std::string& k, const std::string& v) { (c.*dc).n_layers = to_uint(k, v); };
  m[prefix + ".n_heads"] = [dc](TrainConfig& c, const std::string& k, const std::string& v) { (c.*dc).n_heads = to_uint(k, v); };
  m[prefix + ".d_model"] = [dc](TrainConfig& c, const std::string& k, const std::string& v) { (c.*dc).d_model = to_uint(k, v); };
  m[prefix + ".d_ff"] = [dc](TrainConfig& c, const std::string& k, const std::string& v) { (c.*dc).d_ff = to_uint(k, v); };
  m[prefix + ".max_seq_len"] = [dc](TrainConfig& c, const std::string& k, const std::string& v) { (c.*dc).max_seq_len = to_uint(k, v); };
  m[prefix + ".dropout_p"] = [dc](TrainConfig& c, const std::string& k, const std::string& v) { (c.*dc).dropout_p = to_double(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> m = [] {
    std::map<std::string, Setter> s;
    s["seed"] = size_field(&TrainConfig::seed);
    s["alpha"] = double_field(&TrainConfig::alpha);
    s["beta"] = double_field(&TrainConfig::beta);
    s["rho"] = double_field(&TrainConfig::rho);
    s["tau"] = [](TrainConfig& c, const std::string& k, const std::string& v) { c.tau.tau0 = to_double(k, v); };
    s["tau_schedule"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
      if (v == "constant") c.tau.mode = TemperatureSchedule::Mode::constant;
      else if (v == "exponential") c.tau.mode = TemperatureSchedule::Mode::exponential;
      else fail_usage("config '" + k + "': expected constant or exponential");
    };
    s["tau_decay"] = [](TrainConfig& c, const std::string& k, const std::string& v) { c.tau.rate = to_double(k, v); };
    s["tau_floor"] = [](TrainConfig& c, const std::string& k, const std::string& v) { c.tau.floor = to_double(k, v); };
    s["relaxation"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
      if (v == "gumbel_softmax") c.relaxation = Relaxation::gumbel_softmax;
      else if (v == "softmax") c.relaxation = Relaxation::softmax;
      else fail_usage("config '" + k + "': expected gumbel_softmax or softmax");
    };
    s["keyword_source"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
      if (v == "selector") c.keyword_source = KeywordSource::selector;
      else if (v == "tfidf") c.keyword_source = KeywordSource::tfidf;
      else if (v == "all") c.keyword_source = KeywordSource::all;
      else fail_usage("config '" + k + "': expected selector, tfidf or all");
    };
    s["tfidf_k"] = size_field(&TrainConfig::tfidf_k);
    s["keyword_drop_p"] = double_field(&TrainConfig::keyword_drop_p);
    s["keyword_permute"] = [](TrainConfig& c, const std::string& k, const std::string& v) { c.keyword_permute = to_bool(k, v); };
    s["lr"] = double_field(&TrainConfig::lr);
    s["batch_size"] = size_field(&TrainConfig::batch_size);
    s["grad_clip"] = double_field(&TrainConfig::grad_clip);
    s["lm_reduction"] = [](TrainConfig& c, const std::string& k, const std::string& v) {
      if (v == "mean") c.lm_reduction = Reduction::mean;
      else if (v == "sum") c.lm_reduction = Reduction::sum;
      else fail_usage("config '" + k + "': expected mean or sum");
    };
    s["stage1_epochs"] = size_field(&TrainConfig::stage1_epochs);
    s["stage2_epochs"] = size_field(&TrainConfig::stage2_epochs);
    s["parser_warmup_epochs"] = size_field(&TrainConfig::parser_warmup_epochs);
    s["max_rollout"] = size_field(&TrainConfig::max_rollout);
    s["eval_parser_epochs"] = size_field(&TrainConfig::eval_parser_epochs);
    s["eval_parser_patience"] = size_field(&TrainConfig::eval_parser_patience);
    s["eval_holdout_fraction"] = double_field(&TrainConfig::eval_holdout_fraction);
    s["min_freq"] = size_field(&TrainConfig::min_freq);
    s["lowercase"] = [](TrainConfig& c, const std::string& k, const std::string& v) { c.lowercase = to_bool(k, v); };
    s["max_generate_tokens"] = size_field(&TrainConfig::max_generate_tokens);
    s["checkpoint_every"] = size_field(&TrainConfig::checkpoint_every);
    add_decoder_setters(s, "generator", &TrainConfig::generator);
    add_decoder_setters(s, "consistency_parser", &TrainConfig::consistency_parser);
    add_decoder_setters(s, "eval_parser", &TrainConfig::eval_parser);
    return s;
  }();
  return m;
}

nlohmann::json decoder_json(const DecoderConfig& d) {
  return {{"n_layers", d.n_layers}, {"n_heads", d.n_heads}, {"d_model", d.d_model},
          {"d_ff", d.d_ff},         {"max_seq_len", d.max_seq_len}, {"dropout_p", d.dropout_p}};
}

}  // namespace

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : setters()) k.push_back(name);
  return k;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  auto it = setters().find(key);
  if (it == setters().end()) fail_usage("unknown config key '" + key + "'", key);
  it->second(*this, key, value);
}

void TrainConfig::apply(const TomlTable& table) {
  for (const auto& [k, v] : table) set(k, toml_value_to_string(v));
}

void TrainConfig::validate() const {
  if (alpha < 0 || beta < 0) fail_usage("config: alpha and beta must be non-negative");
  if (!(rho > 0 && rho < 1)) fail_usage("config: rho must lie in (0, 1)");
  if (!(tau.tau0 > 0) || !(tau.floor > 0)) fail_usage("config: temperature must be positive");
  if (!(keyword_drop_p >= 0 && keyword_drop_p <= 1)) fail_usage("config: keyword_drop_p must lie in [0, 1]");
  if (!(lr > 0)) fail_usage("config: lr must be positive");
  if (batch_size < 1) fail_usage("config: batch_size must be at least 1");
  if (max_rollout < 1) fail_usage("config: max_rollout must be at least 1");
  if (tfidf_k < 1) fail_usage("config: tfidf_k must be at least 1");
  if (!(eval_holdout_fraction >= 0 && eval_holdout_fraction < 1)) {
    fail_usage("config: eval_holdout_fraction must lie in [0, 1)");
  }
  if (max_generate_tokens < 1) fail_usage("config: max_generate_tokens must be at least 1");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["rho"] = rho;
  j["tau"] = tau.tau0;
  j["tau_schedule"] = tau.mode == TemperatureSchedule::Mode::constant ? "constant" : "exponential";
  j["tau_decay"] = tau.rate;
  j["tau_floor"] = tau.floor;
  j["relaxation"] = relaxation == Relaxation::gumbel_softmax ? "gumbel_softmax" : "softmax";
  j["keyword_source"] = keyword_source == KeywordSource::selector ? "selector"
                        : keyword_source == KeywordSource::tfidf  ? "tfidf"
                                                                  : "all";
  j["tfidf_k"] = tfidf_k;
  j["keyword_drop_p"] = keyword_drop_p;
  j["keyword_permute"] = keyword_permute;
  j["lr"] = lr;
  j["batch_size"] = batch_size;
  j["grad_clip"] = grad_clip;
  j["lm_reduction"] = lm_reduction == Reduction::mean ? "mean" : "sum";
  j["stage1_epochs"] = stage1_epochs;
  j["stage2_epochs"] = stage2_epochs;
  j["parser_warmup_epochs"] = parser_warmup_epochs;
  j["max_rollout"] = max_rollout;
  j["eval_parser_epochs"] = eval_parser_epochs;
  j["eval_parser_patience"] = eval_parser_patience;
  j["eval_holdout_fraction"] = eval_holdout_fraction;
  j["min_freq"] = min_freq;
  j["lowercase"] = lowercase;
  j["max_generate_tokens"] = max_generate_tokens;
  j["checkpoint_every"] = checkpoint_every;
  j["generator"] = decoder_json(generator);
  j["consistency_parser"] = decoder_json(consistency_parser);
  j["eval_parser"] = decoder_json(eval_parser);
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it->is_object()) {
      for (auto jt = it->begin(); jt != it->end(); ++jt) {
        c.set(it.key() + "." + jt.key(), jt->is_string() ? jt->get<std::string>() : jt->dump());
      }
    } else {
      c.set(it.key(), it->is_string() ? it->get<std::string>() : it->dump());
    }
  }
  return c;
}

std::string TrainConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

TrainConfig load_config(const std::string& toml_path, const std::vector<std::string>& overrides) {
  TrainConfig c;
  if (!toml_path.empty()) c.apply(load_toml(toml_path));
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) fail_usage("override '" + o + "' is not key=value");
    c.set(o.substr(0, eq), o.substr(eq + 1));
  }
  c.validate();
  return c;
}

}  // namespace mwpgen
