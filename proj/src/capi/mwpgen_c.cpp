#include "mwpgen/mwpgen.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "gradcheck.hpp"
#include "metrics.hpp"
#include "train.hpp"

struct mwpgen_corpus {
  std::vector<mwpgen::MaskedExample> examples;
};
struct mwpgen_config {
  mwpgen::TrainConfig cfg;
};
struct mwpgen_model {
  mwpgen::Models models;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_context;

template <typename F>
mwpgen_status guarded(F&& f) {
  g_error.clear();
  g_context.clear();
  try {
    f();
    return MWPGEN_OK;
  } catch (const mwpgen::Error& e) {
    g_error = e.what();
    g_context = e.context();
    return static_cast<mwpgen_status>(static_cast<int>(e.kind()));
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return MWPGEN_E_NUMERICAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return MWPGEN_E_DATA;
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) mwpgen::fail_usage(std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) mwpgen::fail_data("cannot write " + path, path);
  return out;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) s += (s.empty() ? "" : " ") + t;
  return s;
}

}  // namespace

extern "C" {

const char* mwpgen_version(void) { return "0.1.0"; }
const char* mwpgen_last_error(void) { return g_error.c_str(); }
const char* mwpgen_last_error_context(void) { return g_context.c_str(); }
void mwpgen_string_free(char* s) { std::free(s); }

mwpgen_status mwpgen_corpus_load_jsonl(const char* path, int lowercase, mwpgen_corpus** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto c = std::make_unique<mwpgen_corpus>();
    c->examples = mwpgen::mask_corpus(mwpgen::load_jsonl(path), lowercase != 0);
    *out = c.release();
  });
}

mwpgen_status mwpgen_corpus_synth(size_t n, uint64_t seed, mwpgen_corpus** out) {
  return guarded([&] {
    require(out, "out");
    if (n < 1) mwpgen::fail_usage("synth: n must be at least 1");
    auto c = std::make_unique<mwpgen_corpus>();
    c->examples = mwpgen::synth_corpus(n, seed);
    *out = c.release();
  });
}

mwpgen_status mwpgen_corpus_subset(const mwpgen_corpus* c, const size_t* indices, size_t n, mwpgen_corpus** out) {
  return guarded([&] {
    require(c, "corpus");
    require(out, "out");
    if (n > 0) require(indices, "indices");
    auto s = std::make_unique<mwpgen_corpus>();
    for (size_t i = 0; i < n; ++i) {
      if (indices[i] >= c->examples.size()) {
        mwpgen::fail_usage("subset index " + std::to_string(indices[i]) + " out of range");
      }
      s->examples.push_back(c->examples[indices[i]]);
    }
    *out = s.release();
  });
}

size_t mwpgen_corpus_size(const mwpgen_corpus* c) { return c == nullptr ? 0 : c->examples.size(); }

mwpgen_status mwpgen_corpus_write_jsonl(const mwpgen_corpus* c, const char* path) {
  return guarded([&] {
    require(c, "corpus");
    require(path, "path");
    std::vector<mwpgen::RawExample> raw;
    for (const auto& e : c->examples) raw.push_back(e.raw);
    std::ostringstream ss;
    mwpgen::write_jsonl(ss, raw);
    mwpgen::write_file_atomic(path, ss.str());
  });
}

mwpgen_status mwpgen_corpus_write_masked(const mwpgen_corpus* c, const char* path) {
  return guarded([&] {
    require(c, "corpus");
    require(path, "path");
    std::ostringstream ss;
    mwpgen::write_masked_jsonl(ss, c->examples);
    mwpgen::write_file_atomic(path, ss.str());
  });
}

mwpgen_status mwpgen_corpus_write_vocab(const mwpgen_corpus* c, size_t min_freq, const char* path) {
  return guarded([&] {
    require(c, "corpus");
    require(path, "path");
    mwpgen::write_file_atomic(path, mwpgen::Vocab::build(c->examples, min_freq).to_json().dump(1) + "\n");
  });
}

mwpgen_status mwpgen_corpus_stats(const mwpgen_corpus* c, char** out_json) {
  return guarded([&] {
    require(c, "corpus");
    require(out_json, "out_json");
    const mwpgen::CorpusStats s = mwpgen::corpus_stats(c->examples);
    std::size_t failures = 0;
    for (const auto& e : c->examples) {
      if (mwpgen::unmask(e.masked_mwp, e.number_map) != e.raw.mwp_text ||
          mwpgen::unmask(e.masked_equation, e.number_map) != e.raw.equation_text) {
        ++failures;
      }
    }
    nlohmann::ordered_json j;
    j["count"] = s.count;
    j["mean_mwp_tokens"] = s.mean_mwp_tokens;
    j["mean_equation_symbols"] = s.mean_equation_symbols;
    j["roundtrip_failures"] = failures;
    *out_json = dup(j.dump());
  });
}

void mwpgen_corpus_free(mwpgen_corpus* c) { delete c; }

mwpgen_status mwpgen_config_new(mwpgen_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new mwpgen_config();
  });
}

mwpgen_status mwpgen_config_load_toml(mwpgen_config* cfg, const char* path) {
  return guarded([&] {
    require(cfg, "config");
    require(path, "path");
    cfg->cfg.apply(mwpgen::load_toml(path));
  });
}

mwpgen_status mwpgen_config_set(mwpgen_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "config");
    require(key, "key");
    require(value, "value");
    cfg->cfg.set(key, value);
  });
}

mwpgen_status mwpgen_config_to_json(const mwpgen_config* cfg, char** out_json) {
  return guarded([&] {
    require(cfg, "config");
    require(out_json, "out_json");
    *out_json = dup(cfg->cfg.to_json().dump());
  });
}

mwpgen_status mwpgen_config_fingerprint(const mwpgen_config* cfg, char** out_hex) {
  return guarded([&] {
    require(cfg, "config");
    require(out_hex, "out_hex");
    *out_hex = dup(cfg->cfg.fingerprint());
  });
}

void mwpgen_config_free(mwpgen_config* cfg) { delete cfg; }

mwpgen_status mwpgen_train(const mwpgen_corpus* train, const mwpgen_config* cfg, const char* checkpoint_path,
                           const char* log_path) {
  return guarded([&] {
    require(train, "corpus");
    require(cfg, "config");
    require(checkpoint_path, "checkpoint_path");
    cfg->cfg.validate();
    std::ofstream log;
    mwpgen::TrainHooks hooks;
    if (log_path != nullptr) {
      log = open_out(log_path);
      hooks.log = [&log](const nlohmann::json& j) { log << j.dump() << '\n'; };
    }
    const std::string ckpt = checkpoint_path;
    hooks.checkpoint = [&ckpt](const mwpgen::Models& m) { mwpgen::save_checkpoint(m, ckpt); };
    const mwpgen::Models m = mwpgen::run_training(train->examples, cfg->cfg, hooks);
    mwpgen::save_checkpoint(m, ckpt);
  });
}

mwpgen_status mwpgen_model_load(const char* checkpoint_path, mwpgen_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    auto m = std::make_unique<mwpgen_model>();
    m->models = mwpgen::load_checkpoint(checkpoint_path);
    *out = m.release();
  });
}

mwpgen_status mwpgen_model_config_json(const mwpgen_model* m, char** out_json) {
  return guarded([&] {
    require(m, "model");
    require(out_json, "out_json");
    *out_json = dup(m->models.cfg.to_json().dump());
  });
}

mwpgen_status mwpgen_model_fingerprint(const mwpgen_model* m, char** out_hex) {
  return guarded([&] {
    require(m, "model");
    require(out_hex, "out_hex");
    *out_hex = dup(m->models.cfg.fingerprint());
  });
}

void mwpgen_model_free(mwpgen_model* m) { delete m; }

mwpgen_status mwpgen_generate(const mwpgen_model* m, const char* equation, const char* keywords, const char* mode,
                              size_t top_k, double temperature, uint64_t seed, size_t max_new_tokens,
                              char** out_text) {
  return guarded([&] {
    require(m, "model");
    require(equation, "equation");
    require(out_text, "out_text");
    if (max_new_tokens < 1) mwpgen::fail_usage("max_new_tokens must be at least 1");
    const std::string mode_s = mode == nullptr ? "greedy" : mode;
    mwpgen::DecodeMode dm;
    if (mode_s == "top_k") dm = mwpgen::DecodeMode::top_k(top_k, temperature);
    else if (mode_s != "greedy") mwpgen::fail_usage("unknown decoding mode '" + mode_s + "' (greedy or top_k)");

    const mwpgen::MaskResult masked = mwpgen::mask_numbers(equation);
    const std::vector<std::string> symbols = mwpgen::tokenize_equation(masked.text);
    if (std::count(symbols.begin(), symbols.end(), "=") != 1) {
      mwpgen::fail_data("equation must contain exactly one '='", equation);
    }
    std::vector<std::string> kw;
    if (keywords != nullptr) kw = mwpgen::tokenize_mwp(keywords, m->models.cfg.lowercase);
    mwpgen::Rng rng = mwpgen::Rng::stream(seed, "decode");
    const auto tokens = mwpgen::generate(m->models.generator, m->models.vocab, symbols, kw, dm, max_new_tokens, &rng);
    std::string text = join(tokens);
    if (!masked.map.empty()) text = mwpgen::unmask(text, masked.map);
    *out_text = dup(text);
  });
}

mwpgen_status mwpgen_select_keywords(const mwpgen_model* m, const char* mwp_text, char** out_json) {
  return guarded([&] {
    require(m, "model");
    require(mwp_text, "mwp_text");
    require(out_json, "out_json");
    const mwpgen::Models& md = m->models;
    const auto tokens = mwpgen::tokenize_mwp(mwpgen::mask_numbers(mwp_text).text, md.cfg.lowercase);
    nlohmann::ordered_json j;
    j["keywords"] = mwpgen::select_keywords_for(md, tokens);
    nlohmann::ordered_json probs = nlohmann::ordered_json::object();
    if (md.cfg.keyword_source == mwpgen::KeywordSource::selector) {
      mwpgen::Tape tape(false);
      const auto dist = mwpgen::keyword_probs(tape, md.vocab, md.vocab.encode(tokens), md.selector);
      for (std::size_t i = 0; i < dist.items.size(); ++i) {
        probs[md.vocab.token(dist.items[i])] = dist.q.value()(static_cast<Eigen::Index>(i), 0);
      }
    }
    j["probabilities"] = probs;
    *out_json = dup(j.dump());
  });
}

mwpgen_status mwpgen_evaluate(const mwpgen_model* m, const mwpgen_corpus* test, const mwpgen_corpus* train,
                              char** out_json) {
  return guarded([&] {
    require(m, "model");
    require(test, "test corpus");
    require(out_json, "out_json");
    const auto r = mwpgen::evaluate(m->models, test->examples, train == nullptr ? nullptr : &train->examples);
    *out_json = dup(r.to_json().dump());
  });
}

mwpgen_status mwpgen_report_mean(const char* const* reports_json, size_t n, char** out_json) {
  return guarded([&] {
    require(out_json, "out_json");
    if (n == 0) mwpgen::fail_usage("report_mean: no reports");
    require(reports_json, "reports_json");
    std::vector<mwpgen::MetricsReport> rs;
    for (size_t i = 0; i < n; ++i) {
      require(reports_json[i], "report");
      try {
        rs.push_back(mwpgen::MetricsReport::from_json(nlohmann::json::parse(reports_json[i])));
      } catch (const nlohmann::json::exception& e) {
        mwpgen::fail_data(std::string("report ") + std::to_string(i) + " is malformed: " + e.what());
      }
    }
    *out_json = dup(mwpgen::mean_report(rs).to_json().dump());
  });
}

mwpgen_status mwpgen_kfold_assign(size_t n, size_t k, uint64_t seed, int* out_folds) {
  return guarded([&] {
    require(out_folds, "out_folds");
    const auto folds = mwpgen::kfold_split(n, k, seed);
    std::copy(folds.begin(), folds.end(), out_folds);
  });
}

mwpgen_status mwpgen_gradcheck(uint64_t seed, char** out_json, int* all_pass) {
  return guarded([&] {
    require(out_json, "out_json");
    const auto r = mwpgen::run_gradcheck(seed);
    if (all_pass != nullptr) *all_pass = r.pass ? 1 : 0;
    *out_json = dup(r.to_json().dump());
  });
}

}  // extern "C"
