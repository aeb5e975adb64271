#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mwpgen/mwpgen.h"

namespace {

using json = nlohmann::ordered_json;

struct Failure {
  int code;
  std::string message;
  std::string context;
};

void check(mwpgen_status s) {
  if (s != MWPGEN_OK) throw Failure{static_cast<int>(s), mwpgen_last_error(), mwpgen_last_error_context()};
}

[[noreturn]] void usage(const std::string& msg, const std::string& ctx = {}) { throw Failure{2, msg, ctx}; }

std::string take(char* s) {
  std::string out = s == nullptr ? "" : s;
  mwpgen_string_free(s);
  return out;
}

struct CorpusDel {
  void operator()(mwpgen_corpus* c) const { mwpgen_corpus_free(c); }
};
struct ConfigDel {
  void operator()(mwpgen_config* c) const { mwpgen_config_free(c); }
};
struct ModelDel {
  void operator()(mwpgen_model* m) const { mwpgen_model_free(m); }
};
using Corpus = std::unique_ptr<mwpgen_corpus, CorpusDel>;
using Config = std::unique_ptr<mwpgen_config, ConfigDel>;
using Model = std::unique_ptr<mwpgen_model, ModelDel>;

Corpus load_corpus(const std::string& path, bool lowercase = true) {
  mwpgen_corpus* c = nullptr;
  check(mwpgen_corpus_load_jsonl(path.c_str(), lowercase ? 1 : 0, &c));
  return Corpus(c);
}

Model load_model(const std::string& path) {
  mwpgen_model* m = nullptr;
  check(mwpgen_model_load(path.c_str(), &m));
  return Model(m);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Failure{3, "cannot write " + tmp, path};
    out << contents;
    if (!out) throw Failure{3, "write failed for " + tmp, path};
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Failure{3, "cannot move " + tmp + " into place: " + ec.message(), path};
}

// Provenance record written next to each artifact.
struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  json config = nullptr;
  std::string fingerprint;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::string started = utc_now();

  void write_for(const std::string& artifact, const std::vector<std::string>& outputs = {}) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config_path"] = config_path;
    j["config"] = config;
    j["config_fingerprint"] = fingerprint;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs.empty() ? std::vector<std::string>{artifact} : outputs;
    j["tool_version"] = mwpgen_version();
    j["started_at"] = started;
    j["finished_at"] = utc_now();
    write_atomic(artifact + ".manifest.json", j.dump(2) + "\n");
  }
};

struct ConfigOptions {
  std::string path;
  std::vector<std::string> overrides;
  long long seed = -1;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "TOML configuration file");
    app->add_option("--set", overrides, "Override a configuration key (key=value)")->take_all();
    app->add_option("--seed", seed, "Random seed (overrides the configuration)");
  }

  Config resolve(Manifest& man) const {
    mwpgen_config* raw = nullptr;
    check(mwpgen_config_new(&raw));
    Config cfg(raw);
    if (!path.empty()) check(mwpgen_config_load_toml(cfg.get(), path.c_str()));
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) usage("--set expects key=value, got '" + o + "'", o);
      check(mwpgen_config_set(cfg.get(), o.substr(0, eq).c_str(), o.substr(eq + 1).c_str()));
    }
    if (seed >= 0) check(mwpgen_config_set(cfg.get(), "seed", std::to_string(seed).c_str()));
    char* js = nullptr;
    check(mwpgen_config_to_json(cfg.get(), &js));
    man.config = json::parse(take(js));
    char* fp = nullptr;
    check(mwpgen_config_fingerprint(cfg.get(), &fp));
    man.fingerprint = take(fp);
    man.config_path = path;
    man.seed = man.config["seed"].get<std::uint64_t>();
    return cfg;
  }
};

void describe_model(const mwpgen_model* m, Manifest& man) {
  char* js = nullptr;
  check(mwpgen_model_config_json(m, &js));
  man.config = json::parse(take(js));
  char* fp = nullptr;
  check(mwpgen_model_fingerprint(m, &fp));
  man.fingerprint = take(fp);
  man.seed = man.config["seed"].get<std::uint64_t>();
}

void emit(const std::string& text, const std::string& out_path, const Manifest& man) {
  std::cout << text << "\n";
  if (!out_path.empty()) {
    write_atomic(out_path, text + "\n");
    man.write_for(out_path);
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Equation- and keyword-conditioned math word problem generation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mwpgen_version()));

  Manifest man;
  for (int i = 0; i < argc; ++i) man.argv.emplace_back(argv[i]);

  // import
  std::string imp_in, imp_out, imp_vocab;
  std::size_t imp_min_freq = 1;
  bool imp_keep_case = false;
  auto* imp = app.add_subcommand("import", "Mask numbers, tokenize, and build the vocabulary of a JSONL dataset");
  imp->add_option("input", imp_in, "Dataset (JSON Lines: id, mwp, equation)")->required();
  imp->add_option("--out", imp_out, "Masked JSONL output")->required();
  imp->add_option("--vocab", imp_vocab, "Vocabulary JSON output (default: <out>.vocab.json)");
  imp->add_option("--min-freq", imp_min_freq, "Minimum MWP token frequency")->capture_default_str();
  imp->add_flag("--keep-case", imp_keep_case, "Do not lowercase MWP tokens");

  // synth
  std::size_t syn_n = 500;
  std::uint64_t syn_seed = 0;
  std::string syn_out;
  auto* syn = app.add_subcommand("synth", "Write a templated synthetic dataset");
  syn->add_option("--n", syn_n, "Number of examples")->capture_default_str();
  syn->add_option("--seed", syn_seed, "Random seed")->capture_default_str();
  syn->add_option("--out", syn_out, "JSONL output")->required();

  // train
  ConfigOptions tr_cfg;
  std::string tr_data, tr_out, tr_log;
  auto* tr = app.add_subcommand("train", "Two-stage training; writes a checkpoint");
  tr_cfg.attach(tr);
  tr->add_option("--data", tr_data, "Training dataset (JSONL)")->required();
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--log", tr_log, "Per-step JSONL training log");

  // generate
  std::string gen_ckpt, gen_eq, gen_kw, gen_mode = "greedy", gen_out;
  std::size_t gen_k = 10, gen_max = 64;
  double gen_temp = 1.0;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("generate", "Generate a word problem for an equation and keywords");
  gen->add_option("--checkpoint", gen_ckpt, "Checkpoint")->required();
  gen->add_option("--equation", gen_eq, "Equation, e.g. \"x = ( num1 + num2 )\"")->required();
  gen->add_option("--keywords", gen_kw, "Space-separated context keywords");
  gen->add_option("--mode", gen_mode, "greedy or top_k")->check(CLI::IsMember({"greedy", "top_k"}))->capture_default_str();
  gen->add_option("--top-k", gen_k, "k for top_k decoding")->capture_default_str();
  gen->add_option("--temperature", gen_temp, "Temperature for top_k decoding")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Seed for top_k decoding")->capture_default_str();
  gen->add_option("--max-tokens", gen_max, "Maximum number of generated tokens")->capture_default_str();
  gen->add_option("--out", gen_out, "Also write the text here");

  // select-keywords
  std::string sk_ckpt, sk_mwp, sk_out;
  auto* sk = app.add_subcommand("select-keywords", "Keywords the selector picks (q > 0.5) for a word problem");
  sk->add_option("--checkpoint", sk_ckpt, "Checkpoint")->required();
  sk->add_option("--mwp", sk_mwp, "Word problem text")->required();
  sk->add_option("--out", sk_out, "Also write the JSON here");

  // evaluate
  std::string ev_ckpt, ev_test, ev_train, ev_out;
  auto* ev = app.add_subcommand("evaluate", "BLEU-4, ROUGE-L, METEOR-lite, ACC-eq, novelty and Dist-3 on a test split");
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--test", ev_test, "Test dataset (JSONL)")->required();
  ev->add_option("--train", ev_train, "Training dataset, for novelty");
  ev->add_option("--out", ev_out, "Report path");

  // kfold
  ConfigOptions kf_cfg;
  std::string kf_data, kf_dir;
  std::size_t kf_k = 5;
  auto* kf = app.add_subcommand("kfold", "k-fold cross-validation: one report per fold plus the mean");
  kf_cfg.attach(kf);
  kf->add_option("--data", kf_data, "Dataset (JSONL)")->required();
  kf->add_option("--k", kf_k, "Number of folds")->capture_default_str();
  kf->add_option("--out-dir", kf_dir, "Output directory")->required();

  // gradcheck
  std::uint64_t gc_seed = 0;
  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gc->add_option("--seed", gc_seed, "Random seed")->capture_default_str();
  gc->add_option("--out", gc_out, "Also write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    usage(e.what());
  }

  if (*imp) {
    man.command = "import";
    man.inputs = {imp_in};
    Corpus c = load_corpus(imp_in, !imp_keep_case);
    if (imp_vocab.empty()) imp_vocab = imp_out + ".vocab.json";
    check(mwpgen_corpus_write_masked(c.get(), imp_out.c_str()));
    check(mwpgen_corpus_write_vocab(c.get(), imp_min_freq, imp_vocab.c_str()));
    char* stats = nullptr;
    check(mwpgen_corpus_stats(c.get(), &stats));
    std::cout << take(stats) << "\n";
    man.write_for(imp_out);
    man.write_for(imp_vocab);
  } else if (*syn) {
    man.command = "synth";
    man.seed = syn_seed;
    mwpgen_corpus* raw = nullptr;
    check(mwpgen_corpus_synth(syn_n, syn_seed, &raw));
    Corpus c(raw);
    check(mwpgen_corpus_write_jsonl(c.get(), syn_out.c_str()));
    man.write_for(syn_out);
  } else if (*tr) {
    man.command = "train";
    man.inputs = {tr_data};
    Config cfg = tr_cfg.resolve(man);
    Corpus c = load_corpus(tr_data, man.config["lowercase"].get<bool>());
    check(mwpgen_train(c.get(), cfg.get(), tr_out.c_str(), tr_log.empty() ? nullptr : tr_log.c_str()));
    std::vector<std::string> outs = {tr_out};
    if (!tr_log.empty()) outs.push_back(tr_log);
    man.write_for(tr_out, outs);
  } else if (*gen) {
    man.command = "generate";
    man.inputs = {gen_ckpt};
    Model m = load_model(gen_ckpt);
    describe_model(m.get(), man);
    char* text = nullptr;
    check(mwpgen_generate(m.get(), gen_eq.c_str(), gen_kw.empty() ? nullptr : gen_kw.c_str(), gen_mode.c_str(),
                          gen_k, gen_temp, gen_seed, gen_max, &text));
    emit(take(text), gen_out, man);
  } else if (*sk) {
    man.command = "select-keywords";
    man.inputs = {sk_ckpt};
    Model m = load_model(sk_ckpt);
    describe_model(m.get(), man);
    char* js = nullptr;
    check(mwpgen_select_keywords(m.get(), sk_mwp.c_str(), &js));
    emit(take(js), sk_out, man);
  } else if (*ev) {
    man.command = "evaluate";
    man.inputs = {ev_ckpt, ev_test};
    Model m = load_model(ev_ckpt);
    describe_model(m.get(), man);
    const bool lower = man.config["lowercase"].get<bool>();
    Corpus test = load_corpus(ev_test, lower);
    Corpus train;
    if (!ev_train.empty()) {
      train = load_corpus(ev_train, lower);
      man.inputs.push_back(ev_train);
    }
    char* js = nullptr;
    check(mwpgen_evaluate(m.get(), test.get(), train.get(), &js));
    emit(json::parse(take(js)).dump(2), ev_out, man);
  } else if (*kf) {
    man.command = "kfold";
    man.inputs = {kf_data};
    Config cfg = kf_cfg.resolve(man);
    Corpus all = load_corpus(kf_data, man.config["lowercase"].get<bool>());
    const std::size_t n = mwpgen_corpus_size(all.get());
    std::vector<int> folds(n);
    check(mwpgen_kfold_assign(n, kf_k, man.seed, folds.data()));
    std::filesystem::create_directories(kf_dir);
    std::vector<std::string> reports;
    for (std::size_t f = 0; f < kf_k; ++f) {
      std::vector<std::size_t> tr_idx, te_idx;
      for (std::size_t i = 0; i < n; ++i) (static_cast<std::size_t>(folds[i]) == f ? te_idx : tr_idx).push_back(i);
      mwpgen_corpus *tr_raw = nullptr, *te_raw = nullptr;
      check(mwpgen_corpus_subset(all.get(), tr_idx.data(), tr_idx.size(), &tr_raw));
      Corpus tr_c(tr_raw);
      check(mwpgen_corpus_subset(all.get(), te_idx.data(), te_idx.size(), &te_raw));
      Corpus te_c(te_raw);
      const std::string stem = (std::filesystem::path(kf_dir) / ("fold_" + std::to_string(f + 1))).string();
      const std::string ckpt = stem + ".ckpt";
      check(mwpgen_train(tr_c.get(), cfg.get(), ckpt.c_str(), nullptr));
      man.write_for(ckpt);
      Model m = load_model(ckpt);
      char* js = nullptr;
      check(mwpgen_evaluate(m.get(), te_c.get(), tr_c.get(), &js));
      std::string report = take(js);
      write_atomic(stem + ".json", json::parse(report).dump(2) + "\n");
      man.write_for(stem + ".json");
      std::cerr << "fold " << (f + 1) << "/" << kf_k << ": " << report << "\n";
      reports.push_back(std::move(report));
    }
    std::vector<const char*> ptrs;
    for (const auto& r : reports) ptrs.push_back(r.c_str());
    char* mean = nullptr;
    check(mwpgen_report_mean(ptrs.data(), ptrs.size(), &mean));
    json agg;
    agg["k"] = kf_k;
    agg["seed"] = man.seed;
    agg["assignment"] = folds;
    agg["mean"] = json::parse(take(mean));
    agg["folds"] = json::array();
    for (const auto& r : reports) agg["folds"].push_back(json::parse(r));
    const std::string agg_path = (std::filesystem::path(kf_dir) / "aggregate.json").string();
    write_atomic(agg_path, agg.dump(2) + "\n");
    man.write_for(agg_path);
    std::cout << agg["mean"].dump(2) << "\n";
  } else if (*gc) {
    man.command = "gradcheck";
    man.seed = gc_seed;
    char* js = nullptr;
    int pass = 0;
    check(mwpgen_gradcheck(gc_seed, &js, &pass));
    const json rep = json::parse(take(js));
    std::printf("%-28s %14s %8s  %s\n", "check", "max_rel_error", "samples", "result");
    for (const auto& r : rep["rows"]) {
      std::printf("%-28s %14.3e %8zu  %s\n", r["name"].get<std::string>().c_str(), r["max_rel_error"].get<double>(),
                  r["samples"].get<std::size_t>(), r["pass"].get<bool>() ? "PASS" : "FAIL");
    }
    std::printf("overall: %s (max %.3e over %zu samples, %.2fs)\n", pass ? "PASS" : "FAIL",
                rep["max_rel_error"].get<double>(), rep["total_samples"].get<std::size_t>(),
                rep["seconds"].get<double>());
    if (!gc_out.empty()) {
      write_atomic(gc_out, rep.dump(2) + "\n");
      man.write_for(gc_out);
    }
    if (!pass) throw Failure{4, "gradient check failed", "gradcheck"};
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Failure& f) {
    json err;
    err["code"] = f.code;
    err["message"] = f.message;
    err["context"] = f.context;
    std::cerr << err.dump() << "\n";
    return f.code;
  } catch (const std::exception& e) {
    json err;
    err["code"] = 3;
    err["message"] = e.what();
    err["context"] = "";
    std::cerr << err.dump() << "\n";
    return 3;
  }
}
