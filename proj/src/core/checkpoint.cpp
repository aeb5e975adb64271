#include "checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "error.hpp"

namespace mwpgen {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

struct Blob {
  std::string name;
  const Matrix* value;
};

void add_adam(std::vector<Blob>& out, const std::string& tag, const std::vector<NamedParam>& params,
              const AdamState& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam." + tag + ".m." + params[i].name, &s.m[i]});
    out.push_back({"adam." + tag + ".v." + params[i].name, &s.v[i]});
  }
}

std::vector<NamedParam> gen_params(const Models& m) { return m.generator.params("gen"); }
std::vector<NamedParam> cons_params(const Models& m) { return m.consistency_parser.params("cons"); }
std::vector<NamedParam> eval_params(const Models& m) { return m.eval_parser.params("eval"); }

std::vector<Blob> segments_of(const Models& m) {
  std::vector<Blob> seg;
  for (const auto& p : m.trainable()) seg.push_back({p.name, &p.tensor.value()});
  seg.push_back({"sel.emb", &m.selector.embeddings.value()});
  add_adam(seg, "gen", gen_params(m), m.adam_gen);
  add_adam(seg, "sel", m.selector.params(), m.adam_sel);
  add_adam(seg, "cons", cons_params(m), m.adam_cons);
  add_adam(seg, "eval", eval_params(m), m.adam_eval);
  return seg;
}

// Writable views onto the same segments of a freshly constructed Models.
std::map<std::string, Matrix*> writable_segments(Models& m) {
  std::map<std::string, Matrix*> out;
  for (auto& p : m.trainable()) out[p.name] = &p.tensor.mutable_value();
  out["sel.emb"] = &m.selector.embeddings.mutable_value();
  auto adam = [&](const std::string& tag, const std::vector<NamedParam>& params, AdamState& s) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out["adam." + tag + ".m." + params[i].name] = &s.m[i];
      out["adam." + tag + ".v." + params[i].name] = &s.v[i];
    }
  };
  adam("gen", gen_params(m), m.adam_gen);
  adam("sel", m.selector.params(), m.adam_sel);
  adam("cons", cons_params(m), m.adam_cons);
  adam("eval", eval_params(m), m.adam_eval);
  return out;
}

}  // namespace

std::string checkpoint_bytes(const Models& m) {
  nlohmann::json header;
  header["format"] = std::string(kCheckpointMagic.substr(0, kCheckpointMagic.size() - 1));
  header["config"] = m.cfg.to_json();
  header["vocab"] = m.vocab.to_json();
  header["step"] = m.step;
  header["adam_steps"] = {{"gen", m.adam_gen.step}, {"sel", m.adam_sel.step},
                          {"cons", m.adam_cons.step}, {"eval", m.adam_eval.step}};
  header["tfidf"] = {{"documents", m.tfidf.documents}, {"document_frequency", m.tfidf.document_frequency}};

  std::string payload;
  nlohmann::json table = nlohmann::json::array();
  for (const Blob& s : segments_of(m)) {
    const Matrix& v = *s.value;
    const std::size_t offset = payload.size();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const float f = static_cast<float>(v.data()[i]);
      char b[sizeof f];
      std::memcpy(b, &f, sizeof f);
      payload.append(b, sizeof f);
    }
    table.push_back({{"name", s.name},
                     {"shape", {v.rows(), v.cols()}},
                     {"dtype", "f32"},
                     {"offset", offset},
                     {"nbytes", payload.size() - offset}});
  }
  header["segments"] = std::move(table);

  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  const std::uint64_t len = h.size();
  char lb[8];
  std::memcpy(lb, &len, 8);
  out.append(lb, 8);
  out += h;
  out += payload;
  return out;
}

Models checkpoint_from_bytes(std::string_view bytes, const std::string& source) {
  if (bytes.size() < 16) fail_data("checkpoint " + source + " is truncated", source);
  const std::string_view magic = bytes.substr(0, 8);
  if (magic.substr(0, 6) != "MWPGEN") fail_data("checkpoint " + source + " has no MWPGEN magic", source);
  if (magic != kCheckpointMagic) {
    std::string found(magic.substr(0, magic.find('\n')));
    fail_data("checkpoint " + source + " has format version " + found + ", this build reads " +
                  std::string(kCheckpointMagic.substr(0, 7)),
              source);
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (len > bytes.size() - 16) fail_data("checkpoint " + source + " header is truncated", source);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint " + source + " header is not valid JSON: " + e.what(), source);
  }
  const std::string_view payload = bytes.substr(16 + len);

  try {
    Models m;
    m.cfg = TrainConfig::from_json(header.at("config"));
    m.vocab = Vocab::from_json(header.at("vocab"));
    m.cfg.generator.vocab_size = m.vocab.size();
    m.cfg.consistency_parser.vocab_size = m.vocab.size();
    m.cfg.eval_parser.vocab_size = m.vocab.size();
    Rng dummy = Rng::stream(0, "checkpoint");
    m.generator = Decoder(m.cfg.generator, dummy);
    m.consistency_parser = Decoder(m.cfg.consistency_parser, dummy);
    m.eval_parser = Decoder(m.cfg.eval_parser, dummy);
    m.selector = SelectorParams::init(m.generator.token_embedding().value(), dummy);
    m.adam_gen.init(m.generator.param_tensors());
    m.adam_cons.init(m.consistency_parser.param_tensors());
    m.adam_eval.init(m.eval_parser.param_tensors());
    const Tensor sel[] = {m.selector.w, m.selector.b};
    m.adam_sel.init(sel);
    m.step = header.at("step").get<long>();
    const auto& as = header.at("adam_steps");
    m.adam_gen.step = as.at("gen").get<long>();
    m.adam_sel.step = as.at("sel").get<long>();
    m.adam_cons.step = as.at("cons").get<long>();
    m.adam_eval.step = as.at("eval").get<long>();
    m.tfidf.documents = header.at("tfidf").at("documents").get<std::size_t>();
    m.tfidf.document_frequency =
        header.at("tfidf").at("document_frequency").get<std::map<std::string, std::size_t>>();

    auto slots = writable_segments(m);
    std::size_t filled = 0;
    for (const auto& s : header.at("segments")) {
      const std::string name = s.at("name").get<std::string>();
      auto it = slots.find(name);
      if (it == slots.end()) fail_data("checkpoint " + source + ": unknown segment '" + name + "'", source);
      if (s.at("dtype").get<std::string>() != "f32") fail_data("checkpoint segment '" + name + "' is not f32", source);
      Matrix& dst = *it->second;
      const auto rows = s.at("shape").at(0).get<Eigen::Index>();
      const auto cols = s.at("shape").at(1).get<Eigen::Index>();
      if (rows != dst.rows() || cols != dst.cols()) {
        fail_data("checkpoint segment '" + name + "' has shape [" + std::to_string(rows) + "x" +
                      std::to_string(cols) + "], expected [" + std::to_string(dst.rows()) + "x" +
                      std::to_string(dst.cols()) + "]",
                  source);
      }
      const auto offset = s.at("offset").get<std::size_t>();
      const auto nbytes = s.at("nbytes").get<std::size_t>();
      if (nbytes != static_cast<std::size_t>(dst.size()) * sizeof(float) || offset > payload.size() ||
          nbytes > payload.size() - offset) {
        fail_data("checkpoint segment '" + name + "' lies outside the payload", source);
      }
      for (Eigen::Index i = 0; i < dst.size(); ++i) {
        float f;
        std::memcpy(&f, payload.data() + offset + static_cast<std::size_t>(i) * sizeof f, sizeof f);
        dst.data()[i] = static_cast<double>(f);
      }
      ++filled;
    }
    if (filled != slots.size()) {
      fail_data("checkpoint " + source + " has " + std::to_string(filled) + " segments, expected " +
                    std::to_string(slots.size()),
                source);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint " + source + " header is malformed: " + e.what(), source);
  }
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("cannot write " + tmp, path);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail_data("write failed for " + tmp, path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail_data("cannot move " + tmp + " to " + path + ": " + ec.message(), path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot open " + path, path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const Models& m, const std::string& path) { write_file_atomic(path, checkpoint_bytes(m)); }

Models load_checkpoint(const std::string& path) { return checkpoint_from_bytes(read_file(path), path); }

}  // namespace mwpgen
