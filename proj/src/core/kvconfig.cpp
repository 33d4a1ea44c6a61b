#include "core/kvconfig.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cress {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_i64(const std::string& s, int64_t& out) {
  char* end = nullptr;
  errno = 0;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0') return false;
  out = v;
  return true;
}

bool parse_f64(const std::string& s, double& out) {
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end == s.c_str() || *end != '\0') return false;
  out = v;
  return true;
}

}  // namespace

KvConfig::KvConfig() {
  // Top-level seed; all component randomness is derived from it via named
  // sub-seeds (data/init/dropout/sampling/bootstrap).
  define("seed", Type::Int, "1", "top-level seed for the whole experiment");
  define("run.name", Type::String, "run", "run name used in output artifacts");

  // Synthetic task.
  define("task.vocab_size", Type::Int, "50", "number of distinct words");
  define("task.len_min", Type::Int, "5", "minimum sentence length");
  define("task.len_max", Type::Int, "30", "maximum sentence length");
  define("task.frames_min", Type::Int, "2", "min speech frames per token");
  define("task.frames_max", Type::Int, "5", "max speech frames per token");
  define("task.noise_sigma", Type::Real, "0.1", "per-dim feature noise stddev");
  define("task.d_feat", Type::Int, "32", "speech feature dimension");
  define("task.seed", Type::Int, "7", "task identity seed (word bijection + frame prototypes)");
  define("data.train_size", Type::Int, "2000", "training examples");
  define("data.dev_size", Type::Int, "200", "dev examples");
  define("data.test_size", Type::Int, "200", "test examples");

  // Model.
  define("model.enc_layers", Type::Int, "2", "encoder layers");
  define("model.dec_layers", Type::Int, "2", "decoder layers");
  define("model.d_model", Type::Int, "64", "model width");
  define("model.heads", Type::Int, "4", "attention heads");
  define("model.d_ffn", Type::Int, "256", "feed-forward width");
  define("model.tie_embeddings", Type::Bool, "false",
         "tie output projection to the embedding table");

  // Training.
  define("train.mode", Type::String, "mtl", "mtl | cress");
  define("train.mu", Type::Real, "15", "scheduled-sampling decay parameter");
  define("train.lambda", Type::Real, "1.0", "regularization weight");
  define("train.base", Type::Real, "0.7", "adaptive weight base B");
  define("train.scale", Type::Real, "0.05", "adaptive weight scale S");
  define("train.adaptive_start_epoch", Type::Int, "5",
         "adaptive weighting active for epochs strictly greater than this");
  define("train.max_lr", Type::Real, "5e-4", "peak learning rate");
  define("train.warmup_steps", Type::Int, "400", "inverse-sqrt warmup steps");
  define("train.label_smoothing", Type::Real, "0.1", "label smoothing eps");
  define("train.dropout", Type::Real, "0.1", "dropout rate");
  define("train.patience", Type::Int, "10",
         "early stop after this many epochs without dev BLEU improvement");
  define("train.average_k", Type::Int, "10", "checkpoints averaged for the final model");
  define("train.max_epochs", Type::Int, "30", "epoch cap");
  define("train.max_tokens", Type::Int, "900", "max target tokens per batch");
  define("train.max_frames", Type::Int, "6000", "max speech frames per batch");
  define("train.scheduled_sampling", Type::Bool, "true",
         "cress mode: mix predicted words into the target context");
  define("train.regularization", Type::Bool, "true",
         "cress mode: bidirectional KL between ST and MT predictions");
  define("train.adaptive", Type::Bool, "true",
         "cress mode: gap-driven token-level loss weights");
  define("train.shared_gumbel", Type::Bool, "false",
         "share Gumbel/mixing draws between ST and MT word selection");
  define("train.mt_pretrain_epochs", Type::Int, "0",
         "optional MT-only pre-training epochs before joint training");

  // Decoding.
  define("decode.beam", Type::Int, "8", "beam size");
  define("decode.alpha", Type::Real, "1.0", "length penalty exponent");
  define("decode.max_len", Type::Int, "0",
         "max output length; 0 = 2*input_tokens+10");

  // Evaluation / analysis.
  define("eval.bootstrap_n", Type::Int, "1000", "paired bootstrap resamples");
  define("eval.length_buckets", Type::String, "0,10,15,20,25,31",
         "bucket edges for BLEU-by-length (comma separated, half-open)");
  define("gap.max_step", Type::Int, "20", "gap curves go up to this step");
  define("gap.svg", Type::Bool, "true", "emit SVG plots next to the CSVs");

  // Paths.
  define("paths.data_dir", Type::String, "", "corpus directory");
  define("paths.out_dir", Type::String, "", "output directory");
}

void KvConfig::define(const std::string& key, Type type, const std::string& def,
                      const std::string& doc) {
  entries_[key] = Entry{type, def, doc};
}

bool KvConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

void KvConfig::set(const std::string& key, const std::string& raw) {
  auto it = entries_.find(key);
  if (it == entries_.end())
    throw std::invalid_argument("unknown config key: " + key);
  std::string value = trim(raw);
  if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') ||
                            (value.front() == '\'' && value.back() == '\'')))
    value = value.substr(1, value.size() - 2);
  switch (it->second.type) {
    case Type::Int: {
      int64_t v;
      if (!parse_i64(value, v))
        throw std::invalid_argument("config key " + key + ": not an integer: " + value);
      it->second.value = std::to_string(v);
      break;
    }
    case Type::Real: {
      double v;
      if (!parse_f64(value, v))
        throw std::invalid_argument("config key " + key + ": not a number: " + value);
      it->second.value = value;
      break;
    }
    case Type::Bool: {
      if (value == "true" || value == "on" || value == "1")
        it->second.value = "true";
      else if (value == "false" || value == "off" || value == "0")
        it->second.value = "false";
      else
        throw std::invalid_argument("config key " + key + ": not a bool: " + value);
      break;
    }
    case Type::String:
      it->second.value = value;
      break;
  }
}

const std::string& KvConfig::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end())
    throw std::invalid_argument("unknown config key: " + key);
  return it->second.value;
}

int64_t KvConfig::get_int(const std::string& key) const {
  int64_t v;
  if (!parse_i64(get(key), v))
    throw std::invalid_argument("config key " + key + ": not an integer");
  return v;
}

double KvConfig::get_real(const std::string& key) const {
  double v;
  if (!parse_f64(get(key), v))
    throw std::invalid_argument("config key " + key + ": not a number");
  return v;
}

bool KvConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

void KvConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void KvConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path);
}

std::string KvConfig::to_text() const {
  std::string out;
  for (const auto& [k, e] : entries_) {
    out += k;
    out += " = ";
    if (e.type == Type::String)
      out += "\"" + e.value + "\"";
    else
      out += e.value;
    out += "\n";
  }
  return out;
}

void KvConfig::write_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config file: " + path);
  out << to_text();
}

std::vector<std::string> KvConfig::keys() const {
  std::vector<std::string> ks;
  for (const auto& [k, _] : entries_) ks.push_back(k);
  return ks;
}

}  // namespace cress
