#include "genrec/config.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "genrec/io.hpp"

namespace genrec {

namespace {

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string render_int(std::int64_t v) { return std::to_string(v); }
std::string render_double(double v) { return io::fmt(v); }
std::string render_bool(bool v) { return v ? "1" : "0"; }

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    return io::parse_int(v, key);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    return io::parse_double(v, key);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config key " + key + ": expected boolean, got '" + v + "'");
}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto str = [&t](const std::string& key, std::string RunConfig::* m) {
      t[key] = {[m](const RunConfig& c) { return c.*m; },
                [m](RunConfig& c, const std::string& v) { c.*m = v; }};
    };
    auto i64 = [&t](const std::string& key, std::int64_t RunConfig::* m) {
      t[key] = {[m](const RunConfig& c) { return render_int(c.*m); },
                [m, key](RunConfig& c, const std::string& v) { c.*m = to_int(key, v); }};
    };
    auto f64 = [&t](const std::string& key, double RunConfig::* m) {
      t[key] = {[m](const RunConfig& c) { return render_double(c.*m); },
                [m, key](RunConfig& c, const std::string& v) { c.*m = to_double(key, v); }};
    };
    auto b = [&t](const std::string& key, bool RunConfig::* m) {
      t[key] = {[m](const RunConfig& c) { return render_bool(c.*m); },
                [m, key](RunConfig& c, const std::string& v) { c.*m = to_bool(key, v); }};
    };

    str("embeddings", &RunConfig::embeddings);
    str("interactions", &RunConfig::interactions);
    str("artifacts", &RunConfig::artifacts);
    str("checkpoint", &RunConfig::checkpoint);
    str("quantizer_path", &RunConfig::quantizer_path);
    i64("synth_users", &RunConfig::synth_users);
    i64("synth_items", &RunConfig::synth_items);
    i64("synth_avg_len", &RunConfig::synth_avg_len);
    i64("synth_clusters", &RunConfig::synth_clusters);
    f64("synth_long_signal", &RunConfig::synth_long_signal);
    i64("synth_emb_dim", &RunConfig::synth_emb_dim);
    str("codebook_sizes", &RunConfig::codebook_sizes);
    i64("kmeans_iters", &RunConfig::kmeans_iters);
    i64("n_tiers", &RunConfig::n_tiers);
    i64("tau", &RunConfig::tau);
    i64("neighbor_k", &RunConfig::neighbor_k);
    i64("ret_cap", &RunConfig::ret_cap);
    i64("short_len", &RunConfig::short_len);
    i64("d_model", &RunConfig::d_model);
    i64("heads", &RunConfig::heads);
    i64("kv_dim", &RunConfig::kv_dim);
    i64("enc_blocks", &RunConfig::enc_blocks);
    i64("dec_blocks", &RunConfig::dec_blocks);
    i64("ffn_dim", &RunConfig::ffn_dim);
    i64("tier_hidden", &RunConfig::tier_hidden);
    f64("dropout", &RunConfig::dropout);
    f64("lr", &RunConfig::lr);
    f64("weight_decay", &RunConfig::weight_decay);
    i64("batch_size", &RunConfig::batch_size);
    i64("max_epochs", &RunConfig::max_epochs);
    i64("eval_every", &RunConfig::eval_every);
    i64("patience", &RunConfig::patience);
    i64("max_train_targets", &RunConfig::max_train_targets);
    i64("beam_k", &RunConfig::beam_k);
    i64("k_max", &RunConfig::k_max);
    b("use_sidtier", &RunConfig::use_sidtier);
    b("use_shs", &RunConfig::use_shs);
    b("use_neighbor_aug", &RunConfig::use_neighbor_aug);
    b("tier_log1p", &RunConfig::tier_log1p);
    t["seed"] = {[](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) {
                   c.seed = static_cast<std::uint64_t>(to_int("seed", v));
                 }};
    i64("threads", &RunConfig::threads);
    b("trace", &RunConfig::trace);
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  if (const char* env = std::getenv("GENREC_ARTIFACTS"); env && *env) c.artifacts = env;
  return c;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> ks = [] {
    std::vector<std::string> v;
    for (const auto& [k, _] : field_table()) v.push_back(k);
    return v;
  }();
  return ks;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = field_table().find(key);
  if (it == field_table().end()) throw ConfigError("unknown config key: " + key);
  it->second.set(*this, value);
}

std::string RunConfig::get(const std::string& key) const {
  auto it = field_table().find(key);
  if (it == field_table().end()) throw ConfigError("unknown config key: " + key);
  return it->second.get(*this);
}

RunConfig RunConfig::from_file(const std::filesystem::path& p) {
  RunConfig c = defaults();
  std::string text;
  try {
    text = io::read_file(p);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& k : keys()) {
    out += k;
    out += '=';
    out += get(k);
    out += '\n';
  }
  return out;
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

std::array<int, 3> RunConfig::sizes() const {
  std::array<int, 3> out{};
  std::string s = codebook_sizes;
  std::replace(s.begin(), s.end(), ',', ' ');
  const auto toks = io::tokenize(s);
  if (toks.size() != 3)
    throw ConfigError("codebook_sizes: expected three comma-separated values");
  for (int i = 0; i < 3; ++i) out[i] = static_cast<int>(to_int("codebook_sizes", toks[i]));
  return out;
}

void RunConfig::validate() const {
  auto positive = [](std::int64_t v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(synth_users, "synth_users");
  positive(synth_items, "synth_items");
  positive(synth_clusters, "synth_clusters");
  positive(synth_emb_dim, "synth_emb_dim");
  if (synth_avg_len < 2) throw ConfigError("synth_avg_len must be >= 2");
  if (synth_long_signal < 0.0 || synth_long_signal > 1.0)
    throw ConfigError("synth_long_signal outside [0, 1]");
  for (int s : sizes())
    if (s < 2) throw ConfigError("codebook_sizes entries must be >= 2");
  positive(kmeans_iters, "kmeans_iters");
  positive(n_tiers, "n_tiers");
  if (tau < 0) throw ConfigError("tau must be non-negative");
  if (neighbor_k < 0) throw ConfigError("neighbor_k must be non-negative");
  positive(ret_cap, "ret_cap");
  positive(short_len, "short_len");
  positive(d_model, "d_model");
  positive(heads, "heads");
  positive(kv_dim, "kv_dim");
  positive(enc_blocks, "enc_blocks");
  positive(dec_blocks, "dec_blocks");
  positive(ffn_dim, "ffn_dim");
  positive(tier_hidden, "tier_hidden");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout outside [0, 1)");
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  positive(batch_size, "batch_size");
  positive(max_epochs, "max_epochs");
  positive(eval_every, "eval_every");
  positive(patience, "patience");
  if (max_train_targets < 0) throw ConfigError("max_train_targets must be non-negative");
  positive(beam_k, "beam_k");
  positive(k_max, "k_max");
  if (threads < 0) throw ConfigError("threads must be non-negative");
}

ModelConfig RunConfig::model_config(const Quantizer& quantizer) const {
  ModelConfig mc;
  mc.d = static_cast<int>(d_model);
  mc.heads = static_cast<int>(heads);
  mc.kv_dim = static_cast<int>(kv_dim);
  mc.enc_blocks = static_cast<int>(enc_blocks);
  mc.dec_blocks = static_cast<int>(dec_blocks);
  mc.ffn_dim = static_cast<int>(ffn_dim);
  mc.tier_hidden = static_cast<int>(tier_hidden);
  mc.dropout = dropout;
  mc.short_len = static_cast<int>(short_len);
  mc.use_tier = use_sidtier;
  mc.tier_log1p = tier_log1p;
  mc.max_ret_items = static_cast<int>(ret_cap);
  const auto sz = quantizer.sizes();
  mc.tier_inputs = use_sidtier ? sz[0] * static_cast<int>(n_tiers) : 0;
  const int n_suffix = quantizer.has_collisions() ? quantizer.max_suffix() + 1 : 0;
  mc.vocab = Vocab::build(sz, n_suffix);
  return mc;
}

}  // namespace genrec
