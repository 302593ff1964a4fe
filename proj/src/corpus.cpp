#include "genrec/corpus.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "genrec/io.hpp"

namespace genrec {

Corpus::Corpus(std::vector<Item> items, std::vector<InteractionSequence> sequences)
    : items_(std::move(items)), sequences_(std::move(sequences)) {
  for (int i = 0; i < static_cast<int>(items_.size()); ++i) {
    if (!index_.emplace(items_[i].id, i).second)
      throw DataError("duplicate item id " + std::to_string(items_[i].id));
    if (items_[i].embedding.size() != items_[0].embedding.size())
      throw DataError("inconsistent embedding dimension for item " +
                      std::to_string(items_[i].id));
  }
  build_examples();
}

void Corpus::build_examples() {
  examples_.clear();
  for (int s = 0; s < static_cast<int>(sequences_.size()); ++s) {
    const int n = static_cast<int>(sequences_[s].items.size());
    if (n < 2) throw DataError("sequence shorter than 2");
    examples_.push_back({s, n - 1, Split::kTest});
    if (n >= 3) examples_.push_back({s, n - 2, Split::kValidation});
    for (int t = 1; t <= n - 3; ++t) examples_.push_back({s, t, Split::kTrain});
  }
}

const Item& Corpus::item(std::int64_t id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DataError("unknown item id " + std::to_string(id));
  return items_[it->second];
}

int Corpus::item_index(std::int64_t id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DataError("unknown item id " + std::to_string(id));
  return it->second;
}

std::vector<Example> Corpus::examples_for(Split s) const {
  std::vector<Example> out;
  for (const auto& e : examples_)
    if (e.split == s) out.push_back(e);
  return out;
}

double Corpus::mean_sequence_length() const {
  if (sequences_.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : sequences_) total += static_cast<double>(s.items.size());
  return total / static_cast<double>(sequences_.size());
}

bool Corpus::operator==(const Corpus& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].id != other.items_[i].id) return false;
    if (items_[i].embedding.size() != other.items_[i].embedding.size()) return false;
    if (items_[i].embedding != other.items_[i].embedding) return false;
  }
  if (sequences_.size() != other.sequences_.size()) return false;
  for (std::size_t i = 0; i < sequences_.size(); ++i) {
    if (sequences_[i].user_id != other.sequences_[i].user_id) return false;
    if (sequences_[i].items != other.sequences_[i].items) return false;
  }
  return true;
}

Corpus Corpus::ingest(const std::filesystem::path& embeddings_path,
                      const std::filesystem::path& interactions_path) {
  const std::string emb_text = io::read_file(embeddings_path);
  const auto toks = io::tokenize(emb_text);
  if (toks.size() < 2) throw DataError("embeddings file: missing header");
  const std::int64_t d_emb = io::parse_int(toks[0], "embeddings header");
  const std::int64_t n_items = io::parse_int(toks[1], "embeddings header");
  if (d_emb <= 0 || n_items <= 0)
    throw DataError("embeddings file: non-positive header fields");
  const std::size_t expected = 2 + static_cast<std::size_t>(n_items) * (1 + d_emb);
  if (toks.size() != expected)
    throw DataError("embeddings file: expected " + std::to_string(expected) +
                    " tokens, found " + std::to_string(toks.size()));

  std::vector<Item> items;
  items.reserve(n_items);
  std::size_t pos = 2;
  for (std::int64_t i = 0; i < n_items; ++i) {
    Item it;
    it.id = io::parse_int(toks[pos++], "embeddings row");
    it.embedding.resize(d_emb);
    for (std::int64_t j = 0; j < d_emb; ++j)
      it.embedding[j] = static_cast<float>(io::parse_double(toks[pos++], "embeddings row"));
    items.push_back(std::move(it));
  }

  std::unordered_map<std::int64_t, int> known;
  for (int i = 0; i < static_cast<int>(items.size()); ++i) known.emplace(items[i].id, i);

  const std::string inter_text = io::read_file(interactions_path);
  std::vector<InteractionSequence> sequences;
  int dropped = 0;
  std::istringstream lines(inter_text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("user") || !j.contains("items") ||
        !j["user"].is_number_integer() || !j["items"].is_array())
      throw DataError("interactions line " + std::to_string(line_no) + ": malformed record");
    InteractionSequence seq;
    seq.user_id = j["user"].get<std::int64_t>();
    bool ok = true;
    for (const auto& v : j["items"]) {
      if (!v.is_number_integer())
        throw DataError("interactions line " + std::to_string(line_no) + ": non-integer item");
      const std::int64_t id = v.get<std::int64_t>();
      if (!known.count(id)) {
        ok = false;
        break;
      }
      seq.items.push_back(id);
    }
    if (!ok || seq.items.size() < 2) {
      ++dropped;
      continue;
    }
    sequences.push_back(std::move(seq));
  }
  if (dropped > 0)
    std::cerr << "[corpus] dropped " << dropped
              << " sequence(s) (unknown items or length < 2)\n";
  if (sequences.empty()) throw DataError("interactions file: no usable sequences");
  return Corpus(std::move(items), std::move(sequences));
}

void Corpus::emit(const std::filesystem::path& embeddings_path,
                  const std::filesystem::path& interactions_path) const {
  std::vector<int> order(items_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return items_[a].id < items_[b].id; });

  std::string emb;
  emb += std::to_string(embedding_dim());
  emb += ' ';
  emb += std::to_string(items_.size());
  emb += '\n';
  for (int idx : order) {
    const Item& it = items_[idx];
    emb += std::to_string(it.id);
    for (Eigen::Index j = 0; j < it.embedding.size(); ++j) {
      emb += ' ';
      emb += io::fmt(it.embedding[j]);
    }
    emb += '\n';
  }
  io::write_file(embeddings_path, emb);

  std::string inter;
  for (const auto& seq : sequences_) {
    nlohmann::ordered_json j;
    j["user"] = seq.user_id;
    j["items"] = seq.items;
    inter += j.dump();
    inter += '\n';
  }
  io::write_file(interactions_path, inter);
}

SplitSequence split_sequence(std::span<const std::int64_t> items, int short_len,
                             int target_pos) {
  if (short_len <= 0) throw ConfigError("short_len must be positive");
  const int n = static_cast<int>(items.size());
  if (target_pos == -1) target_pos = n - 1;
  if (target_pos < 1 || target_pos >= n)
    throw DataError("target position " + std::to_string(target_pos) +
                    " leaves an empty history (sequence length " + std::to_string(n) + ")");
  SplitSequence out;
  out.target = items[target_pos];
  const int hist = target_pos;  // items[0..target_pos)
  const int short_n = std::min(short_len, hist);
  const int long_n = hist - short_n;
  out.long_items.assign(items.begin(), items.begin() + long_n);
  out.short_items.assign(items.begin() + long_n, items.begin() + hist);
  return out;
}

Corpus generate_synthetic(const SyntheticConfig& cfg, SyntheticMeta* meta) {
  if (cfg.n_users <= 0 || cfg.n_items <= 0 || cfg.n_clusters <= 0 || cfg.avg_len < 2)
    throw ConfigError("synthetic config: counts must be positive and avg_len >= 2");
  if (cfg.n_clusters > cfg.n_items)
    throw ConfigError("synthetic config: more clusters than items");
  if (cfg.long_signal_strength < 0.0 || cfg.long_signal_strength > 1.0)
    throw ConfigError("synthetic config: long_signal_strength outside [0, 1]");
  if (cfg.emb_dim <= 0) throw ConfigError("synthetic config: emb_dim must be positive");

  Rng rng = Rng::derive(cfg.seed, 0x53594e54ull);  // corpus stream

  const int C = cfg.n_clusters;
  MatD centers(C, cfg.emb_dim);
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < cfg.emb_dim; ++j) centers(c, j) = cfg.center_scale * rng.normal();

  // Items round-robin over clusters so every cluster is populated.
  std::vector<Item> items(cfg.n_items);
  std::vector<int> item_cluster(cfg.n_items);
  std::vector<std::vector<int>> cluster_items(C);
  for (int i = 0; i < cfg.n_items; ++i) {
    const int c = i % C;
    item_cluster[i] = c;
    cluster_items[c].push_back(i);
    items[i].id = i;
    items[i].embedding.resize(cfg.emb_dim);
    for (int j = 0; j < cfg.emb_dim; ++j)
      items[i].embedding[j] =
          static_cast<float>(centers(c, j) + cfg.noise_sigma * rng.normal());
  }

  const int mix_size = std::min(cfg.mixture_size, C);
  std::vector<std::vector<int>> user_clusters(cfg.n_users);
  std::vector<std::vector<double>> user_weights(cfg.n_users);
  std::vector<std::vector<std::vector<int>>> user_favorites(cfg.n_users);

  std::vector<InteractionSequence> sequences(cfg.n_users);
  for (int u = 0; u < cfg.n_users; ++u) {
    // Preferred clusters: a partial shuffle, then gamma-normalized weights.
    std::vector<int> all(C);
    for (int c = 0; c < C; ++c) all[c] = c;
    for (int i = 0; i < mix_size; ++i) {
      const int j = i + static_cast<int>(rng.uniform_int(C - i));
      std::swap(all[i], all[j]);
    }
    std::vector<int> prefs(all.begin(), all.begin() + mix_size);
    std::vector<double> w(mix_size);
    double wsum = 0.0;
    for (int i = 0; i < mix_size; ++i) {
      w[i] = rng.gamma2();
      wsum += w[i];
    }
    for (auto& x : w) x /= wsum;

    std::vector<std::vector<int>> favs(mix_size);
    for (int i = 0; i < mix_size; ++i) {
      std::vector<int> pool = cluster_items[prefs[i]];
      rng.shuffle(pool);
      const int f = std::min<int>(cfg.favorites_per_cluster, static_cast<int>(pool.size()));
      favs[i].assign(pool.begin(), pool.begin() + f);
    }

    user_clusters[u] = prefs;
    user_weights[u] = w;
    user_favorites[u] = std::move(favs);

    int len = static_cast<int>(std::llround(
        rng.normal(static_cast<double>(cfg.avg_len), cfg.avg_len / 8.0)));
    len = std::clamp(len, std::max(cfg.min_len, 3), 2 * cfg.avg_len);

    auto sample_mixture = [&]() {
      double r = rng.uniform();
      for (int i = 0; i < mix_size; ++i) {
        r -= w[i];
        if (r < 0.0) return i;
      }
      return mix_size - 1;
    };

    InteractionSequence seq;
    seq.user_id = u;
    int session_cluster = static_cast<int>(rng.uniform_int(C));
    for (int t = 0; t < len; ++t) {
      if (rng.uniform() < cfg.session_switch_prob)
        session_cluster = static_cast<int>(rng.uniform_int(C));
      int cluster;
      int pref_slot = -1;
      if (rng.uniform() < cfg.long_signal_strength) {
        pref_slot = sample_mixture();
        cluster = prefs[pref_slot];
      } else {
        cluster = session_cluster;
        for (int i = 0; i < mix_size; ++i)
          if (prefs[i] == cluster) pref_slot = i;
      }
      int item;
      if (pref_slot >= 0 && rng.uniform() < cfg.repeat_prob) {
        const auto& f = user_favorites[u][pref_slot];
        item = f[rng.uniform_int(static_cast<std::int64_t>(f.size()))];
      } else {
        const auto& pool = cluster_items[cluster];
        item = pool[rng.uniform_int(static_cast<std::int64_t>(pool.size()))];
      }
      seq.items.push_back(item);
    }
    sequences[u] = std::move(seq);
  }

  if (meta) {
    meta->n_clusters = C;
    meta->item_cluster = item_cluster;
    meta->user_clusters = user_clusters;
    meta->user_weights = user_weights;
  }
  return Corpus(std::move(items), std::move(sequences));
}

}  // namespace genrec
