#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "genrec/common.hpp"

namespace genrec {

struct Item {
  std::int64_t id = 0;
  VecF embedding;
};

struct InteractionSequence {
  std::int64_t user_id = 0;
  std::vector<std::int64_t> items;  // chronological, oldest first
};

enum class Split { kTrain, kValidation, kTest };

// One supervised example: predict items[target_pos] from items[0..target_pos).
struct Example {
  int seq_index = 0;
  int target_pos = 0;
  Split split = Split::kTrain;
};

// A history cut at one target position.
struct SplitSequence {
  std::vector<std::int64_t> long_items;   // history beyond the short window
  std::vector<std::int64_t> short_items;  // most recent short_len items
  std::int64_t target = 0;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<Item> items, std::vector<InteractionSequence> sequences);

  // Reads "d_emb n_items" + one "item_id v1..vd" row per item, and one
  // {"user":int,"items":[int,...]} JSON object per interactions line.
  // Sequences referencing unknown items or shorter than 2 are dropped
  // (count reported on stderr).
  static Corpus ingest(const std::filesystem::path& embeddings_path,
                       const std::filesystem::path& interactions_path);

  void emit(const std::filesystem::path& embeddings_path,
            const std::filesystem::path& interactions_path) const;

  const std::vector<Item>& items() const { return items_; }
  const std::vector<InteractionSequence>& sequences() const { return sequences_; }
  const std::vector<Example>& examples() const { return examples_; }

  bool has_item(std::int64_t id) const { return index_.count(id) > 0; }
  const Item& item(std::int64_t id) const;
  int item_index(std::int64_t id) const;
  int embedding_dim() const { return items_.empty() ? 0 : static_cast<int>(items_[0].embedding.size()); }

  std::vector<Example> examples_for(Split s) const;
  double mean_sequence_length() const;

  bool operator==(const Corpus& other) const;

 private:
  void build_examples();

  std::vector<Item> items_;
  std::vector<InteractionSequence> sequences_;
  std::vector<Example> examples_;
  std::unordered_map<std::int64_t, int> index_;
};

// Splits the prefix items[0..target_pos) into long/short parts and pairs it
// with items[target_pos] as the target. target_pos == -1 means the last item.
// The prefix must be non-empty; when it is shorter than short_len the long
// part is empty.
SplitSequence split_sequence(std::span<const std::int64_t> items, int short_len,
                             int target_pos = -1);

struct SyntheticConfig {
  int n_users = 100;
  int n_items = 500;
  int avg_len = 550;
  int n_clusters = 25;
  double long_signal_strength = 0.7;
  int emb_dim = 96;
  std::uint64_t seed = 7;

  // Shape of the planted structure.
  int mixture_size = 3;            // preferred clusters per user
  int favorites_per_cluster = 6;   // sticky items inside a preferred cluster
  double repeat_prob = 0.6;        // chance a preferred-cluster pick reuses a favorite
  double session_switch_prob = 0.1;  // chance the session cluster re-draws at a step
  double center_scale = 1.0;
  double noise_sigma = 0.25;
  int min_len = 5;
};

struct SyntheticMeta {
  int n_clusters = 0;
  std::vector<int> item_cluster;                    // item index -> cluster
  std::vector<std::vector<int>> user_clusters;      // user -> preferred clusters
  std::vector<std::vector<double>> user_weights;    // user -> mixture weights
};

// Plants a recoverable long-term signal: each user holds a persistent
// preferred-cluster mixture, and each step draws its cluster from that
// mixture with probability long_signal_strength, otherwise from a drifting
// session cluster. Deterministic for a fixed config.
Corpus generate_synthetic(const SyntheticConfig& cfg, SyntheticMeta* meta = nullptr);

}  // namespace genrec
