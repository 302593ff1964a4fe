#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "genrec/model.hpp"
#include "genrec/quantizer.hpp"

namespace genrec {

// Flat run configuration. Every key can come from a config file
// ("key = value" lines, # comments) or a --set KEY=VALUE override; unknown
// keys are rejected.
struct RunConfig {
  // data
  std::string embeddings;
  std::string interactions;
  std::string artifacts = "artifacts";
  std::string checkpoint;
  std::string quantizer_path;

  // synthetic corpus
  std::int64_t synth_users = 100;
  std::int64_t synth_items = 500;
  std::int64_t synth_avg_len = 550;
  std::int64_t synth_clusters = 25;
  double synth_long_signal = 0.7;
  std::int64_t synth_emb_dim = 96;

  // quantizer
  std::string codebook_sizes = "64,128,128";
  std::int64_t kmeans_iters = 25;

  // features
  std::int64_t n_tiers = 8;

  // retrieval
  std::int64_t tau = 8;
  std::int64_t neighbor_k = 3;
  std::int64_t ret_cap = 64;

  // model
  std::int64_t short_len = 50;
  std::int64_t d_model = 96;
  std::int64_t heads = 8;
  std::int64_t kv_dim = 32;
  std::int64_t enc_blocks = 4;
  std::int64_t dec_blocks = 4;
  std::int64_t ffn_dim = 384;
  std::int64_t tier_hidden = 256;
  double dropout = 0.1;

  // optimization
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::int64_t batch_size = 32;
  std::int64_t max_epochs = 100;
  std::int64_t eval_every = 1;
  std::int64_t patience = 50;
  std::int64_t max_train_targets = 0;  // per user; 0 = all

  // decoding
  std::int64_t beam_k = 20;
  std::int64_t k_max = 20;

  // ablation switches
  bool use_sidtier = true;
  bool use_shs = true;
  bool use_neighbor_aug = true;
  bool tier_log1p = true;

  // misc
  std::uint64_t seed = 7;
  std::int64_t threads = 0;
  bool trace = false;

  static RunConfig defaults();
  static RunConfig from_file(const std::filesystem::path& p);

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Sorted key=value lines with canonical value rendering; the hash is
  // therefore invariant to key order in the source file.
  std::string canonical() const;
  std::string hash() const;

  void validate() const;

  std::array<int, 3> sizes() const;
  ModelConfig model_config(const Quantizer& quantizer) const;
};

}  // namespace genrec
