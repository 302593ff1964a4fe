#pragma once

#include <filesystem>
#include <vector>

#include "genrec/beam.hpp"
#include "genrec/config.hpp"
#include "genrec/corpus.hpp"
#include "genrec/model.hpp"
#include "genrec/quantizer.hpp"
#include "genrec/retrieval.hpp"
#include "genrec/tier.hpp"

namespace genrec {

// Turns corpus examples into model inputs. Training and teacher-forced
// evaluation key the retrieved context by the true target's first codeword;
// decoding attaches per-beam contexts instead.
struct Featurizer {
  const Corpus* corpus = nullptr;
  const Quantizer* quantizer = nullptr;
  Vocab vocab;
  int short_len = 50;
  int n_tiers = 8;
  int tau = 8;
  int ret_cap = 64;
  bool use_tier = true;
  bool use_shs = true;
  bool use_aug = true;

  static Featurizer make(const RunConfig& cfg, const Corpus& corpus,
                         const Quantizer& quantizer);

  std::vector<int> item_level_tokens(std::int64_t id) const;
  std::array<int, 4> target_tokens(std::int64_t id) const;
  BatchItem make_item(const Example& ex) const;

  struct EvalQuery {
    std::vector<int> short_tokens;
    std::vector<float> tier_flat;
    RetrievalIndex index;
    std::int64_t truth = 0;
    std::vector<int> truth_tokens;  // full trie path
  };
  EvalQuery make_query(const Example& ex) const;
};

struct TrainResult {
  ModelParams<float> params;  // best-validation weights (final weights if never evaluated)
  double best_val_hit10 = -1.0;
  int best_epoch = -1;
  int epochs_run = 0;
  long steps = 0;
  bool early_stopped = false;
};

// Deterministic trainer: example order, dropout, and gradient reduction
// order are pure functions of (seed, epoch, step), so a run is bit-for-bit
// reproducible and a resumed run matches an uninterrupted one.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Corpus& corpus, const Quantizer& quantizer);

  // Writes training.csv, checkpoint.txt (best weights), and train_state.txt
  // (resume state) under artifacts_dir. Resumes automatically when
  // train_state.txt exists and matches the config hash.
  TrainResult run(const std::filesystem::path& artifacts_dir);

  double validation_hit10(const ModelParams<float>& params) const;

 private:
  void save_state(const std::filesystem::path& p) const;
  bool load_state(const std::filesystem::path& p);

  RunConfig cfg_;
  const Corpus& corpus_;
  const Quantizer& quantizer_;
  Featurizer feat_;
  ModelConfig mc_;

  ModelParams<float> params_, adam_m_, adam_v_;
  long step_ = 0;
  int epoch_ = 0;
  double best_metric_ = -1.0;
  int best_epoch_ = -1;
  int evals_since_best_ = 0;

  std::vector<BatchItem> train_items_;
  std::vector<Featurizer::EvalQuery> val_queries_;
};

}  // namespace genrec
