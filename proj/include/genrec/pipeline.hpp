#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genrec/config.hpp"
#include "genrec/trainer.hpp"

namespace genrec {

Corpus load_corpus(const RunConfig& cfg);

// Loads the quantizer from quantizer_path (or artifacts/quantizer.txt) and
// rebuilds its derived state; fits and saves a fresh one when allowed and
// no file exists. Codebook sizes must match the config.
Quantizer obtain_quantizer(const RunConfig& cfg, const Corpus& corpus, bool allow_fit);

struct EvalOutput {
  nlohmann::ordered_json metrics;
  std::vector<DecodeTrace> beam_traces;  // at cfg.beam_k
  std::vector<Featurizer::EvalQuery> queries;
  std::vector<std::int64_t> user_ids;
};

EvalOutput evaluate_model(const RunConfig& cfg, const ModelParams<float>& params,
                          const Corpus& corpus, const Quantizer& quantizer, Split split);

int cmd_synth(const RunConfig& cfg);
int cmd_fit_quantizer(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_ablate(const RunConfig& cfg);
int cmd_report(const std::vector<std::string>& metric_files);

}  // namespace genrec
