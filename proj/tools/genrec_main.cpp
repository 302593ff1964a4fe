#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "genrec/pipeline.hpp"

namespace {

genrec::RunConfig resolve(const std::string& config_file,
                          const std::vector<std::string>& overrides) {
  genrec::RunConfig cfg = config_file.empty() ? genrec::RunConfig::defaults()
                                              : genrec::RunConfig::from_file(config_file);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw genrec::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generative semantic-id recommender"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  app.add_option("--config", config_file, "config file (key = value lines)");
  app.add_option("--set", overrides, "override one config key (KEY=VALUE, repeatable)")
      ->allow_extra_args(false);

  struct Common {
    std::string embeddings, interactions, artifacts, checkpoint, quantizer;
    std::uint64_t seed = 0;
    bool has_seed = false;
  };
  auto add_common = [&](CLI::App* sub, Common& c) {
    sub->fallthrough();
    sub->add_option("--embeddings", c.embeddings, "item embeddings file");
    sub->add_option("--interactions", c.interactions, "interaction sequences file (jsonl)");
    sub->add_option("--artifacts", c.artifacts, "output directory");
    sub->add_option("--checkpoint", c.checkpoint, "model checkpoint file");
    sub->add_option("--quantizer", c.quantizer, "quantizer file");
    sub->add_option("--seed", c.seed, "rng seed")->each([&c](const std::string&) {
      c.has_seed = true;
    });
  };
  auto apply_common = [](genrec::RunConfig& cfg, const Common& c) {
    if (!c.embeddings.empty()) cfg.embeddings = c.embeddings;
    if (!c.interactions.empty()) cfg.interactions = c.interactions;
    if (!c.artifacts.empty()) cfg.artifacts = c.artifacts;
    if (!c.checkpoint.empty()) cfg.checkpoint = c.checkpoint;
    if (!c.quantizer.empty()) cfg.quantizer_path = c.quantizer;
    if (c.has_seed) cfg.seed = c.seed;
  };

  Common synth_c, fitq_c, train_c, eval_c, ablate_c;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  add_common(synth, synth_c);
  auto* fitq = app.add_subcommand("fit-quantizer", "fit the semantic-id quantizer");
  add_common(fitq, fitq_c);
  auto* train = app.add_subcommand("train", "train the generator");
  add_common(train, train_c);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, eval_c);
  bool eval_trace = false;
  eval->add_flag("--trace", eval_trace, "write per-query decode traces");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the variant ladder");
  add_common(ablate, ablate_c);
  auto* report = app.add_subcommand("report", "tabulate metrics files side by side");
  std::vector<std::string> metric_files;
  report->add_option("files", metric_files, "metrics.json files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) return genrec::cmd_report(metric_files);
    genrec::RunConfig cfg = resolve(config_file, overrides);
    if (synth->parsed()) {
      apply_common(cfg, synth_c);
      return genrec::cmd_synth(cfg);
    }
    if (fitq->parsed()) {
      apply_common(cfg, fitq_c);
      return genrec::cmd_fit_quantizer(cfg);
    }
    if (train->parsed()) {
      apply_common(cfg, train_c);
      return genrec::cmd_train(cfg);
    }
    if (eval->parsed()) {
      apply_common(cfg, eval_c);
      if (eval_trace) cfg.trace = true;
      return genrec::cmd_eval(cfg);
    }
    if (ablate->parsed()) {
      apply_common(cfg, ablate_c);
      return genrec::cmd_ablate(cfg);
    }
  } catch (const genrec::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const genrec::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const genrec::TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
