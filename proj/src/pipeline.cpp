#include "genrec/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>

#include "genrec/io.hpp"
#include "genrec/metrics.hpp"

namespace genrec {

namespace {

const std::vector<int> kHitKs = {1, 3, 5, 10, 20};
const std::vector<int> kNdcgKs = {3, 5, 10, 20};

std::filesystem::path artifacts_path(const RunConfig& cfg, const char* name) {
  return std::filesystem::path(cfg.artifacts) / name;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

Corpus load_corpus(const RunConfig& cfg) {
  if (cfg.embeddings.empty() || cfg.interactions.empty())
    throw ConfigError("embeddings and interactions paths are required");
  return Corpus::ingest(cfg.embeddings, cfg.interactions);
}

Quantizer obtain_quantizer(const RunConfig& cfg, const Corpus& corpus, bool allow_fit) {
  const std::filesystem::path path = cfg.quantizer_path.empty()
                                         ? artifacts_path(cfg, "quantizer.txt")
                                         : std::filesystem::path(cfg.quantizer_path);
  Quantizer q;
  if (std::filesystem::exists(path)) {
    q = Quantizer::load(path);
    if (q.sizes() != cfg.sizes())
      throw ConfigError("quantizer at " + path.string() +
                        " has different codebook sizes than the config");
    q.build_prototypes(corpus);
  } else {
    if (!allow_fit) throw DataError("quantizer file not found: " + path.string());
    q = Quantizer::fit(corpus, cfg.sizes(), static_cast<int>(cfg.kmeans_iters), cfg.seed);
    q.save(path);
  }
  q.build_neighbor_dict(static_cast<int>(cfg.neighbor_k));
  return q;
}

EvalOutput evaluate_model(const RunConfig& cfg, const ModelParams<float>& params,
                          const Corpus& corpus, const Quantizer& quantizer, Split split) {
  const Featurizer feat = Featurizer::make(cfg, corpus, quantizer);
  const PrefixTrie trie = PrefixTrie::build(quantizer, feat.vocab);
  const int n_levels = feat.vocab.n_levels();
  const auto examples = corpus.examples_for(split);
  const int n = static_cast<int>(examples.size());
  if (n == 0) throw DataError("evaluate: no examples in the requested split");

  EvalOutput out;
  out.queries.reserve(n);
  std::vector<BatchItem> tf_items;
  tf_items.reserve(n);
  for (const auto& ex : examples) {
    out.queries.push_back(feat.make_query(ex));
    tf_items.push_back(feat.make_item(ex));
    out.user_ids.push_back(corpus.sequences()[ex.seq_index].user_id);
  }

  // Teacher-forced diagnostics.
  std::vector<std::array<bool, 4>> tf_correct(n);
  std::vector<double> tf_loss(n, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    Tape<float> tape;
    ForwardStats st;
    build_example_loss<float>(tape, params, nullptr, tf_items[i], &st);
    tf_correct[i] = st.correct;
    tf_loss[i] = st.loss;
  }

  BeamOptions opt;
  opt.use_shs = cfg.use_shs;
  opt.use_aug = cfg.use_neighbor_aug;
  opt.tau = static_cast<int>(cfg.tau);
  opt.ret_cap = static_cast<int>(cfg.ret_cap);

  // Greedy decode for the conditional precision chain.
  std::vector<std::array<bool, 4>> greedy_ok(n, {false, false, false, false});
  std::vector<QueryResult> greedy_results(n);
  {
    BeamOptions gopt = opt;
    gopt.beam_k = 1;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      const auto& q = out.queries[i];
      InferenceModel<float> model(params, q.short_tokens, q.tier_flat);
      DecodeTrace trace;
      const auto scored =
          beam_search(model, trie, feat.vocab, quantizer, q.index, gopt, &trace);
      greedy_results[i].ranked = rank_for_eval(scored, 1);
      greedy_results[i].truth = q.truth;
      for (int l = 0; l < n_levels; ++l) {
        if (l >= static_cast<int>(trace.depths.size()) || trace.depths[l].empty()) break;
        const auto& toks = trace.depths[l][0].tokens;
        bool match = static_cast<int>(toks.size()) == l + 1;
        for (int j = 0; match && j <= l; ++j) match = toks[j] == q.truth_tokens[j];
        greedy_ok[i][l] = match;
      }
    }
  }

  // Full beam decode.
  opt.beam_k = static_cast<int>(cfg.beam_k);
  out.beam_traces.resize(n);
  std::vector<QueryResult> results(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& q = out.queries[i];
    InferenceModel<float> model(params, q.short_tokens, q.tier_flat);
    const auto scored = beam_search(model, trie, feat.vocab, quantizer, q.index, opt,
                                    &out.beam_traces[i]);
    results[i].ranked = rank_for_eval(scored, static_cast<int>(cfg.k_max));
    results[i].truth = q.truth;
  }

  const auto diag = level_diagnostics(tf_correct, greedy_ok, n_levels);
  std::vector<std::vector<int>> truth_tokens;
  truth_tokens.reserve(n);
  for (const auto& q : out.queries) truth_tokens.push_back(q.truth_tokens);
  const auto crp = crp_from_traces(out.beam_traces, truth_tokens);

  std::vector<GatePoint> gate_points;
  for (const auto& t : out.beam_traces)
    gate_points.insert(gate_points.end(), t.gate_points.begin(), t.gate_points.end());
  const auto gate = gate_trace_report(gate_points);

  double mean_tf_loss = 0.0;
  for (double v : tf_loss) mean_tf_loss += v;
  mean_tf_loss /= n;

  nlohmann::ordered_json j;
  j["config"] = cfg.hash();
  j["split"] = split == Split::kTest ? "test" : (split == Split::kValidation ? "val" : "train");
  j["n_queries"] = n;
  j["n_levels"] = n_levels;
  j["teacher_loss"] = mean_tf_loss;
  nlohmann::ordered_json hits, ndcgs;
  for (int k : kHitKs)
    if (k <= cfg.k_max) hits[std::to_string(k)] = hit_at_k(results, k);
  for (int k : kNdcgKs)
    if (k <= cfg.k_max) ndcgs[std::to_string(k)] = ndcg_at_k(results, k);
  j["hit"] = hits;
  j["ndcg"] = ndcgs;
  j["acc"] = diag.acc;
  nlohmann::ordered_json prec = nlohmann::ordered_json::array();
  for (const auto& p : diag.precision) {
    if (p)
      prec.push_back(*p);
    else
      prec.push_back(nullptr);
  }
  j["precision"] = prec;
  j["greedy_hit1"] = hit_at_k(greedy_results, 1);
  j["crp"] = crp.crp;
  j["crp_eligible"] = crp.eligible;
  nlohmann::ordered_json gbins = nlohmann::ordered_json::array();
  for (const auto& b : gate.bins) {
    nlohmann::ordered_json gb;
    gb["lo"] = b.lo;
    gb["hi"] = b.hi;
    gb["mean_gate"] = b.mean_gate;
    gb["count"] = b.count;
    gbins.push_back(gb);
  }
  j["gate_bins"] = gbins;
  j["gate_spearman"] = gate.spearman;
  j["gate_points"] = gate.n_points;
  j["mean_retrieved_len"] = gate.mean_ret_len;
  out.metrics = std::move(j);
  return out;
}

int cmd_synth(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.embeddings.empty() || cfg.interactions.empty())
    throw ConfigError("synth: embeddings and interactions output paths are required");
  SyntheticConfig sc;
  sc.n_users = static_cast<int>(cfg.synth_users);
  sc.n_items = static_cast<int>(cfg.synth_items);
  sc.avg_len = static_cast<int>(cfg.synth_avg_len);
  sc.n_clusters = static_cast<int>(cfg.synth_clusters);
  sc.long_signal_strength = cfg.synth_long_signal;
  sc.emb_dim = static_cast<int>(cfg.synth_emb_dim);
  sc.seed = cfg.seed;
  const Corpus corpus = generate_synthetic(sc);
  corpus.emit(cfg.embeddings, cfg.interactions);

  const auto train = corpus.examples_for(Split::kTrain).size();
  const auto val = corpus.examples_for(Split::kValidation).size();
  const auto test = corpus.examples_for(Split::kTest).size();
  std::cout << "dataset statistics\n"
            << "  users            " << corpus.sequences().size() << "\n"
            << "  items            " << corpus.items().size() << "\n"
            << "  avg history len  " << short_num(corpus.mean_sequence_length()) << "\n"
            << "  train examples   " << train << "\n"
            << "  val examples     " << val << "\n"
            << "  test examples    " << test << "\n";
  return 0;
}

int cmd_fit_quantizer(const RunConfig& cfg) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg);
  Quantizer q =
      Quantizer::fit(corpus, cfg.sizes(), static_cast<int>(cfg.kmeans_iters), cfg.seed);
  q.build_neighbor_dict(static_cast<int>(cfg.neighbor_k));
  const std::filesystem::path path = cfg.quantizer_path.empty()
                                         ? artifacts_path(cfg, "quantizer.txt")
                                         : std::filesystem::path(cfg.quantizer_path);
  q.save(path);
  std::cout << "quantizer fitted: sizes " << cfg.codebook_sizes << ", max suffix "
            << q.max_suffix() << "\n";
  for (int l = 0; l <= 3; ++l)
    std::cout << "  residual energy after level " << l << ": "
              << short_num(q.mean_residual_energy(corpus, l)) << "\n";
  std::cout << "saved to " << path.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg);
  const Quantizer quantizer = obtain_quantizer(cfg, corpus, true);
  Trainer trainer(cfg, corpus, quantizer);
  const TrainResult res = trainer.run(cfg.artifacts);
  std::cout << "[train] done: epochs " << res.epochs_run << ", steps " << res.steps
            << ", best val_hit10 " << io::fmt(res.best_val_hit10) << " at epoch "
            << res.best_epoch << (res.early_stopped ? " (early stop)" : "") << "\n";
  return 0;
}

namespace {

void write_eval_artifacts(const RunConfig& cfg, const EvalOutput& ev) {
  io::write_file(artifacts_path(cfg, "metrics.json"), ev.metrics.dump(2) + "\n");

  std::string gates = "lo,hi,mean_gate,count\n";
  for (const auto& b : ev.metrics["gate_bins"])
    gates += std::to_string(b["lo"].get<int>()) + ',' + std::to_string(b["hi"].get<int>()) +
             ',' + io::fmt(b["mean_gate"].get<double>()) + ',' +
             std::to_string(b["count"].get<int>()) + '\n';
  io::write_file(artifacts_path(cfg, "gate_bins.csv"), gates);

  std::string crp = "depth,crp,eligible\n";
  const auto& crps = ev.metrics["crp"];
  const auto& elig = ev.metrics["crp_eligible"];
  for (std::size_t d = 0; d < crps.size(); ++d)
    crp += std::to_string(d + 1) + ',' + io::fmt(crps[d].get<double>()) + ',' +
           std::to_string(elig[d].get<int>()) + '\n';
  io::write_file(artifacts_path(cfg, "crp.csv"), crp);

  if (cfg.trace) {
    std::string lines;
    for (std::size_t i = 0; i < ev.beam_traces.size(); ++i) {
      nlohmann::ordered_json t;
      t["user"] = ev.user_ids[i];
      t["truth"] = ev.queries[i].truth;
      nlohmann::ordered_json depths = nlohmann::ordered_json::array();
      for (const auto& entries : ev.beam_traces[i].depths) {
        nlohmann::ordered_json beams = nlohmann::ordered_json::array();
        for (const auto& e : entries) {
          nlohmann::ordered_json b;
          b["tokens"] = e.tokens;
          b["logprob"] = e.logprob;
          beams.push_back(b);
        }
        depths.push_back(beams);
      }
      t["depths"] = depths;
      nlohmann::ordered_json gs = nlohmann::ordered_json::array();
      for (const auto& g : ev.beam_traces[i].gate_points)
        gs.push_back({g.ret_len, g.gate});
      t["gates"] = gs;
      lines += t.dump() + '\n';
    }
    io::write_file(artifacts_path(cfg, "trace.jsonl"), lines);
  }
}

}  // namespace

int cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg);
  const Quantizer quantizer = obtain_quantizer(cfg, corpus, false);
  const std::filesystem::path ckpt = cfg.checkpoint.empty()
                                         ? artifacts_path(cfg, "checkpoint.txt")
                                         : std::filesystem::path(cfg.checkpoint);
  const ModelParams<float> params = load_checkpoint(ckpt);
  if (!(params.cfg == cfg.model_config(quantizer)))
    throw ConfigError("checkpoint architecture does not match the current config");

  const EvalOutput ev = evaluate_model(cfg, params, corpus, quantizer, Split::kTest);
  write_eval_artifacts(cfg, ev);
  std::cout << "eval: " << ev.metrics["n_queries"] << " queries";
  if (ev.metrics["hit"].contains("10"))
    std::cout << ", hit@10 " << short_num(ev.metrics["hit"]["10"].get<double>())
              << ", ndcg@10 " << short_num(ev.metrics["ndcg"]["10"].get<double>());
  std::cout << "\nwrote " << artifacts_path(cfg, "metrics.json").string() << "\n";
  return 0;
}

namespace {

struct AblationRow {
  std::string name;
  nlohmann::ordered_json metrics;
};

void print_rows(const std::vector<AblationRow>& rows) {
  auto metric = [](const nlohmann::ordered_json& m, const char* group, const char* k) {
    if (!m.contains(group) || !m[group].contains(k)) return 0.0;
    return m[group][k].get<double>();
  };
  std::cout << std::left << std::setw(16) << "variant" << std::right << std::setw(9)
            << "hit@1" << std::setw(9) << "hit@5" << std::setw(9) << "hit@10"
            << std::setw(9) << "hit@20" << std::setw(9) << "ndcg@10" << std::setw(8)
            << "acc1" << std::setw(8) << "acc2" << std::setw(8) << "acc3" << "\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    std::cout << std::left << std::setw(16) << r.name << std::right << std::fixed
              << std::setprecision(4) << std::setw(9) << metric(m, "hit", "1")
              << std::setw(9) << metric(m, "hit", "5") << std::setw(9)
              << metric(m, "hit", "10") << std::setw(9) << metric(m, "hit", "20")
              << std::setw(9) << metric(m, "ndcg", "10");
    for (int l = 0; l < 3; ++l)
      std::cout << std::setw(8) << m["acc"][l].get<double>();
    std::cout << "\n";
  }
  std::cout.unsetf(std::ios::fixed);
  std::cout << std::setprecision(6);
  if (rows.size() > 1 && rows[0].metrics["hit"].contains("10")) {
    const double base = rows[0].metrics["hit"]["10"].get<double>();
    std::cout << "hit@10 deltas vs " << rows[0].name << ":\n";
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (!rows[i].metrics["hit"].contains("10")) continue;
      const double v = rows[i].metrics["hit"]["10"].get<double>();
      const double delta = base > 0 ? (v - base) / base * 100.0 : 0.0;
      std::cout << "  " << std::left << std::setw(16) << rows[i].name << (delta >= 0 ? "+" : "")
                << short_num(delta) << "%\n";
    }
  }
}

}  // namespace

int cmd_ablate(const RunConfig& cfg) {
  cfg.validate();
  const Corpus corpus = load_corpus(cfg);

  struct Variant {
    std::string name;
    bool sidtier, shs, aug;
    int k0 = 0;  // 0 keeps the configured first-level size
  };
  const auto base_sizes = cfg.sizes();
  std::vector<Variant> variants = {
      {"base", false, false, false, 0},
      {"sidtier", true, false, false, 0},
      {"sidtier_shs", true, true, false, 0},
      {"full", true, true, true, 0},
      {"full_k0_32", true, true, true, 32},
      {"full_k0_64", true, true, true, 64},
  };

  std::map<std::string, Quantizer> quantizer_cache;
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig rc = cfg;
    rc.use_sidtier = v.sidtier;
    rc.use_shs = v.shs;
    rc.use_neighbor_aug = v.aug;
    if (v.k0 > 0)
      rc.codebook_sizes = std::to_string(v.k0) + ',' + std::to_string(base_sizes[1]) + ',' +
                          std::to_string(base_sizes[2]);
    rc.artifacts = (std::filesystem::path(cfg.artifacts) / "ablate" / v.name).string();
    rc.quantizer_path.clear();
    std::filesystem::create_directories(rc.artifacts);

    auto cached = quantizer_cache.find(rc.codebook_sizes);
    if (cached == quantizer_cache.end()) {
      Quantizer q = Quantizer::fit(corpus, rc.sizes(),
                                   static_cast<int>(rc.kmeans_iters), rc.seed);
      cached = quantizer_cache.emplace(rc.codebook_sizes, std::move(q)).first;
    }
    Quantizer quantizer = cached->second;  // copy; neighbor k may differ per run
    quantizer.build_neighbor_dict(static_cast<int>(rc.neighbor_k));
    quantizer.save(std::filesystem::path(rc.artifacts) / "quantizer.txt");

    std::cout << "[ablate] " << v.name << "\n";
    Trainer trainer(rc, corpus, quantizer);
    const TrainResult res = trainer.run(rc.artifacts);
    const EvalOutput ev = evaluate_model(rc, res.params, corpus, quantizer, Split::kTest);
    RunConfig out_cfg = rc;
    out_cfg.trace = false;
    write_eval_artifacts(out_cfg, ev);
    rows.push_back({v.name, ev.metrics});
  }

  print_rows(rows);
  nlohmann::ordered_json all;
  for (const auto& r : rows) all[r.name] = r.metrics;
  io::write_file(artifacts_path(cfg, "ablation.json"), all.dump(2) + "\n");

  std::string csv = "variant,hit1,hit5,hit10,hit20,ndcg10,acc1,acc2,acc3\n";
  for (const auto& r : rows) {
    auto cell = [&](const char* group, const char* k) {
      // cuts above k_max are absent; leave their cells empty
      if (!r.metrics[group].contains(k)) return std::string();
      return io::fmt(r.metrics[group][k].get<double>());
    };
    csv += r.name;
    for (const char* k : {"1", "5", "10", "20"}) csv += ',' + cell("hit", k);
    csv += ',' + cell("ndcg", "10");
    for (int l = 0; l < 3; ++l) csv += ',' + io::fmt(r.metrics["acc"][l].get<double>());
    csv += '\n';
  }
  io::write_file(artifacts_path(cfg, "ablation.csv"), csv);
  return 0;
}

int cmd_report(const std::vector<std::string>& metric_files) {
  if (metric_files.empty()) throw ConfigError("report: at least one metrics file required");
  std::vector<AblationRow> rows;
  for (const auto& f : metric_files) {
    nlohmann::ordered_json m;
    try {
      m = nlohmann::ordered_json::parse(io::read_file(f));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("report: cannot parse " + f + ": " + e.what());
    }
    rows.push_back({std::filesystem::path(f).parent_path().filename().string() + "/" +
                        std::filesystem::path(f).stem().string(),
                    std::move(m)});
  }
  print_rows(rows);
  return 0;
}

}  // namespace genrec
