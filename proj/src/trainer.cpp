#include "genrec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "genrec/io.hpp"
#include "genrec/metrics.hpp"

namespace genrec {

Featurizer Featurizer::make(const RunConfig& cfg, const Corpus& corpus,
                            const Quantizer& quantizer) {
  Featurizer f;
  f.corpus = &corpus;
  f.quantizer = &quantizer;
  f.short_len = static_cast<int>(cfg.short_len);
  f.n_tiers = static_cast<int>(cfg.n_tiers);
  f.tau = static_cast<int>(cfg.tau);
  f.ret_cap = static_cast<int>(cfg.ret_cap);
  f.use_tier = cfg.use_sidtier;
  f.use_shs = cfg.use_shs;
  f.use_aug = cfg.use_neighbor_aug;
  const int n_suffix = quantizer.has_collisions() ? quantizer.max_suffix() + 1 : 0;
  f.vocab = Vocab::build(quantizer.sizes(), n_suffix);
  return f;
}

std::vector<int> Featurizer::item_level_tokens(std::int64_t id) const {
  const SemanticId& sid = quantizer->id_of(id);
  std::vector<int> toks(3);
  for (int l = 0; l < 3; ++l) toks[l] = vocab.token(l, sid.codes[l]);
  return toks;
}

std::array<int, 4> Featurizer::target_tokens(std::int64_t id) const {
  const SemanticId& sid = quantizer->id_of(id);
  std::array<int, 4> out{-1, -1, -1, -1};
  for (int l = 0; l < 3; ++l) out[l] = vocab.token(l, sid.codes[l]);
  if (vocab.n_levels() == 4) out[3] = vocab.token(3, sid.suffix);
  return out;
}

BatchItem Featurizer::make_item(const Example& ex) const {
  const auto& items = corpus->sequences()[ex.seq_index].items;
  const SplitSequence ss = split_sequence(items, short_len, ex.target_pos);

  BatchItem out;
  out.short_tokens.reserve(3 * ss.short_items.size());
  for (std::int64_t id : ss.short_items) {
    const auto toks = item_level_tokens(id);
    out.short_tokens.insert(out.short_tokens.end(), toks.begin(), toks.end());
  }
  if (use_tier)
    out.tier_flat = build_tier_feature(ss.long_items, *corpus, *quantizer, n_tiers);
  out.targets = target_tokens(ss.target);
  if (use_shs) {
    const RetrievalIndex idx = build_index(ss.long_items, *quantizer);
    const int c0 = quantizer->id_of(ss.target).codes[0];
    RetrievedContext ctx = hard_search(idx, c0, ret_cap);
    if (use_aug) ctx = augment_if_sparse(std::move(ctx), c0, *quantizer, idx, tau, ret_cap);
    out.ret_tokens = context_tokens(ctx, *quantizer, vocab);
    out.ret_items = static_cast<int>(ctx.item_ids.size());
  }
  return out;
}

Featurizer::EvalQuery Featurizer::make_query(const Example& ex) const {
  const auto& items = corpus->sequences()[ex.seq_index].items;
  const SplitSequence ss = split_sequence(items, short_len, ex.target_pos);

  EvalQuery q;
  q.short_tokens.reserve(3 * ss.short_items.size());
  for (std::int64_t id : ss.short_items) {
    const auto toks = item_level_tokens(id);
    q.short_tokens.insert(q.short_tokens.end(), toks.begin(), toks.end());
  }
  if (use_tier)
    q.tier_flat = build_tier_feature(ss.long_items, *corpus, *quantizer, n_tiers);
  q.index = build_index(ss.long_items, *quantizer);
  q.truth = ss.target;
  const auto targets = target_tokens(ss.target);
  for (int l = 0; l < vocab.n_levels(); ++l) q.truth_tokens.push_back(targets[l]);
  return q;
}

namespace {

std::vector<Example> capped_train_examples(const Corpus& corpus, int cap) {
  auto all = corpus.examples_for(Split::kTrain);
  if (cap <= 0) return all;
  std::map<int, std::vector<Example>> by_seq;
  for (const auto& e : all) by_seq[e.seq_index].push_back(e);
  std::vector<Example> out;
  for (auto& [seq, v] : by_seq) {
    std::sort(v.begin(), v.end(),
              [](const Example& a, const Example& b) { return a.target_pos < b.target_pos; });
    const int start = std::max(0, static_cast<int>(v.size()) - cap);
    out.insert(out.end(), v.begin() + start, v.end());
  }
  return out;
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg, const Corpus& corpus, const Quantizer& quantizer)
    : cfg_(cfg), corpus_(corpus), quantizer_(quantizer) {
  cfg_.validate();
  mc_ = cfg_.model_config(quantizer_);
  feat_ = Featurizer::make(cfg_, corpus_, quantizer_);

  const auto train_examples =
      capped_train_examples(corpus_, static_cast<int>(cfg_.max_train_targets));
  if (train_examples.empty()) throw DataError("trainer: no training examples");
  train_items_.reserve(train_examples.size());
  for (const auto& ex : train_examples) train_items_.push_back(feat_.make_item(ex));

  for (const auto& ex : corpus_.examples_for(Split::kValidation))
    val_queries_.push_back(feat_.make_query(ex));
}

double Trainer::validation_hit10(const ModelParams<float>& params) const {
  if (val_queries_.empty()) return 0.0;
  const PrefixTrie trie = PrefixTrie::build(quantizer_, feat_.vocab);
  BeamOptions opt;
  opt.beam_k = 10;
  opt.use_shs = cfg_.use_shs;
  opt.use_aug = cfg_.use_neighbor_aug;
  opt.tau = static_cast<int>(cfg_.tau);
  opt.ret_cap = static_cast<int>(cfg_.ret_cap);

  const int n = static_cast<int>(val_queries_.size());
  std::vector<char> hits(n, 0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& q = val_queries_[i];
    InferenceModel<float> model(params, q.short_tokens, q.tier_flat);
    const auto scored =
        beam_search(model, trie, feat_.vocab, quantizer_, q.index, opt, nullptr);
    const auto ranked = rank_for_eval(scored, 10);
    for (std::size_t r = 0; r < ranked.size(); ++r)
      if (ranked[r] == q.truth) {
        hits[i] = 1;
        break;
      }
  }
  int total = 0;
  for (char h : hits) total += h;
  return static_cast<double>(total) / n;
}

void Trainer::save_state(const std::filesystem::path& p) const {
  std::string out = "genrec-train-state 1\n";
  out += "hash " + cfg_.hash() + '\n';
  out += "counters " + std::to_string(step_) + ' ' + std::to_string(epoch_) + ' ' +
         io::fmt(best_metric_) + ' ' + std::to_string(best_epoch_) + ' ' +
         std::to_string(evals_since_best_) + '\n';
  out += "section params\n";
  append_tensor_blocks(out, params_);
  out += "section adam_m\n";
  append_tensor_blocks(out, adam_m_);
  out += "section adam_v\n";
  append_tensor_blocks(out, adam_v_);
  out += "end\n";
  io::write_file(p, out);
}

bool Trainer::load_state(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return false;
  const auto toks = io::tokenize(io::read_file(p));
  std::size_t i = 0;
  auto need = [&](const char* what) -> const std::string& {
    if (i >= toks.size())
      throw DataError(std::string("train state: truncated at ") + what);
    return toks[i++];
  };
  if (need("magic") != "genrec-train-state" || need("version") != "1")
    throw DataError("train state: bad header");
  if (need("hash") != "hash") throw DataError("train state: expected hash");
  const std::string h = need("hash value");
  if (h != cfg_.hash())
    throw ConfigError("train state was produced by a different config (hash " + h + ")");
  if (need("counters") != "counters") throw DataError("train state: expected counters");
  step_ = io::parse_int(need("step"), "train state step");
  epoch_ = static_cast<int>(io::parse_int(need("epoch"), "train state epoch"));
  best_metric_ = io::parse_double(need("best metric"), "train state best metric");
  best_epoch_ = static_cast<int>(io::parse_int(need("best epoch"), "train state best epoch"));
  evals_since_best_ =
      static_cast<int>(io::parse_int(need("evals since best"), "train state evals"));
  for (const char* section : {"params", "adam_m", "adam_v"}) {
    if (need("section") != "section" || need("section name") != section)
      throw DataError(std::string("train state: expected section ") + section);
    ModelParams<float>* dst = section == std::string("params")
                                  ? &params_
                                  : (section == std::string("adam_m") ? &adam_m_ : &adam_v_);
    read_tensor_blocks(toks, i, *dst);
  }
  if (need("end") != "end" || i != toks.size())
    throw DataError("train state: trailing content");
  return true;
}

TrainResult Trainer::run(const std::filesystem::path& artifacts_dir) {
  std::filesystem::create_directories(artifacts_dir);
  const auto state_path = artifacts_dir / "train_state.txt";
  const auto checkpoint_path = artifacts_dir / "checkpoint.txt";
  const auto csv_path = artifacts_dir / "training.csv";

#ifdef _OPENMP
  if (cfg_.threads > 0) omp_set_num_threads(static_cast<int>(cfg_.threads));
#endif

  params_.allocate(mc_);
  adam_m_.allocate(mc_);
  adam_v_.allocate(mc_);
  adam_m_.set_zero();
  adam_v_.set_zero();

  const bool resumed = load_state(state_path);
  if (!resumed) {
    params_.init(mc_, cfg_.seed);
    step_ = 0;
    epoch_ = 0;
    best_metric_ = -1.0;
    best_epoch_ = -1;
    evals_since_best_ = 0;
  }

  const int n_levels = mc_.vocab.n_levels();
  std::ofstream csv(csv_path, resumed ? std::ios::app : std::ios::trunc);
  if (!csv) throw DataError("cannot write " + csv_path.string());
  if (!resumed) {
    csv << "# config " << cfg_.hash() << "\n";
    csv << "step,loss";
    for (int l = 0; l < n_levels; ++l) csv << ",acc" << (l + 1);
    csv << "\n";
  }

  const int n_train = static_cast<int>(train_items_.size());
  const int batch_size = static_cast<int>(cfg_.batch_size);
  constexpr int kSlots = 16;  // fixed so the reduction order never varies
  std::vector<ModelParams<float>> slot_grads(std::min(kSlots, batch_size));
  for (auto& g : slot_grads) g.allocate(mc_);
  ModelParams<float> grad;
  grad.allocate(mc_);

  TrainResult result;
  bool stopped = false;
  std::cout << "[train] " << n_train << " examples, " << val_queries_.size()
            << " validation queries, vocab " << mc_.vocab.size() << ", hash "
            << cfg_.hash() << "\n";

  while (epoch_ < cfg_.max_epochs && !stopped) {
    std::vector<int> order(n_train);
    for (int i = 0; i < n_train; ++i) order[i] = i;
    Rng perm = Rng::derive(cfg_.seed, 0x45504f43ull, static_cast<std::uint64_t>(epoch_));
    perm.shuffle(order);

    for (int start = 0; start < n_train; start += batch_size) {
      const int bsz = std::min(batch_size, n_train - start);
      const int slots_used = std::min(static_cast<int>(slot_grads.size()), bsz);
      ++step_;

      std::vector<double> slot_loss(slots_used, 0.0);
      std::vector<std::array<long, 4>> slot_correct(slots_used, {0, 0, 0, 0});
      for (int s = 0; s < slots_used; ++s) slot_grads[s].set_zero();

#pragma omp parallel for schedule(static)
      for (int s = 0; s < slots_used; ++s) {
        for (int i = s; i < bsz; i += slots_used) {
          const BatchItem& item = train_items_[order[start + i]];
          Tape<float> tape;
          Rng drop = Rng::derive(cfg_.seed ^ 0xd0d0ull, static_cast<std::uint64_t>(step_),
                                 static_cast<std::uint64_t>(i));
          tape.set_training(true, &drop);
          ForwardStats st;
          const Ref loss = build_example_loss(tape, params_, &slot_grads[s], item, &st);
          tape.backward(loss, 1.0f / static_cast<float>(bsz));
          slot_loss[s] += st.loss;
          for (int l = 0; l < n_levels; ++l)
            if (st.correct[l]) ++slot_correct[s][l];
        }
      }

      grad.set_zero();
      auto gt = collect_tensors(grad);
      for (int s = 0; s < slots_used; ++s) {
        auto st = collect_tensors(slot_grads[s]);
        for (std::size_t t = 0; t < gt.size(); ++t) *gt[t].second += *st[t].second;
      }

      double batch_loss = 0.0;
      std::array<long, 4> correct{0, 0, 0, 0};
      for (int s = 0; s < slots_used; ++s) {
        batch_loss += slot_loss[s];
        for (int l = 0; l < n_levels; ++l) correct[l] += slot_correct[s][l];
      }
      batch_loss /= bsz;
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("non-finite loss at step " + std::to_string(step_));

      // AdamW with decoupled weight decay.
      const float lr = static_cast<float>(cfg_.lr);
      const float wd = static_cast<float>(cfg_.weight_decay);
      const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
      const float c1 = 1.0f - std::pow(b1, static_cast<float>(step_));
      const float c2 = 1.0f - std::pow(b2, static_cast<float>(step_));
      auto pt = collect_tensors(params_);
      auto mt = collect_tensors(adam_m_);
      auto vt = collect_tensors(adam_v_);
      for (std::size_t t = 0; t < pt.size(); ++t) {
        MatF& w = *pt[t].second;
        MatF& m = *mt[t].second;
        MatF& v = *vt[t].second;
        const MatF& g = *gt[t].second;
        m = b1 * m + (1.0f - b1) * g;
        v = (b2 * v.array() + (1.0f - b2) * g.array().square()).matrix();
        const auto mhat = m.array() / c1;
        const auto vhat = v.array() / c2;
        w.array() -= lr * (mhat / (vhat.sqrt() + eps) + wd * w.array());
      }

      csv << step_ << ',' << io::fmt(batch_loss);
      for (int l = 0; l < n_levels; ++l)
        csv << ',' << io::fmt(static_cast<double>(correct[l]) / bsz);
      csv << "\n";
    }
    ++epoch_;

    if (epoch_ % cfg_.eval_every == 0) {
      const double h10 = validation_hit10(params_);
      const bool improved = h10 > best_metric_;
      if (improved) {
        best_metric_ = h10;
        best_epoch_ = epoch_;
        evals_since_best_ = 0;
        save_checkpoint(checkpoint_path, params_, cfg_.hash());
      } else {
        ++evals_since_best_;
        if (evals_since_best_ >= cfg_.patience) {
          stopped = true;
          result.early_stopped = true;
        }
      }
      std::cout << "[train] epoch " << epoch_ << " step " << step_ << " val_hit10 "
                << io::fmt(h10) << (improved ? " *" : "") << "\n";
    }
  }
  csv.flush();

  if (best_epoch_ < 0) save_checkpoint(checkpoint_path, params_, cfg_.hash());
  save_state(state_path);

  result.params = best_epoch_ >= 0 ? load_checkpoint(checkpoint_path) : params_;
  result.best_val_hit10 = best_metric_;
  result.best_epoch = best_epoch_;
  result.epochs_run = epoch_;
  result.steps = step_;
  if (!result.params.all_finite())
    throw TrainingDiverged("non-finite parameters after training");
  return result;
}

}  // namespace genrec
