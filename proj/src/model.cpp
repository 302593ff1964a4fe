#include "genrec/model.hpp"

#include <numeric>

#include "genrec/io.hpp"

namespace genrec {

namespace {

template <typename S>
struct Binder {
  Tape<S>& t;
  std::unordered_map<const Mat<S>*, Mat<S>*> sinks;
  std::unordered_map<const Mat<S>*, Ref> cache;

  Ref operator()(const Mat<S>& m) {
    auto it = cache.find(&m);
    if (it != cache.end()) return it->second;
    Mat<S>* sink = nullptr;
    if (auto s = sinks.find(&m); s != sinks.end()) sink = s->second;
    Ref r = t.param(&m, sink);
    cache.emplace(&m, r);
    return r;
  }
};

std::vector<int> iota_rows(int n, int offset = 0) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), offset);
  return v;
}

// x*w + b with the product materialized before the broadcast add. Fusing the
// two lets Eigen pick a different product kernel for some shapes, which
// breaks bitwise agreement with the tape's matmul + add_rowvec pair.
template <typename S>
Mat<S> affine(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b) {
  Mat<S> out = x * w;
  out.rowwise() += b.row(0);
  return out;
}

}  // namespace

template <typename S>
Ref build_example_loss(Tape<S>& t, const ModelParams<S>& p, ModelParams<S>* grads,
                       const BatchItem& item, ForwardStats* stats) {
  const ModelConfig& cfg = p.cfg;
  const Vocab& vb = cfg.vocab;
  const int L = vb.n_levels();

  if (item.short_tokens.empty()) throw DataError("model: empty short history");
  if (static_cast<int>(item.short_tokens.size()) > 3 * cfg.short_len)
    throw DataError("model: short history exceeds short_len");
  if (item.ret_tokens.size() % 3 != 0) throw DataError("model: ragged retrieved tokens");
  if (static_cast<int>(item.ret_tokens.size()) > 3 * cfg.max_ret_items)
    throw DataError("model: retrieved context exceeds cap");
  for (int q = 0; q < L; ++q) {
    auto [lo, hi] = vb.range(q);
    if (item.targets[q] < lo || item.targets[q] >= hi)
      throw DataError("model: target token outside its level range");
  }
  if (cfg.use_tier && static_cast<int>(item.tier_flat.size()) != cfg.tier_inputs)
    throw DataError("model: tier feature length mismatch");

  Binder<S> P{t, {}, {}};
  if (grads) {
    auto src = collect_tensors(const_cast<ModelParams<S>&>(p));
    auto dst = collect_tensors(*grads);
    for (std::size_t i = 0; i < src.size(); ++i) P.sinks[src[i].second] = dst[i].second;
  }
  const double drop = cfg.dropout;

  auto attn_block = [&](const AttnP<S>& ap, Ref q_in, Ref kv_in, bool causal) {
    Ref q = t.add_rowvec(t.matmul(q_in, P(ap.wq)), P(ap.bq));
    Ref k = t.add_rowvec(t.matmul(kv_in, P(ap.wk)), P(ap.bk));
    Ref v = t.add_rowvec(t.matmul(kv_in, P(ap.wv)), P(ap.bv));
    Ref o = t.attention(q, k, v, cfg.heads, causal);
    return t.add_rowvec(t.matmul(o, P(ap.wo)), P(ap.bo));
  };
  auto ffn_block = [&](const FfnP<S>& fp, Ref x) {
    Ref h = t.relu(t.add_rowvec(t.matmul(x, P(fp.w1)), P(fp.b1)));
    return t.add_rowvec(t.matmul(h, P(fp.w2)), P(fp.b2));
  };
  auto ln = [&](const LnP<S>& lp, Ref x) { return t.layer_norm(x, P(lp.gamma), P(lp.beta)); };

  // Encoder over the short history, with the tier token appended last.
  Ref emb = P(p.embedding);
  Ref x = t.lookup(emb, item.short_tokens);
  std::vector<int> pos = iota_rows(static_cast<int>(item.short_tokens.size()));
  if (cfg.use_tier) {
    Mat<S> raw(1, cfg.tier_inputs);
    for (int j = 0; j < cfg.tier_inputs; ++j) {
      const double v = static_cast<double>(item.tier_flat[j]);
      raw(0, j) = static_cast<S>(cfg.tier_log1p ? std::log1p(v) : v);
    }
    Ref tf = t.constant(std::move(raw));
    Ref h = t.relu(t.add_rowvec(t.matmul(tf, P(p.tier_w1)), P(p.tier_b1)));
    Ref et = t.add_rowvec(t.matmul(h, P(p.tier_w2)), P(p.tier_b2));
    x = t.concat_rows(x, et);
    pos.push_back(cfg.enc_positions() - 1);  // stable slot for the tier token
  }
  x = t.add(x, t.lookup(P(p.enc_pos), pos));
  for (const auto& layer : p.enc) {
    Ref h = ln(layer.ln_attn, x);
    x = t.add(x, t.dropout(attn_block(layer.attn, h, h, false), drop));
    x = t.add(x, t.dropout(ffn_block(layer.ffn, ln(layer.ln_ffn, x)), drop));
  }
  Ref enc_out = x;

  // Decoder: row q predicts the level-q code.
  std::vector<int> dec_in(L);
  dec_in[0] = Vocab::kBos;
  for (int q = 1; q < L; ++q) dec_in[q] = item.targets[q - 1];
  Ref y = t.add(t.lookup(emb, dec_in), t.lookup(P(p.dec_pos), iota_rows(L)));

  const bool has_ret = !item.ret_tokens.empty();
  Ref eret = -1, mask = -1;
  if (has_ret) {
    eret = t.lookup(emb, item.ret_tokens);
    // Row 0 predicts the first code; no retrieved context exists for it yet.
    Mat<S> m = Mat<S>::Ones(L, cfg.d);
    m.row(0).setZero();
    mask = t.constant(std::move(m));
  }

  double gate_sum = 0.0;
  int gate_n = 0;
  for (const auto& layer : p.dec) {
    Ref h = ln(layer.ln_self, y);
    y = t.add(y, t.dropout(attn_block(layer.self_attn, h, h, true), drop));
    Ref h2 = ln(layer.ln_cross, y);
    Ref zs = attn_block(layer.cross_short, h2, enc_out, false);
    Ref zc;
    if (has_ret) {
      Ref zr = t.mul(attn_block(layer.cross_ret, h2, eret, false), mask);
      Ref g = t.mul(t.sigmoid(t.matmul(t.concat_cols(zs, zr), P(layer.gate_w))), mask);
      zc = t.add(t.mul(t.one_minus(g), zs), t.mul(g, zr));
      if (L > 1) {
        gate_sum += t.val(g).bottomRows(L - 1).template cast<double>().mean();
        ++gate_n;
      }
    } else {
      zc = zs;
    }
    y = t.add(y, t.dropout(zc, drop));
    y = t.add(y, t.dropout(ffn_block(layer.ffn, ln(layer.ln_ffn, y)), drop));
  }
  y = ln(p.final_ln, y);
  Ref logits = t.add_rowvec(t.matmul(y, P(p.w_out)), P(p.b_out));

  std::vector<Ref> losses;
  for (int q = 0; q < L; ++q) {
    auto [lo, hi] = vb.range(q);
    losses.push_back(t.cross_entropy(logits, q, item.targets[q], lo, hi));
  }
  Ref loss = t.add_scalars(losses);

  if (stats) {
    stats->loss = static_cast<double>(t.val(loss)(0, 0));
    stats->logits = t.val(logits).template cast<float>();
    for (int q = 0; q < L; ++q) {
      auto [lo, hi] = vb.range(q);
      int best = lo;
      for (int j = lo + 1; j < hi; ++j)
        if (stats->logits(q, j) > stats->logits(q, best)) best = j;
      stats->pred[q] = best;
      stats->correct[q] = best == item.targets[q];
    }
    stats->gate_mean = gate_n > 0 ? gate_sum / gate_n : 0.0;
  }
  return loss;
}

template <typename S>
InferenceModel<S>::InferenceModel(const ModelParams<S>& p,
                                  const std::vector<int>& short_tokens,
                                  const std::vector<float>& tier_flat)
    : p_(p) {
  const ModelConfig& cfg = p.cfg;
  if (short_tokens.empty()) throw DataError("model: empty short history");
  const int n = static_cast<int>(short_tokens.size());
  const int rows = n + (cfg.use_tier ? 1 : 0);

  Mat<S> x(rows, cfg.d);
  for (int i = 0; i < n; ++i) x.row(i) = p.embedding.row(short_tokens[i]);
  if (cfg.use_tier) {
    if (static_cast<int>(tier_flat.size()) != cfg.tier_inputs)
      throw DataError("model: tier feature length mismatch");
    Mat<S> raw(1, cfg.tier_inputs);
    for (int j = 0; j < cfg.tier_inputs; ++j) {
      const double v = static_cast<double>(tier_flat[j]);
      raw(0, j) = static_cast<S>(cfg.tier_log1p ? std::log1p(v) : v);
    }
    Mat<S> h = affine(raw, p.tier_w1, p.tier_b1).cwiseMax(static_cast<S>(0)).eval();
    x.row(n) = affine(h, p.tier_w2, p.tier_b2).row(0);
  }
  for (int i = 0; i < n; ++i) x.row(i) += p.enc_pos.row(i);
  if (cfg.use_tier) x.row(n) += p.enc_pos.row(p.enc_pos.rows() - 1);

  for (const auto& layer : p.enc) {
    Mat<S> h = layer_norm_forward(x, layer.ln_attn.gamma, layer.ln_attn.beta);
    Mat<S> q = affine(h, layer.attn.wq, layer.attn.bq);
    Mat<S> k = affine(h, layer.attn.wk, layer.attn.bk);
    Mat<S> v = affine(h, layer.attn.wv, layer.attn.bv);
    Mat<S> a = attention_forward(q, k, v, cfg.heads, false);
    x += affine(a, layer.attn.wo, layer.attn.bo);
    Mat<S> h2 = layer_norm_forward(x, layer.ln_ffn.gamma, layer.ln_ffn.beta);
    Mat<S> f = affine(h2, layer.ffn.w1, layer.ffn.b1).cwiseMax(static_cast<S>(0)).eval();
    x += affine(f, layer.ffn.w2, layer.ffn.b2);
  }
  enc_out_ = std::move(x);

  enc_k_.reserve(p.dec.size());
  enc_v_.reserve(p.dec.size());
  for (const auto& layer : p.dec) {
    enc_k_.push_back(affine(enc_out_, layer.cross_short.wk, layer.cross_short.bk));
    enc_v_.push_back(affine(enc_out_, layer.cross_short.wv, layer.cross_short.bv));
  }
}

template <typename S>
typename InferenceModel<S>::Step InferenceModel<S>::step(
    const std::vector<int>& prefix, const std::vector<int>& ret_tokens, int level) const {
  const ModelConfig& cfg = p_.cfg;
  const Vocab& vb = cfg.vocab;
  const int L = static_cast<int>(prefix.size());
  if (L < 1 || L > vb.n_levels()) throw DataError("decode: bad prefix length");
  if (level < 0 || level >= vb.n_levels()) throw DataError("decode: bad level");

  Mat<S> y(L, cfg.d);
  for (int i = 0; i < L; ++i)
    y.row(i) = p_.embedding.row(prefix[i]) + p_.dec_pos.row(i);

  const bool has_ret = !ret_tokens.empty();
  Mat<S> eret;
  if (has_ret) {
    eret.resize(static_cast<Eigen::Index>(ret_tokens.size()), cfg.d);
    for (std::size_t i = 0; i < ret_tokens.size(); ++i)
      eret.row(static_cast<Eigen::Index>(i)) = p_.embedding.row(ret_tokens[i]);
  }

  double gate_sum = 0.0;
  int gate_n = 0;
  for (std::size_t li = 0; li < p_.dec.size(); ++li) {
    const auto& layer = p_.dec[li];
    Mat<S> h = layer_norm_forward(y, layer.ln_self.gamma, layer.ln_self.beta);
    {
      Mat<S> q = affine(h, layer.self_attn.wq, layer.self_attn.bq);
      Mat<S> k = affine(h, layer.self_attn.wk, layer.self_attn.bk);
      Mat<S> v = affine(h, layer.self_attn.wv, layer.self_attn.bv);
      Mat<S> a = attention_forward(q, k, v, cfg.heads, true);
      y += affine(a, layer.self_attn.wo, layer.self_attn.bo);
    }
    Mat<S> h2 = layer_norm_forward(y, layer.ln_cross.gamma, layer.ln_cross.beta);
    Mat<S> zs;
    {
      Mat<S> q = affine(h2, layer.cross_short.wq, layer.cross_short.bq);
      Mat<S> a = attention_forward(q, enc_k_[li], enc_v_[li], cfg.heads, false);
      zs = affine(a, layer.cross_short.wo, layer.cross_short.bo);
    }
    Mat<S> zc;
    if (has_ret) {
      Mat<S> q = affine(h2, layer.cross_ret.wq, layer.cross_ret.bq);
      Mat<S> k = affine(eret, layer.cross_ret.wk, layer.cross_ret.bk);
      Mat<S> v = affine(eret, layer.cross_ret.wv, layer.cross_ret.bv);
      Mat<S> a = attention_forward(q, k, v, cfg.heads, false);
      Mat<S> zr = affine(a, layer.cross_ret.wo, layer.cross_ret.bo);
      zr.row(0).setZero();
      Mat<S> gin(L, 2 * cfg.d);
      gin.leftCols(cfg.d) = zs;
      gin.rightCols(cfg.d) = zr;
      Mat<S> g = gin * layer.gate_w;
      g = (static_cast<S>(1) / (static_cast<S>(1) + (-g.array()).exp())).matrix();
      g.row(0).setZero();
      Mat<S> ones = Mat<S>::Constant(L, cfg.d, static_cast<S>(1));
      zc = (ones - g).cwiseProduct(zs) + g.cwiseProduct(zr);
      gate_sum += g.row(L - 1).template cast<double>().mean();
      ++gate_n;
    } else {
      zc = zs;
    }
    y += zc;
    Mat<S> h3 = layer_norm_forward(y, layer.ln_ffn.gamma, layer.ln_ffn.beta);
    Mat<S> f = affine(h3, layer.ffn.w1, layer.ffn.b1).cwiseMax(static_cast<S>(0)).eval();
    y += affine(f, layer.ffn.w2, layer.ffn.b2);
  }
  Mat<S> yn = layer_norm_forward(y, p_.final_ln.gamma, p_.final_ln.beta);
  Mat<S> logits = affine(yn, p_.w_out, p_.b_out);

  Step out;
  auto [lo, hi] = vb.range(level);
  out.logprobs = log_softmax_segment(logits, L - 1, lo, hi);
  out.gate_mean = gate_n > 0 ? gate_sum / gate_n : 0.0;
  return out;
}

namespace {

std::string arch_line(const ModelConfig& c) {
  std::string s = "arch";
  auto add = [&s](std::int64_t v) { s += ' ' + std::to_string(v); };
  add(c.d);
  add(c.heads);
  add(c.kv_dim);
  add(c.enc_blocks);
  add(c.dec_blocks);
  add(c.ffn_dim);
  add(c.tier_hidden);
  add(c.tier_inputs);
  s += ' ';
  s += io::fmt(c.dropout);
  add(c.short_len);
  add(c.use_tier ? 1 : 0);
  add(c.tier_log1p ? 1 : 0);
  add(c.max_ret_items);
  add(c.vocab.count[0]);
  add(c.vocab.count[1]);
  add(c.vocab.count[2]);
  add(c.vocab.count[3]);
  return s;
}

}  // namespace

void append_tensor_blocks(std::string& out, const ModelParams<float>& params) {
  for_each_tensor(params, [&out](const std::string& name, const MatF& m) {
    out += "tensor " + name + ' ' + std::to_string(m.rows()) + ' ' +
           std::to_string(m.cols()) + '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) out += ' ';
        out += io::fmt(m(r, c));
      }
      out += '\n';
    }
  });
}

void read_tensor_blocks(const std::vector<std::string>& toks, std::size_t& i,
                        ModelParams<float>& params) {
  auto need = [&](const char* what) -> const std::string& {
    if (i >= toks.size())
      throw DataError(std::string("tensor block: truncated at ") + what);
    return toks[i++];
  };
  auto tensors = collect_tensors(params);
  for (auto& [name, m] : tensors) {
    if (need("tensor") != "tensor") throw DataError("tensor block: expected tensor");
    if (need("tensor name") != name)
      throw DataError("tensor block: unexpected tensor order near " + name);
    const auto rows = io::parse_int(need("rows"), "tensor rows");
    const auto cols = io::parse_int(need("cols"), "tensor cols");
    if (rows != m->rows() || cols != m->cols())
      throw DataError("tensor block: shape mismatch for " + name);
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index col = 0; col < m->cols(); ++col)
        (*m)(r, col) =
            static_cast<float>(io::parse_double(need("value"), "tensor value"));
  }
}

void save_checkpoint(const std::filesystem::path& p, const ModelParams<float>& params,
                     const std::string& config_hash) {
  std::string out = "genrec-model 1\n";
  out += "hash " + (config_hash.empty() ? std::string("-") : config_hash) + '\n';
  out += arch_line(params.cfg) + '\n';
  append_tensor_blocks(out, params);
  out += "end\n";
  io::write_file(p, out);
}

ModelParams<float> load_checkpoint(const std::filesystem::path& p,
                                   std::string* config_hash) {
  const auto toks = io::tokenize(io::read_file(p));
  std::size_t i = 0;
  auto need = [&](const char* what) -> const std::string& {
    if (i >= toks.size())
      throw DataError(std::string("checkpoint: truncated at ") + what);
    return toks[i++];
  };
  auto need_int = [&](const char* what) {
    return io::parse_int(need(what), std::string("checkpoint ") + what);
  };
  if (need("magic") != "genrec-model" || need("version") != "1")
    throw DataError("checkpoint: bad header");
  if (need("hash") != "hash") throw DataError("checkpoint: expected hash");
  const std::string hash = need("hash value");
  if (config_hash) *config_hash = hash == "-" ? "" : hash;

  if (need("arch") != "arch") throw DataError("checkpoint: expected arch");
  ModelConfig c;
  c.d = static_cast<int>(need_int("d"));
  c.heads = static_cast<int>(need_int("heads"));
  c.kv_dim = static_cast<int>(need_int("kv_dim"));
  c.enc_blocks = static_cast<int>(need_int("enc_blocks"));
  c.dec_blocks = static_cast<int>(need_int("dec_blocks"));
  c.ffn_dim = static_cast<int>(need_int("ffn_dim"));
  c.tier_hidden = static_cast<int>(need_int("tier_hidden"));
  c.tier_inputs = static_cast<int>(need_int("tier_inputs"));
  c.dropout = io::parse_double(need("dropout"), "checkpoint dropout");
  c.short_len = static_cast<int>(need_int("short_len"));
  c.use_tier = need_int("use_tier") != 0;
  c.tier_log1p = need_int("tier_log1p") != 0;
  c.max_ret_items = static_cast<int>(need_int("max_ret_items"));
  std::array<int, 3> sizes{};
  for (int l = 0; l < 3; ++l) sizes[l] = static_cast<int>(need_int("vocab level"));
  const int n_suffix = static_cast<int>(need_int("vocab suffix"));
  c.vocab = Vocab::build(sizes, n_suffix);

  ModelParams<float> params;
  params.allocate(c);
  read_tensor_blocks(toks, i, params);
  if (need("end") != "end" || i != toks.size())
    throw DataError("checkpoint: trailing content");
  return params;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template Ref build_example_loss<float>(Tape<float>&, const ModelParams<float>&,
                                       ModelParams<float>*, const BatchItem&, ForwardStats*);
template Ref build_example_loss<double>(Tape<double>&, const ModelParams<double>&,
                                        ModelParams<double>*, const BatchItem&, ForwardStats*);
template class InferenceModel<float>;
template class InferenceModel<double>;

}  // namespace genrec
