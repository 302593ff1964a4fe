#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "genrec/nn.hpp"

namespace genrec {

// Token layout: 0 = pad, 1 = bos, then one contiguous block per code level.
// A fourth block holds collision-suffix tokens and exists only when the
// catalog actually has collisions.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;

  std::array<int, 4> begin{0, 0, 0, 0};
  std::array<int, 4> count{0, 0, 0, 0};
  int total = 2;

  static Vocab build(const std::array<int, 3>& sizes, int n_suffix) {
    Vocab v;
    int at = 2;
    for (int l = 0; l < 3; ++l) {
      v.begin[l] = at;
      v.count[l] = sizes[l];
      at += sizes[l];
    }
    v.begin[3] = at;
    v.count[3] = n_suffix;
    at += n_suffix;
    v.total = at;
    return v;
  }

  int n_levels() const { return count[3] > 0 ? 4 : 3; }
  int size() const { return total; }

  int token(int level, int code) const {
    if (level < 0 || level >= 4 || code < 0 || code >= count[level])
      throw std::out_of_range("vocab: code out of range");
    return begin[level] + code;
  }
  int code(int level, int tok) const { return tok - begin[level]; }
  std::pair<int, int> range(int level) const {
    return {begin[level], begin[level] + count[level]};
  }

  bool operator==(const Vocab& o) const {
    return begin == o.begin && count == o.count && total == o.total;
  }
};

struct ModelConfig {
  int d = 96;
  int heads = 8;
  int kv_dim = 32;
  int enc_blocks = 4;
  int dec_blocks = 4;
  int ffn_dim = 384;
  int tier_hidden = 256;
  int tier_inputs = 0;  // first-level codewords * tiers; 0 when tier is off
  double dropout = 0.1;
  int short_len = 50;
  bool use_tier = true;
  bool tier_log1p = true;
  int max_ret_items = 64;
  Vocab vocab;

  int inner_dim() const { return heads * kv_dim; }
  int enc_positions() const { return 3 * short_len + (use_tier ? 1 : 0); }

  bool operator==(const ModelConfig& o) const {
    return d == o.d && heads == o.heads && kv_dim == o.kv_dim &&
           enc_blocks == o.enc_blocks && dec_blocks == o.dec_blocks &&
           ffn_dim == o.ffn_dim && tier_hidden == o.tier_hidden &&
           tier_inputs == o.tier_inputs && dropout == o.dropout &&
           short_len == o.short_len && use_tier == o.use_tier &&
           tier_log1p == o.tier_log1p && max_ret_items == o.max_ret_items &&
           vocab == o.vocab;
  }
};

template <typename S>
struct AttnP {
  Mat<S> wq, bq, wk, bk, wv, bv, wo, bo;
};
template <typename S>
struct LnP {
  Mat<S> gamma, beta;
};
template <typename S>
struct FfnP {
  Mat<S> w1, b1, w2, b2;
};
template <typename S>
struct EncLayerP {
  LnP<S> ln_attn;
  AttnP<S> attn;
  LnP<S> ln_ffn;
  FfnP<S> ffn;
};
template <typename S>
struct DecLayerP {
  LnP<S> ln_self;
  AttnP<S> self_attn;
  LnP<S> ln_cross;
  AttnP<S> cross_short;
  AttnP<S> cross_ret;
  Mat<S> gate_w;  // 2d x d
  LnP<S> ln_ffn;
  FfnP<S> ffn;
};

template <typename S>
struct ModelParams {
  ModelConfig cfg;
  Mat<S> embedding;  // vocab x d
  Mat<S> enc_pos;    // enc_positions x d
  Mat<S> dec_pos;    // n_levels x d
  Mat<S> tier_w1, tier_b1, tier_w2, tier_b2;
  std::vector<EncLayerP<S>> enc;
  std::vector<DecLayerP<S>> dec;
  LnP<S> final_ln;
  Mat<S> w_out, b_out;

  void allocate(const ModelConfig& c);
  void init(const ModelConfig& c, std::uint64_t seed);
  void set_zero();
  bool all_finite() const;

  template <typename T>
  ModelParams<T> cast() const;
};

// Fixed-order traversal of every tensor; the single source of truth for
// initialization order, optimizer state layout, and serialization.
template <typename S, typename F>
void for_each_tensor(ModelParams<S>& p, F&& fn);
template <typename S, typename F>
void for_each_tensor(const ModelParams<S>& p, F&& fn);

template <typename S>
std::vector<std::pair<std::string, Mat<S>*>> collect_tensors(ModelParams<S>& p);

// One training or scoring example, already tokenized.
struct BatchItem {
  std::vector<int> short_tokens;   // 3 per short-history item
  std::vector<float> tier_flat;    // raw tier counts; empty when tier is off
  std::vector<int> ret_tokens;     // 3 per retrieved item; empty disables fusion
  int ret_items = 0;
  std::array<int, 4> targets{-1, -1, -1, -1};  // token id per level
};

struct ForwardStats {
  double loss = 0.0;
  std::array<int, 4> pred{-1, -1, -1, -1};
  std::array<bool, 4> correct{false, false, false, false};
  double gate_mean = 0.0;  // mean over layers; 0 when no context attached
  MatF logits;             // n_levels x vocab (always float for reporting)
};

// Builds the full forward graph and summed cross-entropy loss for one
// example. Gradients flow into *grads (may be null for loss-only passes).
// Dropout fires only when tape.training() is set.
template <typename S>
Ref build_example_loss(Tape<S>& tape, const ModelParams<S>& p, ModelParams<S>* grads,
                       const BatchItem& item, ForwardStats* stats = nullptr);

// No-tape forward pass for decoding: the encoder runs once, cross-attention
// keys/values over it are cached, and each step re-scores a short decoder
// prefix. Matches build_example_loss bit for bit in eval mode.
template <typename S>
class InferenceModel {
 public:
  InferenceModel(const ModelParams<S>& p, const std::vector<int>& short_tokens,
                 const std::vector<float>& tier_flat);

  struct Step {
    Vec<S> logprobs;   // over the level's code range
    double gate_mean;  // 0 when no context attached
  };

  // prefix = decoder input tokens ([bos, chosen so far]); level = index of
  // the code being predicted; ret_tokens may be empty.
  Step step(const std::vector<int>& prefix, const std::vector<int>& ret_tokens,
            int level) const;

  const Mat<S>& encoder_output() const { return enc_out_; }

 private:
  const ModelParams<S>& p_;
  Mat<S> enc_out_;
  std::vector<Mat<S>> enc_k_, enc_v_;  // per decoder layer
};

void save_checkpoint(const std::filesystem::path& p, const ModelParams<float>& params,
                     const std::string& config_hash);
ModelParams<float> load_checkpoint(const std::filesystem::path& p,
                                   std::string* config_hash = nullptr);

// Tensor blocks shared by checkpoints and trainer state files.
void append_tensor_blocks(std::string& out, const ModelParams<float>& params);
void read_tensor_blocks(const std::vector<std::string>& toks, std::size_t& i,
                        ModelParams<float>& params);

// ---------------------------------------------------------------------------
// Implementation.
// ---------------------------------------------------------------------------

template <typename S, typename F>
void visit_attn(AttnP<S>& a, const std::string& prefix, F&& fn) {
  fn(prefix + ".wq", a.wq);
  fn(prefix + ".bq", a.bq);
  fn(prefix + ".wk", a.wk);
  fn(prefix + ".bk", a.bk);
  fn(prefix + ".wv", a.wv);
  fn(prefix + ".bv", a.bv);
  fn(prefix + ".wo", a.wo);
  fn(prefix + ".bo", a.bo);
}

template <typename S, typename F>
void visit_ln(LnP<S>& l, const std::string& prefix, F&& fn) {
  fn(prefix + ".gamma", l.gamma);
  fn(prefix + ".beta", l.beta);
}

template <typename S, typename F>
void visit_ffn(FfnP<S>& f, const std::string& prefix, F&& fn) {
  fn(prefix + ".w1", f.w1);
  fn(prefix + ".b1", f.b1);
  fn(prefix + ".w2", f.w2);
  fn(prefix + ".b2", f.b2);
}

template <typename S, typename F>
void for_each_tensor(ModelParams<S>& p, F&& fn) {
  fn("embedding", p.embedding);
  fn("enc_pos", p.enc_pos);
  fn("dec_pos", p.dec_pos);
  if (p.cfg.use_tier) {
    fn("tier.w1", p.tier_w1);
    fn("tier.b1", p.tier_b1);
    fn("tier.w2", p.tier_w2);
    fn("tier.b2", p.tier_b2);
  }
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    const std::string pre = "enc." + std::to_string(i);
    visit_ln(p.enc[i].ln_attn, pre + ".ln_attn", fn);
    visit_attn(p.enc[i].attn, pre + ".attn", fn);
    visit_ln(p.enc[i].ln_ffn, pre + ".ln_ffn", fn);
    visit_ffn(p.enc[i].ffn, pre + ".ffn", fn);
  }
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    const std::string pre = "dec." + std::to_string(i);
    visit_ln(p.dec[i].ln_self, pre + ".ln_self", fn);
    visit_attn(p.dec[i].self_attn, pre + ".self", fn);
    visit_ln(p.dec[i].ln_cross, pre + ".ln_cross", fn);
    visit_attn(p.dec[i].cross_short, pre + ".cross_short", fn);
    visit_attn(p.dec[i].cross_ret, pre + ".cross_ret", fn);
    fn(pre + ".gate_w", p.dec[i].gate_w);
    visit_ln(p.dec[i].ln_ffn, pre + ".ln_ffn", fn);
    visit_ffn(p.dec[i].ffn, pre + ".ffn", fn);
  }
  visit_ln(p.final_ln, "final_ln", fn);
  fn("w_out", p.w_out);
  fn("b_out", p.b_out);
}

template <typename S, typename F>
void for_each_tensor(const ModelParams<S>& p, F&& fn) {
  for_each_tensor(const_cast<ModelParams<S>&>(p),
                  [&fn](const std::string& name, Mat<S>& m) {
                    fn(name, static_cast<const Mat<S>&>(m));
                  });
}

template <typename S>
std::vector<std::pair<std::string, Mat<S>*>> collect_tensors(ModelParams<S>& p) {
  std::vector<std::pair<std::string, Mat<S>*>> out;
  for_each_tensor(p, [&out](const std::string& name, Mat<S>& m) {
    out.emplace_back(name, &m);
  });
  return out;
}

template <typename S>
void ModelParams<S>::allocate(const ModelConfig& c) {
  cfg = c;
  const int d = c.d;
  const int inner = c.inner_dim();
  auto attn = [&](AttnP<S>& a) {
    a.wq.resize(d, inner);
    a.bq.resize(1, inner);
    a.wk.resize(d, inner);
    a.bk.resize(1, inner);
    a.wv.resize(d, inner);
    a.bv.resize(1, inner);
    a.wo.resize(inner, d);
    a.bo.resize(1, d);
  };
  auto ln = [&](LnP<S>& l) {
    l.gamma.resize(1, d);
    l.beta.resize(1, d);
  };
  auto ffn = [&](FfnP<S>& f) {
    f.w1.resize(d, c.ffn_dim);
    f.b1.resize(1, c.ffn_dim);
    f.w2.resize(c.ffn_dim, d);
    f.b2.resize(1, d);
  };

  embedding.resize(c.vocab.size(), d);
  enc_pos.resize(c.enc_positions(), d);
  dec_pos.resize(c.vocab.n_levels(), d);
  if (c.use_tier) {
    tier_w1.resize(c.tier_inputs, c.tier_hidden);
    tier_b1.resize(1, c.tier_hidden);
    tier_w2.resize(c.tier_hidden, d);
    tier_b2.resize(1, d);
  }
  enc.resize(c.enc_blocks);
  for (auto& l : enc) {
    ln(l.ln_attn);
    attn(l.attn);
    ln(l.ln_ffn);
    ffn(l.ffn);
  }
  dec.resize(c.dec_blocks);
  for (auto& l : dec) {
    ln(l.ln_self);
    attn(l.self_attn);
    ln(l.ln_cross);
    attn(l.cross_short);
    attn(l.cross_ret);
    l.gate_w.resize(2 * d, d);
    ln(l.ln_ffn);
    ffn(l.ffn);
  }
  ln(final_ln);
  w_out.resize(d, c.vocab.size());
  b_out.resize(1, c.vocab.size());
}

template <typename S>
void ModelParams<S>::init(const ModelConfig& c, std::uint64_t seed) {
  allocate(c);
  Rng rng = Rng::derive(seed, 0x494e4954ull);  // init stream
  for_each_tensor(*this, [&rng](const std::string& name, Mat<S>& m) {
    const bool is_gamma = name.size() >= 5 && name.rfind("gamma") == name.size() - 5;
    const bool is_bias = !is_gamma && (m.rows() == 1 || name.rfind("beta") != std::string::npos);
    if (is_gamma) {
      m.setOnes();
    } else if (is_bias) {
      m.setZero();
    } else {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
          m(i, j) = static_cast<S>(0.02 * rng.normal());
    }
  });
}

template <typename S>
void ModelParams<S>::set_zero() {
  for_each_tensor(*this, [](const std::string&, Mat<S>& m) { m.setZero(); });
}

template <typename S>
bool ModelParams<S>::all_finite() const {
  bool ok = true;
  for_each_tensor(*this, [&ok](const std::string&, const Mat<S>& m) {
    if (!m.allFinite()) ok = false;
  });
  return ok;
}

template <typename S>
template <typename T>
ModelParams<T> ModelParams<S>::cast() const {
  ModelParams<T> out;
  out.allocate(cfg);
  auto src = collect_tensors(const_cast<ModelParams<S>&>(*this));
  auto dst = collect_tensors(out);
  for (std::size_t i = 0; i < src.size(); ++i)
    *dst[i].second = src[i].second->template cast<T>();
  return out;
}

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;
extern template Ref build_example_loss<float>(Tape<float>&, const ModelParams<float>&,
                                              ModelParams<float>*, const BatchItem&,
                                              ForwardStats*);
extern template Ref build_example_loss<double>(Tape<double>&, const ModelParams<double>&,
                                               ModelParams<double>*, const BatchItem&,
                                               ForwardStats*);
extern template class InferenceModel<float>;
extern template class InferenceModel<double>;
extern template ModelParams<double> ModelParams<float>::cast<double>() const;
extern template ModelParams<float> ModelParams<double>::cast<float>() const;

}  // namespace genrec
