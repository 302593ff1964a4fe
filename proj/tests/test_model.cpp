#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "genrec/io.hpp"
#include "genrec/model.hpp"

using namespace genrec;

namespace {

ModelConfig toy_config(int d = 8, int heads = 2, bool use_tier = false,
                       std::array<int, 3> sizes = {5, 6, 7}, int n_suffix = 0) {
  ModelConfig c;
  c.d = d;
  c.heads = heads;
  c.kv_dim = d / heads;
  c.enc_blocks = 1;
  c.dec_blocks = 2;
  c.ffn_dim = 2 * d;
  c.tier_hidden = 6;
  c.tier_inputs = use_tier ? sizes[0] * 2 : 0;
  c.dropout = 0.0;
  c.short_len = 6;
  c.use_tier = use_tier;
  c.max_ret_items = 8;
  c.vocab = Vocab::build(sizes, n_suffix);
  return c;
}

template <typename S>
ModelParams<S> make_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams<S> p;
  p.init(c, seed);
  return p;
}

BatchItem toy_item(const Vocab& vb, Rng& rng, int n_short_items, int n_ret_items,
                   int tier_inputs = 0) {
  BatchItem it;
  for (int i = 0; i < n_short_items; ++i)
    for (int l = 0; l < 3; ++l)
      it.short_tokens.push_back(vb.token(l, rng.uniform_int(vb.count[l])));
  for (int i = 0; i < n_ret_items; ++i)
    for (int l = 0; l < 3; ++l)
      it.ret_tokens.push_back(vb.token(l, rng.uniform_int(vb.count[l])));
  it.ret_items = n_ret_items;
  for (int q = 0; q < vb.n_levels(); ++q)
    it.targets[q] = vb.token(q, rng.uniform_int(vb.count[q]));
  for (int j = 0; j < tier_inputs; ++j)
    it.tier_flat.push_back(static_cast<float>(rng.uniform_int(5)));
  return it;
}

}  // namespace

TEST_CASE("zeroed blocks turn the encoder into a pass-through") {
  auto cfg = toy_config();
  auto p = make_params<float>(cfg, 1);
  p.set_zero();
  Rng rng(2);
  for (int i = 0; i < p.embedding.size(); ++i)
    *(p.embedding.data() + i) = static_cast<float>(rng.normal());
  for (int i = 0; i < p.enc_pos.size(); ++i)
    *(p.enc_pos.data() + i) = static_cast<float>(rng.normal());

  std::vector<int> toks = {2, 3, 4, 2, 5};
  InferenceModel<float> m(p, toks, {});
  const MatF& out = m.encoder_output();
  REQUIRE(out.rows() == 5);
  REQUIRE(out.cols() == cfg.d);
  for (int i = 0; i < 5; ++i) {
    VecF expect = p.embedding.row(toks[i]) + p.enc_pos.row(i);
    CHECK((out.row(i).transpose() - expect).cwiseAbs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("encoder output length equals input length, tier adds one row") {
  auto cfg = toy_config(8, 2, true);
  auto p = make_params<float>(cfg, 3);
  Rng rng(4);
  auto item = toy_item(cfg.vocab, rng, 4, 0, cfg.tier_inputs);
  InferenceModel<float> m(p, item.short_tokens, item.tier_flat);
  CHECK(m.encoder_output().rows() == 13);  // 12 short tokens + tier token

  auto cfg2 = toy_config(8, 2, false);
  auto p2 = make_params<float>(cfg2, 3);
  InferenceModel<float> m2(p2, item.short_tokens, {});
  CHECK(m2.encoder_output().rows() == 12);
}

TEST_CASE("inference session matches the training tape bit for bit") {
  for (bool with_ret : {false, true}) {
    auto cfg = toy_config(8, 2, true);
    auto p = make_params<float>(cfg, 7);
    Rng rng(11);
    auto item = toy_item(cfg.vocab, rng, 5, with_ret ? 4 : 0, cfg.tier_inputs);

    Tape<float> t;
    ForwardStats st;
    build_example_loss<float>(t, p, nullptr, item, &st);

    InferenceModel<float> m(p, item.short_tokens, item.tier_flat);
    std::vector<int> prefix = {Vocab::kBos};
    for (int q = 0; q < cfg.vocab.n_levels(); ++q) {
      auto step = m.step(prefix, item.ret_tokens, q);
      auto [lo, hi] = cfg.vocab.range(q);
      REQUIRE(step.logprobs.size() == hi - lo);
      VecF tape_lp = log_softmax_segment(st.logits, q, lo, hi);
      CHECK((step.logprobs - tape_lp).cwiseAbs().maxCoeff() == 0.0f);
      prefix.push_back(item.targets[q]);
    }
  }
}

TEST_CASE("empty retrieval bypasses the fusion branch entirely") {
  auto cfg = toy_config(8, 2, false);
  auto full = make_params<float>(cfg, 9);

  // same weights but with the retrieval branch surgically zeroed
  auto stripped = full;
  for (auto& layer : stripped.dec) {
    layer.cross_ret.wq.setZero();
    layer.cross_ret.bq.setZero();
    layer.cross_ret.wk.setZero();
    layer.cross_ret.bk.setZero();
    layer.cross_ret.wv.setZero();
    layer.cross_ret.bv.setZero();
    layer.cross_ret.wo.setZero();
    layer.cross_ret.bo.setZero();
    layer.gate_w.setZero();
  }

  Rng rng(13);
  auto item = toy_item(cfg.vocab, rng, 4, 0);
  REQUIRE(item.ret_tokens.empty());

  Tape<float> ta, tb;
  ForwardStats sa, sb;
  build_example_loss<float>(ta, full, nullptr, item, &sa);
  build_example_loss<float>(tb, stripped, nullptr, item, &sb);
  CHECK(sa.loss == sb.loss);
  CHECK((sa.logits - sb.logits).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(sa.gate_mean == 0.0);
}

TEST_CASE("predictions respect level ranges and gate stays in (0,1)") {
  auto cfg = toy_config(8, 2, false, {5, 6, 7}, 3);  // suffix level present
  auto p = make_params<float>(cfg, 17);
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    auto item = toy_item(cfg.vocab, rng, 3, 3);
    item.targets[3] = cfg.vocab.token(3, rng.uniform_int(3));
    Tape<float> t;
    ForwardStats st;
    build_example_loss<float>(t, p, nullptr, item, &st);
    REQUIRE(cfg.vocab.n_levels() == 4);
    for (int q = 0; q < 4; ++q) {
      auto [lo, hi] = cfg.vocab.range(q);
      CHECK(st.pred[q] >= lo);
      CHECK(st.pred[q] < hi);
    }
    CHECK(st.gate_mean > 0.0);
    CHECK(st.gate_mean < 1.0);
  }
}

TEST_CASE("a zeroed model scores uniformly over each level") {
  auto cfg = toy_config(8, 2, false, {64, 128, 128});
  ModelParams<double> p;
  p.allocate(cfg);
  p.set_zero();
  Rng rng(23);
  auto item = toy_item(cfg.vocab, rng, 4, 0);

  Tape<double> t;
  ForwardStats st;
  Ref loss = build_example_loss<double>(t, p, nullptr, item, &st);
  const double expect = std::log(64.0) + 2.0 * std::log(128.0);
  CHECK(std::abs(t.val(loss)(0, 0) - expect) < 1e-9);
}

TEST_CASE("gate weight gradients match central finite differences") {
  auto cfg = toy_config(8, 2, false);
  auto p = make_params<double>(cfg, 29);
  Rng rng(31);
  auto item = toy_item(cfg.vocab, rng, 4, 3);

  ModelParams<double> grads;
  grads.allocate(cfg);
  grads.set_zero();
  {
    Tape<double> t;
    t.backward(build_example_loss<double>(t, p, &grads, item));
  }

  auto loss_at = [&]() {
    Tape<double> t;
    return t.val(build_example_loss<double>(t, p, nullptr, item))(0, 0);
  };

  Rng pick(37);
  for (std::size_t layer = 0; layer < p.dec.size(); ++layer) {
    MatD& w = p.dec[layer].gate_w;
    for (int trial = 0; trial < 6; ++trial) {
      const int idx = pick.uniform_int(static_cast<int>(w.size()));
      double* slot = w.data() + idx;
      const double orig = *slot, eps = 1e-3;
      *slot = orig + eps;
      const double up = loss_at();
      *slot = orig - eps;
      const double dn = loss_at();
      *slot = orig;
      const double fd = (up - dn) / (2 * eps);
      const double an = *(grads.dec[layer].gate_w.data() + idx);
      CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("logits are invariant to retrieved-item order") {
  auto cfg = toy_config(8, 2, false);
  auto p = make_params<double>(cfg, 41);
  Rng rng(43);
  auto item = toy_item(cfg.vocab, rng, 4, 5);

  Tape<double> ta;
  ForwardStats sa;
  build_example_loss<double>(ta, p, nullptr, item, &sa);

  auto rotated = item;
  std::rotate(rotated.ret_tokens.begin(), rotated.ret_tokens.begin() + 3,
              rotated.ret_tokens.end());
  Tape<double> tb;
  ForwardStats sb;
  build_example_loss<double>(tb, p, nullptr, rotated, &sb);

  CHECK(std::abs(sa.loss - sb.loss) < 1e-12);
  CHECK((sa.logits - sb.logits).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("malformed inputs are rejected") {
  auto cfg = toy_config(8, 2, true);
  auto p = make_params<float>(cfg, 47);
  Rng rng(53);
  auto good = toy_item(cfg.vocab, rng, 4, 2, cfg.tier_inputs);

  auto no_short = good;
  no_short.short_tokens.clear();
  auto ragged = good;
  ragged.ret_tokens.push_back(2);
  auto too_long = good;
  for (int i = 0; i < 3 * cfg.short_len; ++i) too_long.short_tokens.push_back(2);
  auto bad_target = good;
  bad_target.targets[1] = cfg.vocab.token(0, 0);
  auto bad_tier = good;
  bad_tier.tier_flat.pop_back();
  auto too_much_ret = good;
  for (int i = 0; i < 3 * cfg.max_ret_items; ++i) too_much_ret.ret_tokens.push_back(2);

  for (const auto* item : {&no_short, &ragged, &too_long, &bad_target, &bad_tier,
                           &too_much_ret}) {
    Tape<float> t;
    CHECK_THROWS_AS(build_example_loss<float>(t, p, nullptr, *item), DataError);
  }
}

namespace {

// Straight-line re-derivation of the full forward pass with plain matrix
// arithmetic, independent of the tape ops.
struct Oracle {
  const ModelParams<double>& p;

  static MatD softmax(MatD s) {
    for (int r = 0; r < s.rows(); ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.cols(); ++c) mx = std::max(mx, s(r, c));
      double z = 0;
      for (int c = 0; c < s.cols(); ++c) {
        s(r, c) = std::exp(s(r, c) - mx);
        z += s(r, c);
      }
      s.row(r) /= z;
    }
    return s;
  }

  MatD mha(const AttnP<double>& a, const MatD& qin, const MatD& kvin, bool causal) const {
    const int heads = p.cfg.heads;
    MatD q = (qin * a.wq).rowwise() + a.bq.row(0);
    MatD k = (kvin * a.wk).rowwise() + a.bk.row(0);
    MatD v = (kvin * a.wv).rowwise() + a.bv.row(0);
    const int dk = static_cast<int>(q.cols()) / heads;
    MatD out(q.rows(), q.cols());
    for (int h = 0; h < heads; ++h) {
      MatD s = q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose();
      s /= std::sqrt(static_cast<double>(dk));
      if (causal)
        for (int i = 0; i < s.rows(); ++i)
          for (int j = i + 1; j < s.cols(); ++j)
            s(i, j) = -std::numeric_limits<double>::infinity();
      out.middleCols(h * dk, dk) = softmax(std::move(s)) * v.middleCols(h * dk, dk);
    }
    return (out * a.wo).rowwise() + a.bo.row(0);
  }

  MatD lnorm(const LnP<double>& l, const MatD& x) const {
    MatD y(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      const double mean = x.row(r).mean();
      const double var = (x.row(r).array() - mean).square().mean();
      y.row(r) = ((x.row(r).array() - mean) / std::sqrt(var + kLayerNormEps)) *
                     l.gamma.row(0).array() +
                 l.beta.row(0).array();
    }
    return y;
  }

  MatD ffn(const FfnP<double>& f, const MatD& x) const {
    MatD h = ((x * f.w1).rowwise() + f.b1.row(0)).cwiseMax(0.0);
    return (h * f.w2).rowwise() + f.b2.row(0);
  }

  MatD rows_of(const std::vector<int>& toks, const MatD& table) const {
    MatD x(toks.size(), table.cols());
    for (std::size_t i = 0; i < toks.size(); ++i) x.row(i) = table.row(toks[i]);
    return x;
  }

  double forward(const BatchItem& item, MatD* logits_out) const {
    const auto& vb = p.cfg.vocab;
    const int L = vb.n_levels();
    MatD x = rows_of(item.short_tokens, p.embedding);
    for (int i = 0; i < x.rows(); ++i) x.row(i) += p.enc_pos.row(i);
    for (const auto& layer : p.enc) {
      x += mha(layer.attn, lnorm(layer.ln_attn, x), lnorm(layer.ln_attn, x), false);
      x += ffn(layer.ffn, lnorm(layer.ln_ffn, x));
    }

    std::vector<int> dec_in = {Vocab::kBos};
    for (int q = 1; q < L; ++q) dec_in.push_back(item.targets[q - 1]);
    MatD y = rows_of(dec_in, p.embedding);
    for (int q = 0; q < L; ++q) y.row(q) += p.dec_pos.row(q);

    MatD eret;
    if (!item.ret_tokens.empty()) eret = rows_of(item.ret_tokens, p.embedding);

    for (const auto& layer : p.dec) {
      y += mha(layer.self_attn, lnorm(layer.ln_self, y), lnorm(layer.ln_self, y), true);
      MatD h2 = lnorm(layer.ln_cross, y);
      MatD zs = mha(layer.cross_short, h2, x, false);
      MatD zc = zs;
      if (eret.size() > 0) {
        MatD zr = mha(layer.cross_ret, h2, eret, false);
        zr.row(0).setZero();
        MatD cat(L, 2 * p.cfg.d);
        cat << zs, zr;
        MatD g = (cat * layer.gate_w).unaryExpr(
            [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        g.row(0).setZero();
        zc = (1.0 - g.array()) * zs.array() + g.array() * zr.array();
      }
      y += zc;
      y += ffn(layer.ffn, lnorm(layer.ln_ffn, y));
    }
    y = lnorm(p.final_ln, y);
    MatD logits = (y * p.w_out).rowwise() + p.b_out.row(0);
    if (logits_out) *logits_out = logits;

    double loss = 0;
    for (int q = 0; q < L; ++q) {
      auto [lo, hi] = vb.range(q);
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = lo; j < hi; ++j) mx = std::max(mx, logits(q, j));
      double z = 0;
      for (int j = lo; j < hi; ++j) z += std::exp(logits(q, j) - mx);
      loss -= logits(q, item.targets[q]) - mx - std::log(z);
    }
    return loss;
  }
};

}  // namespace

TEST_CASE("full forward matches an independent matrix-arithmetic oracle") {
  auto cfg = toy_config(4, 2, false, {4, 4, 4});
  cfg.enc_blocks = 1;
  cfg.dec_blocks = 1;
  cfg.ffn_dim = 8;
  auto p = make_params<double>(cfg, 59);
  Rng rng(61);

  for (int n_ret : {0, 3}) {
    auto item = toy_item(cfg.vocab, rng, 3, n_ret);
    Tape<double> t;
    ForwardStats st;
    Ref loss = build_example_loss<double>(t, p, nullptr, item, &st);

    MatD oracle_logits;
    const double oracle_loss = Oracle{p}.forward(item, &oracle_logits);
    CHECK(std::abs(t.val(loss)(0, 0) - oracle_loss) < 1e-6);
    CHECK((st.logits.cast<double>() - oracle_logits).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto cfg = toy_config(8, 2, true, {5, 6, 7}, 2);
  auto p = make_params<float>(cfg, 67);
  auto dir = std::filesystem::temp_directory_path() / "genrec_model_ckpt";
  std::filesystem::create_directories(dir);

  save_checkpoint(dir / "m.txt", p, "cafef00dcafef00d");
  std::string hash;
  auto r = load_checkpoint(dir / "m.txt", &hash);
  CHECK(hash == "cafef00dcafef00d");
  CHECK(r.cfg == p.cfg);

  auto src = collect_tensors(p);
  auto dst = collect_tensors(r);
  REQUIRE(src.size() == dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    REQUIRE(src[i].first == dst[i].first);
    REQUIRE(src[i].second->rows() == dst[i].second->rows());
    CHECK((*src[i].second - *dst[i].second).cwiseAbs().maxCoeff() == 0.0f);
  }

  save_checkpoint(dir / "m2.txt", r, hash);
  CHECK(io::read_file(dir / "m.txt") == io::read_file(dir / "m2.txt"));

  io::write_file(dir / "bad.txt", "genrec-model 9\n");
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.txt"), DataError);
}

TEST_CASE("initialization is seed-deterministic and name-aware") {
  auto cfg = toy_config(8, 2, true);
  auto a = make_params<float>(cfg, 71);
  auto b = make_params<float>(cfg, 71);
  auto c = make_params<float>(cfg, 72);

  auto ta = collect_tensors(a), tb = collect_tensors(b), tc = collect_tensors(c);
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK((*ta[i].second - *tb[i].second).cwiseAbs().maxCoeff() == 0.0f);
    if ((*ta[i].second - *tc[i].second).cwiseAbs().maxCoeff() > 0) any_diff = true;
  }
  CHECK(any_diff);
  CHECK(a.all_finite());

  for (const auto& layer : a.enc) {
    CHECK((layer.ln_attn.gamma.array() == 1.0f).all());
    CHECK((layer.ln_attn.beta.array() == 0.0f).all());
    CHECK((layer.attn.bq.array() == 0.0f).all());
  }
  CHECK((a.final_ln.gamma.array() == 1.0f).all());
  CHECK((a.b_out.array() == 0.0f).all());
}
