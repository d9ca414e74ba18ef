#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "reference_transformer.hpp"
#include "sfnmt/gradcheck.hpp"
#include "sfnmt/model.hpp"
#include "test_util.hpp"

using namespace sfnmt;
using namespace sfnmt::testutil;

namespace {

Mask all_valid(std::size_t n) { return key_mask(std::vector<std::uint8_t>(n, 1)); }

// plain per-head scaled-dot attention oracle in double
std::vector<double> attention_oracle(const std::vector<double>& x, std::size_t l,
                                     std::size_t h, const std::vector<double>& wq,
                                     const std::vector<double>& wk,
                                     const std::vector<double>& wv,
                                     const std::vector<double>& wo,
                                     std::size_t heads) {
  auto mm = [](const std::vector<double>& a, const std::vector<double>& b,
               std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < k; ++t)
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + t] * b[t * n + j];
    return c;
  };
  auto q = mm(x, wq, l, h, h), k = mm(x, wk, l, h, h), v = mm(x, wv, l, h, h);
  const std::size_t d = h / heads;
  std::vector<double> ctx(l * h, 0.0);
  for (std::size_t head = 0; head < heads; ++head) {
    for (std::size_t i = 0; i < l; ++i) {
      std::vector<double> logits(l);
      for (std::size_t j = 0; j < l; ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < d; ++t)
          dot += q[i * h + head * d + t] * k[j * h + head * d + t];
        logits[j] = dot / std::sqrt(static_cast<double>(d));
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& lg : logits) z += (lg = std::exp(lg - mx));
      for (std::size_t j = 0; j < l; ++j)
        for (std::size_t t = 0; t < d; ++t)
          ctx[i * h + head * d + t] += logits[j] / z * v[j * h + head * d + t];
    }
  }
  return mm(ctx, wo, l, h, h);
}

AttentionParams<double> random_attention(std::size_t h, std::size_t heads, Rng& rng) {
  return {Tensor<double>::randn({h, h}, rng, 0.5, true),
          Tensor<double>::randn({h, h}, rng, 0.5, true),
          Tensor<double>::randn({h, h}, rng, 0.5, true),
          Tensor<double>::randn({h, h}, rng, 0.5, true), heads};
}

}  // namespace

TEST(SelfAttention, SingleTokenPassesValueThrough) {
  Rng rng(3);
  auto p = random_attention(4, 2, rng);
  auto x = Tensor<double>::randn({1, 4}, rng, 1.0, false);
  auto got = self_attention(x, p, all_valid(1));
  auto want = matmul(matmul(x, p.wv), p.wo);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
}

TEST(SelfAttention, IdenticalRowsGiveIdenticalOutputs) {
  Rng rng(4);
  auto p = random_attention(6, 3, rng);
  std::vector<double> row(6);
  for (auto& v : row) v = rng.next_normal();
  std::vector<double> data;
  for (int i = 0; i < 4; ++i) data.insert(data.end(), row.begin(), row.end());
  Tensor<double> x({4, 6}, std::move(data));
  auto out = self_attention(x, p, all_valid(4));
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c)
      EXPECT_DOUBLE_EQ(out.data()[c], out.data()[r * 6 + c]);
}

TEST(SelfAttention, MatchesBruteForceOracle) {
  Rng rng(5);
  const std::size_t l = 3, h = 4, heads = 2;
  auto p = random_attention(h, heads, rng);
  auto x = Tensor<double>::randn({l, h}, rng, 1.0, false);
  auto got = self_attention(x, p, all_valid(l));
  auto want = attention_oracle(x.data(), l, h, p.wq.data(), p.wk.data(), p.wv.data(),
                               p.wo.data(), heads);
  for (std::size_t i = 0; i < l * h; ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-10);
}

TEST(GcnLayer, SelfLoopsOnlyWithIdentityWeightsIsReluIdentity) {
  const std::size_t n = 3, h = 3;
  std::set<std::pair<int, int>> loops;
  for (int i = 0; i < static_cast<int>(n); ++i) loops.insert({i, i});
  auto norm = normalize_adjacency(loops, n);
  Tensor<double> adj({n, n}, std::vector<double>(norm.begin(), norm.end()));
  std::vector<double> eye(h * h, 0.0);
  for (std::size_t i = 0; i < h; ++i) eye[i * h + i] = 1.0;
  Tensor<double> w({h, h}, std::move(eye));
  Tensor<double> x({n, h}, {0.5, 1.0, 0.0, 2.0, 0.25, 3.0, 1.5, 0.75, 4.0});
  auto out = gcn_layer(x, adj, w);
  for (std::size_t i = 0; i < n * h; ++i) EXPECT_DOUBLE_EQ(out.data()[i], x.data()[i]);
}

TEST(GcnLayer, TwoNodeCompleteGraphAverages) {
  std::set<std::pair<int, int>> edges{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  auto norm = normalize_adjacency(edges, 2);
  Tensor<double> adj({2, 2}, std::vector<double>(norm.begin(), norm.end()));
  Tensor<double> w({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor<double> x({2, 2}, {2.0, 4.0, 6.0, 8.0});
  auto out = gcn_layer(x, adj, w);
  EXPECT_DOUBLE_EQ(out.data()[0], 4.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 6.0);
  EXPECT_DOUBLE_EQ(out.data()[2], 4.0);
  EXPECT_DOUBLE_EQ(out.data()[3], 6.0);
}

TEST(GcnLayer, MatchesDenseOracleOnRandomGraphs) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.next_below(5), h = 1 + rng.next_below(4);
    std::set<std::pair<int, int>> edges;
    for (int i = 0; i < static_cast<int>(n); ++i) edges.insert({i, i});
    for (std::size_t e = 0; e < n; ++e) {
      int i = static_cast<int>(rng.next_below(n)), j = static_cast<int>(rng.next_below(n));
      edges.insert({i, j});
      edges.insert({j, i});
    }
    auto norm = normalize_adjacency(edges, n);
    Tensor<double> adj({n, n}, std::vector<double>(norm.begin(), norm.end()));
    auto w = Tensor<double>::randn({h, h}, rng, 1.0, false);
    auto x = Tensor<double>::randn({n, h}, rng, 1.0, false);
    auto got = gcn_layer(x, adj, w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < h; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t t = 0; t < h; ++t)
            acc += norm[i * n + j] * x.data()[j * h + t] * w.data()[t * h + c];
        EXPECT_NEAR(got.data()[i * h + c], std::max(acc, 0.0), 1e-10);
      }
  }
}

namespace {

CgaParams<double> random_cga(std::size_t h_dst, std::size_t h_src, std::size_t heads,
                             Rng& rng) {
  return {Tensor<double>({h_src}, 1.0, true),
          Tensor<double>({h_src}, 0.0, true),
          Tensor<double>::randn({h_dst, h_dst}, rng, 0.5, true),
          Tensor<double>::randn({h_src, h_dst}, rng, 0.5, true),
          Tensor<double>::randn({h_src, h_dst}, rng, 0.5, true),
          Tensor<double>::randn({h_dst, h_dst}, rng, 0.5, true),
          heads};
}

}  // namespace

TEST(CrossGranularityAttention, ZeroValueProjectionGivesZeros) {
  Rng rng(21);
  auto p = random_cga(4, 8, 2, rng);
  std::fill(p.wv.mutable_data().begin(), p.wv.mutable_data().end(), 0.0);
  auto dst = Tensor<double>::randn({3, 4}, rng, 1.0, false);
  auto src = Tensor<double>::randn({5, 8}, rng, 1.0, false);
  auto out = cross_granularity_attention(dst, src, p, all_valid(5));
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(CrossGranularityAttention, SingleSourceRowBroadcastsRegardlessOfQuery) {
  Rng rng(22);
  auto p = random_cga(4, 8, 2, rng);
  auto dst = Tensor<double>::randn({3, 4}, rng, 1.0, false);
  auto src = Tensor<double>::randn({1, 8}, rng, 1.0, false);
  auto out = cross_granularity_attention(dst, src, p, all_valid(1));
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(out.data()[c], out.data()[r * 4 + c], 1e-12);
}

TEST(CrossGranularityAttention, BridgesWidthPairs) {
  Rng rng(23);
  for (auto [hs, hf] : std::vector<std::pair<std::size_t, std::size_t>>{
           {64, 16}, {64, 32}, {128, 64}}) {
    auto p = random_cga(hf, hs, 2, rng);
    auto dst = Tensor<double>::randn({5, hf}, rng, 1.0, false);
    auto src = Tensor<double>::randn({7, hs}, rng, 1.0, false);
    auto out = cross_granularity_attention(dst, src, p, all_valid(7));
    ASSERT_EQ(out.shape(), (Shape{5, hf}));
    EXPECT_TRUE(out.all_finite());
  }
}

TEST(CrossGranularityAttention, QueriesComeFromRawDestinationKeysFromNormalizedSource) {
  Rng rng(24);
  auto p = random_cga(4, 6, 2, rng);
  auto dst = Tensor<double>::randn({3, 4}, rng, 1.0, false);
  auto src = Tensor<double>::randn({5, 6}, rng, 1.0, false);
  auto got = cross_granularity_attention(dst, src, p, all_valid(5));
  auto src_hat = layer_norm(src, p.src_ln_g, p.src_ln_b);
  Rng dummy;
  auto ctx = multihead_attend(matmul(dst, p.wq), matmul(src_hat, p.wk),
                              matmul(src_hat, p.wv), p.heads, all_valid(5), nullptr,
                              nullptr, 0.0, dummy, false);
  auto want = matmul(ctx, p.wo);
  EXPECT_TRUE(bitwise_equal(got, want));
}

TEST(FeedForward, ScalarHandExample) {
  Tensor<double> x({1, 1}, {2.0});
  Tensor<double> w1({1, 1}, {1.0}), b1({1}, std::vector<double>{1.0});
  Tensor<double> w2({1, 1}, {3.0}), b2({1}, std::vector<double>{-1.0});
  EXPECT_DOUBLE_EQ(ffn_forward(x, w1, b1, w2, b2).item(), 8.0);
  Tensor<double> xneg({1, 1}, {-5.0});
  // relu clamps the hidden unit: relu(-5 + 1) = 0 -> 0*3 - 1
  EXPECT_DOUBLE_EQ(ffn_forward(xneg, w1, b1, w2, b2).item(), -1.0);
}

TEST(Encoder, UnidirectionalFusionLeavesSlowBranchIndependentOfFast) {
  auto w = tiny_world();
  w.cfg.cga_bidirectional = false;
  Rng init(7);
  auto m = Model<float>::init(w.cfg, init);
  auto f1 = features_for(w, {"good", "-", "news"});
  auto f2 = f1;
  f2.fast_ids[0] = (f2.fast_ids[0] + 1) % static_cast<int>(w.cfg.vocab_char);
  Rng r1(0), r2(0);
  auto e1 = encode(m, f1, r1, false);
  auto e2 = encode(m, f2, r2, false);
  EXPECT_TRUE(bitwise_equal(e1.slow, e2.slow));
  EXPECT_FALSE(bitwise_equal(e1.fast, e2.fast));
}

TEST(Encoder, BidirectionalFusionMakesSlowBranchDependOnFast) {
  auto w = tiny_world();
  Rng init(7);
  auto m = Model<float>::init(w.cfg, init);
  auto f1 = features_for(w, {"good", "-", "news"});
  auto f2 = f1;
  f2.fast_ids[0] = (f2.fast_ids[0] + 1) % static_cast<int>(w.cfg.vocab_char);
  Rng r1(0), r2(0);
  auto e1 = encode(m, f1, r1, false);
  auto e2 = encode(m, f2, r2, false);
  EXPECT_FALSE(bitwise_equal(e1.slow, e2.slow));
}

TEST(Encoder, ZeroedPoolingProjectionEqualsFusionDisabled) {
  auto w = tiny_world();
  w.cfg.fusion_variant = FusionVariant::DsSum;
  Rng init(9);
  auto m = Model<float>::init(w.cfg, init);
  for (std::size_t i = 0; i < w.cfg.layers; ++i) {
    auto& proj = m.p("enc." + std::to_string(i) + ".fuse.ds.proj").mutable_data();
    std::fill(proj.begin(), proj.end(), 0.0f);
  }
  auto f = features_for(w, {"the", "cat", "sat", "down"});
  Rng r1(0), r2(0);
  auto with_fusion = encode(m, f, r1, false);
  m.cfg.fusion_layer_mask.assign(w.cfg.layers, false);
  auto without = encode(m, f, r2, false);
  EXPECT_TRUE(bitwise_equal(with_fusion.slow, without.slow));
  EXPECT_TRUE(bitwise_equal(with_fusion.fast, without.fast));
}

TEST(Encoder, ConcatPoolingAndLinearAttentionVariantsRun) {
  for (auto variant : {FusionVariant::DsConcat, FusionVariant::LinearAttention}) {
    auto w = tiny_world();
    w.cfg.fusion_variant = variant;
    Rng init(10);
    auto m = Model<float>::init(w.cfg, init);
    auto f = features_for(w, {"news", "flash", "today"});
    Rng r(0);
    auto e = encode(m, f, r, false);
    ASSERT_EQ(e.slow.shape(), (Shape{f.slow_ids.size(), w.cfg.hidden_slow}));
    ASSERT_EQ(e.fast.shape(), (Shape{f.fast_ids.size(), w.cfg.hidden_fast}));
    EXPECT_TRUE(e.slow.all_finite());
    EXPECT_TRUE(e.fast.all_finite());
  }
}

TEST(Encoder, PaddingDoesNotChangeValidPositions) {
  auto w = tiny_world();
  Rng init(13);
  auto m = Model<float>::init(w.cfg, init);
  auto f = features_for(w, {"good", "-", "news"});
  auto fp = features_for(w, {"good", "-", "news"}, f.slow_ids.size() + 3,
                         f.fast_ids.size() + 5);
  Rng r1(0), r2(0);
  auto e = encode(m, f, r1, false);
  auto ep = encode(m, fp, r2, false);
  const std::size_t hs = w.cfg.hidden_slow, hf = w.cfg.hidden_fast;
  for (std::size_t i = 0; i < f.slow_ids.size() * hs; ++i)
    EXPECT_EQ(e.slow.data()[i], ep.slow.data()[i]);
  for (std::size_t i = 0; i < f.fast_ids.size() * hf; ++i)
    EXPECT_EQ(e.fast.data()[i], ep.fast.data()[i]);
}

TEST(Encoder, WidthSweepProducesExpectedShapes) {
  for (std::size_t hs : {16ul, 32ul, 64ul, 128ul, 256ul}) {
    auto w = tiny_world(hs, 8, 1);
    Rng init(17);
    auto m = Model<float>::init(w.cfg, init);
    auto f = features_for(w, {"a", "bb", "ccc"});
    Rng r(0);
    auto e = encode(m, f, r, false);
    ASSERT_EQ(e.slow.shape(), (Shape{f.slow_ids.size(), hs}));
    ASSERT_EQ(e.fast.shape(), (Shape{f.fast_ids.size(), 8ul}));
    EXPECT_TRUE(e.slow.all_finite());
  }
}

TEST(Encoder, BoundaryAndVanillaRelposAgreeWhenEmbeddingsAreZero) {
  auto w = tiny_world();
  Rng init(19);
  auto m = Model<float>::init(w.cfg, init);
  auto& table = m.p("relpos.fast").mutable_data();
  std::fill(table.begin(), table.end(), 0.0f);
  auto seg = segment({"good", "-", "news"}, w.bpe, w.chars);
  auto f_boundary = make_features(seg, w.cfg);
  auto cfg_vanilla = w.cfg;
  cfg_vanilla.relpos_mode = RelposMode::Vanilla;
  auto f_vanilla = make_features(seg, cfg_vanilla);
  Rng r1(0), r2(0);
  auto eb = encode(m, f_boundary, r1, false);
  auto ev = encode(m, f_vanilla, r2, false);
  EXPECT_TRUE(bitwise_equal(eb.fast, ev.fast));
  EXPECT_TRUE(bitwise_equal(eb.slow, ev.slow));
}

TEST(Interaction, SlowModeHandsDecoderTheSlowMemoryUnchanged) {
  auto w = tiny_world();
  Rng init(29);
  auto m = Model<float>::init(w.cfg, init);
  auto f = features_for(w, {"good", "-", "news"});
  Rng r(0);
  auto e = encode(m, f, r, false);
  auto mem = encdec_interaction(m, e, f);
  EXPECT_TRUE(bitwise_equal(mem.mem, e.slow));
  EXPECT_EQ(mem.valid, f.slow_valid);
  EXPECT_FALSE(mem.gated);
}

TEST(Interaction, FastModeProjectsToDecoderWidth) {
  auto w = tiny_world();
  w.cfg.interaction_mode = InteractionMode::Fast;
  Rng init(31);
  auto m = Model<float>::init(w.cfg, init);
  auto f = features_for(w, {"good", "-", "news"});
  Rng r(0);
  auto e = encode(m, f, r, false);
  auto mem = encdec_interaction(m, e, f);
  ASSERT_EQ(mem.mem.shape(), (Shape{f.fast_ids.size(), w.cfg.hidden_slow}));
  EXPECT_EQ(mem.valid, f.fast_valid);
}

TEST(Interaction, SaturatedGateIgnoresFastMemory) {
  auto w = tiny_world();
  w.cfg.interaction_mode = InteractionMode::GatedBoth;
  Rng init(37);
  auto m = Model<float>::init(w.cfg, init);
  for (std::size_t i = 0; i < w.cfg.decoder_layers; ++i) {
    const std::string li = "dec." + std::to_string(i);
    auto& gw = m.p(li + ".cross.gate_w").mutable_data();
    std::fill(gw.begin(), gw.end(), 0.0f);
    auto& gb = m.p(li + ".cross.gate_b").mutable_data();
    std::fill(gb.begin(), gb.end(), 50.0f);
  }
  auto f = features_for(w, {"good", "-", "news"});
  Rng r(0);
  auto e = encode(m, f, r, false);
  auto mem = encdec_interaction(m, e, f);
  auto mem2 = mem;
  mem2.fast_mem = scale(mem.fast_mem, 3.0f);
  auto tgt = target_in(w, {"cat"});
  std::vector<std::uint8_t> tv(tgt.size(), 1);
  Rng d1(0), d2(0);
  auto l1 = decode_forward(m, tgt, tv, mem, d1, false);
  auto l2 = decode_forward(m, tgt, tv, mem2, d2, false);
  EXPECT_TRUE(bitwise_equal(l1, l2));
}

TEST(Decoder, EarlierLogitsUnchangedWhenLaterInputChanges) {
  auto w = tiny_world();
  Rng init(41);
  auto m = Model<float>::init(w.cfg, init);
  auto f = features_for(w, {"the", "cat", "sat", "down"});
  Rng r(0);
  auto e = encode(m, f, r, false);
  auto mem = encdec_interaction(m, e, f);
  auto tgt = target_in(w, {"cat", "sat"});
  ASSERT_GE(tgt.size(), 4u);
  std::vector<std::uint8_t> tv(tgt.size(), 1);
  const std::size_t flip = tgt.size() - 1;
  auto tgt2 = tgt;
  tgt2[flip] = (tgt2[flip] + 1) % static_cast<int>(w.cfg.vocab_target);
  Rng d1(0), d2(0);
  auto l1 = decode_forward(m, tgt, tv, mem, d1, false);
  auto l2 = decode_forward(m, tgt2, tv, mem, d2, false);
  const std::size_t v = w.cfg.vocab_target;
  for (std::size_t i = 0; i < flip * v; ++i) EXPECT_EQ(l1.data()[i], l2.data()[i]);
  bool last_row_differs = false;
  for (std::size_t i = flip * v; i < tgt.size() * v; ++i)
    last_row_differs = last_row_differs || l1.data()[i] != l2.data()[i];
  EXPECT_TRUE(last_row_differs);
}

TEST(Decoder, ZeroedCrossValuesMakeLogitsIndependentOfMemoryContent) {
  auto w = tiny_world();
  Rng init(43);
  auto m = Model<float>::init(w.cfg, init);
  for (std::size_t i = 0; i < w.cfg.decoder_layers; ++i) {
    auto& wv = m.p("dec." + std::to_string(i) + ".cross.wv").mutable_data();
    std::fill(wv.begin(), wv.end(), 0.0f);
  }
  Rng mr(5);
  DecoderMemory<float> mem_a, mem_b;
  mem_a.mem = Tensor<float>::randn({4, w.cfg.hidden_slow}, mr, 1.0f, false);
  mem_b.mem = Tensor<float>::randn({4, w.cfg.hidden_slow}, mr, 1.0f, false);
  mem_a.valid = mem_b.valid = std::vector<std::uint8_t>(4, 1);
  auto tgt = target_in(w, {"cat"});
  std::vector<std::uint8_t> tv(tgt.size(), 1);
  Rng d1(0), d2(0);
  auto l1 = decode_forward(m, tgt, tv, mem_a, d1, false);
  auto l2 = decode_forward(m, tgt, tv, mem_b, d2, false);
  EXPECT_TRUE(bitwise_equal(l1, l2));
}

TEST(Decoder, PaddedMemoryGivesSameLogits) {
  auto w = tiny_world();
  Rng init(47);
  auto m = Model<float>::init(w.cfg, init);
  auto f = features_for(w, {"good", "-", "news"});
  auto fp = features_for(w, {"good", "-", "news"}, f.slow_ids.size() + 2,
                         f.fast_ids.size() + 4);
  Rng r1(0), r2(0);
  auto mem = encdec_interaction(m, encode(m, f, r1, false), f);
  auto memp = encdec_interaction(m, encode(m, fp, r2, false), fp);
  auto tgt = target_in(w, {"news"});
  std::vector<std::uint8_t> tv(tgt.size(), 1);
  Rng d1(0), d2(0);
  auto l1 = decode_forward(m, tgt, tv, mem, d1, false);
  auto l2 = decode_forward(m, tgt, tv, memp, d2, false);
  EXPECT_TRUE(bitwise_equal(l1, l2));
}

TEST(Model, FusionDisabledSlowPathMatchesPlainTransformerBitwise) {
  auto w = tiny_world();
  w.cfg.fusion_variant = FusionVariant::None;
  Rng init(53);
  auto m = Model<float>::init(w.cfg, init);
  for (const auto& words : tiny_corpus()) {
    auto f = features_for(w, words);
    Rng r(0);
    auto e = encode(m, f, r, false);
    auto mem = encdec_interaction(m, e, f);
    auto tgt = target_in(w, words);
    std::vector<std::uint8_t> tv(tgt.size(), 1);
    Rng d(0);
    auto got = decode_forward(m, tgt, tv, mem, d, false);
    auto want = testref::reference_logits(m, f, tgt, tv);
    EXPECT_TRUE(bitwise_equal(e.slow, testref::reference_encode(m, f)));
    EXPECT_TRUE(bitwise_equal(got, want));
  }
}

TEST(Model, EveryParameterReceivesGradient) {
  auto w = tiny_world();
  w.cfg.interaction_mode = InteractionMode::GatedBoth;
  Rng init(59);
  auto m = Model<double>::init(w.cfg, init);
  auto f = features_for(w, {"the", "cat", "sat", "down"});
  auto tgt_full = target_in(w, {"cat", "sat"});
  std::vector<int> tgt_in(tgt_full.begin(), tgt_full.end());
  std::vector<int> tgt_out(tgt_full.begin() + 1, tgt_full.end());
  tgt_out.push_back(Vocab::kEos);
  std::vector<std::uint8_t> tv(tgt_in.size(), 1);

  Rng r(0);
  auto e = encode(m, f, r, false);
  auto mem = encdec_interaction(m, e, f);
  auto logits = decode_forward(m, tgt_in, tv, mem, r, false);
  auto loss = cross_entropy_label_smoothed(logits, tgt_out, Vocab::kPad, 0.1);
  m.params.zero_grads();
  loss.backward();

  for (const auto& name : m.params.names) {
    const auto& g = m.params.at(name).grad();
    bool any = false;
    for (double v : g) any = any || v != 0.0;
    EXPECT_TRUE(any) << "no gradient reached parameter " << name;
  }
}

TEST(Model, FullModelGradientsMatchFiniteDifferences) {
  auto w = tiny_world(16, 8, 2);
  Rng init(61);
  auto m = Model<double>::init(w.cfg, init);
  auto f = features_for(w, {"good", "-", "news"});
  auto tgt_full = target_in(w, {"news"});
  std::vector<int> tgt_in(tgt_full.begin(), tgt_full.end());
  std::vector<int> tgt_out(tgt_full.begin() + 1, tgt_full.end());
  tgt_out.push_back(Vocab::kEos);
  std::vector<std::uint8_t> tv(tgt_in.size(), 1);

  std::vector<Tensor<double>> leaves;
  for (const auto& name : m.params.names) leaves.push_back(m.params.at(name));

  auto loss_fn = [&]() {
    Rng r(0);
    auto e = encode(m, f, r, false);
    auto mem = encdec_interaction(m, e, f);
    auto logits = decode_forward(m, tgt_in, tv, mem, r, false);
    return cross_entropy_label_smoothed(logits, tgt_out, Vocab::kPad, 0.1);
  };
  GradCheckOptions opt;
  opt.max_coords_per_leaf = 4;
  double err = grad_check(loss_fn, leaves, opt);
  EXPECT_LT(err, 1e-4);
}
