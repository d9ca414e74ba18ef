#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "sfnmt/config.hpp"
#include "sfnmt/ops.hpp"
#include "sfnmt/segmentation.hpp"
#include "sfnmt/tensor.hpp"

namespace sfnmt {

// Ordered named parameter store; registration order is the checkpoint and
// optimizer-state order.
template <class T>
struct ParamMap {
  std::vector<std::string> names;
  std::unordered_map<std::string, Tensor<T>> by_name;

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    auto [it, fresh] = by_name.emplace(name, std::move(t));
    if (!fresh) throw ContractError("duplicate parameter: " + name);
    names.push_back(name);
    return it->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return by_name.count(name) > 0; }
  std::size_t size() const { return names.size(); }

  void zero_grads() {
    for (auto& n : names) by_name.at(n).zero_grad();
  }
};

// Per-sentence inputs to the two encoder branches, already padded to the
// batch lengths. Pad positions carry their own dummy word group so the
// boundary structures stay block-diagonal.
struct SentenceFeatures {
  std::vector<int> slow_ids;
  std::vector<std::uint8_t> slow_valid;
  std::vector<int> fast_ids;
  std::vector<std::uint8_t> fast_valid;
  std::vector<int> slow_word, fast_word;
  std::size_t n_word_groups = 0;
  std::vector<double> adj_slow, adj_fast;  // dense normalized, padded extent
  std::vector<int> relpos_rows;            // L_f*L_f table rows, -1 = OUT
};

inline SentenceFeatures make_features(const SegmentedSentence& s,
                                      const ModelConfig& cfg,
                                      std::size_t pad_slow_to = 0,
                                      std::size_t pad_fast_to = 0) {
  const bool char_fast = cfg.fast_input == FastInput::Character;
  const std::vector<int>& fast_raw = char_fast ? s.chars : s.subwords;
  const std::vector<int>& fast_map = char_fast ? s.char2word : s.sub2word;

  SentenceFeatures f;
  const std::size_t ls = std::max(pad_slow_to, s.subwords.size());
  const std::size_t lf = std::max(pad_fast_to, fast_raw.size());
  const std::size_t n_words = s.words.size();

  f.slow_ids = s.subwords;
  f.slow_word = s.sub2word;
  f.slow_valid.assign(s.subwords.size(), 1);
  while (f.slow_ids.size() < ls) {
    f.slow_word.push_back(static_cast<int>(n_words + (f.slow_ids.size() - s.subwords.size())));
    f.slow_ids.push_back(Vocab::kPad);
    f.slow_valid.push_back(0);
  }

  f.fast_ids = fast_raw;
  f.fast_word = fast_map;
  f.fast_valid.assign(fast_raw.size(), 1);
  while (f.fast_ids.size() < lf) {
    f.fast_word.push_back(static_cast<int>(n_words + (f.fast_ids.size() - fast_raw.size())));
    f.fast_ids.push_back(Vocab::kPad);
    f.fast_valid.push_back(0);
  }

  f.n_word_groups = n_words + std::max(ls - s.subwords.size(), lf - fast_raw.size());

  f.adj_slow = normalize_adjacency(detail::adjacency_from_word_map(f.slow_word).edges, ls);
  f.adj_fast = normalize_adjacency(detail::adjacency_from_word_map(f.fast_word).edges, lf);

  if (cfg.relpos_mode != RelposMode::None) {
    RelPosIndexMatrix m = cfg.relpos_mode == RelposMode::Boundary
                              ? boundary_relative_indices(f.fast_word, cfg.relpos_window)
                              : vanilla_relative_indices(lf, cfg.relpos_window);
    f.relpos_rows.resize(lf * lf);
    for (std::size_t i = 0; i < lf; ++i)
      for (std::size_t j = 0; j < lf; ++j)
        f.relpos_rows[i * lf + j] = m.table_row(i, j);
  }
  return f;
}

template <class T>
struct Model {
  ModelConfig cfg;
  ParamMap<T> params;

  Tensor<T>& p(const std::string& name) { return params.at(name); }
  const Tensor<T>& p(const std::string& name) const { return params.at(name); }

  static Model init(const ModelConfig& cfg, Rng& rng);
};

namespace detail {

template <class T>
Tensor<T> xavier(Shape shape, Rng& rng) {
  double fan_in = static_cast<double>(shape[0]);
  double fan_out = static_cast<double>(shape.back());
  T s = static_cast<T>(std::sqrt(6.0 / (fan_in + fan_out)));
  return Tensor<T>::uniform(std::move(shape), rng, -s, s, true);
}

}  // namespace detail

template <class T>
Model<T> Model<T>::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.vocab_subword == 0 || cfg.fast_vocab() == 0 || cfg.vocab_target == 0)
    throw ConfigError("model init requires vocab sizes");
  Model<T> m;
  m.cfg = cfg;
  const std::size_t hs = cfg.hidden_slow, hf = cfg.hidden_fast;
  auto& P = m.params;

  auto emb = [&](const std::string& name, std::size_t v, std::size_t h) {
    P.add(name, Tensor<T>::randn({v, h}, rng,
                                 static_cast<T>(1.0 / std::sqrt(static_cast<double>(h))),
                                 true));
  };
  auto lin = [&](const std::string& name, std::size_t in, std::size_t out) {
    P.add(name, detail::xavier<T>({in, out}, rng));
  };
  auto ln = [&](const std::string& prefix, std::size_t h) {
    P.add(prefix + ".g", Tensor<T>({h}, T(1), true));
    P.add(prefix + ".b", Tensor<T>({h}, T(0), true));
  };
  auto bias = [&](const std::string& name, std::size_t h) {
    P.add(name, Tensor<T>({h}, T(0), true));
  };
  auto attention = [&](const std::string& prefix, std::size_t h) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) lin(prefix + "." + w, h, h);
  };
  auto ffn = [&](const std::string& prefix, std::size_t h, std::size_t inner) {
    lin(prefix + ".w1", h, inner);
    bias(prefix + ".b1", inner);
    lin(prefix + ".w2", inner, h);
    bias(prefix + ".b2", h);
  };

  emb("emb.slow", cfg.vocab_subword, hs);
  emb("emb.fast", cfg.fast_vocab(), hf);
  emb("emb.target", cfg.vocab_target, hs);

  if (cfg.relpos_mode != RelposMode::None) {
    std::size_t dk = hf / cfg.heads_fast;
    std::size_t rows = 2 * static_cast<std::size_t>(cfg.relpos_window) + 1;
    P.add("relpos.fast",
          Tensor<T>::randn({rows, dk}, rng,
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))), true));
  }

  ln("gcn.slow.ln", hs);
  lin("gcn.slow.w", hs, hs);
  ln("gcn.fast.ln", hf);
  lin("gcn.fast.w", hf, hf);

  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string li = "enc." + std::to_string(i);
    ln(li + ".slow.san_ln", hs);
    attention(li + ".slow.san", hs);
    ln(li + ".fast.san_ln", hf);
    attention(li + ".fast.san", hf);

    if (cfg.fusion_at(i)) {
      switch (cfg.fusion_variant) {
        case FusionVariant::Cga:
          ln(li + ".fuse.fast.src_ln", hs);
          lin(li + ".fuse.fast.wq", hf, hf);
          lin(li + ".fuse.fast.wk", hs, hf);
          lin(li + ".fuse.fast.wv", hs, hf);
          lin(li + ".fuse.fast.wo", hf, hf);
          if (cfg.cga_bidirectional) {
            ln(li + ".fuse.slow.src_ln", hf);
            lin(li + ".fuse.slow.wq", hs, hs);
            lin(li + ".fuse.slow.wk", hf, hs);
            lin(li + ".fuse.slow.wv", hf, hs);
            lin(li + ".fuse.slow.wo", hs, hs);
          }
          break;
        case FusionVariant::LinearAttention:
          ln(li + ".fuse.fast.src_ln", hs);
          lin(li + ".fuse.fast.bridge", hs, hf);
          attention(li + ".fuse.fast", hf);
          if (cfg.cga_bidirectional) {
            ln(li + ".fuse.slow.src_ln", hf);
            lin(li + ".fuse.slow.bridge", hf, hs);
            attention(li + ".fuse.slow", hs);
          }
          break;
        case FusionVariant::DsConcat:
          lin(li + ".fuse.ds.proj", hf, hs);
          lin(li + ".fuse.ds.cat", 2 * hs, hs);
          break;
        case FusionVariant::DsSum:
          lin(li + ".fuse.ds.proj", hf, hs);
          break;
        case FusionVariant::None:
          break;
      }
    }

    ln(li + ".slow.ffn_ln", hs);
    ffn(li + ".slow.ffn", hs, cfg.ffn_slow_dim());
    ln(li + ".fast.ffn_ln", hf);
    ffn(li + ".fast.ffn", hf, cfg.ffn_fast_dim());
  }
  ln("enc.slow.final_ln", hs);
  ln("enc.fast.final_ln", hf);

  if (cfg.interaction_mode == InteractionMode::Fast) lin("bridge.memory", hf, hs);

  for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
    const std::string li = "dec." + std::to_string(i);
    ln(li + ".self_ln", hs);
    attention(li + ".self", hs);
    ln(li + ".cross_ln", hs);
    attention(li + ".cross", hs);
    if (cfg.interaction_mode == InteractionMode::GatedBoth) {
      lin(li + ".cross.fast_wk", hf, hs);
      lin(li + ".cross.fast_wv", hf, hs);
      lin(li + ".cross.gate_w", 2 * hs, hs);
      bias(li + ".cross.gate_b", hs);
    }
    ln(li + ".ffn_ln", hs);
    ffn(li + ".ffn", hs, cfg.ffn_slow_dim());
  }
  ln("dec.final_ln", hs);
  return m;
}

// sinusoidal absolute positions, returned as a constant (non-learned) tensor
template <class T>
Tensor<T> sinusoidal_pe(std::size_t len, std::size_t h) {
  std::vector<T> data(len * h);
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < h / 2; ++i) {
      double angle = static_cast<double>(pos) /
                     std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(h));
      data[pos * h + 2 * i] = static_cast<T>(std::sin(angle));
      data[pos * h + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  return Tensor<T>({len, h}, std::move(data));
}

// ---------------------------------------------------------------------------
// layers

// Multi-head attention core: full-width Q, K, V in; concatenated per-head
// contexts out (no output projection). The optional relative-position term is
// a Shaw-style additive key embedding shared across heads, added to the
// logits before the 1/sqrt(d_k) scaling; OUT rows contribute nothing.
template <class T>
Tensor<T> multihead_attend(const Tensor<T>& q, const Tensor<T>& k,
                           const Tensor<T>& v, std::size_t heads,
                           const Mask& mask,
                           std::type_identity_t<const Tensor<T>*> relpos_table,
                           const std::vector<int>* relpos_rows,
                           double attn_dropout, Rng& rng, bool training) {
  const std::size_t h = q.dim(1), d = h / heads, lk = k.dim(0);
  Tensor<T> out;
  for (std::size_t head = 0; head < heads; ++head) {
    auto qh = slice_cols(q, head * d, d);
    auto kh = slice_cols(k, head * d, d);
    auto vh = slice_cols(v, head * d, d);
    auto logits = matmul(qh, transpose(kh));
    if (relpos_table && relpos_rows)
      logits = add(logits, relpos_bias(qh, *relpos_table, *relpos_rows, lk));
    logits = scale(logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    auto attn = softmax_rows(logits, &mask);
    attn = dropout(attn, attn_dropout, rng, training);
    auto ctx = matmul(attn, vh);
    out = head == 0 ? ctx : concat_cols(out, ctx);
  }
  return out;
}

template <class T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;
  std::size_t heads = 1;
};

template <class T>
AttentionParams<T> attention_params(Model<T>& m, const std::string& prefix,
                                    std::size_t heads) {
  return {m.p(prefix + ".wq"), m.p(prefix + ".wk"), m.p(prefix + ".wv"),
          m.p(prefix + ".wo"), heads};
}

template <class T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                         const Mask& mask,
                         std::type_identity_t<const Tensor<T>*> relpos_table = nullptr,
                         const std::vector<int>* relpos_rows = nullptr,
                         double attn_dropout = 0.0, Rng* rng = nullptr,
                         bool training = false) {
  Rng dummy;
  Rng& r = rng ? *rng : dummy;
  auto ctx = multihead_attend(matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv),
                              p.heads, mask, relpos_table, relpos_rows,
                              attn_dropout, r, training);
  return matmul(ctx, p.wo);
}

// σ(N · x · W) with the pre-normalized adjacency N supplied as a constant.
template <class T>
Tensor<T> gcn_layer(const Tensor<T>& x, const Tensor<T>& normalized_adjacency,
                    const Tensor<T>& w) {
  return relu(matmul(normalized_adjacency, matmul(x, w)));
}

// One branch's view of the cross-granularity attention sublayer: the
// destination's post-attention residual state queries the other branch's
// layer-normalized state through width-bridging key/value projections.
template <class T>
struct CgaParams {
  Tensor<T> src_ln_g, src_ln_b;  // LN(x_src)
  Tensor<T> wq, wk, wv, wo;
  std::size_t heads = 1;
};

template <class T>
Tensor<T> cross_granularity_attention(const Tensor<T>& x_dst,
                                      const Tensor<T>& x_src,
                                      const CgaParams<T>& p, const Mask& src_mask,
                                      double attn_dropout = 0.0,
                                      Rng* rng = nullptr, bool training = false) {
  Rng dummy;
  Rng& r = rng ? *rng : dummy;
  auto x_hat = layer_norm(x_src, p.src_ln_g, p.src_ln_b);
  auto ctx = multihead_attend(matmul(x_dst, p.wq), matmul(x_hat, p.wk),
                              matmul(x_hat, p.wv), p.heads, src_mask, nullptr,
                              nullptr, attn_dropout, r, training);
  return matmul(ctx, p.wo);
}

template <class T>
Tensor<T> ffn_forward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                      const Tensor<T>& w2, const Tensor<T>& b2,
                      double act_dropout = 0.0, Rng* rng = nullptr,
                      bool training = false) {
  Rng dummy;
  Rng& r = rng ? *rng : dummy;
  auto hidden = relu(add_rowwise(matmul(x, w1), b1));
  hidden = dropout(hidden, act_dropout, r, training);
  return add_rowwise(matmul(hidden, w2), b2);
}

// ---------------------------------------------------------------------------
// encoder

template <class T>
struct EncodeOut {
  Tensor<T> slow, fast;
};

namespace detail {

template <class T>
Tensor<T> residual(const Tensor<T>& x, const Tensor<T>& sublayer_out,
                   double resid_dropout, Rng& rng, bool training) {
  return add(x, dropout(sublayer_out, resid_dropout, rng, training));
}

template <class T>
Tensor<T> const_matrix(const std::vector<double>& values, std::size_t n) {
  std::vector<T> data(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) data[i] = static_cast<T>(values[i]);
  return Tensor<T>({n, values.size() / n}, std::move(data));
}

}  // namespace detail

// Fusion sublayer dispatch: computes the per-branch increments from the
// post-attention snapshots of both branches. ds variants update the slow
// branch only.
template <class T>
void fusion_apply(Model<T>& m, std::size_t layer, const SentenceFeatures& f,
                  Tensor<T>& x_slow, Tensor<T>& x_fast, const Mask& slow_mask,
                  const Mask& fast_mask, Rng& rng, bool training) {
  const ModelConfig& cfg = m.cfg;
  const std::string li = "enc." + std::to_string(layer) + ".fuse";
  const Tensor<T> slow_snap = x_slow, fast_snap = x_fast;
  const double pa = cfg.dropout_attention, pr = cfg.dropout_residual;

  switch (cfg.fusion_variant) {
    case FusionVariant::Cga: {
      CgaParams<T> to_fast{m.p(li + ".fast.src_ln.g"), m.p(li + ".fast.src_ln.b"),
                           m.p(li + ".fast.wq"),       m.p(li + ".fast.wk"),
                           m.p(li + ".fast.wv"),       m.p(li + ".fast.wo"),
                           cfg.heads_fast};
      auto inc_f = cross_granularity_attention(fast_snap, slow_snap, to_fast,
                                               slow_mask, pa, &rng, training);
      x_fast = detail::residual(x_fast, inc_f, pr, rng, training);
      if (cfg.cga_bidirectional) {
        CgaParams<T> to_slow{m.p(li + ".slow.src_ln.g"), m.p(li + ".slow.src_ln.b"),
                             m.p(li + ".slow.wq"),       m.p(li + ".slow.wk"),
                             m.p(li + ".slow.wv"),       m.p(li + ".slow.wo"),
                             cfg.heads_slow};
        auto inc_s = cross_granularity_attention(slow_snap, fast_snap, to_slow,
                                                 fast_mask, pa, &rng, training);
        x_slow = detail::residual(x_slow, inc_s, pr, rng, training);
      }
      break;
    }
    case FusionVariant::LinearAttention: {
      // project source to destination width first, then standard
      // cross-attention at destination width
      auto lat = [&](const std::string& dir, const Tensor<T>& dst,
                     const Tensor<T>& src, const Mask& src_mask,
                     std::size_t heads) {
        auto src_hat = layer_norm(src, m.p(li + "." + dir + ".src_ln.g"),
                                  m.p(li + "." + dir + ".src_ln.b"));
        auto bridged = matmul(src_hat, m.p(li + "." + dir + ".bridge"));
        auto ctx = multihead_attend(
            matmul(dst, m.p(li + "." + dir + ".wq")),
            matmul(bridged, m.p(li + "." + dir + ".wk")),
            matmul(bridged, m.p(li + "." + dir + ".wv")), heads, src_mask,
            nullptr, nullptr, pa, rng, training);
        return matmul(ctx, m.p(li + "." + dir + ".wo"));
      };
      auto inc_f = lat("fast", fast_snap, slow_snap, slow_mask, cfg.heads_fast);
      x_fast = detail::residual(x_fast, inc_f, pr, rng, training);
      if (cfg.cga_bidirectional) {
        auto inc_s = lat("slow", slow_snap, fast_snap, fast_mask, cfg.heads_slow);
        x_slow = detail::residual(x_slow, inc_s, pr, rng, training);
      }
      break;
    }
    case FusionVariant::DsConcat:
    case FusionVariant::DsSum: {
      // mean-pool fast positions per word, hand each slow position its
      // word's pooled vector, project up to the slow width
      auto pooled = pool_rows_mean(fast_snap, f.fast_word, f.n_word_groups, true);
      auto expanded = expand_rows(pooled, f.slow_word);
      auto projected = matmul(expanded, m.p(li + ".ds.proj"));
      Tensor<T> inc =
          cfg.fusion_variant == FusionVariant::DsSum
              ? projected
              : matmul(concat_cols(slow_snap, projected), m.p(li + ".ds.cat"));
      x_slow = detail::residual(x_slow, inc, pr, rng, training);
      break;
    }
    case FusionVariant::None:
      break;
  }
}

template <class T>
void encoder_block(Model<T>& m, std::size_t layer, const SentenceFeatures& f,
                   Tensor<T>& x_slow, Tensor<T>& x_fast, const Mask& slow_mask,
                   const Mask& fast_mask, const Tensor<T>* relpos_table,
                   Rng& rng, bool training) {
  const ModelConfig& cfg = m.cfg;
  const std::string li = "enc." + std::to_string(layer);
  const double pa = cfg.dropout_attention, pr = cfg.dropout_residual;
  const double pact = cfg.dropout_activation;

  // self-attention sublayer, pre-norm
  {
    auto z = layer_norm(x_slow, m.p(li + ".slow.san_ln.g"), m.p(li + ".slow.san_ln.b"));
    auto a = self_attention(z, attention_params(m, li + ".slow.san", cfg.heads_slow),
                            slow_mask, nullptr, nullptr, pa, &rng, training);
    x_slow = detail::residual(x_slow, a, pr, rng, training);
  }
  {
    auto z = layer_norm(x_fast, m.p(li + ".fast.san_ln.g"), m.p(li + ".fast.san_ln.b"));
    const std::vector<int>* rows = f.relpos_rows.empty() ? nullptr : &f.relpos_rows;
    auto a = self_attention(z, attention_params(m, li + ".fast.san", cfg.heads_fast),
                            fast_mask, relpos_table, rows, pa, &rng, training);
    x_fast = detail::residual(x_fast, a, pr, rng, training);
  }

  if (cfg.fusion_at(layer))
    fusion_apply(m, layer, f, x_slow, x_fast, slow_mask, fast_mask, rng, training);

  // feed-forward sublayer
  {
    auto z = layer_norm(x_slow, m.p(li + ".slow.ffn_ln.g"), m.p(li + ".slow.ffn_ln.b"));
    auto y = ffn_forward(z, m.p(li + ".slow.ffn.w1"), m.p(li + ".slow.ffn.b1"),
                         m.p(li + ".slow.ffn.w2"), m.p(li + ".slow.ffn.b2"), pact,
                         &rng, training);
    x_slow = detail::residual(x_slow, y, pr, rng, training);
  }
  {
    auto z = layer_norm(x_fast, m.p(li + ".fast.ffn_ln.g"), m.p(li + ".fast.ffn_ln.b"));
    auto y = ffn_forward(z, m.p(li + ".fast.ffn.w1"), m.p(li + ".fast.ffn.b1"),
                         m.p(li + ".fast.ffn.w2"), m.p(li + ".fast.ffn.b2"), pact,
                         &rng, training);
    x_fast = detail::residual(x_fast, y, pr, rng, training);
  }
}

template <class T>
EncodeOut<T> encode(Model<T>& m, const SentenceFeatures& f, Rng& rng,
                    bool training) {
  const ModelConfig& cfg = m.cfg;
  const std::size_t ls = f.slow_ids.size(), lf = f.fast_ids.size();
  if (ls > cfg.max_positions || lf > cfg.max_positions)
    throw ContractError("sentence exceeds max_positions");
  const double pr = cfg.dropout_residual;

  auto embed = [&](const std::string& table, const std::vector<int>& ids,
                   std::size_t h, std::size_t len) {
    auto x = scale(embedding(m.p(table), ids),
                   static_cast<T>(std::sqrt(static_cast<double>(h))));
    x = add(x, sinusoidal_pe<T>(len, h));
    return dropout(x, pr, rng, training);
  };
  Tensor<T> x_slow = embed("emb.slow", f.slow_ids, cfg.hidden_slow, ls);
  Tensor<T> x_fast = embed("emb.fast", f.fast_ids, cfg.hidden_fast, lf);

  // one boundary GCN sublayer per branch before the block stack
  {
    auto adj = detail::const_matrix<T>(f.adj_slow, ls);
    auto z = layer_norm(x_slow, m.p("gcn.slow.ln.g"), m.p("gcn.slow.ln.b"));
    x_slow = detail::residual(x_slow, gcn_layer(z, adj, m.p("gcn.slow.w")), pr, rng,
                              training);
  }
  {
    auto adj = detail::const_matrix<T>(f.adj_fast, lf);
    auto z = layer_norm(x_fast, m.p("gcn.fast.ln.g"), m.p("gcn.fast.ln.b"));
    x_fast = detail::residual(x_fast, gcn_layer(z, adj, m.p("gcn.fast.w")), pr, rng,
                              training);
  }

  Mask slow_mask = key_mask(f.slow_valid);
  Mask fast_mask = key_mask(f.fast_valid);
  const Tensor<T>* relpos =
      cfg.relpos_mode != RelposMode::None ? &m.p("relpos.fast") : nullptr;
  for (std::size_t layer = 0; layer < cfg.layers; ++layer)
    encoder_block(m, layer, f, x_slow, x_fast, slow_mask, fast_mask, relpos, rng,
                  training);

  EncodeOut<T> out;
  out.slow = layer_norm(x_slow, m.p("enc.slow.final_ln.g"), m.p("enc.slow.final_ln.b"));
  out.fast = layer_norm(x_fast, m.p("enc.fast.final_ln.g"), m.p("enc.fast.final_ln.b"));
  return out;
}

// ---------------------------------------------------------------------------
// encoder-decoder interaction and decoder

template <class T>
struct DecoderMemory {
  Tensor<T> mem;  // [L_mem, H_s]
  std::vector<std::uint8_t> valid;
  // gated mode: the raw fast output, up-projected inside each decoder layer
  Tensor<T> fast_mem;
  std::vector<std::uint8_t> fast_valid;
  bool gated = false;
};

template <class T>
DecoderMemory<T> encdec_interaction(Model<T>& m, const EncodeOut<T>& enc,
                                    const SentenceFeatures& f) {
  DecoderMemory<T> mem;
  switch (m.cfg.interaction_mode) {
    case InteractionMode::Slow:
      mem.mem = enc.slow;
      mem.valid = f.slow_valid;
      break;
    case InteractionMode::Fast:
      mem.mem = matmul(enc.fast, m.p("bridge.memory"));
      mem.valid = f.fast_valid;
      break;
    case InteractionMode::GatedBoth:
      mem.mem = enc.slow;
      mem.valid = f.slow_valid;
      mem.fast_mem = enc.fast;
      mem.fast_valid = f.fast_valid;
      mem.gated = true;
      break;
  }
  return mem;
}

// Teacher-forced decoder forward: tgt_in starts with <s>; returns logits over
// the target vocabulary, tied to the target embedding.
template <class T>
Tensor<T> decode_forward(Model<T>& m, const std::vector<int>& tgt_in,
                         const std::vector<std::uint8_t>& tgt_valid,
                         const DecoderMemory<T>& memory, Rng& rng, bool training) {
  const ModelConfig& cfg = m.cfg;
  const std::size_t tlen = tgt_in.size(), hs = cfg.hidden_slow;
  if (tlen > cfg.max_positions) throw ContractError("target exceeds max_positions");
  const double pa = cfg.dropout_attention, pr = cfg.dropout_residual;
  const double pact = cfg.dropout_activation;

  auto y = scale(embedding(m.p("emb.target"), tgt_in),
                 static_cast<T>(std::sqrt(static_cast<double>(hs))));
  y = add(y, sinusoidal_pe<T>(tlen, hs));
  y = dropout(y, pr, rng, training);

  Mask self_mask = causal_mask(tlen, tgt_valid);
  Mask mem_mask = key_mask(memory.valid);
  Mask fast_mask = memory.gated ? key_mask(memory.fast_valid) : Mask{};

  for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
    const std::string li = "dec." + std::to_string(i);
    {
      auto z = layer_norm(y, m.p(li + ".self_ln.g"), m.p(li + ".self_ln.b"));
      auto a = self_attention(z, attention_params(m, li + ".self", cfg.heads_slow),
                              self_mask, nullptr, nullptr, pa, &rng, training);
      y = detail::residual(y, a, pr, rng, training);
    }
    {
      auto z = layer_norm(y, m.p(li + ".cross_ln.g"), m.p(li + ".cross_ln.b"));
      auto q = matmul(z, m.p(li + ".cross.wq"));
      auto ctx = multihead_attend(q, matmul(memory.mem, m.p(li + ".cross.wk")),
                                  matmul(memory.mem, m.p(li + ".cross.wv")),
                                  cfg.heads_slow, mem_mask, nullptr, nullptr, pa,
                                  rng, training);
      if (memory.gated) {
        // per-dimension logistic gate over the two cross-attention contexts
        auto ctx_fast = multihead_attend(
            q, matmul(memory.fast_mem, m.p(li + ".cross.fast_wk")),
            matmul(memory.fast_mem, m.p(li + ".cross.fast_wv")), cfg.heads_slow,
            fast_mask, nullptr, nullptr, pa, rng, training);
        auto gate = logistic(add_rowwise(
            matmul(concat_cols(ctx, ctx_fast), m.p(li + ".cross.gate_w")),
            m.p(li + ".cross.gate_b")));
        Tensor<T> ones(gate.shape(), T(1));
        ctx = add(mul(gate, ctx), mul(sub(ones, gate), ctx_fast));
      }
      auto a = matmul(ctx, m.p(li + ".cross.wo"));
      y = detail::residual(y, a, pr, rng, training);
    }
    {
      auto z = layer_norm(y, m.p(li + ".ffn_ln.g"), m.p(li + ".ffn_ln.b"));
      auto out = ffn_forward(z, m.p(li + ".ffn.w1"), m.p(li + ".ffn.b1"),
                             m.p(li + ".ffn.w2"), m.p(li + ".ffn.b2"), pact, &rng,
                             training);
      y = detail::residual(y, out, pr, rng, training);
    }
  }
  y = layer_norm(y, m.p("dec.final_ln.g"), m.p("dec.final_ln.b"));
  return matmul(y, transpose(m.p("emb.target")));  // tied output projection
}

}  // namespace sfnmt
