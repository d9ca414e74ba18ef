#pragma once

#include <cstdint>
#include <ostream>
#include <string>

#include "sfnmt/config.hpp"

namespace sfnmt {

// Analytic matrix-multiply FLOP counts (2*m*k*n per product) for one
// sentence's forward pass. Mirrors the exact sequence of products the model
// executes, so these figures match the instrumented counter exactly.
// Embedding lookups, softmax, layer norm, pooling, and the additive
// relative-position term are excluded on both sides.
struct FlopsBreakdown {
  std::uint64_t slow_encoder = 0;
  std::uint64_t fast_encoder = 0;
  std::uint64_t fusion = 0;
  std::uint64_t interaction = 0;
  std::uint64_t decoder = 0;

  std::uint64_t total() const {
    return slow_encoder + fast_encoder + fusion + interaction + decoder;
  }
};

// ls: subword length, lf: fast-branch length, t: target length (with <s>).
inline FlopsBreakdown flops_forward(const ModelConfig& cfg, std::uint64_t ls,
                                    std::uint64_t lf, std::uint64_t t) {
  const std::uint64_t hs = cfg.hidden_slow, hf = cfg.hidden_fast;
  const std::uint64_t ffs = cfg.ffn_slow_dim(), fff = cfg.ffn_fast_dim();
  FlopsBreakdown b;

  // boundary graph convolution: x*W then N*(xW)
  b.slow_encoder += 2 * ls * hs * hs + 2 * ls * ls * hs;
  b.fast_encoder += 2 * lf * hf * hf + 2 * lf * lf * hf;

  for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
    // self-attention: 4 width projections + per-head QK^T and attn*V
    b.slow_encoder += 8 * ls * hs * hs + 4 * ls * ls * hs;
    b.fast_encoder += 8 * lf * hf * hf + 4 * lf * lf * hf;

    if (cfg.fusion_at(layer)) {
      switch (cfg.fusion_variant) {
        case FusionVariant::Cga:
          b.fusion += 2 * lf * hf * hf       // W_q
                      + 2 * 2 * ls * hs * hf // W_k, W_v bridge down
                      + 4 * lf * ls * hf     // QK^T + attn*V
                      + 2 * lf * hf * hf;    // W_o
          if (cfg.cga_bidirectional)
            b.fusion += 2 * ls * hs * hs + 2 * 2 * lf * hf * hs +
                        4 * ls * lf * hs + 2 * ls * hs * hs;
          break;
        case FusionVariant::LinearAttention:
          b.fusion += 2 * ls * hs * hf                      // bridge down
                      + 2 * lf * hf * hf                    // W_q
                      + 2 * 2 * ls * hf * hf                // W_k, W_v
                      + 4 * lf * ls * hf + 2 * lf * hf * hf;
          if (cfg.cga_bidirectional)
            b.fusion += 2 * lf * hf * hs + 2 * ls * hs * hs +
                        2 * 2 * lf * hs * hs + 4 * ls * lf * hs +
                        2 * ls * hs * hs;
          break;
        case FusionVariant::DsConcat:
          b.fusion += 2 * ls * hf * hs + 2 * ls * (2 * hs) * hs;
          break;
        case FusionVariant::DsSum:
          b.fusion += 2 * ls * hf * hs;
          break;
        case FusionVariant::None:
          break;
      }
    }

    b.slow_encoder += 4 * ls * hs * ffs;
    b.fast_encoder += 4 * lf * hf * fff;
  }

  std::uint64_t lm = ls;
  if (cfg.interaction_mode == InteractionMode::Fast) {
    b.interaction += 2 * lf * hf * hs;
    lm = lf;
  }

  for (std::size_t layer = 0; layer < cfg.decoder_layers; ++layer) {
    b.decoder += 8 * t * hs * hs + 4 * t * t * hs;               // self-attention
    b.decoder += 2 * t * hs * hs                                  // cross W_q
                 + 2 * 2 * lm * hs * hs                           // cross W_k, W_v
                 + 4 * t * lm * hs;                               // QK^T + attn*V
    if (cfg.interaction_mode == InteractionMode::GatedBoth)
      b.decoder += 2 * 2 * lf * hf * hs     // fast-memory K, V projections
                   + 4 * t * lf * hs        // fast-context attention
                   + 2 * t * (2 * hs) * hs; // gate
    b.decoder += 2 * t * hs * hs;           // cross W_o
    b.decoder += 4 * t * hs * ffs;          // feed-forward
  }
  b.decoder += 2 * t * hs * cfg.vocab_target;  // tied output projection

  return b;
}

inline void print_flops(std::ostream& out, const FlopsBreakdown& b) {
  out << "slow_encoder: " << b.slow_encoder << "\n"
      << "fast_encoder: " << b.fast_encoder << "\n"
      << "fusion:       " << b.fusion << "\n"
      << "interaction:  " << b.interaction << "\n"
      << "decoder:      " << b.decoder << "\n"
      << "total:        " << b.total() << "\n";
}

}  // namespace sfnmt
