#pragma once

#include <string>
#include <vector>

#include "mct/layers.hpp"

namespace mct {

struct DecoderConfig {
  std::size_t d_model = 1024;
  std::size_t n_heads = 8;
  std::size_t d_head = 128;
  std::size_t d_ffn = 4096;
  std::size_t depth = 2;
  std::size_t max_len = 20;

  static DecoderConfig desk();
  void validate() const;
};

struct DecoderBlockParams {
  MultiHeadParams self_attention;
  MultiHeadParams cross_attention;
  LayerNormParams norm1;
  LayerNormParams norm2;
  LayerNormParams norm3;
  FeedForwardParams ffn;
};

/// Maps decoder rows to vocabulary logits.
struct GeneratorParams {
  Tensor weight;  // d_model×|V|
  Tensor bias;
};

DecoderBlockParams init_decoder_block(const DecoderConfig& cfg, Rng& rng);
void visit(DecoderBlockParams& p, const std::string& prefix, const ParamVisitor& f);

/// Allowed positions of causal self-attention: (i, j) iff j ≤ i.
Mask causal_mask(std::size_t length);

/// Fixed sinusoidal position table, length×width.
Tensor positional_encoding(std::size_t length, std::size_t width);

/// D_m = Norm(U + MaskedMHA(U, U, U))
Tensor masked_self_attention(const Tensor& words, const DecoderBlockParams& block, AttentionTrace* trace = nullptr);
/// Same sublayer with no mask; used to check the masked form.
Tensor unmasked_self_attention(const Tensor& words, const DecoderBlockParams& block);

/// D_f = Norm(D_m + MHA(D_m, U^M, U^M)); queries from text, keys and values
/// from the image memory.
Tensor cross_attention(const Tensor& text, const Tensor& memory, const DecoderBlockParams& block,
                       AttentionTrace* trace = nullptr);

/// Masked self-attention, cross-attention, then Norm(· + FFN(·)).
Tensor decoder_block(const Tensor& x, const Tensor& memory, const DecoderBlockParams& block);

}  // namespace mct
