#include "mct/decoder.hpp"

#include <cmath>

#include "mct/errors.hpp"

namespace mct {

DecoderConfig DecoderConfig::desk() {
  DecoderConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_head = 8;
  cfg.d_ffn = 64;
  cfg.depth = 2;
  cfg.max_len = 20;
  return cfg;
}

void DecoderConfig::validate() const {
  if (n_heads * d_head != d_model) {
    throw ContractError("decoder: n_heads (" + std::to_string(n_heads) + ") x d_head (" + std::to_string(d_head) +
                        ") must equal d_model (" + std::to_string(d_model) + ")");
  }
  if (depth < 1) throw ContractError("decoder: depth must be at least 1");
  if (max_len < 2) throw ContractError("decoder: max_len must be at least 2");
  if (d_ffn < 1 || n_heads < 1) throw ContractError("decoder: widths must be positive");
}

DecoderBlockParams init_decoder_block(const DecoderConfig& cfg, Rng& rng) {
  DecoderBlockParams p;
  p.self_attention = init_multi_head(cfg.d_model, cfg.n_heads, cfg.d_head, rng);
  p.cross_attention = init_multi_head(cfg.d_model, cfg.n_heads, cfg.d_head, rng);
  p.norm1 = init_layer_norm(cfg.d_model);
  p.norm2 = init_layer_norm(cfg.d_model);
  p.norm3 = init_layer_norm(cfg.d_model);
  p.ffn = init_feed_forward(cfg.d_model, cfg.d_ffn, rng);
  return p;
}

void visit(DecoderBlockParams& p, const std::string& prefix, const ParamVisitor& f) {
  visit(p.self_attention, prefix + ".self_attn", f);
  visit(p.cross_attention, prefix + ".cross_attn", f);
  visit(p.norm1, prefix + ".norm1", f);
  visit(p.norm2, prefix + ".norm2", f);
  visit(p.norm3, prefix + ".norm3", f);
  visit(p.ffn, prefix + ".ffn", f);
}

Mask causal_mask(std::size_t length) {
  if (length < 1) throw ContractError("causal_mask: length must be positive");
  Mask mask(length, length, false);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
  return mask;
}

Tensor positional_encoding(std::size_t length, std::size_t width) {
  Tensor pe({length, width});
  auto data = pe.mutable_data();
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(width);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      data[pos * width + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor masked_self_attention(const Tensor& words, const DecoderBlockParams& block, AttentionTrace* trace) {
  const Mask allowed = causal_mask(words.rows());
  return norm(add(words, multi_head_attention(words, words, block.self_attention, &allowed, trace)), block.norm1);
}

Tensor unmasked_self_attention(const Tensor& words, const DecoderBlockParams& block) {
  return norm(add(words, multi_head_attention(words, words, block.self_attention)), block.norm1);
}

Tensor cross_attention(const Tensor& text, const Tensor& memory, const DecoderBlockParams& block,
                       AttentionTrace* trace) {
  if (text.cols() != memory.cols()) {
    throw ShapeError("cross_attention: text width " + std::to_string(text.cols()) + " vs memory width " +
                     std::to_string(memory.cols()));
  }
  return norm(add(text, multi_head_attention(text, memory, block.cross_attention, nullptr, trace)), block.norm2);
}

Tensor decoder_block(const Tensor& x, const Tensor& memory, const DecoderBlockParams& block) {
  const Tensor fused = cross_attention(masked_self_attention(x, block), memory, block);
  return norm(add(fused, feed_forward(fused, block.ffn)), block.norm3);
}

}  // namespace mct
