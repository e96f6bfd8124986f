#include "mct/encoder.hpp"

#include "mct/errors.hpp"

namespace mct {

EncoderConfig EncoderConfig::desk() {
  EncoderConfig cfg;
  cfg.d_feat = 16;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_head = 8;
  cfg.d_ffn = 64;
  cfg.depth = 2;
  return cfg;
}

void EncoderConfig::validate() const {
  if (n_heads * d_head != d_model) {
    throw ContractError("encoder: n_heads (" + std::to_string(n_heads) + ") x d_head (" + std::to_string(d_head) +
                        ") must equal d_model (" + std::to_string(d_model) + ")");
  }
  if (depth < 1) throw ContractError("encoder: depth must be at least 1");
  if (d_feat < 1 || d_ffn < 1 || n_heads < 1) throw ContractError("encoder: widths must be positive");
}

EncoderBlockParams init_encoder_block(const EncoderConfig& cfg, Rng& rng) {
  EncoderBlockParams p;
  p.attention = init_multi_head(cfg.d_model, cfg.n_heads, cfg.d_head, rng);
  p.norm1 = init_layer_norm(cfg.d_model);
  p.norm2 = init_layer_norm(cfg.d_model);
  p.ffn = init_feed_forward(cfg.d_model, cfg.d_ffn, rng);
  return p;
}

void visit(EncoderBlockParams& p, const std::string& prefix, const ParamVisitor& f) {
  visit(p.attention, prefix + ".attn", f);
  visit(p.norm1, prefix + ".norm1", f);
  visit(p.norm2, prefix + ".norm2", f);
  visit(p.ffn, prefix + ".ffn", f);
}

Tensor project_features(const Tensor& regions, const LinearParams& projection) {
  if (regions.cols() != projection.weight.rows()) {
    throw ShapeError("project_features: region width " + std::to_string(regions.cols()) + " but d_feat is " +
                     std::to_string(projection.weight.rows()));
  }
  return relu(linear(regions, projection));
}

Tensor project_features(const RegionFeatures& regions, const LinearParams& projection) {
  return project_features(regions.matrix, projection);
}

Tensor multi_head(const Tensor& x, const EncoderBlockParams& block, AttentionTrace* trace) {
  return multi_head_attention(x, x, block.attention, nullptr, trace);
}

Tensor encoder_block(const Tensor& input, const EncoderBlockParams& block, AttentionTrace* trace) {
  const Tensor attended = norm(add(input, multi_head(input, block, trace)), block.norm1);
  return norm(add(attended, feed_forward(attended, block.ffn)), block.norm2);
}

Tensor encode(const Tensor& u0, const std::vector<EncoderBlockParams>& blocks, AttentionTrace* trace) {
  if (blocks.empty()) throw ContractError("encode: at least one block is required");
  Tensor u = u0;
  for (const auto& block : blocks) u = encoder_block(u, block, trace);
  return u;
}

}  // namespace mct
