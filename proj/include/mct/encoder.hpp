#pragma once

#include <string>
#include <vector>

#include "mct/layers.hpp"

namespace mct {

/// Image encoder hyperparameters. Defaults are the full-scale setting
/// (2048-d bottom-up features, width 1024, 8 heads of 128, two blocks).
struct EncoderConfig {
  std::size_t d_feat = 2048;
  std::size_t d_model = 1024;
  std::size_t n_heads = 8;
  std::size_t d_head = 128;
  std::size_t d_ffn = 4096;
  std::size_t depth = 2;

  /// Small widths used by tests and the toy pipeline.
  static EncoderConfig desk();
  /// Throws ContractError when n_heads·d_head != d_model or depth == 0.
  void validate() const;
};

/// Bottom-up region descriptors of one image, one row per detected region.
struct RegionFeatures {
  std::string image_id;
  Tensor matrix;
};

struct EncoderBlockParams {
  MultiHeadParams attention;
  LayerNormParams norm1;
  LayerNormParams norm2;
  FeedForwardParams ffn;
};

EncoderBlockParams init_encoder_block(const EncoderConfig& cfg, Rng& rng);
void visit(EncoderBlockParams& p, const std::string& prefix, const ParamVisitor& f);

/// U0 = relu(U·W_proj + b_proj): lifts d_feat-wide region rows to d_model.
Tensor project_features(const Tensor& regions, const LinearParams& projection);
Tensor project_features(const RegionFeatures& regions, const LinearParams& projection);

/// Self-attention sublayer output before the residual: concat of all heads
/// times the block's output projection.
Tensor multi_head(const Tensor& x, const EncoderBlockParams& block, AttentionTrace* trace = nullptr);

/// C = Norm(U + MHA(U)); U' = Norm(C + FFN(C)).
Tensor encoder_block(const Tensor& input, const EncoderBlockParams& block, AttentionTrace* trace = nullptr);

/// Folds encoder_block over `blocks`. Regions carry no positional signal, so
/// the result is equivariant under row permutations of `u0`.
Tensor encode(const Tensor& u0, const std::vector<EncoderBlockParams>& blocks, AttentionTrace* trace = nullptr);

}  // namespace mct
