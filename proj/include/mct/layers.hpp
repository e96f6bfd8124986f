#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mct/random.hpp"
#include "mct/tensor.hpp"

namespace mct {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kMaskedScore = -1e9;

using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& param)>;

/// Affine map x·weight + bias.
struct LinearParams {
  Tensor weight;
  Tensor bias;
};

/// Per-head query/key/value projections, each d_model×d_head.
struct AttentionHeadParams {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;
};

/// Heads plus the d_model×d_model projection applied to their concatenation.
struct MultiHeadParams {
  std::vector<AttentionHeadParams> heads;
  Tensor w_out;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

/// relu(x·w1 + b1)·w2 + b2
struct FeedForwardParams {
  Tensor w1;
  Tensor b1;
  Tensor w2;
  Tensor b2;
};

LinearParams init_linear(std::size_t fan_in, std::size_t fan_out, Rng& rng);
MultiHeadParams init_multi_head(std::size_t d_model, std::size_t n_heads, std::size_t d_head, Rng& rng);
LayerNormParams init_layer_norm(std::size_t width);
FeedForwardParams init_feed_forward(std::size_t d_model, std::size_t d_ffn, Rng& rng);

void visit(LinearParams& p, const std::string& prefix, const ParamVisitor& f);
void visit(AttentionHeadParams& p, const std::string& prefix, const ParamVisitor& f);
void visit(MultiHeadParams& p, const std::string& prefix, const ParamVisitor& f);
void visit(LayerNormParams& p, const std::string& prefix, const ParamVisitor& f);
void visit(FeedForwardParams& p, const std::string& prefix, const ParamVisitor& f);

/// Optional capture of post-softmax attention weights, one entry per head.
struct AttentionTrace {
  std::vector<Tensor> weights;
};

/// Scaled dot-product attention for one head:
///   softmax((q_src·W_q)(k_src·W_k)ᵀ / √d_head) · (v_src·W_v)
/// `allowed`, when given, is rows(q_src)×rows(k_src); disallowed scores are
/// replaced by kMaskedScore before the softmax.
Tensor attend(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src, const AttentionHeadParams& head,
              const Mask* allowed = nullptr, AttentionTrace* trace = nullptr);

/// Concatenates every head's output column-wise and projects with w_out.
Tensor multi_head_attention(const Tensor& queries, const Tensor& memory, const MultiHeadParams& params,
                            const Mask* allowed = nullptr, AttentionTrace* trace = nullptr);

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params);
Tensor norm(const Tensor& x, const LayerNormParams& params);
Tensor linear(const Tensor& x, const LinearParams& params);

}  // namespace mct
