#include "mct/layers.hpp"

#include <cmath>

#include "mct/errors.hpp"

namespace mct {

LinearParams init_linear(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return {glorot_uniform(fan_in, fan_out, rng), Tensor({fan_out})};
}

MultiHeadParams init_multi_head(std::size_t d_model, std::size_t n_heads, std::size_t d_head, Rng& rng) {
  MultiHeadParams p;
  p.heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    AttentionHeadParams head;
    head.w_q = glorot_uniform(d_model, d_head, rng);
    head.w_k = glorot_uniform(d_model, d_head, rng);
    head.w_v = glorot_uniform(d_model, d_head, rng);
    p.heads.push_back(std::move(head));
  }
  p.w_out = glorot_uniform(n_heads * d_head, d_model, rng);
  return p;
}

LayerNormParams init_layer_norm(std::size_t width) { return {Tensor::filled({width}, 1.0), Tensor({width})}; }

FeedForwardParams init_feed_forward(std::size_t d_model, std::size_t d_ffn, Rng& rng) {
  FeedForwardParams p;
  p.w1 = glorot_uniform(d_model, d_ffn, rng);
  p.b1 = Tensor({d_ffn});
  p.w2 = glorot_uniform(d_ffn, d_model, rng);
  p.b2 = Tensor({d_model});
  return p;
}

void visit(LinearParams& p, const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".weight", p.weight);
  f(prefix + ".bias", p.bias);
}

void visit(AttentionHeadParams& p, const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w_q", p.w_q);
  f(prefix + ".w_k", p.w_k);
  f(prefix + ".w_v", p.w_v);
}

void visit(MultiHeadParams& p, const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t h = 0; h < p.heads.size(); ++h) visit(p.heads[h], prefix + ".head" + std::to_string(h), f);
  f(prefix + ".w_out", p.w_out);
}

void visit(LayerNormParams& p, const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gain", p.gain);
  f(prefix + ".bias", p.bias);
}

void visit(FeedForwardParams& p, const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w1", p.w1);
  f(prefix + ".b1", p.b1);
  f(prefix + ".w2", p.w2);
  f(prefix + ".b2", p.b2);
}

Tensor attend(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src, const AttentionHeadParams& head,
              const Mask* allowed, AttentionTrace* trace) {
  if (k_src.rows() != v_src.rows()) {
    throw ShapeError("attend: key rows " + std::to_string(k_src.rows()) + " != value rows " +
                     std::to_string(v_src.rows()));
  }
  const Tensor q = matmul(q_src, head.w_q);
  const Tensor k = matmul(k_src, head.w_k);
  const Tensor v = matmul(v_src, head.w_v);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head.w_q.cols())));
  if (allowed) {
    if (allowed->rows() != scores.rows() || allowed->cols() != scores.cols()) {
      throw ShapeError("attend: mask " + shape_string({allowed->rows(), allowed->cols()}) + " vs scores " +
                       shape_string(scores.shape()));
    }
    scores = masked_fill(scores, allowed->inverted(), kMaskedScore);
  }
  const Tensor weights = softmax_rows(scores);
  if (trace) trace->weights.push_back(weights.detach());
  return matmul(weights, v);
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& memory, const MultiHeadParams& params,
                            const Mask* allowed, AttentionTrace* trace) {
  std::vector<Tensor> heads;
  heads.reserve(params.heads.size());
  for (const auto& head : params.heads) heads.push_back(attend(queries, memory, memory, head, allowed, trace));
  return matmul(concat_cols(heads), params.w_out);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params) {
  const Tensor hidden = relu(add_bias(matmul(x, params.w1), params.b1));
  return add_bias(matmul(hidden, params.w2), params.b2);
}

Tensor norm(const Tensor& x, const LayerNormParams& params) {
  return layer_norm(x, params.gain, params.bias, kLayerNormEps);
}

Tensor linear(const Tensor& x, const LinearParams& params) { return add_bias(matmul(x, params.weight), params.bias); }

}  // namespace mct
