#include <gtest/gtest.h>

#include <cmath>

#include "mct/decoder.hpp"
#include "mct/errors.hpp"
#include "mct/gradcheck.hpp"
#include "mct/model.hpp"

namespace mct {
namespace {

DecoderConfig small_decoder() {
  DecoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.d_ffn = 16;
  cfg.depth = 2;
  cfg.max_len = 6;
  return cfg;
}

void expect_rows_near(const Tensor& a, std::size_t a_row, const Tensor& b, std::size_t b_row, double tol) {
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) EXPECT_NEAR(a.at(a_row, j), b.at(b_row, j), tol) << "column " << j;
}

TEST(CausalMask, LowerTriangle) {
  const Mask m = causal_mask(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m(i, j), j <= i);
  EXPECT_EQ(m.count(), 10u);
  const Mask one = causal_mask(1);
  EXPECT_TRUE(one(0, 0));
  EXPECT_THROW(causal_mask(0), ContractError);
}

TEST(PositionalEncoding, SinusoidTable) {
  const Tensor pe = positional_encoding(5, 6);
  ASSERT_EQ(pe.shape(), (Shape{5, 6}));
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(pe.at(0, j), j % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe.at(3, 0), std::sin(3.0), 1e-15);
  EXPECT_NEAR(pe.at(3, 1), std::cos(3.0), 1e-15);
  EXPECT_NEAR(pe.at(2, 4), std::sin(2.0 / std::pow(10000.0, 4.0 / 6.0)), 1e-15);
  EXPECT_NEAR(pe.at(2, 5), std::cos(2.0 / std::pow(10000.0, 4.0 / 6.0)), 1e-15);
}

TEST(MaskedSelfAttention, RowsIgnoreLaterWords) {
  Rng rng(1);
  const DecoderConfig cfg = small_decoder();
  const DecoderBlockParams block = init_decoder_block(cfg, rng);
  const Tensor x = random_normal({5, 8}, rng);
  const Tensor full = masked_self_attention(x, block);
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor prefix = masked_self_attention(slice_rows(x, 0, i + 1), block);
    expect_rows_near(full, i, prefix, i, 1e-13);
  }
}

TEST(MaskedSelfAttention, WeightsAreZeroAboveDiagonal) {
  Rng rng(2);
  const DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  AttentionTrace trace;
  masked_self_attention(random_normal({4, 8}, rng), block, &trace);
  ASSERT_EQ(trace.weights.size(), 2u);
  for (const Tensor& w : trace.weights)
    for (std::size_t i = 0; i < 4; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        total += w.at(i, j);
        if (j > i) EXPECT_LT(w.at(i, j), 1e-300);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(MaskedSelfAttention, SingleWordMatchesUnmasked) {
  Rng rng(3);
  const DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  const Tensor x = random_normal({1, 8}, rng);
  expect_rows_near(masked_self_attention(x, block), 0, unmasked_self_attention(x, block), 0, 1e-15);
  const Tensor longer = random_normal({3, 8}, rng);
  // and the last row of a longer sequence sees everything
  expect_rows_near(masked_self_attention(longer, block), 2, unmasked_self_attention(longer, block), 2, 1e-13);
}

TEST(CrossAttention, SingleRegionIgnoresQueries) {
  Rng rng(4);
  const DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  const Tensor memory = random_normal({1, 8}, rng);
  const Tensor text = random_normal({3, 8}, rng);
  // With one key every weight is 1, so each head returns memory·W_v.
  std::vector<Tensor> heads;
  for (const auto& head : block.cross_attention.heads) heads.push_back(matmul(memory, head.w_v));
  const Tensor attended = matmul(concat_cols(heads), block.cross_attention.w_out);
  const Tensor expected = norm(add_bias(text, attended), block.norm2);
  const Tensor got = cross_attention(text, memory, block);
  for (std::size_t i = 0; i < 3; ++i) expect_rows_near(got, i, expected, i, 1e-13);
}

TEST(CrossAttention, InvariantToRegionOrder) {
  Rng rng(5);
  const DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  const Tensor memory = random_normal({4, 8}, rng);
  const Tensor text = random_normal({3, 8}, rng);
  const std::vector<int> order = {2, 0, 3, 1};
  const Tensor permuted = embedding_rows(memory, order);
  const Tensor a = cross_attention(text, memory, block), b = cross_attention(text, permuted, block);
  for (std::size_t i = 0; i < 3; ++i) expect_rows_near(a, i, b, i, 1e-13);
  EXPECT_THROW(cross_attention(text, random_normal({2, 6}, rng), block), ShapeError);
}

TEST(DecoderBlock, ZeroFeedForwardIsNormOfFused) {
  Rng rng(6);
  DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  visit(block.ffn, "ffn", [](const std::string&, Tensor& t) { t = Tensor(t.shape()); });
  const Tensor x = random_normal({3, 8}, rng), memory = random_normal({4, 8}, rng);
  const Tensor fused = cross_attention(masked_self_attention(x, block), memory, block);
  const Tensor expected = norm(fused, block.norm3);
  const Tensor got = decoder_block(x, memory, block);
  for (std::size_t i = 0; i < 3; ++i) expect_rows_near(got, i, expected, i, 1e-14);
}

TEST(DecoderBlock, Causal) {
  Rng rng(7);
  const DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  Tensor x = random_normal({5, 8}, rng);
  const Tensor memory = random_normal({3, 8}, rng);
  const Tensor before = decoder_block(x, memory, block);
  auto data = x.mutable_data();
  for (std::size_t j = 0; j < 8; ++j) data[3 * 8 + j] += 1.0;
  const Tensor after = decoder_block(x, memory, block);
  for (std::size_t i = 0; i < 3; ++i) expect_rows_near(before, i, after, i, 1e-13);
  double moved = 0.0;
  for (std::size_t j = 0; j < 8; ++j) moved += std::abs(before.at(3, j) - after.at(3, j));
  EXPECT_GT(moved, 1e-3);
}

TEST(DecoderBlock, GradientCheck) {
  Rng rng(8);
  const DecoderBlockParams block = init_decoder_block(small_decoder(), rng);
  const Tensor memory = random_normal({3, 8}, rng);
  const Tensor w = random_normal({4, 8}, rng);
  const double err = grad_check([&](const Tensor& x) { return sum(mul(decoder_block(x, memory, block), w)); },
                                random_normal({4, 8}, rng), kGradcheckEps);
  EXPECT_LT(err, kGradcheckTolerance);
}

TEST(DecoderConfig, Validation) {
  EXPECT_NO_THROW(DecoderConfig::desk().validate());
  DecoderConfig bad = small_decoder();
  bad.d_head = 3;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = small_decoder();
  bad.max_len = 0;
  EXPECT_THROW(bad.validate(), ContractError);
}

// ----- full caption model -----

ModelConfig tiny_model() {
  ModelConfig cfg = ModelConfig::desk();
  cfg.encoder.d_feat = 6;
  cfg.encoder.d_model = cfg.decoder.d_model = cfg.elmo.emb = 8;
  cfg.encoder.n_heads = cfg.decoder.n_heads = 2;
  cfg.encoder.d_head = cfg.decoder.d_head = 4;
  cfg.encoder.d_ffn = cfg.decoder.d_ffn = 16;
  cfg.elmo.d_char = 4;
  cfg.decoder.max_len = 6;
  return cfg;
}

CaptionModel tiny(Mode mode, std::uint64_t seed) {
  return CaptionModel::create(tiny_model(), mode, Vocabulary::from_words({"a", "red", "circle", "and", "star"}), seed);
}

TEST(Model, ConfigCrossChecks) {
  ModelConfig cfg = tiny_model();
  cfg.elmo.emb = 16;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = tiny_model();
  cfg.decoder.d_model = 16;
  cfg.decoder.d_head = 8;
  EXPECT_THROW(cfg.validate(), ContractError);
  EXPECT_EQ(parse_mode("ELMo-MCT"), Mode::kElmoMct);
  EXPECT_EQ(to_string(Mode::kMct), "MCT");
  EXPECT_THROW(parse_mode("elmo"), ContractError);
}

TEST(Model, SameSeedSameParameters) {
  const CaptionModel a = tiny(Mode::kMct, 3), b = tiny(Mode::kMct, 3), c = tiny(Mode::kMct, 4);
  std::vector<double> pa, pb, pc;
  visit(a.params, [&](const std::string&, const Tensor& t) { pa.insert(pa.end(), t.data().begin(), t.data().end()); });
  visit(b.params, [&](const std::string&, const Tensor& t) { pb.insert(pb.end(), t.data().begin(), t.data().end()); });
  visit(c.params, [&](const std::string&, const Tensor& t) { pc.insert(pc.end(), t.data().begin(), t.data().end()); });
  EXPECT_EQ(pa, pb);
  EXPECT_NE(pa, pc);
  EXPECT_EQ(parameter_count(a.params), pa.size());
}

class ModelModes : public ::testing::TestWithParam<Mode> {};

TEST_P(ModelModes, DecodeLogitsShapeAndCausality) {
  const CaptionModel model = tiny(GetParam(), 9);
  Rng rng(9);
  const Tensor memory = encode_image(random_normal({3, 6}, rng), model.params);
  const auto ctx = context_of(model);
  std::vector<int> ids = {kBosId, 4, 5, 6, 7};
  const Tensor before = decode_logits(ids, memory, model.params, ctx);
  ASSERT_EQ(before.shape(), (Shape{5, model.lexicon.vocab.size()}));
  ids[3] = 8;
  const Tensor after = decode_logits(ids, memory, model.params, ctx);
  for (std::size_t i = 0; i < 3; ++i) expect_rows_near(before, i, after, i, 1e-13);
  const std::vector<int> no_bos = {4, 5};
  EXPECT_THROW(decode_logits(no_bos, memory, model.params, ctx), ContractError);
}

TEST_P(ModelModes, BeamOfOneIsGreedy) {
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    const CaptionModel model = tiny(GetParam(), seed);
    Rng rng(seed);
    const Tensor memory = encode_image(random_normal({3, 6}, rng), model.params);
    const auto ctx = context_of(model);
    EXPECT_EQ(generate_beam(memory, model.params, ctx, 1), generate_greedy(memory, model.params, ctx));
  }
}

TEST_P(ModelModes, GenerationRespectsMaxLength) {
  CaptionModel model = tiny(GetParam(), 15);
  Rng rng(15);
  const Tensor memory = encode_image(random_normal({2, 6}, rng), model.params);
  const auto ctx = context_of(model);
  for (std::size_t beam : {1u, 3u}) {
    const auto ids = generate_beam(memory, model.params, ctx, beam);
    EXPECT_GE(ids.size(), 1u);
    EXPECT_LE(ids.size(), model.config.decoder.max_len);
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, ModelModes, ::testing::Values(Mode::kMct, Mode::kElmoMct),
                         [](const auto& info) { return info.param == Mode::kMct ? "Mct" : "ElmoMct"; });

// Generator weights zeroed so the bias alone picks every token.
CaptionModel bias_driven(std::vector<double> bias) {
  CaptionModel model = tiny(Mode::kMct, 16);
  model.params.generator.weight = Tensor(model.params.generator.weight.shape());
  model.params.generator.bias = Tensor::vector(std::move(bias));
  return model;
}

TEST(Generate, StopsAtEos) {
  const CaptionModel model = bias_driven({0, 0, 5, 0, 1, 0, 0, 0, 0});
  Rng rng(17);
  const Tensor memory = encode_image(random_normal({2, 6}, rng), model.params);
  EXPECT_EQ(generate_greedy(memory, model.params, context_of(model)), (std::vector<int>{kEosId}));
}

TEST(Generate, RunsToMaxLengthWithoutEos) {
  const CaptionModel model = bias_driven({0, 0, 0, 0, 0, 2, 0, 0, 0});
  Rng rng(18);
  const Tensor memory = encode_image(random_normal({2, 6}, rng), model.params);
  const auto ids = generate_greedy(memory, model.params, context_of(model));
  EXPECT_EQ(ids, std::vector<int>(6, 5));
}

TEST(Generate, TiesGoToLowestId) {
  const CaptionModel model = bias_driven({0, 0, 0, 0, 0, 0, 3, 3, 0});
  Rng rng(19);
  const Tensor memory = encode_image(random_normal({2, 6}, rng), model.params);
  const auto ctx = context_of(model);
  EXPECT_EQ(generate_greedy(memory, model.params, ctx), std::vector<int>(6, 6));
  EXPECT_EQ(generate_beam(memory, model.params, ctx, 1), std::vector<int>(6, 6));
}

TEST(Generate, BeamMustBePositive) {
  const CaptionModel model = tiny(Mode::kMct, 20);
  Rng rng(20);
  const Tensor memory = encode_image(random_normal({2, 6}, rng), model.params);
  EXPECT_THROW(generate_beam(memory, model.params, context_of(model), 0), ContractError);
}

TEST(Generate, SequenceScoreMatchesLogits) {
  const CaptionModel model = tiny(Mode::kElmoMct, 21);
  Rng rng(21);
  const Tensor memory = encode_image(random_normal({3, 6}, rng), model.params);
  const auto ctx = context_of(model);
  const std::vector<int> generated = {4, 5, kEosId};
  const std::vector<int> ids = {kBosId, 4, 5};
  const Tensor logits = decode_logits(ids, memory, model.params, ctx);
  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits.at(i, v));
    total += logits.at(i, static_cast<std::size_t>(generated[i])) - std::log(z);
  }
  EXPECT_NEAR(sequence_score(generated, memory, model.params, ctx), total / 3.0, 1e-12);
}

// Beam search is a heuristic: a wider beam is not guaranteed to find a better
// normalized score. Over random untrained models it should rarely lose.
TEST(Generate, WiderBeamUsuallyScoresAtLeastGreedy) {
  int not_worse = 0, trials = 0;
  for (std::uint64_t seed = 30; seed < 42; ++seed) {
    const CaptionModel model = tiny(Mode::kMct, seed);
    Rng rng(seed);
    const Tensor memory = encode_image(random_normal({3, 6}, rng), model.params);
    const auto ctx = context_of(model);
    const double greedy = sequence_score(generate_greedy(memory, model.params, ctx), memory, model.params, ctx);
    const double beam = sequence_score(generate_beam(memory, model.params, ctx, 4), memory, model.params, ctx);
    not_worse += beam >= greedy - 1e-12;
    ++trials;
  }
  EXPECT_GE(not_worse * 4, trials * 3) << not_worse << "/" << trials;
}

}  // namespace
}  // namespace mct
