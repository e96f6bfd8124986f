#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mct/checkpoint.hpp"
#include "mct/config.hpp"
#include "mct/errors.hpp"
#include "mct/training.hpp"

namespace mct {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny_model() {
  ModelConfig cfg = ModelConfig::desk();
  cfg.encoder.d_model = cfg.decoder.d_model = cfg.elmo.emb = 8;
  cfg.encoder.n_heads = cfg.decoder.n_heads = 2;
  cfg.encoder.d_head = cfg.decoder.d_head = 4;
  cfg.encoder.d_ffn = cfg.decoder.d_ffn = 16;
  cfg.encoder.depth = cfg.decoder.depth = 1;
  cfg.elmo.d_char = 4;
  cfg.decoder.max_len = 8;
  return cfg;
}

struct Toy {
  FeatureFile features;
  CaptionFile captions;
  Vocabulary vocab;
  std::vector<Example> examples;
};

Toy toy(std::size_t n) {
  auto [features, captions] = toy_dataset(5, n);
  Vocabulary vocab = build_vocab(captions.all_captions(), 1);
  const auto ids = features.image_ids();
  auto examples = make_examples(features, captions, ids, vocab);
  return {std::move(features), std::move(captions), std::move(vocab), std::move(examples)};
}

TEST(TrainConfig, DecaySchedule) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.lr, 5e-4);
  EXPECT_EQ(cfg.epochs, 30u);
  EXPECT_EQ(cfg.lr_at(0), 5e-4);
  EXPECT_EQ(cfg.lr_at(9), 5e-4);
  EXPECT_EQ(cfg.lr_at(10), 2.5e-4);
  EXPECT_EQ(cfg.lr_at(29), 1.25e-4);
  EXPECT_EQ(TrainConfig::toy().lr_at(400), TrainConfig::toy().lr);
  TrainConfig bad;
  bad.beta2 = 1.0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = {};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(CrossEntropy, UniformLogitsAndPadding) {
  const Tensor logits = Tensor::matrix(3, 4, {0, 0, 0, 0, 0, 0, 0, 0, 5, -5, 1, 0});
  const int targets[] = {1, 3, 0};
  const std::uint8_t no_pad[] = {0, 0, 0};
  const std::uint8_t pad_last[] = {0, 0, 1};
  const double tail = -(5 - std::log(std::exp(5) + std::exp(-5) + std::exp(1) + 1));
  EXPECT_NEAR(cross_entropy_loss(logits, targets, no_pad).item(), (2 * std::log(4.0) + tail) / 3, 1e-12);
  EXPECT_NEAR(cross_entropy_loss(logits, targets, pad_last).item(), std::log(4.0), 1e-12);
  const std::uint8_t short_pad[] = {0};
  EXPECT_THROW(cross_entropy_loss(logits, targets, short_pad), ShapeError);
}

TEST(Adam, MatchesHandUpdate) {
  Tensor p = Tensor::vector({1.0, -2.0});
  std::vector<Tensor*> params = {&p};
  TrainConfig cfg;
  AdamState state;
  const std::vector<std::vector<double>> g1 = {{0.5, -4.0}}, g2 = {{1.0, 2.0}};
  adam_step(params, g1, state, cfg, 0.1);
  // first step: m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-12);
  const double before = p[0];
  adam_step(params, g2, state, cfg, 0.1);
  const double m = 0.9 * 0.1 * 0.5 + 0.1 * 1.0, v = 0.999 * 0.001 * 0.25 + 0.001 * 1.0;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], before - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-12);
  EXPECT_EQ(state.t, 2u);
  const std::vector<std::vector<double>> wrong = {{1.0}};
  EXPECT_THROW(adam_step(params, wrong, state, cfg), ShapeError);
}

TEST(Adam, StepDependsOnHistory) {
  TrainConfig cfg;
  Tensor a = Tensor::vector({0.0}), b = Tensor::vector({0.0});
  std::vector<Tensor*> pa = {&a}, pb = {&b};
  AdamState sa, sb;
  const std::vector<std::vector<double>> g1 = {{0.7}}, g2 = {{-0.2}};
  adam_step(pa, g1, sa, cfg, 0.01);
  const double after_first = a[0];
  adam_step(pa, g2, sa, cfg, 0.01);
  adam_step(pb, g2, sb, cfg, 0.01);
  // Fresh state moves by lr against g2; with momentum from g1 it keeps going down.
  EXPECT_NEAR(b[0], 0.01, 1e-9);
  EXPECT_LT(a[0] - after_first, 0.0);
}

TEST(ClipGlobalNorm, ScalesOnlyWhenAbove) {
  std::vector<std::vector<double>> g = {{3.0}, {4.0}};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_EQ(g[0][0], 3.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<std::vector<double>> h = {{30.0, 40.0}};
  clip_global_norm(h, 0.0);
  EXPECT_EQ(h[0][1], 40.0);
}

class TrainModes : public ::testing::TestWithParam<Mode> {};

TEST_P(TrainModes, BatchLossIsMeanOfExampleLosses) {
  const Toy data = toy(6);
  const CaptionModel model = CaptionModel::create(tiny_model(), GetParam(), data.vocab, 3);
  const auto all = batches(data.examples, data.features, 6, 1, 0);
  ASSERT_EQ(all.size(), 1u);
  const Batch& batch = all[0];
  double expected = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto tokens = batch.token_ids(b);
    expected += example_loss(batch.regions(b), tokens, model.params, context_of(model)).item();
  }
  EXPECT_NEAR(loss_and_gradient(model, batch).loss, expected / 6.0, 1e-12);
}

TEST_P(TrainModes, GradientMatchesFiniteDifferences) {
  const Toy data = toy(3);
  CaptionModel model = CaptionModel::create(tiny_model(), GetParam(), data.vocab, 4);
  const Batch batch = batches(data.examples, data.features, 3, 1, 0)[0];
  const LossAndGradient lg = loss_and_gradient(model, batch);
  const auto params = parameter_list(model.params);
  ASSERT_EQ(lg.grads.size(), params.size());
  Rng rng(4);
  double worst = 0.0;
  for (int probe = 0; probe < 12; ++probe) {
    const std::size_t k = rng.below(params.size());
    const std::size_t i = rng.below(params[k]->size());
    auto data_k = params[k]->mutable_data();
    const double saved = data_k[i], h = 1e-5;
    data_k[i] = saved + h;
    const double up = loss_and_gradient(model, batch).loss;
    data_k[i] = saved - h;
    const double down = loss_and_gradient(model, batch).loss;
    data_k[i] = saved;
    const double numeric = (up - down) / (2 * h), analytic = lg.grads[k][i];
    worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST_P(TrainModes, ThreadedGradientMatchesSerial) {
  const Toy data = toy(5);
  const CaptionModel model = CaptionModel::create(tiny_model(), GetParam(), data.vocab, 5);
  const Batch batch = batches(data.examples, data.features, 5, 1, 0)[0];
  const LossAndGradient a = loss_and_gradient(model, batch, 1), b = loss_and_gradient(model, batch, 3);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  for (std::size_t k = 0; k < a.grads.size(); ++k)
    for (std::size_t i = 0; i < a.grads[k].size(); ++i) EXPECT_NEAR(a.grads[k][i], b.grads[k][i], 1e-12);
}

TEST_P(TrainModes, LossFallsAndRunsAreReproducible) {
  const Toy data = toy(8);
  TrainConfig cfg = TrainConfig::toy();
  cfg.mode = GetParam();
  cfg.epochs = 6;
  cfg.batch_size = 4;
  CaptionModel a = CaptionModel::create(tiny_model(), GetParam(), data.vocab, 6);
  CaptionModel b = a;
  std::size_t calls = 0;
  const auto ha = train(a, data.features, data.examples, cfg, [&](const EpochRecord&) { ++calls; });
  const auto hb = train(b, data.features, data.examples, cfg);
  ASSERT_EQ(ha.size(), 6u);
  EXPECT_EQ(calls, 6u);
  EXPECT_LT(ha.back().mean_loss, ha.front().mean_loss);
  for (std::size_t e = 0; e < ha.size(); ++e) {
    EXPECT_EQ(ha[e].epoch, e + 1);
    EXPECT_EQ(ha[e].mean_loss, hb[e].mean_loss);
  }
  EXPECT_EQ(a.params.word_table.data()[3], b.params.word_table.data()[3]);
}

INSTANTIATE_TEST_SUITE_P(Modes, TrainModes, ::testing::Values(Mode::kMct, Mode::kElmoMct),
                         [](const auto& info) { return info.param == Mode::kMct ? "Mct" : "ElmoMct"; });

TEST(Train, StopsEarlyBelowThreshold) {
  const Toy data = toy(4);
  TrainConfig cfg = TrainConfig::toy();
  cfg.epochs = 50;
  cfg.stop_below = 1e9;
  CaptionModel model = CaptionModel::create(tiny_model(), Mode::kMct, data.vocab, 7);
  EXPECT_EQ(train(model, data.features, data.examples, cfg).size(), 1u);
}

TEST(Train, RejectsModeMismatchAndNonFiniteLoss) {
  Toy data = toy(4);
  TrainConfig cfg = TrainConfig::toy();
  cfg.epochs = 1;
  CaptionModel model = CaptionModel::create(tiny_model(), Mode::kElmoMct, data.vocab, 8);
  EXPECT_THROW(train(model, data.features, data.examples, cfg), ContractError);
  cfg.mode = Mode::kElmoMct;
  data.features.records[1].matrix.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(model, data.features, data.examples, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find(data.features.records[1].image_id), std::string::npos) << msg;
  }
}

// ----- run configuration -----

TEST(RunConfig, FullScaleDefaults) {
  const RunConfig c = RunConfig::full_scale();
  EXPECT_EQ(c.model.encoder.d_model, 1024u);
  EXPECT_EQ(c.model.encoder.n_heads, 8u);
  EXPECT_EQ(c.model.encoder.d_head, 128u);
  EXPECT_EQ(c.model.elmo.emb, 1024u);
  EXPECT_EQ(c.train.lr, 5e-4);
  EXPECT_EQ(c.train.beta1, 0.9);
  EXPECT_EQ(c.train.beta2, 0.999);
  EXPECT_EQ(c.train.epochs, 30u);
  EXPECT_EQ(c.train.batch_size, 50u);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, JsonRoundTripAndOverrides) {
  RunConfig c = RunConfig::toy();
  c.train.mode = Mode::kElmoMct;
  c.train.lr = 1e-3;
  c.model.encoder.depth = 4;
  c.paths.features = "f.jsonl";
  const RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.train.mode, Mode::kElmoMct);

  const RunConfig partial = run_config_from_json(nlohmann::json::parse(R"({"train": {"epochs": 3}})"));
  EXPECT_EQ(partial.train.epochs, 3u);
  EXPECT_EQ(partial.train.lr, TrainConfig::toy().lr);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  try {
    run_config_from_json(nlohmann::json::parse(R"({"train": {"learning_rate": 3}})"));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("train.learning_rate"), std::string::npos) << e.what();
  }
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"colour": 1})")), ContractError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"encoder": {"d_head": 3}})")), ContractError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"mode": "RNN"})")), ContractError);
}

TEST(RunConfig, FileRoundTrip) {
  const fs::path path = fs::temp_directory_path() / "mct_training_test_config.json";
  RunConfig c = RunConfig::toy();
  c.min_count = 3;
  save_run_config(c, path);
  EXPECT_EQ(load_run_config(path).min_count, 3u);
  fs::remove(path);
  EXPECT_THROW(load_run_config(path), DataError);
}

// ----- checkpoints -----

void expect_same_params(const ModelParams& a, const ModelParams& b) {
  std::vector<double> va, vb;
  visit(a, [&](const std::string&, const Tensor& t) { va.insert(va.end(), t.data().begin(), t.data().end()); });
  visit(b, [&](const std::string&, const Tensor& t) { vb.insert(vb.end(), t.data().begin(), t.data().end()); });
  EXPECT_EQ(va, vb);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Toy data = toy(4);
  for (Mode mode : {Mode::kMct, Mode::kElmoMct}) {
    const CaptionModel model = CaptionModel::create(tiny_model(), mode, data.vocab, 9);
    TrainConfig cfg = TrainConfig::toy();
    cfg.mode = mode;
    const LoadedCheckpoint back = deserialize_checkpoint(serialize_checkpoint(model, cfg));
    EXPECT_EQ(back.model.mode, mode);
    EXPECT_EQ(back.model.lexicon.vocab.words(), model.lexicon.vocab.words());
    EXPECT_EQ(back.model.lexicon.chars.chars(), model.lexicon.chars.chars());
    EXPECT_EQ(to_json(back.model.config), to_json(model.config));
    EXPECT_EQ(to_json(back.train), to_json(cfg));
    expect_same_params(back.model.params, model.params);
    const Tensor memory = encode_image(data.features.records[0].matrix, model.params);
    EXPECT_EQ(generate_greedy(memory, back.model.params, context_of(back.model)),
              generate_greedy(memory, model.params, context_of(model)));
  }
}

std::string load_error(const std::string& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

TEST(Checkpoint, CorruptionIsReported) {
  const Toy data = toy(4);
  const CaptionModel model = CaptionModel::create(tiny_model(), Mode::kMct, data.vocab, 10);
  const std::string good = serialize_checkpoint(model, TrainConfig::toy());

  std::string bad = good;
  bad[0] = 'X';
  EXPECT_NE(load_error(bad).find("magic"), std::string::npos);
  bad = good;
  bad[4] = 9;
  EXPECT_NE(load_error(bad).find("version"), std::string::npos);
  bad = good;
  bad[good.size() - 20] ^= 0x01;
  EXPECT_NE(load_error(bad).find("checksum"), std::string::npos);
  EXPECT_NE(load_error(good.substr(0, good.size() - 2)).find("truncated"), std::string::npos);
  EXPECT_NE(load_error(good.substr(0, 30)).find("truncated"), std::string::npos);
  EXPECT_NE(load_error(good + "x").find("trailing"), std::string::npos);
}

TEST(Checkpoint, ManifestMismatchNamesTheParameter) {
  const Toy data = toy(4);
  const CaptionModel model = CaptionModel::create(tiny_model(), Mode::kMct, data.vocab, 11);
  std::string bytes = serialize_checkpoint(model, TrainConfig::toy());
  const std::string from = "\"generator.bias\"", to = "\"generator.bxas\"";
  bytes.replace(bytes.find(from), from.size(), to);
  const std::string msg = load_error(bytes);
  EXPECT_NE(msg.find("generator.b"), std::string::npos) << msg;
}

TEST(Checkpoint, FileRoundTrip) {
  const Toy data = toy(4);
  const CaptionModel model = CaptionModel::create(tiny_model(), Mode::kElmoMct, data.vocab, 12);
  const fs::path path = fs::temp_directory_path() / "mct_training_test.mctc";
  save_checkpoint(model, TrainConfig::toy(), path);
  expect_same_params(load_checkpoint(path).model.params, model.params);
  fs::remove(path);
  EXPECT_THROW(load_checkpoint(path), DataError);
}

}  // namespace
}  // namespace mct
