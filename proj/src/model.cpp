#include "mct/model.hpp"

#include <algorithm>
#include <cmath>

#include "mct/errors.hpp"

namespace mct {

std::string to_string(Mode mode) { return mode == Mode::kMct ? "MCT" : "ELMo-MCT"; }

Mode parse_mode(std::string_view text) {
  if (text == "MCT") return Mode::kMct;
  if (text == "ELMo-MCT") return Mode::kElmoMct;
  throw ContractError("unknown mode '" + std::string(text) + "' (expected MCT or ELMo-MCT)");
}

ModelConfig ModelConfig::desk() {
  return {EncoderConfig::desk(), DecoderConfig::desk(), ElmoConfig::desk()};
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  elmo.validate();
  if (decoder.d_model != encoder.d_model) {
    throw ContractError("decoder d_model (" + std::to_string(decoder.d_model) + ") must equal encoder d_model (" +
                        std::to_string(encoder.d_model) + ")");
  }
  if (elmo.emb != encoder.d_model) {
    throw ContractError("elmo emb (" + std::to_string(elmo.emb) + ") must equal d_model (" +
                        std::to_string(encoder.d_model) + ")");
  }
}

ModelParams init_model_params(const ModelConfig& cfg, std::size_t vocab_size, std::size_t n_chars,
                              std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams p;
  p.feature_proj = init_linear(cfg.encoder.d_feat, cfg.encoder.d_model, rng);
  for (std::size_t m = 0; m < cfg.encoder.depth; ++m) p.encoder.push_back(init_encoder_block(cfg.encoder, rng));
  p.word_table = glorot_uniform(vocab_size, cfg.decoder.d_model, rng);
  p.elmo = init_elmo(cfg.elmo, n_chars, rng);
  for (std::size_t m = 0; m < cfg.decoder.depth; ++m) p.decoder.push_back(init_decoder_block(cfg.decoder, rng));
  p.generator.weight = glorot_uniform(cfg.decoder.d_model, vocab_size, rng);
  p.generator.bias = Tensor({vocab_size});
  return p;
}

void visit(ModelParams& p, const ParamVisitor& f) {
  visit(p.feature_proj, "feature_proj", f);
  for (std::size_t m = 0; m < p.encoder.size(); ++m) visit(p.encoder[m], "encoder" + std::to_string(m), f);
  f("word_table", p.word_table);
  visit(p.elmo, "elmo", f);
  for (std::size_t m = 0; m < p.decoder.size(); ++m) visit(p.decoder[m], "decoder" + std::to_string(m), f);
  f("generator.weight", p.generator.weight);
  f("generator.bias", p.generator.bias);
}

void visit(const ModelParams& p, const ConstParamVisitor& f) {
  visit(const_cast<ModelParams&>(p), [&f](const std::string& name, Tensor& t) { f(name, t); });
}

ModelParams track(const ModelParams& p, Tape& tape) {
  ModelParams copy = p;
  visit(copy, [&tape](const std::string&, Tensor& t) { t = tape.leaf(t); });
  return copy;
}

std::vector<Tensor*> parameter_list(ModelParams& p) {
  std::vector<Tensor*> out;
  visit(p, [&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  visit(p, [&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

Lexicon Lexicon::make(Vocabulary vocab) {
  CharVocab chars = CharVocab::build(vocab.words());
  return make(std::move(vocab), std::move(chars));
}

Lexicon Lexicon::make(Vocabulary vocab, CharVocab chars) {
  Lexicon lex{std::move(vocab), std::move(chars), {}};
  lex.word_chars.reserve(lex.vocab.size());
  for (const auto& w : lex.vocab.words()) lex.word_chars.push_back(lex.chars.encode(w));
  return lex;
}

CaptionModel CaptionModel::create(const ModelConfig& config, Mode mode, Vocabulary vocab, std::uint64_t seed) {
  config.validate();
  CaptionModel model;
  model.config = config;
  model.mode = mode;
  model.lexicon = Lexicon::make(std::move(vocab));
  model.params = init_model_params(config, model.lexicon.vocab.size(), model.lexicon.chars.size(), seed);
  return model;
}

Tensor encode_image(const Tensor& regions, const ModelParams& params) {
  return encode(project_features(regions, params.feature_proj), params.encoder);
}

Tensor embed_tokens(std::span<const int> token_ids, const ModelParams& params, const DecodeContext& ctx) {
  Tensor x = standard_embed(token_ids, params.word_table);
  if (ctx.mode == Mode::kElmoMct) {
    std::vector<std::vector<int>> chars;
    chars.reserve(token_ids.size());
    for (int id : token_ids) chars.push_back(ctx.lexicon.word_chars.at(static_cast<std::size_t>(id)));
    x = add(x, elmo_embed_causal(chars, params.elmo, ctx.config.elmo));
  }
  return add(x, positional_encoding(token_ids.size(), x.cols()));
}

namespace {

Tensor decode_hidden(std::span<const int> token_ids, const Tensor& memory, const ModelParams& params,
                     const DecodeContext& ctx) {
  if (token_ids.empty() || token_ids.front() != kBosId) {
    throw ContractError("decode_logits: token sequence must start with bos");
  }
  Tensor x = embed_tokens(token_ids, params, ctx);
  for (const auto& block : params.decoder) x = decoder_block(x, memory, block);
  return x;
}

/// Logits for the token after `prefix` (which starts with bos).
std::vector<double> next_logits(std::span<const int> prefix, const Tensor& memory, const ModelParams& params,
                                const DecodeContext& ctx) {
  const Tensor hidden = decode_hidden(prefix, memory, params, ctx);
  const Tensor last = slice_rows(hidden, hidden.rows() - 1, 1);
  const Tensor logits = add_bias(matmul(last, params.generator.weight), params.generator.bias);
  return {logits.data().begin(), logits.data().end()};
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

int argmax_lowest(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<int>(best);
}

}  // namespace

Tensor decode_logits(std::span<const int> token_ids, const Tensor& memory, const ModelParams& params,
                     const DecodeContext& ctx) {
  return linear(decode_hidden(token_ids, memory, params, ctx), {params.generator.weight, params.generator.bias});
}

std::vector<int> generate_greedy(const Tensor& memory, const ModelParams& params, const DecodeContext& ctx) {
  std::vector<int> prefix = {kBosId};
  for (std::size_t step = 0; step < ctx.config.decoder.max_len; ++step) {
    const int next = argmax_lowest(next_logits(prefix, memory, params, ctx));
    prefix.push_back(next);
    if (next == kEosId) break;
  }
  return {prefix.begin() + 1, prefix.end()};
}

std::vector<int> generate_beam(const Tensor& memory, const ModelParams& params, const DecodeContext& ctx,
                               std::size_t beam) {
  if (beam < 1) throw ContractError("generate_beam: beam must be at least 1");

  struct Hypothesis {
    std::vector<int> tokens;
    double log_prob = 0.0;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
    double logit;
  };

  std::vector<Hypothesis> alive = {Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < ctx.config.decoder.max_len && finished.size() < beam; ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      std::vector<int> prefix = {kBosId};
      prefix.insert(prefix.end(), alive[h].tokens.begin(), alive[h].tokens.end());
      const auto logits = next_logits(prefix, memory, params, ctx);
      const auto log_probs = log_softmax(logits);
      for (std::size_t t = 0; t < logits.size(); ++t)
        candidates.push_back({h, static_cast<int>(t), alive[h].log_prob + log_probs[t], logits[t]});
    }
    // Every candidate at this step has the same length, so ranking by total
    // log-probability equals ranking by the normalized score. Ties fall back
    // to the greedy rule (higher logit, then lower id).
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return a.parent < b.parent;
      if (a.logit != b.logit) return a.logit > b.logit;
      return a.token < b.token;
    });
    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < candidates.size() && next.size() < beam; ++rank) {
      const Candidate& c = candidates[rank];
      Hypothesis hyp{alive[c.parent].tokens, c.log_prob};
      hyp.tokens.push_back(c.token);
      if (c.token == kEosId) {
        if (rank < beam) finished.push_back(std::move(hyp));
      } else {
        next.push_back(std::move(hyp));
      }
    }
    alive = std::move(next);
  }
  if (finished.size() < beam) finished.insert(finished.end(), alive.begin(), alive.end());

  const Hypothesis* best = nullptr;
  double best_score = 0.0;
  for (const auto& hyp : finished) {
    const double score = hyp.log_prob / static_cast<double>(hyp.tokens.size());
    if (!best || score > best_score) {
      best = &hyp;
      best_score = score;
    }
  }
  return best->tokens;
}

double sequence_score(std::span<const int> generated, const Tensor& memory, const ModelParams& params,
                      const DecodeContext& ctx) {
  if (generated.empty()) throw ContractError("sequence_score: empty sequence");
  std::vector<int> ids = {kBosId};
  ids.insert(ids.end(), generated.begin(), generated.end());
  const Tensor logits = decode_logits(std::span<const int>(ids).first(ids.size() - 1), memory, params, ctx);
  double total = 0.0;
  const std::size_t v = logits.cols();
  for (std::size_t i = 0; i < generated.size(); ++i) {
    std::vector<double> row(logits.data().begin() + static_cast<std::ptrdiff_t>(i * v),
                            logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * v));
    total += log_softmax(row)[static_cast<std::size_t>(generated[i])];
  }
  return total / static_cast<double>(generated.size());
}

}  // namespace mct
