#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mct/decoder.hpp"
#include "mct/embedder.hpp"
#include "mct/encoder.hpp"

namespace mct {

/// MCT decodes from standard word embeddings; ELMo-MCT adds the contextual
/// ELMo embedding to them.
enum class Mode { kMct, kElmoMct };

std::string to_string(Mode mode);
/// Accepts "MCT" and "ELMo-MCT".
Mode parse_mode(std::string_view text);

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  ElmoConfig elmo;

  static ModelConfig desk();
  /// Checks each part plus the cross-part widths (decoder and ELMo widths
  /// must equal the encoder width).
  void validate() const;
};

struct ModelParams {
  LinearParams feature_proj;
  std::vector<EncoderBlockParams> encoder;
  Tensor word_table;  // |V|×d_model
  ElmoParams elmo;
  std::vector<DecoderBlockParams> decoder;
  GeneratorParams generator;
};

ModelParams init_model_params(const ModelConfig& cfg, std::size_t vocab_size, std::size_t n_chars,
                              std::uint64_t seed);

/// Visits every parameter in a fixed order; this order is the checkpoint
/// manifest order.
void visit(ModelParams& p, const ParamVisitor& f);
void visit(const ModelParams& p, const ConstParamVisitor& f);

/// Copy of `p` whose tensors are leaves on `tape`.
ModelParams track(const ModelParams& p, Tape& tape);
std::vector<Tensor*> parameter_list(ModelParams& p);
std::size_t parameter_count(const ModelParams& p);

/// Vocabulary plus the character ids of every vocabulary entry, precomputed
/// for the ELMo path.
struct Lexicon {
  Vocabulary vocab;
  CharVocab chars;
  std::vector<std::vector<int>> word_chars;

  static Lexicon make(Vocabulary vocab);
  static Lexicon make(Vocabulary vocab, CharVocab chars);
};

struct CaptionModel {
  ModelConfig config;
  Mode mode = Mode::kMct;
  Lexicon lexicon;
  ModelParams params;

  static CaptionModel create(const ModelConfig& config, Mode mode, Vocabulary vocab, std::uint64_t seed);
};

/// Non-parameter state the decoder needs; `params` is passed separately so
/// training can substitute a tracked copy.
struct DecodeContext {
  const ModelConfig& config;
  const Lexicon& lexicon;
  Mode mode;
};

inline DecodeContext context_of(const CaptionModel& model) { return {model.config, model.lexicon, model.mode}; }

/// U^M for one image: feature projection then the encoder stack.
Tensor encode_image(const Tensor& regions, const ModelParams& params);

/// Decoder input rows: word embedding (+ causal ELMo embedding in ELMo-MCT
/// mode) + sinusoidal positions.
Tensor embed_tokens(std::span<const int> token_ids, const ModelParams& params, const DecodeContext& ctx);

/// Row i holds the logits for the token following token_ids[0..i].
/// token_ids must start with bos.
Tensor decode_logits(std::span<const int> token_ids, const Tensor& memory, const ModelParams& params,
                     const DecodeContext& ctx);

/// Generated ids after bos, including the final eos when one was produced.
/// At most config.decoder.max_len ids.
std::vector<int> generate_greedy(const Tensor& memory, const ModelParams& params, const DecodeContext& ctx);

/// Length-normalized beam search. beam == 1 reproduces generate_greedy.
std::vector<int> generate_beam(const Tensor& memory, const ModelParams& params, const DecodeContext& ctx,
                               std::size_t beam);

/// Σ log p(token_t | bos, tokens_<t) / |tokens|, the beam ranking score.
double sequence_score(std::span<const int> generated, const Tensor& memory, const ModelParams& params,
                      const DecodeContext& ctx);

}  // namespace mct
