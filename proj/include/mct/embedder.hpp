#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mct/layers.hpp"

namespace mct {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

/// Lowercases, replaces every character outside [a-z0-9'] by a space and
/// splits on whitespace.
std::vector<std::string> tokenize(std::string_view caption);

/// Word ↔ id maps. Ids 0..3 are pad, bos, eos, unk; every other word has a
/// unique id ≥ 4.
class Vocabulary {
 public:
  Vocabulary();
  /// Words in id order starting at id 4.
  static Vocabulary from_words(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  bool contains(std::string_view word) const;
  /// kUnkId for out-of-vocabulary words.
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  /// bos, word ids..., eos
  std::vector<int> encode(std::span<const std::string> words) const;
  /// Drops pad/bos and stops at the first eos.
  std::vector<std::string> decode(std::span<const int> ids) const;

  /// Newline-delimited UTF-8, line i holds the word with id i + 4.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> index_;
};

/// Words with frequency ≥ min_count, ordered by descending frequency then
/// lexicographically.
Vocabulary build_vocab(std::span<const std::string> captions, int min_count = 5);

/// Character alphabet for the character encoder. Id 0 is padding, id 1 is
/// the unknown character; observed bytes follow in ascending order.
class CharVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  CharVocab() = default;
  static CharVocab build(std::span<const std::string> words);
  static CharVocab from_chars(std::string chars);

  std::size_t size() const { return chars_.size() + 2; }
  int id(char c) const;
  const std::string& chars() const { return chars_; }
  std::vector<int> encode(std::string_view word) const;

  /// One character per line; line i holds the character with id i + 2.
  void save(const std::filesystem::path& path) const;
  static CharVocab load(const std::filesystem::path& path);

 private:
  std::string chars_;
};

struct ElmoConfig {
  std::size_t layers = 2;  // biLSTM depth a
  std::size_t emb = 1024;
  std::size_t d_char = 16;
  std::size_t max_word_len = 50;

  static ElmoConfig desk();
  void validate() const;
};

struct LstmGateParams {
  Tensor w_x;  // d_in×d_h
  Tensor w_h;  // d_h×d_h
  Tensor bias;
};

struct LstmCellParams {
  LstmGateParams input;
  LstmGateParams forget;
  LstmGateParams cell;
  LstmGateParams output;
};

struct BiLstmParams {
  LstmCellParams forward;
  LstmCellParams backward;
};

struct ElmoParams {
  Tensor char_table;  // |chars|×d_char
  LinearParams char_proj;
  std::vector<BiLstmParams> layers;
  Tensor mix_logits;  // a + 1 entries
  Tensor gamma;       // one entry
};

/// Glorot-uniform weights, forget-gate bias 1.
LstmCellParams init_lstm_cell(std::size_t d_in, std::size_t d_hidden, Rng& rng);
ElmoParams init_elmo(const ElmoConfig& cfg, std::size_t n_chars, Rng& rng);
void visit(LstmCellParams& p, const std::string& prefix, const ParamVisitor& f);
void visit(ElmoParams& p, const std::string& prefix, const ParamVisitor& f);

Tensor standard_embed(std::span<const int> ids, const Tensor& table);

/// Mean of the word's character embeddings (first max_word_len characters),
/// then affine + relu. Returns a 1×emb row.
Tensor char_encode(std::span<const int> char_ids, const ElmoParams& params, const ElmoConfig& cfg);
Tensor char_encode(std::string_view word, const CharVocab& chars, const ElmoParams& params, const ElmoConfig& cfg);

struct LstmState {
  Tensor h;
  Tensor c;
};

/// Standard gated cell: i, f, o = σ(·), g = tanh(·), c = f⊙c_prev + i⊙g,
/// h = o⊙tanh(c). Rows of x are independent sequences.
LstmState lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev, const LstmCellParams& params);

/// Softmax over mix_logits, always summing to one.
Tensor elmo_mix_weights(const ElmoParams& params);

/// All a + 1 layer representations for a word sequence, each G×emb. Layer 0
/// is the character encoding; layer j concatenates forward and backward
/// LSTM states of layer j − 1.
std::vector<Tensor> elmo_layers(std::span<const std::vector<int>> words_chars, const ElmoParams& params,
                                const ElmoConfig& cfg);

/// gamma · Σ_j softmax(mix_logits)_j · layer_j
Tensor elmo_mix(std::span<const Tensor> layers, const ElmoParams& params);

Tensor elmo_embed(std::span<const std::vector<int>> words_chars, const ElmoParams& params, const ElmoConfig& cfg);
Tensor elmo_embed(std::span<const std::string> words, const CharVocab& chars, const ElmoParams& params,
                  const ElmoConfig& cfg);

/// Row i equals the last row of elmo_embed over words[0..i], so no row sees
/// later words. This is the form the caption decoder consumes.
Tensor elmo_embed_causal(std::span<const std::vector<int>> words_chars, const ElmoParams& params,
                         const ElmoConfig& cfg);

}  // namespace mct
