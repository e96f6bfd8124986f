#include "mct/embedder.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <unordered_map>

#include "mct/errors.hpp"

namespace mct {

namespace {

const std::vector<std::string>& reserved_words() {
  static const std::vector<std::string> words = {"<pad>", "<bos>", "<eos>", "<unk>"};
  return words;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> tokens;
  std::string current;
  for (char raw : caption) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'';
    if (keep) {
      current.push_back(c);
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : words_(reserved_words()) {
  for (int i = 0; i < kNumReservedIds; ++i) index_.emplace(words_[static_cast<std::size_t>(i)], i);
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  for (auto& w : words) {
    if (w.empty()) throw DataError("vocabulary: empty word");
    if (v.index_.count(w)) throw DataError("vocabulary: duplicate word '" + w + "'");
    v.index_.emplace(w, static_cast<int>(v.words_.size()));
    v.words_.push_back(std::move(w));
  }
  return v;
}

bool Vocabulary::contains(std::string_view word) const { return index_.find(word) != index_.end(); }

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " outside " + std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> words) const {
  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(kBosId);
  for (const auto& w : words) ids.push_back(id(w));
  ids.push_back(kEosId);
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    words.push_back(word(id));
  }
  return words;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = kNumReservedIds; i < words_.size(); ++i) out << words_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return from_words(read_lines(path)); }

Vocabulary build_vocab(std::span<const std::string> captions, int min_count) {
  if (captions.empty()) throw ContractError("build_vocab: empty corpus");
  std::unordered_map<std::string, int> counts;
  for (const auto& caption : captions)
    for (auto& w : tokenize(caption)) ++counts[w];
  std::vector<std::pair<std::string, int>> kept;
  for (auto& [w, c] : counts)
    if (c >= min_count) kept.emplace_back(w, c);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [w, c] : kept) words.push_back(w);
  return Vocabulary::from_words(std::move(words));
}

// ---------------------------------------------------------------------------
// CharVocab

CharVocab CharVocab::build(std::span<const std::string> words) {
  std::set<char> seen;
  for (const auto& w : words) seen.insert(w.begin(), w.end());
  return from_chars(std::string(seen.begin(), seen.end()));
}

CharVocab CharVocab::from_chars(std::string chars) {
  std::string sorted = chars;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw DataError("character vocabulary has duplicate entries");
  }
  if (chars.find('\n') != std::string::npos) throw DataError("character vocabulary cannot contain newline");
  CharVocab v;
  v.chars_ = std::move(chars);
  return v;
}

int CharVocab::id(char c) const {
  const auto pos = chars_.find(c);
  return pos == std::string::npos ? kUnk : static_cast<int>(pos) + 2;
}

std::vector<int> CharVocab::encode(std::string_view word) const {
  std::vector<int> ids;
  ids.reserve(word.size());
  for (char c : word) ids.push_back(id(c));
  return ids;
}

void CharVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (char c : chars_) out << c << '\n';
}

CharVocab CharVocab::load(const std::filesystem::path& path) {
  std::string chars;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.size() != 1) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected one character per line");
    }
    chars.push_back(line[0]);
  }
  return from_chars(std::move(chars));
}

// ---------------------------------------------------------------------------
// ELMo

ElmoConfig ElmoConfig::desk() {
  ElmoConfig cfg;
  cfg.layers = 1;
  cfg.emb = 32;
  cfg.d_char = 8;
  cfg.max_word_len = 12;
  return cfg;
}

void ElmoConfig::validate() const {
  if (layers < 1) throw ContractError("elmo: at least one biLSTM layer is required");
  if (emb == 0 || emb % 2 != 0) throw ContractError("elmo: emb must be a positive even number");
  if (d_char == 0 || max_word_len == 0) throw ContractError("elmo: d_char and max_word_len must be positive");
}

LstmCellParams init_lstm_cell(std::size_t d_in, std::size_t d_hidden, Rng& rng) {
  auto gate = [&](double bias) {
    return LstmGateParams{glorot_uniform(d_in, d_hidden, rng), glorot_uniform(d_hidden, d_hidden, rng),
                          Tensor::filled({d_hidden}, bias)};
  };
  LstmCellParams p;
  p.input = gate(0.0);
  p.forget = gate(1.0);
  p.cell = gate(0.0);
  p.output = gate(0.0);
  return p;
}

ElmoParams init_elmo(const ElmoConfig& cfg, std::size_t n_chars, Rng& rng) {
  cfg.validate();
  ElmoParams p;
  p.char_table = glorot_uniform(n_chars, cfg.d_char, rng);
  p.char_proj = init_linear(cfg.d_char, cfg.emb, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    BiLstmParams layer;
    layer.forward = init_lstm_cell(cfg.emb, cfg.emb / 2, rng);
    layer.backward = init_lstm_cell(cfg.emb, cfg.emb / 2, rng);
    p.layers.push_back(std::move(layer));
  }
  p.mix_logits = Tensor({cfg.layers + 1});
  p.gamma = Tensor::scalar(1.0);
  return p;
}

void visit(LstmCellParams& p, const std::string& prefix, const ParamVisitor& f) {
  const std::pair<const char*, LstmGateParams*> gates[] = {
      {"input", &p.input}, {"forget", &p.forget}, {"cell", &p.cell}, {"output", &p.output}};
  for (auto [name, gate] : gates) {
    const std::string base = prefix + "." + name;
    f(base + ".w_x", gate->w_x);
    f(base + ".w_h", gate->w_h);
    f(base + ".bias", gate->bias);
  }
}

void visit(ElmoParams& p, const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".char_table", p.char_table);
  visit(p.char_proj, prefix + ".char_proj", f);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    visit(p.layers[l].forward, prefix + ".lstm" + std::to_string(l) + ".fwd", f);
    visit(p.layers[l].backward, prefix + ".lstm" + std::to_string(l) + ".bwd", f);
  }
  f(prefix + ".mix_logits", p.mix_logits);
  f(prefix + ".gamma", p.gamma);
}

Tensor standard_embed(std::span<const int> ids, const Tensor& table) { return embedding_rows(table, ids); }

Tensor char_encode(std::span<const int> char_ids, const ElmoParams& params, const ElmoConfig& cfg) {
  if (char_ids.empty()) throw ContractError("char_encode: empty word");
  const auto used = char_ids.first(std::min(char_ids.size(), cfg.max_word_len));
  const Tensor pooled = mean_rows(embedding_rows(params.char_table, used));
  return relu(linear(pooled, params.char_proj));
}

Tensor char_encode(std::string_view word, const CharVocab& chars, const ElmoParams& params, const ElmoConfig& cfg) {
  return char_encode(chars.encode(word), params, cfg);
}

namespace {

Tensor gate(const Tensor& x, const Tensor& h, const LstmGateParams& p) {
  return add_bias(add(matmul(x, p.w_x), matmul(h, p.w_h)), p.bias);
}

/// Runs one direction over `inputs` (each 1×d_in) from a zero state and
/// returns the hidden state at every position, in input order.
std::vector<Tensor> run_direction(std::span<const Tensor> inputs, const LstmCellParams& cell, bool reverse) {
  const std::size_t hidden = cell.input.w_h.rows();
  LstmState state{Tensor({1, hidden}), Tensor({1, hidden})};
  std::vector<Tensor> out(inputs.size());
  for (std::size_t step = 0; step < inputs.size(); ++step) {
    const std::size_t pos = reverse ? inputs.size() - 1 - step : step;
    state = lstm_cell(inputs[pos], state.h, state.c, cell);
    out[pos] = state.h;
  }
  return out;
}

}  // namespace

LstmState lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev, const LstmCellParams& params) {
  const Tensor i = sigmoid(gate(x, h_prev, params.input));
  const Tensor f = sigmoid(gate(x, h_prev, params.forget));
  const Tensor g = tanh(gate(x, h_prev, params.cell));
  const Tensor o = sigmoid(gate(x, h_prev, params.output));
  Tensor c = add(mul(f, c_prev), mul(i, g));
  Tensor h = mul(o, tanh(c));
  return {std::move(h), std::move(c)};
}

Tensor elmo_mix_weights(const ElmoParams& params) { return softmax_rows(params.mix_logits); }

std::vector<Tensor> elmo_layers(std::span<const std::vector<int>> words_chars, const ElmoParams& params,
                                const ElmoConfig& cfg) {
  if (words_chars.empty()) throw ContractError("elmo_embed: empty word sequence");
  std::vector<Tensor> rows;
  rows.reserve(words_chars.size());
  for (const auto& w : words_chars) rows.push_back(char_encode(w, params, cfg));

  std::vector<Tensor> layers;
  layers.push_back(concat_rows(rows));
  for (const auto& layer : params.layers) {
    const auto fwd = run_direction(rows, layer.forward, false);
    const auto bwd = run_direction(rows, layer.backward, true);
    std::vector<Tensor> next(rows.size());
    for (std::size_t g = 0; g < rows.size(); ++g) {
      const Tensor halves[] = {fwd[g], bwd[g]};
      next[g] = concat_cols(halves);
    }
    layers.push_back(concat_rows(next));
    rows = std::move(next);
  }
  return layers;
}

Tensor elmo_mix(std::span<const Tensor> layers, const ElmoParams& params) {
  return scale_by(weighted_sum(layers, elmo_mix_weights(params)), params.gamma);
}

Tensor elmo_embed(std::span<const std::vector<int>> words_chars, const ElmoParams& params, const ElmoConfig& cfg) {
  return elmo_mix(elmo_layers(words_chars, params, cfg), params);
}

Tensor elmo_embed(std::span<const std::string> words, const CharVocab& chars, const ElmoParams& params,
                  const ElmoConfig& cfg) {
  std::vector<std::vector<int>> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(chars.encode(w));
  return elmo_embed(ids, params, cfg);
}

Tensor elmo_embed_causal(std::span<const std::vector<int>> words_chars, const ElmoParams& params,
                         const ElmoConfig& cfg) {
  if (words_chars.empty()) throw ContractError("elmo_embed: empty word sequence");
  const std::size_t n = words_chars.size();
  const std::size_t depth = params.layers.size();

  std::vector<Tensor> base;
  base.reserve(n);
  for (const auto& w : words_chars) base.push_back(char_encode(w, params, cfg));
  // The first forward LSTM only looks left, so one pass serves every prefix.
  const auto first_forward = depth > 0 ? run_direction(base, params.layers[0].forward, false) : std::vector<Tensor>{};

  // per_layer[l][i]: row i of layer l computed over the prefix 0..i
  std::vector<std::vector<Tensor>> per_layer(depth + 1);
  per_layer[0] = base;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Tensor> inputs(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(i + 1));
    for (std::size_t l = 0; l < depth; ++l) {
      const auto& cell = params.layers[l];
      std::vector<Tensor> fwd;
      if (l == 0) {
        fwd.assign(first_forward.begin(), first_forward.begin() + static_cast<std::ptrdiff_t>(i + 1));
      } else {
        fwd = run_direction(inputs, cell.forward, false);
      }
      if (l + 1 == depth) {
        // Only the last position is needed; the backward pass over a prefix
        // starts there, from a zero state.
        const std::size_t hidden = cell.backward.input.w_h.rows();
        const Tensor zero({1, hidden});
        const Tensor halves[] = {fwd[i], lstm_cell(inputs[i], zero, zero, cell.backward).h};
        per_layer[l + 1].push_back(concat_cols(halves));
        break;
      }
      const auto bwd = run_direction(inputs, cell.backward, true);
      std::vector<Tensor> next(i + 1);
      for (std::size_t g = 0; g <= i; ++g) {
        const Tensor halves[] = {fwd[g], bwd[g]};
        next[g] = concat_cols(halves);
      }
      per_layer[l + 1].push_back(next[i]);
      inputs = std::move(next);
    }
  }
  std::vector<Tensor> layers;
  layers.reserve(depth + 1);
  for (auto& rows : per_layer) layers.push_back(concat_rows(rows));
  return elmo_mix(layers, params);
}

}  // namespace mct
