#include "mct/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mct/decoder.hpp"
#include "mct/embedder.hpp"
#include "mct/encoder.hpp"
#include "mct/errors.hpp"
#include "mct/random.hpp"

namespace mct {

double grad_check(const ScalarFunction& f, const Tensor& x, double eps, Fault fault) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");

  Tape tape(fault);
  const Tensor tracked = tape.leaf(x);
  const Tensor root = f(tracked);
  if (!root.tracked()) {
    // f does not depend on x at all; the analytic gradient is identically zero.
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      Tensor plus = x.detach(), minus = x.detach();
      plus.mutable_data()[i] += eps;
      minus.mutable_data()[i] -= eps;
      const double numeric = (f(plus).item() - f(minus).item()) / (2.0 * eps);
      worst = std::max(worst, std::abs(numeric) / std::max(1e-8, std::abs(numeric)));
    }
    return worst;
  }
  const Tensor analytic = backward(tape, root).of(tracked);

  double worst = 0.0;
  Tensor probe = x.detach();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe.mutable_data()[i] = original + eps;
    const double up = f(probe).item();
    probe.mutable_data()[i] = original - eps;
    const double down = f(probe).item();
    probe.mutable_data()[i] = original;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

namespace {

using Forward = std::function<Tensor(std::span<const Tensor>)>;

struct Family {
  std::string name;
  std::vector<std::string> slot_names;
  std::vector<Tensor> slots;
  Forward forward;

  void add(std::string slot_name, Tensor t) {
    slot_names.push_back(std::move(slot_name));
    slots.push_back(std::move(t));
  }
  template <typename P>
  void add_params(P params, const std::string& prefix) {
    visit(params, prefix, [this](const std::string& name, Tensor& t) { add(name, t); });
  }
};

/// Rebuilds a parameter struct from consecutive slots starting at `k`.
template <typename P>
P unpack(P shape_like, std::span<const Tensor> slots, std::size_t& k) {
  visit(shape_like, "", [&](const std::string&, Tensor& t) { t = slots[k++]; });
  return shape_like;
}

GradcheckResult check_family(const Family& fam, Rng& rng, Fault fault) {
  GradcheckResult result{fam.name, 0.0, "", 0};
  const Tensor probe_out = fam.forward(fam.slots);
  const Tensor weights = random_normal(probe_out.shape(), rng);
  for (std::size_t k = 0; k < fam.slots.size(); ++k) {
    const ScalarFunction f = [&](const Tensor& x) {
      std::vector<Tensor> slots = fam.slots;
      slots[k] = x;
      return sum(mul(fam.forward(slots), weights));
    };
    const double err = grad_check(f, fam.slots[k], kGradcheckEps, fault);
    result.coordinates += fam.slots[k].size();
    if (err >= result.max_error) {
      result.max_error = err;
      result.worst_slot = fam.slot_names[k];
    }
  }
  return result;
}

/// Entries kept at least `margin` away from zero, so relu kinks stay out of
/// the finite-difference stencil.
Tensor away_from_zero(Shape shape, Rng& rng, double margin) {
  Tensor t = random_normal(std::move(shape), rng);
  for (double& v : t.mutable_data()) v = v < 0 ? v - margin : v + margin;
  return t;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, Fault fault) {
  Rng rng(seed);
  const EncoderConfig enc = EncoderConfig::desk();
  const DecoderConfig dec = DecoderConfig::desk();
  const ElmoConfig elmo = ElmoConfig::desk();
  const std::size_t d = enc.d_model;
  std::vector<Family> families;

  {
    Family f{"matmul", {}, {}, {}};
    f.add("a", random_normal({4, 6}, rng));
    f.add("b", random_normal({6, 5}, rng));
    f.forward = [](std::span<const Tensor> s) { return matmul(s[0], s[1]); };
    families.push_back(std::move(f));
  }
  {
    Family f{"softmax", {}, {}, {}};
    f.add("x", random_normal({4, 7}, rng, 2.0));
    f.forward = [](std::span<const Tensor> s) { return softmax_rows(s[0]); };
    families.push_back(std::move(f));
  }
  {
    Family f{"layer_norm", {}, {}, {}};
    f.add("x", random_normal({5, d}, rng));
    LayerNormParams ln{random_normal({d}, rng), random_normal({d}, rng)};
    f.add_params(ln, "norm");
    f.forward = [ln](std::span<const Tensor> s) {
      std::size_t k = 1;
      return norm(s[0], unpack(ln, s, k));
    };
    families.push_back(std::move(f));
  }
  {
    Family f{"relu", {}, {}, {}};
    f.add("x", away_from_zero({4, 9}, rng, 0.01));
    f.forward = [](std::span<const Tensor> s) { return relu(s[0]); };
    families.push_back(std::move(f));
  }
  {
    Family f{"attention_head", {}, {}, {}};
    f.add("queries", random_normal({5, d}, rng));
    f.add("memory", random_normal({6, d}, rng));
    AttentionHeadParams head = init_multi_head(d, enc.n_heads, enc.d_head, rng).heads.front();
    f.add_params(head, "head");
    Mask allowed(5, 6, true);
    allowed.set(0, 5, false);
    allowed.set(2, 1, false);
    f.forward = [head, allowed](std::span<const Tensor> s) {
      std::size_t k = 2;
      return attend(s[0], s[1], s[1], unpack(head, s, k), &allowed);
    };
    families.push_back(std::move(f));
  }
  {
    Family f{"encoder_block", {}, {}, {}};
    f.add("regions", random_normal({5, d}, rng));
    EncoderBlockParams block = init_encoder_block(enc, rng);
    f.add_params(block, "block");
    f.forward = [block](std::span<const Tensor> s) {
      std::size_t k = 1;
      return encoder_block(s[0], unpack(block, s, k));
    };
    families.push_back(std::move(f));
  }
  {
    Family f{"decoder_block", {}, {}, {}};
    f.add("words", random_normal({4, d}, rng));
    f.add("memory", random_normal({5, d}, rng));
    DecoderBlockParams block = init_decoder_block(dec, rng);
    f.add_params(block, "block");
    f.forward = [block](std::span<const Tensor> s) {
      std::size_t k = 2;
      return decoder_block(s[0], s[1], unpack(block, s, k));
    };
    families.push_back(std::move(f));
  }
  {
    Family f{"lstm_cell", {}, {}, {}};
    const std::size_t hidden = elmo.emb / 2;
    f.add("x", random_normal({3, elmo.emb}, rng));
    f.add("h_prev", random_normal({3, hidden}, rng, 0.5));
    f.add("c_prev", random_normal({3, hidden}, rng, 0.5));
    LstmCellParams cell = init_lstm_cell(elmo.emb, hidden, rng);
    f.add_params(cell, "cell");
    f.forward = [cell](std::span<const Tensor> s) {
      std::size_t k = 3;
      const LstmState st = lstm_cell(s[0], s[1], s[2], unpack(cell, s, k));
      const Tensor parts[] = {st.h, st.c};
      return concat_cols(parts);
    };
    families.push_back(std::move(f));
  }
  {
    // Softmax-weighted layer mixing plus the character encoder that feeds
    // layer 0. The biLSTM between them is the lstm_cell family.
    Family f{"elmo_mixer", {}, {}, {}};
    const std::size_t n_layers = elmo.layers + 1;
    for (std::size_t j = 0; j < n_layers; ++j) f.add("layer" + std::to_string(j), random_normal({3, elmo.emb}, rng));
    ElmoParams params = init_elmo(elmo, 12, rng);
    params.mix_logits = random_normal(params.mix_logits.shape(), rng);
    params.gamma = Tensor::vector({1.3});
    params.char_proj.bias = away_from_zero(params.char_proj.bias.shape(), rng, 0.05);
    f.add("elmo.char_table", params.char_table);
    f.add_params(params.char_proj, "elmo.char_proj");
    f.add("elmo.mix_logits", params.mix_logits);
    f.add("elmo.gamma", params.gamma);
    const std::vector<std::vector<int>> words = {{2, 5, 7}, {3, 11}, {4, 4, 9, 10}};
    f.forward = [params, words, elmo, n_layers](std::span<const Tensor> s) {
      ElmoParams p = params;
      std::size_t k = n_layers;
      p.char_table = s[k++];
      p.char_proj = unpack(p.char_proj, s, k);
      p.mix_logits = s[k++];
      p.gamma = s[k++];
      std::vector<Tensor> chars;
      for (const auto& w : words) chars.push_back(char_encode(w, p, elmo));
      const Tensor parts[] = {elmo_mix(s.first(n_layers), p), concat_rows(chars)};
      return concat_cols(parts);
    };
    families.push_back(std::move(f));
  }
  {
    Family f{"cross_entropy", {}, {}, {}};
    f.add("logits", random_normal({5, 9}, rng, 2.0));
    f.forward = [](std::span<const Tensor> s) {
      const int targets[] = {3, 0, 8, 2, 5};
      const std::uint8_t active[] = {1, 1, 0, 1, 1};
      return softmax_cross_entropy(s[0], targets, active);
    };
    families.push_back(std::move(f));
  }

  std::vector<GradcheckResult> results;
  for (const auto& fam : families) results.push_back(check_family(fam, rng, fault));
  return results;
}

}  // namespace mct
