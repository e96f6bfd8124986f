#include "mct/training.hpp"

#include <cmath>
#include <thread>

#include "mct/errors.hpp"

namespace mct {

TrainConfig TrainConfig::toy() {
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.epochs = 500;
  cfg.lr_decay_every = 0;
  cfg.batch_size = 8;
  cfg.seed = 7;
  return cfg;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("train: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0) throw ContractError("train: beta1 must lie in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw ContractError("train: beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ContractError("train: eps must be positive");
  if (epochs < 1) throw ContractError("train: epochs must be at least 1");
  if (batch_size < 1) throw ContractError("train: batch_size must be at least 1");
  if (!(lr_decay_factor > 0.0)) throw ContractError("train: lr_decay_factor must be positive");
  if (threads < 1) throw ContractError("train: threads must be at least 1");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  if (lr_decay_every == 0) return lr;
  return lr * std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_every));
}

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> pad) {
  if (pad.size() != targets.size()) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(targets.size()) + " targets but " +
                     std::to_string(pad.size()) + " pad flags");
  }
  std::vector<std::uint8_t> active(pad.size());
  for (std::size_t i = 0; i < pad.size(); ++i) active[i] = pad[i] ? 0 : 1;
  return softmax_cross_entropy(logits, targets, active);
}

void adam_step(std::span<Tensor* const> params, std::span<const std::vector<double>> grads, AdamState& state,
               const TrainConfig& cfg, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->mutable_data();
    const auto& g = grads[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (g.size() != p.size() || m.size() != p.size()) throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(k));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const std::vector<double>> grads, AdamState& state,
               const TrainConfig& cfg) {
  adam_step(params, grads, state, cfg, cfg.lr);
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

Tensor example_loss(const Tensor& regions, std::span<const int> tokens, const ModelParams& params,
                    const DecodeContext& ctx) {
  if (tokens.size() < 2) throw ContractError("example_loss: need at least bos and one target token");
  const Tensor memory = encode_image(regions, params);
  const Tensor logits = decode_logits(tokens.first(tokens.size() - 1), memory, params, ctx);
  const std::vector<std::uint8_t> pad(tokens.size() - 1, 0);
  return cross_entropy_loss(logits, tokens.subspan(1), pad);
}

namespace {

struct ShardResult {
  std::vector<double> losses;
  std::vector<std::vector<double>> grads;  // summed over the shard's examples
};

ShardResult run_shard(const CaptionModel& model, const Batch& batch, std::size_t begin, std::size_t end) {
  Tape tape;
  ModelParams tracked = track(model.params, tape);
  const DecodeContext ctx = context_of(model);
  ShardResult out;
  Tensor total;
  for (std::size_t b = begin; b < end; ++b) {
    const auto tokens = batch.token_ids(b);
    Tensor loss = example_loss(batch.regions(b), tokens, tracked, ctx);
    out.losses.push_back(loss.item());
    total = b == begin ? loss : add(total, loss);
  }
  const Gradients grads = backward(tape, total);
  for (Tensor* p : parameter_list(tracked)) {
    if (grads.has(p->node())) {
      const auto raw = grads.raw(p->node());
      out.grads.emplace_back(raw.begin(), raw.end());
    } else {
      out.grads.emplace_back(p->size(), 0.0);
    }
  }
  return out;
}

}  // namespace

LossAndGradient loss_and_gradient(const CaptionModel& model, const Batch& batch, std::size_t threads) {
  const std::size_t n = batch.size();
  if (n == 0) throw ContractError("loss_and_gradient: empty batch");
  const std::size_t shards = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<ShardResult> results(shards);
  if (shards == 1) {
    results[0] = run_shard(model, batch, 0, n);
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(shards);
    for (std::size_t s = 0; s < shards; ++s) {
      workers.emplace_back([&, s] {
        try {
          results[s] = run_shard(model, batch, s * n / shards, (s + 1) * n / shards);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  LossAndGradient out;
  out.grads = std::move(results[0].grads);
  for (std::size_t s = 1; s < shards; ++s)
    for (std::size_t k = 0; k < out.grads.size(); ++k)
      for (std::size_t i = 0; i < out.grads[k].size(); ++i) out.grads[k][i] += results[s].grads[k][i];
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& g : out.grads)
    for (double& x : g) x *= inv;
  for (const auto& r : results)
    for (double l : r.losses) out.loss += l;
  out.loss *= inv;
  return out;
}

std::vector<EpochRecord> train(CaptionModel& model, const FeatureFile& features, std::span<const Example> examples,
                               const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (examples.empty()) throw ContractError("train: no training examples");
  if (cfg.mode != model.mode) {
    throw ContractError("train: config mode " + to_string(cfg.mode) + " differs from model mode " +
                        to_string(model.mode));
  }
  AdamState state;
  std::vector<EpochRecord> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (const Batch& batch : batches(examples, features, cfg.batch_size, cfg.seed, epoch)) {
      LossAndGradient lg = loss_and_gradient(model, batch, cfg.threads);
      if (!std::isfinite(lg.loss)) {
        std::string ids;
        for (const auto& id : batch.image_ids) ids += (ids.empty() ? "" : ",") + id;
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_index) + " (images " + ids + ")");
      }
      clip_global_norm(lg.grads, cfg.clip_norm);
      const auto params = parameter_list(model.params);
      adam_step(params, lg.grads, state, cfg, lr);
      loss_sum += lg.loss * static_cast<double>(batch.size());
      ++batch_index;
    }
    history.push_back({epoch + 1, loss_sum / static_cast<double>(examples.size()), lr});
    if (on_epoch) on_epoch(history.back());
    if (cfg.stop_below > 0.0 && history.back().mean_loss < cfg.stop_below) break;
  }
  return history;
}

}  // namespace mct
