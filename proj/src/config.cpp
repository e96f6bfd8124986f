#include "mct/config.hpp"

#include <fstream>
#include <initializer_list>
#include <set>

#include "mct/errors.hpp"

namespace mct {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ContractError("config: section '" + section + "' must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ContractError("config: unknown key '" + section + "." + key + "'");
  }
}

void read_size(const json& j, const std::string& section, const char* key, std::size_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) {
    throw ContractError("config: '" + section + "." + key + "' must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

void read_u64(const json& j, const std::string& section, const char* key, std::uint64_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) {
    throw ContractError("config: '" + section + "." + key + "' must be a non-negative integer");
  }
  out = v.get<std::uint64_t>();
}

void read_double(const json& j, const std::string& section, const char* key, double& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ContractError("config: '" + section + "." + key + "' must be a number");
  out = v.get<double>();
}

void read_string(const json& j, const std::string& section, const char* key, std::string& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ContractError("config: '" + section + "." + key + "' must be a string");
  out = v.get<std::string>();
}

}  // namespace

json to_json(const EncoderConfig& c) {
  return {{"d_feat", c.d_feat}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
          {"d_head", c.d_head}, {"d_ffn", c.d_ffn},     {"depth", c.depth}};
}

json to_json(const DecoderConfig& c) {
  return {{"d_model", c.d_model}, {"n_heads", c.n_heads}, {"d_head", c.d_head},
          {"d_ffn", c.d_ffn},     {"depth", c.depth},     {"max_len", c.max_len}};
}

json to_json(const ElmoConfig& c) {
  return {{"layers", c.layers}, {"emb", c.emb}, {"d_char", c.d_char}, {"max_word_len", c.max_word_len}};
}

json to_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)}, {"decoder", to_json(c.decoder)}, {"elmo", to_json(c.elmo)}};
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"epochs", c.epochs},
          {"lr_decay_every", c.lr_decay_every},
          {"lr_decay_factor", c.lr_decay_factor},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"clip_norm", c.clip_norm},
          {"stop_below", c.stop_below},
          {"threads", c.threads}};
}

json to_json(const RunConfig& c) {
  json j = to_json(c.model);
  j["mode"] = to_string(c.train.mode);
  j["train"] = to_json(c.train);
  j["min_count"] = c.min_count;
  j["paths"] = {{"features", c.paths.features},
                {"captions", c.paths.captions},
                {"splits", c.paths.splits},
                {"checkpoint", c.paths.checkpoint},
                {"vocab", c.paths.vocab}};
  return j;
}

EncoderConfig encoder_config_from_json(const json& j, EncoderConfig c) {
  reject_unknown(j, "encoder", {"d_feat", "d_model", "n_heads", "d_head", "d_ffn", "depth"});
  read_size(j, "encoder", "d_feat", c.d_feat);
  read_size(j, "encoder", "d_model", c.d_model);
  read_size(j, "encoder", "n_heads", c.n_heads);
  read_size(j, "encoder", "d_head", c.d_head);
  read_size(j, "encoder", "d_ffn", c.d_ffn);
  read_size(j, "encoder", "depth", c.depth);
  return c;
}

DecoderConfig decoder_config_from_json(const json& j, DecoderConfig c) {
  reject_unknown(j, "decoder", {"d_model", "n_heads", "d_head", "d_ffn", "depth", "max_len"});
  read_size(j, "decoder", "d_model", c.d_model);
  read_size(j, "decoder", "n_heads", c.n_heads);
  read_size(j, "decoder", "d_head", c.d_head);
  read_size(j, "decoder", "d_ffn", c.d_ffn);
  read_size(j, "decoder", "depth", c.depth);
  read_size(j, "decoder", "max_len", c.max_len);
  return c;
}

ElmoConfig elmo_config_from_json(const json& j, ElmoConfig c) {
  reject_unknown(j, "elmo", {"layers", "emb", "d_char", "max_word_len"});
  read_size(j, "elmo", "layers", c.layers);
  read_size(j, "elmo", "emb", c.emb);
  read_size(j, "elmo", "d_char", c.d_char);
  read_size(j, "elmo", "max_word_len", c.max_word_len);
  return c;
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  reject_unknown(j, "model", {"encoder", "decoder", "elmo"});
  if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"), c.encoder);
  if (j.contains("decoder")) c.decoder = decoder_config_from_json(j.at("decoder"), c.decoder);
  if (j.contains("elmo")) c.elmo = elmo_config_from_json(j.at("elmo"), c.elmo);
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j, "train",
                 {"lr", "beta1", "beta2", "eps", "epochs", "lr_decay_every", "lr_decay_factor", "batch_size", "seed",
                  "clip_norm", "stop_below", "threads"});
  read_double(j, "train", "lr", c.lr);
  read_double(j, "train", "beta1", c.beta1);
  read_double(j, "train", "beta2", c.beta2);
  read_double(j, "train", "eps", c.eps);
  read_size(j, "train", "epochs", c.epochs);
  read_size(j, "train", "lr_decay_every", c.lr_decay_every);
  read_double(j, "train", "lr_decay_factor", c.lr_decay_factor);
  read_size(j, "train", "batch_size", c.batch_size);
  read_u64(j, "train", "seed", c.seed);
  read_double(j, "train", "clip_norm", c.clip_norm);
  read_double(j, "train", "stop_below", c.stop_below);
  read_size(j, "train", "threads", c.threads);
  return c;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  reject_unknown(j, "", {"mode", "encoder", "decoder", "elmo", "train", "paths", "min_count"});
  json model = json::object();
  for (const char* key : {"encoder", "decoder", "elmo"})
    if (j.contains(key)) model[key] = j.at(key);
  c.model = model_config_from_json(model, c.model);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  if (j.contains("mode")) {
    if (!j.at("mode").is_string()) throw ContractError("config: 'mode' must be a string");
    c.train.mode = parse_mode(j.at("mode").get<std::string>());
  }
  read_size(j, "", "min_count", c.min_count);
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    reject_unknown(p, "paths", {"features", "captions", "splits", "checkpoint", "vocab"});
    read_string(p, "paths", "features", c.paths.features);
    read_string(p, "paths", "captions", c.paths.captions);
    read_string(p, "paths", "splits", c.paths.splits);
    read_string(p, "paths", "checkpoint", c.paths.checkpoint);
    read_string(p, "paths", "vocab", c.paths.vocab);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::full_scale() {
  RunConfig c;
  c.train.batch_size = 50;
  return c;
}

RunConfig RunConfig::toy() {
  RunConfig c;
  c.model = ModelConfig::desk();
  c.train = TrainConfig::toy();
  c.min_count = 1;
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (min_count < 1) throw ContractError("config: min_count must be at least 1");
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw DataError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed config: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(config).dump(2) << '\n';
}

}  // namespace mct
