#include "mct/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "mct/config.hpp"
#include "mct/errors.hpp"

namespace mct {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'C', 'T', 'C'};

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& bytes, std::size_t& pos, const char* field) {
  if (bytes.size() - pos < sizeof(T)) throw DataError(std::string("checkpoint: truncated ") + field);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += sizeof(T);
  return v;
}

std::uint32_t crc_of(const char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in chunks.
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string serialize_checkpoint(const CaptionModel& model, const TrainConfig& train) {
  json manifest = json::array();
  std::string payload;
  visit(model.params, [&](const std::string& name, const Tensor& t) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
    for (double v : t.data()) put_le(payload, std::bit_cast<std::uint64_t>(v));
  });
  const auto& words = model.lexicon.vocab.words();
  std::vector<int> chars;
  for (char c : model.lexicon.chars.chars()) chars.push_back(static_cast<unsigned char>(c));
  const json header = {{"mode", to_string(model.mode)},
                       {"model", to_json(model.config)},
                       {"train", to_json(train)},
                       {"vocab", std::vector<std::string>(words.begin() + kNumReservedIds, words.end())},
                       {"chars", chars},
                       {"manifest", manifest}};
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  put_le<std::uint32_t>(out, crc_of(payload.data(), payload.size()));
  return out;
}

LoadedCheckpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos, "version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, pos, "header length");
  if (bytes.size() - pos < header_len) throw DataError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  pos += header_len;

  LoadedCheckpoint out;
  try {
    const Mode mode = parse_mode(header.at("mode").get<std::string>());
    const ModelConfig config = model_config_from_json(header.at("model"));
    out.train = train_config_from_json(header.at("train"));
    out.train.mode = mode;
    std::string chars;
    for (int c : header.at("chars").get<std::vector<int>>()) chars.push_back(static_cast<char>(c));
    Vocabulary vocab = Vocabulary::from_words(header.at("vocab").get<std::vector<std::string>>());
    config.validate();
    out.model.config = config;
    out.model.mode = mode;
    out.model.lexicon = Lexicon::make(std::move(vocab), CharVocab::from_chars(std::move(chars)));
    out.model.params = init_model_params(config, out.model.lexicon.vocab.size(), out.model.lexicon.chars.size(), 0);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: bad header field: ") + e.what());
  } catch (const ContractError& e) {
    throw DataError(std::string("checkpoint: bad header field: ") + e.what());
  }

  if (!header.contains("manifest") || !header.at("manifest").is_array()) {
    throw DataError("checkpoint: manifest must be an array");
  }
  const json& manifest = header.at("manifest");
  const std::size_t payload_begin = pos;
  std::size_t index = 0;
  try {
    visit(out.model.params, [&](const std::string& name, Tensor& t) {
      if (index >= manifest.size()) throw DataError("checkpoint: manifest is missing parameter '" + name + "'");
      const json& entry = manifest[index++];
      if (!entry.is_object()) throw DataError("checkpoint: manifest entry " + std::to_string(index - 1) + " is not an object");
      if (entry.value("name", std::string()) != name) {
        throw DataError("checkpoint: manifest entry " + std::to_string(index - 1) + " is '" +
                        entry.value("name", std::string()) + "', expected '" + name + "'");
      }
      if (entry.value("shape", Shape{}) != t.shape()) {
        throw DataError("checkpoint: parameter '" + name + "' has shape " + shape_string(entry.value("shape", Shape{})) +
                        ", expected " + shape_string(t.shape()));
      }
      auto data = t.mutable_data();
      for (double& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos, "payload"));
    });
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed manifest entry: ") + e.what());
  }
  if (index != manifest.size()) throw DataError("checkpoint: manifest lists unexpected extra parameters");
  const std::size_t payload_end = pos;
  const auto stored = get_le<std::uint32_t>(bytes, pos, "checksum");
  if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes after checksum");
  if (stored != crc_of(bytes.data() + payload_begin, payload_end - payload_begin)) {
    throw DataError("checkpoint: checksum mismatch");
  }
  return out;
}

void save_checkpoint(const CaptionModel& model, const TrainConfig& train, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model, train);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint not found: " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

}  // namespace mct
