#include "mct/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mct/errors.hpp"
#include "mct/random.hpp"

namespace mct {

using json = nlohmann::json;

namespace {

constexpr char kFeatureMagic[4] = {'M', 'C', 'T', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError(source_ + ": truncated " + what + " at byte offset " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

void add_record(FeatureFile& file, RegionFeatures record, std::set<std::string>& seen, const std::string& where) {
  if (file.records.empty()) {
    file.d_feat = record.matrix.cols();
  } else if (record.matrix.cols() != file.d_feat) {
    throw DataError(where + ": feature width " + std::to_string(record.matrix.cols()) +
                    " does not match earlier width " + std::to_string(file.d_feat));
  }
  if (!seen.insert(record.image_id).second) throw DataError(where + ": duplicate image_id '" + record.image_id + "'");
  file.records.push_back(std::move(record));
}

FeatureFile read_features_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  FeatureFile file;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      const std::string id = j.at("image_id").get<std::string>();
      const auto n = j.at("num_regions").get<std::size_t>();
      const auto dim = j.at("dim").get<std::size_t>();
      const auto& rows = j.at("features");
      if (n < 1 || dim < 1) throw DataError(where + ": num_regions and dim must be positive");
      if (!rows.is_array() || rows.size() != n) {
        throw DataError(where + ": expected " + std::to_string(n) + " feature rows");
      }
      std::vector<double> data;
      data.reserve(n * dim);
      for (const auto& row : rows) {
        if (!row.is_array() || row.size() != dim) {
          throw DataError(where + ": feature row width differs from dim " + std::to_string(dim));
        }
        for (const auto& v : row) {
          const double d = v.get<double>();
          if (!std::isfinite(d)) throw DataError(where + ": non-finite feature value");
          data.push_back(static_cast<double>(static_cast<float>(d)));
        }
      }
      add_record(file, {id, Tensor::matrix(n, dim, std::move(data))}, seen, where);
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
  }
  if (file.records.empty()) throw DataError(path.string() + ": no feature records");
  return file;
}

FeatureFile read_features_binary(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.empty()) throw DataError(path.string() + ": empty feature file");
  ByteReader reader(bytes, path.string());
  if (reader.bytes(4, "magic") != std::string(kFeatureMagic, 4)) throw DataError(path.string() + ": bad magic");
  const std::uint32_t version = reader.u32("version");
  if (version != kFeatureVersion) {
    throw DataError(path.string() + ": unsupported feature format version " + std::to_string(version));
  }
  FeatureFile file;
  std::set<std::string> seen;
  while (!reader.done()) {
    const std::string where = path.string() + "@" + std::to_string(reader.offset());
    const std::uint32_t id_len = reader.u32("id length");
    std::string id = reader.bytes(id_len, "image id");
    const std::uint32_t n = reader.u32("region count");
    const std::uint32_t dim = reader.u32("feature width");
    if (n < 1 || dim < 1) throw DataError(where + ": num_regions and dim must be positive");
    std::vector<double> data(static_cast<std::size_t>(n) * dim);
    for (double& v : data) {
      const float f = reader.f32("feature payload");
      if (!std::isfinite(f)) throw DataError(where + ": non-finite feature value");
      v = static_cast<double>(f);
    }
    add_record(file, {std::move(id), Tensor::matrix(n, dim, std::move(data))}, seen, where);
  }
  if (file.records.empty()) throw DataError(path.string() + ": no feature records");
  return file;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

FeatureFormat feature_format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".bin" || ext == ".mctf" ? FeatureFormat::kBinary : FeatureFormat::kJsonl;
}

const RegionFeatures* FeatureFile::find(const std::string& image_id) const {
  for (const auto& r : records)
    if (r.image_id == image_id) return &r;
  return nullptr;
}

std::vector<std::string> FeatureFile::image_ids() const {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.image_id);
  return ids;
}

FeatureFile read_features(const std::filesystem::path& path, FeatureFormat format) {
  if (!std::filesystem::exists(path)) throw DataError("feature file not found: " + path.string());
  return format == FeatureFormat::kBinary ? read_features_binary(path) : read_features_jsonl(path);
}

FeatureFile read_features(const std::filesystem::path& path) { return read_features(path, feature_format_for(path)); }

void write_features(const FeatureFile& file, const std::filesystem::path& path, FeatureFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  if (format == FeatureFormat::kBinary) {
    std::string bytes(kFeatureMagic, 4);
    put_u32(bytes, kFeatureVersion);
    for (const auto& r : file.records) {
      put_u32(bytes, static_cast<std::uint32_t>(r.image_id.size()));
      bytes += r.image_id;
      put_u32(bytes, static_cast<std::uint32_t>(r.matrix.rows()));
      put_u32(bytes, static_cast<std::uint32_t>(r.matrix.cols()));
      for (double v : r.matrix.data()) put_f32(bytes, static_cast<float>(v));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return;
  }
  for (const auto& r : file.records) {
    json rows = json::array();
    for (std::size_t i = 0; i < r.matrix.rows(); ++i) {
      json row = json::array();
      for (std::size_t j = 0; j < r.matrix.cols(); ++j) row.push_back(static_cast<double>(static_cast<float>(r.matrix.at(i, j))));
      rows.push_back(std::move(row));
    }
    json rec = {{"image_id", r.image_id}, {"num_regions", r.matrix.rows()}, {"dim", r.matrix.cols()},
                {"features", std::move(rows)}};
    out << rec.dump() << '\n';
  }
}

void write_features(const FeatureFile& file, const std::filesystem::path& path) {
  write_features(file, path, feature_format_for(path));
}

// ---------------------------------------------------------------------------
// Captions

const CaptionRecord* CaptionFile::find(const std::string& image_id) const {
  for (const auto& r : records)
    if (r.image_id == image_id) return &r;
  return nullptr;
}

std::vector<std::string> CaptionFile::all_captions() const {
  std::vector<std::string> out;
  for (const auto& r : records) out.insert(out.end(), r.captions.begin(), r.captions.end());
  return out;
}

CaptionFile read_captions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("caption file not found: " + path.string());
  CaptionFile file;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      CaptionRecord rec{j.at("image_id").get<std::string>(), j.at("captions").get<std::vector<std::string>>()};
      if (rec.captions.empty()) throw DataError(where + ": image has no captions");
      if (!seen.insert(rec.image_id).second) throw DataError(where + ": duplicate image_id '" + rec.image_id + "'");
      file.records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
  }
  if (file.records.empty()) throw DataError(path.string() + ": no caption records");
  return file;
}

void write_captions(const CaptionFile& file, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : file.records) out << json{{"image_id", r.image_id}, {"captions", r.captions}}.dump() << '\n';
}

void check_pairing(const FeatureFile& features, const CaptionFile& captions) {
  std::set<std::string> ids;
  for (const auto& r : features.records) ids.insert(r.image_id);
  for (const auto& c : captions.records) {
    if (!ids.count(c.image_id)) throw DataError("captioned image '" + c.image_id + "' has no features");
  }
}

// ---------------------------------------------------------------------------
// Splits

const std::vector<std::string>& SplitSpec::part(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ContractError("unknown split '" + name + "' (expected train, val or test)");
}

void SplitSpec::validate(std::span<const std::string> available) const {
  const std::set<std::string> pool(available.begin(), available.end());
  std::set<std::string> seen;
  for (const auto* part : {&train, &val, &test}) {
    for (const auto& id : *part) {
      if (!seen.insert(id).second) throw DataError("split lists overlap at '" + id + "'");
      if (!pool.count(id)) throw DataError("split names unknown image '" + id + "'");
    }
  }
}

SplitSpec make_splits(std::span<const std::string> ids, SplitCounts counts, std::uint64_t seed) {
  if (counts.train + counts.val + counts.test > ids.size()) {
    throw ContractError("split counts " + std::to_string(counts.train) + "/" + std::to_string(counts.val) + "/" +
                        std::to_string(counts.test) + " exceed " + std::to_string(ids.size()) + " images");
  }
  std::vector<std::string> order(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(order);
  SplitSpec spec;
  auto it = order.begin();
  spec.val.assign(it, it + static_cast<std::ptrdiff_t>(counts.val));
  it += static_cast<std::ptrdiff_t>(counts.val);
  spec.test.assign(it, it + static_cast<std::ptrdiff_t>(counts.test));
  it += static_cast<std::ptrdiff_t>(counts.test);
  spec.train.assign(it, it + static_cast<std::ptrdiff_t>(counts.train));
  spec.validate(ids);
  return spec;
}

SplitSpec make_splits(std::span<const std::string> ids, std::array<double, 3> ratio, std::uint64_t seed) {
  const double total = ratio[0] + ratio[1] + ratio[2];
  if (!(total > 0.0) || ratio[0] < 0.0 || ratio[1] < 0.0 || ratio[2] < 0.0) {
    throw ContractError("split ratio weights must be non-negative with a positive sum");
  }
  const auto n = static_cast<double>(ids.size());
  const auto val = static_cast<std::size_t>(std::floor(n * ratio[1] / total));
  const auto test = static_cast<std::size_t>(std::floor(n * ratio[2] / total));
  return make_splits(ids, SplitCounts{ids.size() - val - test, val, test}, seed);
}

SplitSpec make_splits(std::span<const std::string> ids, const SplitSpec& explicit_spec) {
  explicit_spec.validate(ids);
  return explicit_spec;
}

SplitSpec read_split(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    const json j = json::parse(text);
    for (const auto& [key, value] : j.items()) {
      if (key != "train" && key != "val" && key != "test") throw DataError(path.string() + ": unknown split key '" + key + "'");
    }
    SplitSpec spec;
    spec.train = j.value("train", std::vector<std::string>{});
    spec.val = j.value("val", std::vector<std::string>{});
    spec.test = j.value("test", std::vector<std::string>{});
    return spec;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed split file: " + e.what());
  }
}

void write_split(const SplitSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << json{{"train", spec.train}, {"val", spec.val}, {"test", spec.test}}.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Toy dataset

const std::vector<std::string>& toy_colors() {
  static const std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
  return colors;
}

const std::vector<std::string>& toy_shapes() {
  static const std::vector<std::string> shapes = {"circle", "square", "triangle", "star"};
  return shapes;
}

std::vector<double> toy_pattern(std::size_t index, std::size_t d_feat) {
  // Row index + 1 of the Sylvester Hadamard matrix (row 0 is all ones).
  const std::size_t row = index + 1;
  std::vector<double> pattern(d_feat);
  for (std::size_t j = 0; j < d_feat; ++j) pattern[j] = std::popcount(row & j) % 2 == 0 ? 1.0 : -1.0;
  return pattern;
}

namespace {

std::string toy_caption(std::vector<std::pair<std::size_t, std::size_t>> regions) {
  std::sort(regions.begin(), regions.end());
  std::string caption;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (i) caption += " and ";
    caption += "a " + toy_colors()[regions[i].first] + " " + toy_shapes()[regions[i].second];
  }
  return caption;
}

}  // namespace

std::string toy_caption_from_features(const Tensor& regions) {
  const std::size_t n_colors = toy_colors().size(), n_shapes = toy_shapes().size();
  std::vector<std::pair<std::size_t, std::size_t>> decoded;
  for (std::size_t i = 0; i < regions.rows(); ++i) {
    auto best = [&](std::size_t first, std::size_t count) {
      std::size_t arg = 0;
      double best_dot = -1e300;
      for (std::size_t k = 0; k < count; ++k) {
        const auto p = toy_pattern(first + k, regions.cols());
        double dot = 0.0;
        for (std::size_t j = 0; j < regions.cols(); ++j) dot += p[j] * regions.at(i, j);
        if (dot > best_dot) {
          best_dot = dot;
          arg = k;
        }
      }
      return arg;
    };
    decoded.emplace_back(best(0, n_colors), best(n_colors, n_shapes));
  }
  return toy_caption(std::move(decoded));
}

std::pair<FeatureFile, CaptionFile> toy_dataset(std::uint64_t seed, std::size_t n_images, ToyOptions options) {
  if (n_images < 2) throw ContractError("toy_dataset: at least two images are required");
  const std::size_t n_colors = toy_colors().size(), n_shapes = toy_shapes().size();
  const std::size_t d = options.d_feat;
  if (!std::has_single_bit(d) || d <= n_colors + n_shapes) {
    throw ContractError("toy_dataset: d_feat must be a power of two greater than " +
                        std::to_string(n_colors + n_shapes));
  }
  Rng rng(seed);
  FeatureFile features;
  features.d_feat = d;
  CaptionFile captions;
  for (std::size_t img = 0; img < n_images; ++img) {
    char id[32];
    std::snprintf(id, sizeof(id), "toy_%04zu", img);
    const std::size_t n_regions = 2 + rng.below(3);
    std::vector<std::pair<std::size_t, std::size_t>> codes;
    std::vector<double> data;
    data.reserve(n_regions * d);
    for (std::size_t r = 0; r < n_regions; ++r) {
      const std::size_t color = rng.below(n_colors);
      const std::size_t shape = rng.below(n_shapes);
      codes.emplace_back(color, shape);
      const auto cp = toy_pattern(color, d);
      const auto sp = toy_pattern(n_colors + shape, d);
      for (std::size_t j = 0; j < d; ++j) {
        const double noise = options.noise > 0.0 ? rng.uniform(-options.noise, options.noise) : 0.0;
        data.push_back(static_cast<double>(static_cast<float>(cp[j] + sp[j] + noise)));
      }
    }
    features.records.push_back({id, Tensor::matrix(n_regions, d, std::move(data))});
    captions.records.push_back({id, {toy_caption(std::move(codes))}});
  }
  return {std::move(features), std::move(captions)};
}

// ---------------------------------------------------------------------------
// Examples and batches

std::vector<Example> make_examples(const FeatureFile& features, const CaptionFile& captions,
                                   std::span<const std::string> image_ids, const Vocabulary& vocab) {
  std::vector<Example> examples;
  for (const auto& id : image_ids) {
    if (!features.find(id)) throw DataError("image '" + id + "' has no features");
    const CaptionRecord* rec = captions.find(id);
    if (!rec) throw DataError("image '" + id + "' has no captions");
    for (std::size_t c = 0; c < rec->captions.size(); ++c) {
      const auto words = tokenize(rec->captions[c]);
      examples.push_back({id, c, vocab.encode(words)});
    }
  }
  return examples;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(splitmix64(seed ^ splitmix64(epoch)));
  rng.shuffle(order);
  return order;
}

std::vector<Batch> batches(std::span<const Example> examples, const FeatureFile& features, std::size_t batch_size,
                           std::uint64_t seed, std::uint64_t epoch) {
  if (examples.empty()) throw ContractError("batches: empty split");
  if (batch_size == 0) throw ContractError("batches: batch_size must be positive");
  const auto order = epoch_order(examples.size(), seed, epoch);
  const std::size_t d = features.d_feat;
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::size_t b_count = end - start;
    Batch batch;
    std::vector<const RegionFeatures*> regions;
    for (std::size_t k = start; k < end; ++k) {
      const Example& ex = examples[order[k]];
      const RegionFeatures* r = features.find(ex.image_id);
      if (!r) throw DataError("image '" + ex.image_id + "' has no features");
      regions.push_back(r);
      batch.image_ids.push_back(ex.image_id);
      batch.caption_indices.push_back(ex.caption_index);
      batch.max_regions = std::max(batch.max_regions, r->matrix.rows());
      batch.max_tokens = std::max(batch.max_tokens, ex.tokens.size());
    }
    batch.features = Tensor({b_count, batch.max_regions, d});
    batch.region_padding = Mask(b_count, batch.max_regions, true);
    batch.tokens.assign(b_count * batch.max_tokens, kPadId);
    batch.token_padding = Mask(b_count, batch.max_tokens, true);
    auto fdata = batch.features.mutable_data();
    for (std::size_t b = 0; b < b_count; ++b) {
      const Tensor& m = regions[b]->matrix;
      std::copy(m.data().begin(), m.data().end(),
                fdata.begin() + static_cast<std::ptrdiff_t>(b * batch.max_regions * d));
      for (std::size_t i = 0; i < m.rows(); ++i) batch.region_padding.set(b, i, false);
      const auto& tokens = examples[order[start + b]].tokens;
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        batch.tokens[b * batch.max_tokens + t] = tokens[t];
        batch.token_padding.set(b, t, false);
      }
    }
    out.push_back(std::move(batch));
  }
  return out;
}

Tensor Batch::regions(std::size_t b) const {
  std::size_t n = 0;
  while (n < max_regions && !region_padding(b, n)) ++n;
  const std::size_t d = features.cols();
  const auto begin = features.data().begin() + static_cast<std::ptrdiff_t>(b * max_regions * d);
  return Tensor::matrix(n, d, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n * d)));
}

std::vector<int> Batch::token_ids(std::size_t b) const {
  std::vector<int> ids;
  for (std::size_t t = 0; t < max_tokens && !token_padding(b, t); ++t) ids.push_back(tokens[b * max_tokens + t]);
  return ids;
}

}  // namespace mct
