#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mct/embedder.hpp"
#include "mct/encoder.hpp"
#include "mct/tensor.hpp"

namespace mct {

enum class FeatureFormat { kJsonl, kBinary };

/// ".bin" and ".mctf" select the binary format; anything else is JSONL.
FeatureFormat feature_format_for(const std::filesystem::path& path);

/// Region features for a set of images. Values are stored as f32 on disk
/// and held as f64 (promoted from f32) in memory.
struct FeatureFile {
  std::size_t d_feat = 0;
  std::vector<RegionFeatures> records;

  const RegionFeatures* find(const std::string& image_id) const;
  std::vector<std::string> image_ids() const;
};

FeatureFile read_features(const std::filesystem::path& path, FeatureFormat format);
FeatureFile read_features(const std::filesystem::path& path);
void write_features(const FeatureFile& file, const std::filesystem::path& path, FeatureFormat format);
void write_features(const FeatureFile& file, const std::filesystem::path& path);

struct CaptionRecord {
  std::string image_id;
  std::vector<std::string> captions;
};

struct CaptionFile {
  std::vector<CaptionRecord> records;

  const CaptionRecord* find(const std::string& image_id) const;
  /// Every caption string, in file order.
  std::vector<std::string> all_captions() const;
};

CaptionFile read_captions(const std::filesystem::path& path);
void write_captions(const CaptionFile& file, const std::filesystem::path& path);

/// Every caption record must name an image present in `features`.
void check_pairing(const FeatureFile& features, const CaptionFile& captions);

struct SplitSpec {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  const std::vector<std::string>& part(const std::string& name) const;
  /// Pairwise disjoint and a subset of `available`.
  void validate(std::span<const std::string> available) const;
};

struct SplitCounts {
  std::size_t train;
  std::size_t val;
  std::size_t test;
};

/// MS-COCO Karpathy protocol: 113,287 train / 5,000 val / 5,000 test images.
inline constexpr SplitCounts kKarpathySplit{113287, 5000, 5000};

/// Shuffles with `seed`, then slices val, test and train (train receives the
/// remainder of the integer division). `ratio` holds relative weights.
SplitSpec make_splits(std::span<const std::string> ids, std::array<double, 3> ratio, std::uint64_t seed);
SplitSpec make_splits(std::span<const std::string> ids, SplitCounts counts, std::uint64_t seed);
/// Validates an explicit split against the available ids and returns it verbatim.
SplitSpec make_splits(std::span<const std::string> ids, const SplitSpec& explicit_spec);

SplitSpec read_split(const std::filesystem::path& path);
void write_split(const SplitSpec& spec, const std::filesystem::path& path);

struct ToyOptions {
  std::size_t d_feat = 16;
  double noise = 0.05;
};

/// Attribute words of the synthetic dataset.
const std::vector<std::string>& toy_colors();
const std::vector<std::string>& toy_shapes();
/// Feature pattern of a color or shape code; patterns are mutually orthogonal.
std::vector<double> toy_pattern(std::size_t index, std::size_t d_feat);
/// Reads the caption back from region features by nearest-pattern matching.
std::string toy_caption_from_features(const Tensor& regions);

/// Synthetic images with 2–4 regions, each encoding a (color, shape) pair as
/// a sum of two orthogonal patterns plus uniform noise. The caption lists
/// "a <color> <shape>" per region joined by "and", sorted by
/// (color, shape) code, so it is a pure function of the features.
std::pair<FeatureFile, CaptionFile> toy_dataset(std::uint64_t seed, std::size_t n_images, ToyOptions options = {});

/// One (image, caption) training pair.
struct Example {
  std::string image_id;
  std::size_t caption_index = 0;
  std::vector<int> tokens;  // bos ... eos
};

std::vector<Example> make_examples(const FeatureFile& features, const CaptionFile& captions,
                                   std::span<const std::string> image_ids, const Vocabulary& vocab);

/// Padded mini-batch. Masks are true exactly at padded positions.
struct Batch {
  std::vector<std::string> image_ids;
  std::vector<std::size_t> caption_indices;
  Tensor features;       // B×max_regions×d_feat, zero padded
  Mask region_padding;   // B×max_regions
  std::vector<int> tokens;  // B×max_tokens row-major, kPadId padded
  Mask token_padding;    // B×max_tokens
  std::size_t max_regions = 0;
  std::size_t max_tokens = 0;

  std::size_t size() const { return image_ids.size(); }
  /// Unpadded region matrix of example b.
  Tensor regions(std::size_t b) const;
  /// Unpadded token ids of example b.
  std::vector<int> token_ids(std::size_t b) const;
};

/// Seeded shuffle keyed by (seed, epoch), then consecutive slices of
/// batch_size examples.
std::vector<Batch> batches(std::span<const Example> examples, const FeatureFile& features, std::size_t batch_size,
                           std::uint64_t seed, std::uint64_t epoch);

/// Example order used by `batches` for a given (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

}  // namespace mct
