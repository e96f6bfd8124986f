#pragma once

#include <filesystem>
#include <string>

#include "mct/model.hpp"
#include "mct/training.hpp"

namespace mct {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "MCTC", u32 version, u64 header length, JSON header (mode,
/// configs, vocabulary, character alphabet, parameter manifest), the
/// parameters as little-endian f64 in manifest order, CRC32 of the payload.
std::string serialize_checkpoint(const CaptionModel& model, const TrainConfig& train);

struct LoadedCheckpoint {
  CaptionModel model;
  TrainConfig train;
};

/// Throws DataError naming the failing field (magic, version, header,
/// manifest entry, payload or checksum).
LoadedCheckpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const CaptionModel& model, const TrainConfig& train, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mct
