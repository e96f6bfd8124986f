#pragma once

#include <span>
#include <string>

#include "mct/data.hpp"
#include "mct/metrics.hpp"
#include "mct/model.hpp"

namespace mct {

/// Caption text of a generated id sequence (stops at eos).
std::string caption_text(std::span<const int> ids, const Vocabulary& vocab);

/// Greedy (beam == 1) or beam-search caption for one region matrix.
std::vector<int> caption_ids(const CaptionModel& model, const Tensor& regions, std::size_t beam = 1);

/// Generates one caption per image and pairs it with the tokenized
/// reference captions.
EvalCorpus build_eval_corpus(const CaptionModel& model, const FeatureFile& features, const CaptionFile& captions,
                             std::span<const std::string> image_ids, std::size_t beam = 1);

EvalReport evaluate(const CaptionModel& model, const FeatureFile& features, const CaptionFile& captions,
                    std::span<const std::string> image_ids);

}  // namespace mct
