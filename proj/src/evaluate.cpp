#include "mct/evaluate.hpp"

#include "mct/errors.hpp"

namespace mct {

std::string caption_text(std::span<const int> ids, const Vocabulary& vocab) {
  std::string text;
  for (const auto& w : vocab.decode(ids)) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  return text;
}

std::vector<int> caption_ids(const CaptionModel& model, const Tensor& regions, std::size_t beam) {
  const Tensor memory = encode_image(regions, model.params);
  const DecodeContext ctx = context_of(model);
  return beam == 1 ? generate_greedy(memory, model.params, ctx) : generate_beam(memory, model.params, ctx, beam);
}

EvalCorpus build_eval_corpus(const CaptionModel& model, const FeatureFile& features, const CaptionFile& captions,
                             std::span<const std::string> image_ids, std::size_t beam) {
  if (image_ids.empty()) throw ContractError("evaluate: empty split");
  EvalCorpus corpus;
  for (const auto& id : image_ids) {
    const RegionFeatures* regions = features.find(id);
    if (!regions) throw DataError("evaluate: image '" + id + "' has no features");
    const CaptionRecord* refs = captions.find(id);
    if (!refs) throw DataError("evaluate: image '" + id + "' has no reference captions");
    EvalItem item;
    item.image_id = id;
    item.candidate = model.lexicon.vocab.decode(caption_ids(model, regions->matrix, beam));
    for (const auto& c : refs->captions) item.references.push_back(tokenize(c));
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

EvalReport evaluate(const CaptionModel& model, const FeatureFile& features, const CaptionFile& captions,
                    std::span<const std::string> image_ids) {
  return score_corpus(build_eval_corpus(model, features, captions, image_ids));
}

}  // namespace mct
