#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace mct {

using TokenList = std::vector<std::string>;

struct EvalItem {
  std::string image_id;
  TokenList candidate;
  std::vector<TokenList> references;
};

struct EvalCorpus {
  std::vector<EvalItem> items;

  /// Non-empty, and every image has at least one reference.
  void validate() const;
};

/// Corpus BLEU-n ×100: pooled clipped k-gram precisions for k = 1..n,
/// geometric mean, brevity penalty against the closest reference length
/// (shorter wins ties). No smoothing.
double bleu(const EvalCorpus& corpus, int n);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Mean over images of the best-reference LCS F-measure (β = 1.2), ×100.
double rouge_l(const EvalCorpus& corpus, double beta = 1.2);

/// CIDEr-D: tf-idf n-gram vectors (n = 1..4, idf from the corpus reference
/// sets), clipped candidate counts, Gaussian length penalty (σ = 6),
/// averaged over references and n, ×10, mean over images.
double cider_d(const EvalCorpus& corpus, double sigma = 6.0);

struct EvalReport {
  double a1 = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;
  double a4 = 0.0;
  double r = 0.0;
  double c = 0.0;
};

EvalReport score_corpus(const EvalCorpus& corpus);

/// "<first>\tA1\tA2\tA3\tA4\tR\tC"
std::string report_header(const std::string& first_column = "Model");
/// label followed by the six scores with two decimals, tab separated.
std::string report_row(const std::string& label, const EvalReport& report);
nlohmann::json report_json(const std::string& label, const EvalReport& report);

}  // namespace mct
