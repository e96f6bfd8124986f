#include "mct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mct/errors.hpp"

namespace mct {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const TokenList& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

constexpr std::size_t kCiderMaxN = 4;

}  // namespace

void EvalCorpus::validate() const {
  if (items.empty()) throw ContractError("metrics: empty corpus");
  for (const auto& item : items) {
    if (item.references.empty()) throw ContractError("metrics: image '" + item.image_id + "' has no references");
  }
}

double bleu(const EvalCorpus& corpus, int n) {
  if (n < 1 || n > 4) throw ContractError("bleu: n must lie in 1..4, got " + std::to_string(n));
  corpus.validate();
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& item : corpus.items) {
    const auto c = item.candidate.size();
    cand_len += static_cast<double>(c);
    // Closest reference length; the shorter one wins a tie.
    std::size_t best = item.references.front().size();
    for (const auto& ref : item.references) {
      const auto d = std::max(ref.size(), c) - std::min(ref.size(), c);
      const auto bd = std::max(best, c) - std::min(best, c);
      if (d < bd || (d == bd && ref.size() < best)) best = ref.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t k = 1; k <= static_cast<std::size_t>(n); ++k) {
      const NgramCounts cand = ngrams(item.candidate, k);
      NgramCounts max_ref;
      for (const auto& ref : item.references)
        for (const auto& [g, cnt] : ngrams(ref, k)) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cand) {
        const auto it = max_ref.find(g);
        matched[k - 1] += static_cast<double>(std::min(cnt, it == max_ref.end() ? 0 : it->second));
        total[k - 1] += static_cast<double>(cnt);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t k = 0; k < static_cast<std::size_t>(n); ++k) {
    if (total[k] == 0.0 || matched[k] == 0.0) return 0.0;
    log_sum += std::log(matched[k] / total[k]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_sum / n);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const EvalCorpus& corpus, double beta) {
  corpus.validate();
  double total = 0.0;
  for (const auto& item : corpus.items) {
    double best = 0.0;
    for (const auto& ref : item.references) {
      const auto lcs = static_cast<double>(lcs_length(item.candidate, ref));
      if (lcs == 0.0) continue;
      const double p = lcs / static_cast<double>(item.candidate.size());
      const double r = lcs / static_cast<double>(ref.size());
      best = std::max(best, (1.0 + beta * beta) * p * r / (r + beta * beta * p));
    }
    total += best;
  }
  return 100.0 * total / static_cast<double>(corpus.items.size());
}

double cider_d(const EvalCorpus& corpus, double sigma) {
  corpus.validate();
  // Document frequency: number of images whose reference set contains the n-gram.
  std::map<std::vector<std::string>, double> df;
  for (const auto& item : corpus.items) {
    std::set<std::vector<std::string>> seen;
    for (const auto& ref : item.references)
      for (std::size_t n = 1; n <= kCiderMaxN; ++n)
        for (const auto& [g, cnt] : ngrams(ref, n)) seen.insert(g);
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_images = std::log(static_cast<double>(corpus.items.size()));

  struct Vec {
    std::vector<std::map<std::vector<std::string>, double>> weights;
    std::vector<double> norms;
    std::size_t length;
  };
  auto vectorize = [&](const TokenList& tokens) {
    Vec v{std::vector<std::map<std::vector<std::string>, double>>(kCiderMaxN), std::vector<double>(kCiderMaxN, 0.0),
          tokens.size()};
    for (std::size_t n = 1; n <= kCiderMaxN; ++n) {
      for (const auto& [g, cnt] : ngrams(tokens, n)) {
        const auto it = df.find(g);
        const double w = static_cast<double>(cnt) * (log_images - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second)));
        v.weights[n - 1][g] = w;
        v.norms[n - 1] += w * w;
      }
      v.norms[n - 1] = std::sqrt(v.norms[n - 1]);
    }
    return v;
  };

  double total = 0.0;
  for (const auto& item : corpus.items) {
    const Vec cand = vectorize(item.candidate);
    std::vector<double> per_n(kCiderMaxN, 0.0);
    for (const auto& ref_tokens : item.references) {
      const Vec ref = vectorize(ref_tokens);
      const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (std::size_t n = 0; n < kCiderMaxN; ++n) {
        double dot = 0.0;
        for (const auto& [g, w] : cand.weights[n]) {
          const auto it = ref.weights[n].find(g);
          if (it != ref.weights[n].end()) dot += std::min(w, it->second) * it->second;
        }
        if (cand.norms[n] != 0.0 && ref.norms[n] != 0.0) dot /= cand.norms[n] * ref.norms[n];
        per_n[n] += dot * penalty;
      }
    }
    double mean = 0.0;
    for (double s : per_n) mean += s;
    mean /= static_cast<double>(kCiderMaxN);
    total += 10.0 * mean / static_cast<double>(item.references.size());
  }
  return total / static_cast<double>(corpus.items.size());
}

EvalReport score_corpus(const EvalCorpus& corpus) {
  return {bleu(corpus, 1), bleu(corpus, 2), bleu(corpus, 3), bleu(corpus, 4), rouge_l(corpus), cider_d(corpus)};
}

std::string report_header(const std::string& first_column) { return first_column + "\tA1\tA2\tA3\tA4\tR\tC"; }

std::string report_row(const std::string& label, const EvalReport& report) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "\t%.2f\t%.2f\t%.2f\t%.2f\t%.2f\t%.2f", report.a1, report.a2, report.a3, report.a4,
                report.r, report.c);
  return label + buf;
}

nlohmann::json report_json(const std::string& label, const EvalReport& report) {
  return {{"model", label}, {"A1", report.a1}, {"A2", report.a2}, {"A3", report.a3},
          {"A4", report.a4}, {"R", report.r},   {"C", report.c}};
}

}  // namespace mct
