#pragma once

// Slow reference implementations of the caption metrics, written without
// any code shared with src/metrics.cpp. N-grams are keyed as space-joined
// strings instead of token vectors.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mct/metrics.hpp"
#include "mct/random.hpp"

namespace mct::oracle {


inline std::map<std::string, int> grams(const TokenList& t, std::size_t n) {
  std::map<std::string, int> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) key += t[i + k] + " ";
    ++out[key];
  }
  return out;
}

inline double oracle_bleu(const EvalCorpus& c, int n) {
  double logp = 0.0;
  long cand_len = 0, ref_len = 0;
  for (int k = 1; k <= n; ++k) {
    double hit = 0, all = 0;
    for (const auto& item : c.items) {
      for (const auto& [g, cnt] : grams(item.candidate, static_cast<std::size_t>(k))) {
        int best = 0;
        for (const auto& r : item.references) {
          const auto rg = grams(r, static_cast<std::size_t>(k));
          if (rg.count(g)) best = std::max(best, rg.at(g));
        }
        hit += std::min(cnt, best);
        all += cnt;
      }
    }
    if (hit == 0) return 0.0;
    logp += std::log(hit / all) / n;
  }
  for (const auto& item : c.items) {
    const long len = static_cast<long>(item.candidate.size());
    long best = -1;
    for (const auto& r : item.references) {
      const long rl = static_cast<long>(r.size());
      if (best < 0 || std::labs(rl - len) < std::labs(best - len) || (std::labs(rl - len) == std::labs(best - len) && rl < best))
        best = rl;
    }
    cand_len += len;
    ref_len += best;
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return 100.0 * bp * std::exp(logp);
}

// Exhaustive LCS over subsequences of the shorter list.
inline std::size_t oracle_lcs(const TokenList& a, const TokenList& b) {
  const TokenList& s = a.size() <= b.size() ? a : b;
  const TokenList& l = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (unsigned mask = 0; mask < (1u << s.size()); ++mask) {
    std::size_t pos = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(mask >> i & 1u)) continue;
      while (pos < l.size() && l[pos] != s[i]) ++pos;
      if (pos == l.size()) ok = false;
      else { ++pos; ++len; }
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

inline double oracle_cider(const EvalCorpus& c, double sigma = 6.0) {
  const double n_img = static_cast<double>(c.items.size());
  std::map<std::string, double> df;
  for (const auto& item : c.items) {
    std::set<std::string> seen;
    for (const auto& r : item.references)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto& [g, cnt] : grams(r, n)) seen.insert(g);
    for (const auto& g : seen) df[g] += 1;
  }
  auto vec = [&](const TokenList& t, std::size_t n) {
    std::map<std::string, double> v;
    for (const auto& [g, cnt] : grams(t, n)) v[g] = cnt * std::log(n_img / std::max(1.0, df.count(g) ? df[g] : 0.0));
    return v;
  };
  auto norm = [](const std::map<std::string, double>& v) {
    double s = 0;
    for (const auto& [g, w] : v) s += w * w;
    return std::sqrt(s);
  };
  double total = 0;
  for (const auto& item : c.items) {
    double score = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cv = vec(item.candidate, n);
      double sum_refs = 0;
      for (const auto& r : item.references) {
        const auto rv = vec(r, n);
        double dot = 0;
        for (const auto& [g, w] : cv)
          if (rv.count(g)) dot += std::min(w, rv.at(g)) * rv.at(g);
        const double nc = norm(cv), nr = norm(rv);
        if (nc > 0 && nr > 0) dot /= nc * nr;
        const double d = static_cast<double>(item.candidate.size()) - static_cast<double>(r.size());
        sum_refs += dot * std::exp(-d * d / (2 * sigma * sigma));
      }
      score += sum_refs / static_cast<double>(item.references.size()) / 4.0;
    }
    total += 10.0 * score;
  }
  return total / n_img;
}

inline EvalCorpus random_corpus(Rng& rng, std::size_t images) {
  static const std::vector<std::string> vocab = {"a", "red", "blue", "circle", "star", "and", "on", "the"};
  auto sentence = [&] {
    TokenList t;
    const std::size_t len = 1 + rng.below(9);
    for (std::size_t i = 0; i < len; ++i) t.push_back(vocab[rng.below(vocab.size())]);
    return t;
  };
  EvalCorpus c;
  for (std::size_t i = 0; i < images; ++i) {
    EvalItem item{"img" + std::to_string(i), sentence(), {}};
    const std::size_t refs = 1 + rng.below(4);
    for (std::size_t r = 0; r < refs; ++r) item.references.push_back(sentence());
    if (rng.below(3) == 0) item.references.push_back(item.candidate);  // some exact hits
    c.items.push_back(std::move(item));
  }
  return c;
}

}  // namespace mct::oracle
