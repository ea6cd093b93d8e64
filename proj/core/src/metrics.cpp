#include "bofi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "bofi/error.hpp"

namespace bofi {

namespace {

using Ngram = std::vector<std::string>;
using Counts = std::map<Ngram, int>;

Counts ngram_counts(const Sentence& s, int n) {
  Counts c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i)
    ++c[Ngram(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i) + n)];
  return c;
}

void check_sizes(std::size_t cands, std::size_t refs) {
  if (cands == 0) throw DataError("metric over an empty candidate set");
  if (cands != refs)
    throw DataError(std::to_string(cands) + " candidates but " + std::to_string(refs) + " reference sets");
}

}  // namespace

double bleu(std::span<const Sentence> candidates, std::span<const RefSet> references, int n) {
  check_sizes(candidates.size(), references.size());
  if (n < 1) throw ConfigError("BLEU order must be >= 1");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Sentence& c = candidates[i];
    const RefSet& refs = references[i];
    if (refs.empty()) throw DataError("record " + std::to_string(i) + " has no references");
    cand_len += static_cast<double>(c.size());
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
      const auto diff = [&](std::size_t len) { return std::abs(static_cast<long>(len) - static_cast<long>(c.size())); };
      if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (int k = 1; k <= n; ++k) {
      std::map<Ngram, int> max_ref;
      for (const auto& r : refs)
        for (const auto& [g, cnt] : ngram_counts(r, k)) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : ngram_counts(c, k)) {
        const auto it = max_ref.find(g);
        matched[static_cast<std::size_t>(k - 1)] += std::min(cnt, it == max_ref.end() ? 0 : it->second);
        total[static_cast<std::size_t>(k - 1)] += cnt;
      }
    }
  }
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[static_cast<std::size_t>(k)] == 0.0) return 0.0;
    log_sum += std::log(matched[static_cast<std::size_t>(k)] / total[static_cast<std::size_t>(k)]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / n);
}

CiderD::CiderD(std::span<const RefSet> corpus_refs) : n_images_(corpus_refs.size()) {
  if (corpus_refs.empty()) throw DataError("CIDEr-D needs at least one reference set");
  for (const auto& refs : corpus_refs) {
    if (refs.empty()) throw DataError("CIDEr-D reference set is empty");
    std::set<Ngram> seen;
    for (const auto& r : refs)
      for (int k = 1; k <= 4; ++k)
        for (const auto& [g, cnt] : ngram_counts(r, k)) seen.insert(g);
    for (const auto& g : seen) df_[g] += 1.0;
  }
  log_images_ = std::log(static_cast<double>(n_images_));
}

CiderD::Vec CiderD::vectorize(const Sentence& s) const {
  Vec v;
  for (int k = 1; k <= 4; ++k) {
    auto& w = v.weights[static_cast<std::size_t>(k - 1)];
    for (const auto& [g, tf] : ngram_counts(s, k)) {
      const auto it = df_.find(g);
      const double df = std::log(std::max(1.0, it == df_.end() ? 0.0 : it->second));
      const double x = tf * (log_images_ - df);
      w[g] = x;
      v.norm[static_cast<std::size_t>(k - 1)] += x * x;
      if (k == 2) v.length += tf;  // the reference scorer measures length in bigrams
    }
  }
  for (auto& nrm : v.norm) nrm = std::sqrt(nrm);
  return v;
}

double CiderD::score(const Sentence& candidate, const RefSet& refs) const {
  if (refs.empty()) throw DataError("CIDEr-D reference set is empty");
  constexpr double kSigma = 6.0;
  const Vec hyp = vectorize(candidate);
  std::array<double, 4> acc{};
  for (const auto& r : refs) {
    const Vec ref = vectorize(r);
    const double delta = hyp.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
    for (std::size_t k = 0; k < 4; ++k) {
      double val = 0.0;
      for (const auto& [g, x] : hyp.weights[k]) {
        const auto it = ref.weights[k].find(g);
        if (it != ref.weights[k].end()) val += std::min(x, it->second) * it->second;
      }
      if (hyp.norm[k] != 0.0 && ref.norm[k] != 0.0) val /= hyp.norm[k] * ref.norm[k];
      acc[k] += val * penalty;
    }
  }
  const double mean = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
  return mean / static_cast<double>(refs.size()) * 10.0;
}

std::vector<double> cider_d_per_record(std::span<const Sentence> candidates, std::span<const RefSet> references) {
  check_sizes(candidates.size(), references.size());
  const CiderD scorer(references);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out.push_back(scorer.score(candidates[i], references[i]));
  return out;
}

double cider_d(std::span<const Sentence> candidates, std::span<const RefSet> references) {
  const auto per = cider_d_per_record(candidates, references);
  double s = 0.0;
  for (double x : per) s += x;
  return s / static_cast<double>(per.size());
}

MetricReport score_corpus(std::span<const Sentence> candidates, std::span<const RefSet> references) {
  return {bleu(candidates, references, 1), bleu(candidates, references, 4), cider_d(candidates, references)};
}

}  // namespace bofi
