#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace bofi {

using Sentence = std::vector<std::string>;
using RefSet = std::vector<Sentence>;

/// Corpus BLEU with uniform weights over 1..n, clipped counts and the
/// brevity penalty (closest reference length, shorter on ties). No smoothing.
double bleu(std::span<const Sentence> candidates, std::span<const RefSet> references, int n);

/// CIDEr-D (n = 1..4, sigma = 6, x10). Document frequencies come from the
/// reference sets given at construction, one set per image.
class CiderD {
 public:
  explicit CiderD(std::span<const RefSet> corpus_refs);

  /// Score of one candidate against its own references.
  double score(const Sentence& candidate, const RefSet& refs) const;
  std::size_t corpus_size() const { return n_images_; }

 private:
  struct Vec {
    std::array<std::map<std::vector<std::string>, double>, 4> weights;
    std::array<double, 4> norm{};
    int length = 0;
  };
  Vec vectorize(const Sentence& s) const;

  std::map<std::vector<std::string>, double> df_;
  std::size_t n_images_ = 0;
  double log_images_ = 0.0;
};

/// Mean CIDEr-D over the corpus with document frequencies from `references`.
double cider_d(std::span<const Sentence> candidates, std::span<const RefSet> references);
std::vector<double> cider_d_per_record(std::span<const Sentence> candidates, std::span<const RefSet> references);

struct MetricReport {
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double cider = 0.0;
  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

MetricReport score_corpus(std::span<const Sentence> candidates, std::span<const RefSet> references);

}  // namespace bofi
