#include "genrec/tier.hpp"

#include <cmath>

namespace genrec {

std::vector<float> similarity_set(const VecF& prototype,
                                  std::span<const std::int64_t> history,
                                  const Corpus& corpus) {
  const double pnorm = prototype.cast<double>().norm();
  if (prototype.size() == 0 || pnorm == 0.0)
    throw DataError("similarity_set: zero-norm prototype");
  std::vector<float> sims;
  sims.reserve(history.size());
  for (std::int64_t id : history) {
    const VecD e = corpus.item(id).embedding.cast<double>();
    const double enorm = e.norm();
    if (enorm == 0.0) {
      sims.push_back(0.0f);
      continue;
    }
    sims.push_back(static_cast<float>(e.dot(prototype.cast<double>()) / (enorm * pnorm)));
  }
  return sims;
}

std::vector<int> tier_histogram(std::span<const float> sims, int n_tiers) {
  if (n_tiers <= 0) throw ConfigError("tier_histogram: n_tiers must be positive");
  std::vector<int> bins(n_tiers, 0);
  for (float s : sims) {
    double v = std::clamp(static_cast<double>(s), -1.0, 1.0);
    int idx = static_cast<int>(std::floor((v + 1.0) * 0.5 * n_tiers));
    if (idx >= n_tiers) idx = n_tiers - 1;  // closes the last bin at +1
    if (idx < 0) idx = 0;
    ++bins[idx];
  }
  return bins;
}

std::vector<float> build_tier_feature(std::span<const std::int64_t> long_items,
                                      const Corpus& corpus, const Quantizer& quantizer,
                                      int n_tiers) {
  const int K0 = quantizer.sizes()[0];
  std::vector<float> flat(static_cast<std::size_t>(K0) * n_tiers, 0.0f);
  if (long_items.empty()) return flat;
  for (int a = 0; a < K0; ++a) {
    const VecF& proto = quantizer.prototypes()[a];
    if (proto.size() == 0) continue;
    const auto sims = similarity_set(proto, long_items, corpus);
    const auto bins = tier_histogram(sims, n_tiers);
    for (int i = 0; i < n_tiers; ++i)
      flat[static_cast<std::size_t>(a) * n_tiers + i] = static_cast<float>(bins[i]);
  }
  return flat;
}

}  // namespace genrec
