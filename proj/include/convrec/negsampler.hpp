#pragma once

#include "convrec/data.hpp"
#include "convrec/model.hpp"

#include <algorithm>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace convrec {

struct NegativePolicy {
  enum class Kind { uniform, generator };
  Kind kind = Kind::uniform;
  int top_k = 100;
};

/// Uniform draw over real items (ids >= kFirstItemId) outside `exclusions`.
inline int uniform_negative(const Catalog& catalog, std::span<const int> exclusions,
                            std::mt19937& rng) {
  std::vector<int> excluded;
  for (int e : exclusions)
    if (e >= kFirstItemId && e < catalog.items.end_id()) excluded.push_back(e);
  std::sort(excluded.begin(), excluded.end());
  excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
  detail::require(static_cast<int>(excluded.size()) < catalog.item_count(),
                  "uniform_negative: no valid item left");
  std::uniform_int_distribution<int> draw(kFirstItemId, catalog.items.end_id() - 1);
  for (;;) {
    const int item = draw(rng);
    if (!std::binary_search(excluded.begin(), excluded.end(), item)) return item;
  }
}

struct ScoredItem {
  int item;
  float score;
  double prob;  // softmax over the retained top-k scores
};

/// The frozen generator's sampling distribution for one prefix: next-item
/// scores with exclusions (and padding/mask rows) removed, cut to the top_k
/// highest-scoring items, softmax over the retained scores. Ties order by id.
inline std::vector<ScoredItem> generator_topk_distribution(const GeneratorParams<float>& gen,
                                                           std::span<const int> prefix,
                                                           std::span<const int> exclusions,
                                                           int top_k, const Catalog& catalog) {
  detail::require(top_k >= 1, "generator_topk_distribution: top_k must be >= 1");
  detail::require(!prefix.empty(), "generator_topk_distribution: empty prefix");
  Tape<float> tape;  // nothing watched: forward only
  Fwd<float> ctx{tape};
  auto scores = next_item_scores(ctx, gen, prefix);

  std::vector<ScoredItem> ranked;
  for (int item = kFirstItemId; item < catalog.items.end_id(); ++item) {
    if (std::find(exclusions.begin(), exclusions.end(), item) != exclusions.end()) continue;
    ranked.push_back({item, scores[item], 0.0});
  }
  detail::require(!ranked.empty(), "generator_topk_distribution: no candidate left");
  std::sort(ranked.begin(), ranked.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
  if (static_cast<int>(ranked.size()) > top_k) ranked.resize(static_cast<size_t>(top_k));

  double max_score = ranked.front().score;
  double total = 0;
  for (auto& r : ranked) {
    r.prob = std::exp(static_cast<double>(r.score) - max_score);
    total += r.prob;
  }
  for (auto& r : ranked) r.prob /= total;
  return ranked;
}

/// One draw from the top-k softmax. An empty prefix falls back to a uniform
/// draw, as does a masked position with nothing visible before it.
inline int generator_sample(const GeneratorParams<float>& gen, std::span<const int> prefix,
                            std::span<const int> exclusions, int top_k, const Catalog& catalog,
                            std::mt19937& rng) {
  if (prefix.empty()) return uniform_negative(catalog, exclusions, rng);
  auto dist = generator_topk_distribution(gen, prefix, exclusions, top_k, catalog);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double r = unit(rng);
  for (const auto& entry : dist) {
    r -= entry.prob;
    if (r <= 0) return entry.item;
  }
  return dist.back().item;
}

/// Negative-item provider for training: either uniform over the catalog or
/// softmax-over-top-k of a frozen next-item model.
class NegativeSampler {
 public:
  NegativeSampler(const Catalog& catalog, NegativePolicy policy,
                  std::shared_ptr<const GeneratorParams<float>> generator = nullptr)
      : catalog_(&catalog), policy_(policy), generator_(std::move(generator)) {
    if (policy_.kind == NegativePolicy::Kind::generator)
      detail::require(generator_ != nullptr, "NegativeSampler: generator policy without model");
  }

  /// `prefix` is the visible history before the scored position (masked
  /// entries already removed); `exclusions` must contain the positive item.
  int sample(std::span<const int> prefix, std::span<const int> exclusions,
             std::mt19937& rng) const {
    if (policy_.kind == NegativePolicy::Kind::uniform || prefix.empty())
      return uniform_negative(*catalog_, exclusions, rng);
    return generator_sample(*generator_, prefix, exclusions, policy_.top_k, *catalog_, rng);
  }

  const NegativePolicy& policy() const { return policy_; }

 private:
  const Catalog* catalog_;
  NegativePolicy policy_;
  std::shared_ptr<const GeneratorParams<float>> generator_;
};

}  // namespace convrec
