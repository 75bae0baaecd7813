#pragma once

#include "convrec/data.hpp"
#include "convrec/model.hpp"
#include "convrec/negsampler.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace convrec {

/// History prefix and conversation attributes ready for the encoders: the
/// interaction-log entries strictly before the record's cutoff (most recent
/// max_items of them; a single padding id when empty) and the most recent
/// max_attrs conversation attributes.
struct RecordFeatures {
  std::vector<int> history;
  std::vector<int> attrs;
};

RecordFeatures record_features(const ConversationRecord& rec, const InteractionLog& log,
                               const ModelConfig& config);

double ndcg_at_10(int rank);
double reciprocal_rank(int rank);

/// Pessimistic rank of candidate 0 among `scores`: 1 + the number of other
/// candidates scoring greater than or equal to it.
int rank_of_target(std::span<const float> scores);

/// Eq-style fused scores for target + negatives; rank of the target.
/// Throws on duplicate candidate ids.
int rank_candidates(const DualEncoderParams<float>& params, const ConversationRecord& rec,
                    const InteractionLog& log, std::span<const int> negative_ids);

/// 100 distinct uniform negatives, fixed per (seed, user) so that different
/// models rank identical candidate lists.
std::vector<int> sample_eval_negatives(std::uint64_t seed, int user, const Catalog& catalog,
                                       int target);

struct EvalResult {
  double mrr = 0;
  double ndcg10 = 0;
  std::vector<int> ranks;  // aligned with the record order
  std::vector<int> users;
};

using CandidateScorer =
    std::function<std::vector<float>(const ConversationRecord&, std::span<const int>)>;

/// Leave-one-out ranking evaluation against a pluggable scorer (the model in
/// production, oracles in tests).
EvalResult evaluate_records(const std::vector<ConversationRecord>& records,
                            const Catalog& catalog, std::uint64_t seed,
                            const CandidateScorer& scorer);

EvalResult evaluate(const DualEncoderParams<float>& params, const Catalog& catalog,
                    const InteractionLog& log, const std::vector<ConversationRecord>& records,
                    std::uint64_t seed);

/// Two-sided paired t-test p-value. Zero-variance differences degenerate to
/// p=1 when the means agree and p=0 otherwise.
double paired_ttest_pvalue(std::span<const double> a, std::span<const double> b);

/// One negative per record, drawn in record order; lets an epoch fix its
/// training pairs up front and lets loss snapshots rebuild them exactly.
std::vector<int> draw_record_negatives(std::span<const ConversationRecord> records,
                                       const InteractionLog& log, const ModelConfig& config,
                                       const NegativeSampler& sampler, std::mt19937& rng);

/// Pairwise ranking loss for fine-tuning: fused preference score of the
/// record's target against its paired negative.
template <class S>
Tensor<S> pairwise_rank_loss(Fwd<S>& ctx, const DualEncoderParams<S>& p,
                             std::span<const ConversationRecord> batch,
                             std::span<const int> negatives, const InteractionLog& log) {
  detail::require(!batch.empty(), "pairwise_rank_loss: empty batch");
  detail::require(batch.size() == negatives.size(),
                  "pairwise_rank_loss: one negative per record required");
  auto& t = ctx.tape;
  std::vector<Tensor<S>> per_record;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& rec = batch[i];
    detail::require(!rec.attributes.empty(), "pairwise_rank_loss: record without attributes");
    RecordFeatures feats = record_features(rec, log, p.config);
    auto items = encode_items(ctx, p, feats.history);
    auto attrs = encode_attributes(ctx, p, feats.attrs);
    auto s_hist = select_row(t, items.hidden, items.last);
    auto s_conv = select_row(t, attrs.hidden, attrs.last);
    std::array<int, 2> cands{rec.target, negatives[i]};
    auto scores = preference_scores(ctx, p, s_hist, s_conv, cands);
    auto margin = sub(t, select_elem(t, scores, 0), select_elem(t, scores, 1));
    per_record.push_back(softplus(t, neg(t, margin)));
  }
  return mean(t, stack_scalars<S>(t, per_record));
}

/// Convenience wrapper that draws the negatives on the spot.
template <class S>
Tensor<S> pairwise_rank_loss(Fwd<S>& ctx, const DualEncoderParams<S>& p,
                             std::span<const ConversationRecord> batch,
                             const InteractionLog& log, const NegativeSampler& sampler,
                             std::mt19937& rng) {
  auto negatives = draw_record_negatives(batch, log, p.config, sampler, rng);
  return pairwise_rank_loss(ctx, p, batch, negatives, log);
}

}  // namespace convrec
