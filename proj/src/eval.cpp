#include "convrec/eval.hpp"

#include "convrec/rng.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace convrec {

RecordFeatures record_features(const ConversationRecord& rec, const InteractionLog& log,
                               const ModelConfig& config) {
  RecordFeatures f;
  const auto& seq = log.sequence_of(rec.user);
  detail::require(rec.history_cutoff >= 0 &&
                      rec.history_cutoff <= static_cast<int>(seq.size()),
                  "record_features: history_cutoff out of range");
  const int start = std::max(0, rec.history_cutoff - config.max_items);
  f.history.assign(seq.begin() + start, seq.begin() + rec.history_cutoff);
  if (f.history.empty()) f.history.push_back(kPadId);

  const int n = static_cast<int>(rec.attributes.size());
  const int astart = std::max(0, n - config.max_attrs);
  f.attrs.assign(rec.attributes.begin() + astart, rec.attributes.end());
  return f;
}

double ndcg_at_10(int rank) {
  detail::require(rank >= 1, "ndcg_at_10: rank must be >= 1");
  if (rank > 10) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

double reciprocal_rank(int rank) {
  detail::require(rank >= 1, "reciprocal_rank: rank must be >= 1");
  return 1.0 / static_cast<double>(rank);
}

int rank_of_target(std::span<const float> scores) {
  detail::require(!scores.empty(), "rank_of_target: empty scores");
  const float target = scores[0];
  int rank = 1;
  for (size_t i = 1; i < scores.size(); ++i)
    if (scores[i] >= target) ++rank;
  return rank;
}

namespace {

std::vector<float> model_candidate_scores(const DualEncoderParams<float>& params,
                                          const ConversationRecord& rec,
                                          const InteractionLog& log,
                                          std::span<const int> candidates) {
  Tape<float> tape;  // forward only
  Fwd<float> ctx{tape};
  RecordFeatures feats = record_features(rec, log, params.config);
  auto items = encode_items(ctx, params, feats.history);
  auto attrs = encode_attributes(ctx, params, feats.attrs);
  auto s_hist = select_row(tape, items.hidden, items.last);
  auto s_conv = select_row(tape, attrs.hidden, attrs.last);
  auto scores = preference_scores(ctx, params, s_hist, s_conv, candidates);
  return scores.data;
}

}  // namespace

int rank_candidates(const DualEncoderParams<float>& params, const ConversationRecord& rec,
                    const InteractionLog& log, std::span<const int> negative_ids) {
  std::vector<int> candidates;
  candidates.push_back(rec.target);
  candidates.insert(candidates.end(), negative_ids.begin(), negative_ids.end());
  std::set<int> unique(candidates.begin(), candidates.end());
  detail::require(unique.size() == candidates.size(), "rank_candidates: duplicate candidates");
  auto scores = model_candidate_scores(params, rec, log, candidates);
  return rank_of_target(scores);
}

std::vector<int> sample_eval_negatives(std::uint64_t seed, int user, const Catalog& catalog,
                                       int target) {
  detail::require(catalog.item_count() >= 101,
                  "sample_eval_negatives: catalog must hold at least 101 items");
  std::mt19937 rng = make_rng(seed, 0x9e00 + static_cast<std::uint64_t>(user));
  std::uniform_int_distribution<int> draw(kFirstItemId, catalog.items.end_id() - 1);
  std::set<int> chosen;
  std::vector<int> negatives;
  while (negatives.size() < 100) {
    const int item = draw(rng);
    if (item == target || chosen.count(item)) continue;
    chosen.insert(item);
    negatives.push_back(item);
  }
  return negatives;
}

EvalResult evaluate_records(const std::vector<ConversationRecord>& records,
                            const Catalog& catalog, std::uint64_t seed,
                            const CandidateScorer& scorer) {
  detail::require(!records.empty(), "evaluate_records: no records");
  EvalResult result;
  double mrr_sum = 0, ndcg_sum = 0;
  for (const auto& rec : records) {
    auto negatives = sample_eval_negatives(seed, rec.user, catalog, rec.target);
    std::vector<int> candidates;
    candidates.push_back(rec.target);
    candidates.insert(candidates.end(), negatives.begin(), negatives.end());
    auto scores = scorer(rec, candidates);
    detail::require(scores.size() == candidates.size(),
                    "evaluate_records: scorer returned wrong count");
    const int rank = rank_of_target(scores);
    result.ranks.push_back(rank);
    result.users.push_back(rec.user);
    mrr_sum += reciprocal_rank(rank);
    ndcg_sum += ndcg_at_10(rank);
  }
  result.mrr = mrr_sum / static_cast<double>(records.size());
  result.ndcg10 = ndcg_sum / static_cast<double>(records.size());
  return result;
}

EvalResult evaluate(const DualEncoderParams<float>& params, const Catalog& catalog,
                    const InteractionLog& log, const std::vector<ConversationRecord>& records,
                    std::uint64_t seed) {
  return evaluate_records(records, catalog, seed,
                          [&](const ConversationRecord& rec, std::span<const int> candidates) {
                            return model_candidate_scores(params, rec, log, candidates);
                          });
}

namespace {

// regularized incomplete beta via Lentz's continued fraction
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double betainc(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
               b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace

std::vector<int> draw_record_negatives(std::span<const ConversationRecord> records,
                                       const InteractionLog& log, const ModelConfig& config,
                                       const NegativeSampler& sampler, std::mt19937& rng) {
  std::vector<int> negatives;
  negatives.reserve(records.size());
  for (const auto& rec : records) {
    RecordFeatures feats = record_features(rec, log, config);
    std::vector<int> visible;
    for (int id : feats.history)
      if (id != kPadId) visible.push_back(id);
    std::array<int, 1> excl{rec.target};
    negatives.push_back(sampler.sample(visible, excl, rng));
  }
  return negatives;
}

double paired_ttest_pvalue(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), "paired_ttest_pvalue: length mismatch");
  detail::require(a.size() >= 2, "paired_ttest_pvalue: need at least 2 pairs");
  const size_t n = a.size();
  double mean = 0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  for (size_t i = 0; i < n; ++i) {
    const double d = (a[i] - b[i]) - mean;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(n - 1);
  if (var == 0.0) return mean == 0.0 ? 1.0 : 0.0;
  const double t = mean / std::sqrt(var / static_cast<double>(n));
  const double nu = static_cast<double>(n - 1);
  return betainc(nu / 2.0, 0.5, nu / (nu + t * t));
}

}  // namespace convrec
