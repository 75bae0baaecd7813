#include "convrec/simulator.hpp"

#include "convrec/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace convrec {

CandidateIndex::CandidateIndex(const Catalog& catalog) {
  const int item_end = catalog.items.end_id();
  words_ = static_cast<size_t>(item_end + 63) / 64;
  attr_vocab_ = catalog.attr_vocab_size();
  masks_.assign(static_cast<size_t>(attr_vocab_), std::vector<std::uint64_t>(words_, 0));
  all_.assign(words_, 0);
  for (int item = kFirstItemId; item < item_end; ++item) {
    all_[static_cast<size_t>(item) / 64] |= std::uint64_t{1} << (item % 64);
    for (int attr : catalog.attributes_of(item))
      masks_[static_cast<size_t>(attr)][static_cast<size_t>(item) / 64] |=
          std::uint64_t{1} << (item % 64);
  }
}

const std::vector<std::uint64_t>& CandidateIndex::attr_mask(int attr) const {
  if (attr < kFirstAttrId || attr >= attr_vocab_)
    throw std::out_of_range("attr_mask: attribute id out of range");
  return masks_[static_cast<size_t>(attr)];
}

std::vector<std::uint64_t> CandidateIndex::all_items() const { return all_; }

double attribute_entropy(int attr, const std::vector<std::uint64_t>& candidates,
                         int candidate_count, const CandidateIndex& index) {
  detail::require(candidate_count > 0, "attribute_entropy: empty candidate set");
  const int with = CandidateIndex::popcount_and(candidates, index.attr_mask(attr));
  const double p = static_cast<double>(with) / static_cast<double>(candidate_count);
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

SessionState init_session(int target, int first_attribute, const Catalog& catalog,
                          const CandidateIndex& index) {
  detail::require(catalog.item_has_attribute(target, first_attribute),
                  "init_session: opening attribute must belong to the target");
  SessionState s;
  s.target = target;
  s.oracle = catalog.attributes_of(target);
  s.confirmed.push_back(first_attribute);
  s.candidates = index.attr_mask(first_attribute);
  s.candidate_count = CandidateIndex::popcount(s.candidates);
  return s;
}

std::optional<int> choose_question(const SessionState& state, const Catalog& catalog,
                                   const CandidateIndex& index) {
  std::optional<int> best;
  double best_entropy = 0.0;
  for (int attr = kFirstAttrId; attr < catalog.attrs.end_id(); ++attr) {
    if (std::find(state.confirmed.begin(), state.confirmed.end(), attr) !=
        state.confirmed.end())
      continue;
    if (std::find(state.rejected.begin(), state.rejected.end(), attr) != state.rejected.end())
      continue;
    const double h = attribute_entropy(attr, state.candidates, state.candidate_count, index);
    if (h > best_entropy) {  // strict: ties keep the smaller id
      best_entropy = h;
      best = attr;
    }
  }
  return best;
}

SimAction step_session(SessionState& state, const Catalog& catalog,
                       const CandidateIndex& index, std::mt19937& rng) {
  if (state.asks >= kMaxSessionAsks) return {SimAction::Kind::recommend, kPadId};
  const double p_rec = 10.0 / static_cast<double>(std::max(state.candidate_count, 10));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < p_rec) return {SimAction::Kind::recommend, kPadId};

  auto question = choose_question(state, catalog, index);
  if (!question) return {SimAction::Kind::recommend, kPadId};

  state.asks += 1;
  const int attr = *question;
  if (std::binary_search(state.oracle.begin(), state.oracle.end(), attr)) {
    state.confirmed.push_back(attr);
    CandidateIndex::intersect(state.candidates, index.attr_mask(attr));
    state.candidate_count = CandidateIndex::popcount(state.candidates);
  } else {
    state.rejected.push_back(attr);
  }
  return {SimAction::Kind::ask, attr};
}

std::vector<ConversationRecord> simulate_dataset(const InteractionLog& log,
                                                 const Catalog& catalog, std::uint64_t seed) {
  CandidateIndex index(catalog);
  std::vector<ConversationRecord> records;
  for (int user = 0; user < log.user_count(); ++user) {
    const auto& seq = log.sequence_of(user);
    for (size_t idx = 0; idx < seq.size(); ++idx) {
      const int target = seq[idx];
      std::mt19937 rng = make_rng(seed, mix_seed(static_cast<std::uint64_t>(user),
                                                 static_cast<std::uint64_t>(idx)));
      const auto& oracle = catalog.attributes_of(target);
      std::uniform_int_distribution<size_t> pick(0, oracle.size() - 1);
      SessionState state = init_session(target, oracle[pick(rng)], catalog, index);
      while (step_session(state, catalog, index, rng).kind != SimAction::Kind::recommend) {
      }
      ConversationRecord rec;
      rec.user = user;
      rec.attributes = state.confirmed;
      rec.target = target;
      rec.history_cutoff = static_cast<int>(idx);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace convrec
