#pragma once


#include "convrec/check.hpp"
#include "convrec/data.hpp"

#include <bit>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace convrec {

/// Per-attribute item bitmask over internal item ids; lets candidate filtering
/// and entropy counting run on machine words.
class CandidateIndex {
 public:
  explicit CandidateIndex(const Catalog& catalog);

  const std::vector<std::uint64_t>& attr_mask(int attr) const;
  std::vector<std::uint64_t> all_items() const;

  static int popcount(const std::vector<std::uint64_t>& bits) {
    int n = 0;
    for (std::uint64_t w : bits) n += std::popcount(w);
    return n;
  }
  static int popcount_and(const std::vector<std::uint64_t>& a,
                          const std::vector<std::uint64_t>& b) {
    int n = 0;
    for (size_t i = 0; i < a.size(); ++i) n += std::popcount(a[i] & b[i]);
    return n;
  }
  static void intersect(std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
    for (size_t i = 0; i < a.size(); ++i) a[i] &= b[i];
  }
  static bool test(const std::vector<std::uint64_t>& bits, int item) {
    return (bits[static_cast<size_t>(item) / 64] >> (static_cast<size_t>(item) % 64)) & 1u;
  }

 private:
  size_t words_ = 0;
  int attr_vocab_ = 0;
  std::vector<std::vector<std::uint64_t>> masks_;  // indexed by attribute id
  std::vector<std::uint64_t> all_;
};

/// One running conversation: confirmed attributes filter the candidate set;
/// rejected ones only leave the question pool.
struct SessionState {
  int target = 0;
  std::vector<int> oracle;     // target's attribute set, ascending
  std::vector<int> confirmed;  // in confirmation order
  std::vector<int> rejected;   // in rejection order
  std::vector<std::uint64_t> candidates;
  int candidate_count = 0;
  int asks = 0;
};

struct SimAction {
  enum class Kind { ask, recommend } kind = Kind::recommend;
  int attribute = kPadId;  // valid when kind == ask
};

inline constexpr int kMaxSessionAsks = 15;

/// Binary entropy of "candidate has the attribute": p log p terms with
/// 0 log 0 = 0, in bits.
double attribute_entropy(int attr, const std::vector<std::uint64_t>& candidates,
                         int candidate_count, const CandidateIndex& index);

SessionState init_session(int target, int first_attribute, const Catalog& catalog,
                          const CandidateIndex& index);

/// Highest-entropy attribute not yet confirmed or rejected; smallest id wins
/// ties; empty when the pool is exhausted or all entropies are zero.
std::optional<int> choose_question(const SessionState& state, const Catalog& catalog,
                                   const CandidateIndex& index);

/// One turn: recommend with probability 10/max(|V|,10) (always once the ask
/// cap is reached or no question is left), otherwise ask the chosen attribute
/// and update the state with the oracle's answer.
SimAction step_session(SessionState& state, const Catalog& catalog,
                       const CandidateIndex& index, std::mt19937& rng);

/// Simulates one session per interaction: the interaction's item is the goal,
/// its attribute set the oracle, and the session opens with one uniformly
/// drawn oracle attribute. Deterministic per (seed, user, interaction index).
std::vector<ConversationRecord> simulate_dataset(const InteractionLog& log,
                                                 const Catalog& catalog, std::uint64_t seed);

}  // namespace convrec
