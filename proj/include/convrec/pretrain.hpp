#pragma once

#include "convrec/data.hpp"
#include "convrec/model.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace convrec {

/// One masked position of one item sequence. Instances produced from the same
/// sequence carry identical `masked_sequence` copies and are emitted
/// consecutively, which the loss exploits to encode each sequence once.
struct MipInstance {
  std::vector<int> masked_sequence;
  int position = 0;
  int true_item = 0;
  std::vector<int> attr_sequence;  // the true item's attributes, ascending ids
  int negative_item = 0;
};

/// One item position with its attribute set partially swapped for negatives.
struct SadInstance {
  std::vector<int> sequence;  // original, unmasked item sequence
  int position = 0;
  std::vector<int> corrupted_attrs;     // original slot order
  std::vector<std::uint8_t> labels;     // 1 = original, 0 = substituted
};

struct MaskedSequence {
  std::vector<int> sequence;
  std::vector<int> positions;  // ascending
};

/// Independently masks each non-padding position with probability mask_prob;
/// when none is selected, one uniformly random non-padding position is forced
/// so every sequence yields at least one training signal.
inline MaskedSequence mask_sequence(std::span<const int> seq, double mask_prob,
                                    std::mt19937& rng) {
  detail::require(mask_prob > 0.0 && mask_prob < 1.0, "mask_sequence: prob must be in (0,1)");
  std::vector<int> non_pad;
  for (size_t i = 0; i < seq.size(); ++i)
    if (seq[i] != kPadId) non_pad.push_back(static_cast<int>(i));
  detail::require(!non_pad.empty(), "mask_sequence: no non-padding items");

  MaskedSequence out;
  out.sequence.assign(seq.begin(), seq.end());
  std::bernoulli_distribution flip(mask_prob);
  for (int pos : non_pad)
    if (flip(rng)) out.positions.push_back(pos);
  if (out.positions.empty()) {
    std::uniform_int_distribution<size_t> pick(0, non_pad.size() - 1);
    out.positions.push_back(non_pad[pick(rng)]);
  }
  for (int pos : out.positions) out.sequence[static_cast<size_t>(pos)] = kItemMaskId;
  return out;
}

struct CorruptedAttrs {
  std::vector<int> attrs;
  std::vector<std::uint8_t> labels;  // 1 = original kept, 0 = substituted
};

/// Each attribute is independently replaced, with the given probability, by a
/// uniformly drawn attribute the item does not have.
inline CorruptedAttrs corrupt_attributes(std::span<const int> item_attrs,
                                         double substitution_prob, const Catalog& catalog,
                                         std::mt19937& rng) {
  detail::require(!item_attrs.empty(), "corrupt_attributes: empty attribute set");
  detail::require(substitution_prob >= 0.0 && substitution_prob <= 1.0,
                  "corrupt_attributes: prob must be in [0,1]");
  detail::require(static_cast<int>(item_attrs.size()) < catalog.attribute_count(),
                  "corrupt_attributes: no negative attribute exists");
  std::vector<int> sorted(item_attrs.begin(), item_attrs.end());
  std::sort(sorted.begin(), sorted.end());

  CorruptedAttrs out;
  std::bernoulli_distribution flip(substitution_prob);
  std::uniform_int_distribution<int> draw(kFirstAttrId, catalog.attrs.end_id() - 1);
  for (int attr : item_attrs) {
    if (substitution_prob > 0.0 && flip(rng)) {
      int neg = draw(rng);
      while (std::binary_search(sorted.begin(), sorted.end(), neg)) neg = draw(rng);
      out.attrs.push_back(neg);
      out.labels.push_back(0);
    } else {
      out.attrs.push_back(attr);
      out.labels.push_back(1);
    }
  }
  return out;
}

/// Pairwise ranking loss over masked positions: encodes each distinct masked
/// sequence once (bidirectional), pairs the position state with the encoding
/// of the hidden item's attribute sequence, and scores true vs negative item.
template <class S>
Tensor<S> mip_loss(Fwd<S>& ctx, const DualEncoderParams<S>& p,
                   std::span<const MipInstance> batch) {
  detail::require(!batch.empty(), "mip_loss: empty batch");
  auto& t = ctx.tape;
  std::vector<Tensor<S>> per_instance;
  Encoded<S> enc;
  const std::vector<int>* enc_seq = nullptr;
  for (const auto& inst : batch) {
    if (enc_seq == nullptr || *enc_seq != inst.masked_sequence) {
      enc = encode_items(ctx, p, inst.masked_sequence, /*causal=*/false);
      enc_seq = &inst.masked_sequence;
    }
    auto f_pos = select_row(t, enc.hidden, inst.position);
    auto attrs = encode_attributes(ctx, p, inst.attr_sequence);
    auto s_attr = select_row(t, attrs.hidden, attrs.last);
    std::array<int, 2> cands{inst.true_item, inst.negative_item};
    auto scores = preference_scores(ctx, p, f_pos, s_attr, cands);
    auto margin = sub(t, select_elem(t, scores, 0), select_elem(t, scores, 1));
    per_instance.push_back(softplus(t, neg(t, margin)));
  }
  return mean(t, stack_scalars<S>(t, per_instance));
}

/// Binary cross-entropy over every attribute slot of every instance: is the
/// slot's attribute original or substituted, judged from the item-position
/// state against the encoded corrupted attribute sequence.
template <class S>
Tensor<S> sad_loss(Fwd<S>& ctx, const DualEncoderParams<S>& p,
                   std::span<const SadInstance> batch) {
  detail::require(!batch.empty(), "sad_loss: empty batch");
  auto& t = ctx.tape;
  std::vector<Tensor<S>> per_slot;
  for (const auto& inst : batch) {
    detail::require(inst.labels.size() == inst.corrupted_attrs.size(),
                    "sad_loss: label count mismatch");
    auto items = encode_items(ctx, p, inst.sequence, /*causal=*/false);
    auto f_item = select_row(t, items.hidden, inst.position);
    auto attrs = encode_attributes(ctx, p, inst.corrupted_attrs);
    for (size_t j = 0; j < inst.corrupted_attrs.size(); ++j) {
      if (inst.corrupted_attrs[j] == kPadId) continue;
      auto f_attr = select_row(t, attrs.hidden, static_cast<Index>(j));
      auto logit = substitution_logit(ctx, p, f_item, f_attr);
      // y=1 -> softplus(-z); y=0 -> softplus(z)
      per_slot.push_back(inst.labels[j] ? softplus(t, neg(t, logit)) : softplus(t, logit));
    }
  }
  detail::require(!per_slot.empty(), "sad_loss: no non-padding attribute slots");
  return mean(t, stack_scalars<S>(t, per_slot));
}

}  // namespace convrec
