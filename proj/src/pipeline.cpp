#include "convrec/pipeline.hpp"

#include "convrec/rng.hpp"

#include <algorithm>
#include <numeric>

namespace convrec {

namespace {

struct InstanceBatch {
  std::vector<MipInstance> mip;
  std::vector<SadInstance> sad;
};

/// Builds the training instances for the given windows. Masked positions are
/// visited in ascending order; the generator prefix for a masked position is
/// the unmasked items before it.
InstanceBatch build_instances(const std::vector<std::vector<int>>& windows,
                              std::span<const size_t> batch_idx, const Catalog& catalog,
                              const NegativeSampler& sampler, const PretrainOptions& opt,
                              std::mt19937& rng) {
  InstanceBatch out;
  for (size_t wi : batch_idx) {
    const auto& window = windows[wi];
    if (opt.lambda_mip > 0) {
      MaskedSequence masked = mask_sequence(window, opt.mask_prob, rng);
      for (int pos : masked.positions) {
        MipInstance inst;
        inst.masked_sequence = masked.sequence;
        inst.position = pos;
        inst.true_item = window[static_cast<size_t>(pos)];
        inst.attr_sequence = catalog.attributes_of(inst.true_item);
        std::vector<int> prefix;
        for (int j = 0; j < pos; ++j) {
          const int id = masked.sequence[static_cast<size_t>(j)];
          if (id != kItemMaskId && id != kPadId) prefix.push_back(id);
        }
        std::array<int, 1> excl{inst.true_item};
        inst.negative_item = sampler.sample(prefix, excl, rng);
        out.mip.push_back(std::move(inst));
      }
    }
    if (opt.lambda_sad > 0) {
      std::vector<int> non_pad;
      for (size_t i = 0; i < window.size(); ++i)
        if (window[i] != kPadId) non_pad.push_back(static_cast<int>(i));
      if (non_pad.empty()) continue;
      std::uniform_int_distribution<size_t> pick(0, non_pad.size() - 1);
      const int pos = non_pad[pick(rng)];
      const auto& attrs = catalog.attributes_of(window[static_cast<size_t>(pos)]);
      if (static_cast<int>(attrs.size()) >= catalog.attribute_count()) continue;
      CorruptedAttrs corrupted =
          corrupt_attributes(attrs, opt.substitution_prob, catalog, rng);
      SadInstance inst;
      inst.sequence = window;
      inst.position = pos;
      inst.corrupted_attrs = std::move(corrupted.attrs);
      inst.labels = std::move(corrupted.labels);
      out.sad.push_back(std::move(inst));
    }
  }
  return out;
}

GradientList<float> collect_gradients(Tape<float>& tape, std::vector<TensorF*>& params) {
  GradientList<float> grads;
  grads.reserve(params.size());
  for (auto* p : params) {
    auto g = tape.grad(*p);
    grads.emplace_back(g.begin(), g.end());
  }
  return grads;
}

std::vector<size_t> shuffled_indices(size_t n, std::mt19937& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

EpochMetrics pretrain_epoch(DualEncoderParams<float>& params,
                            const std::vector<std::vector<int>>& windows,
                            const Catalog& catalog, const NegativeSampler& sampler,
                            const PretrainOptions& opt, AdamState<float>& adam,
                            std::mt19937& rng) {
  detail::require(!windows.empty(), "pretrain_epoch: no training windows");
  auto param_ptrs = parameters(params);

  // The epoch's whole instance set is fixed up front from one derived seed,
  // so pretrain_loss_snapshot can rebuild it exactly. Fresh draws per epoch.
  const std::uint32_t instance_seed = rng();
  std::mt19937 instance_rng = make_rng(instance_seed, 0x5eed);
  std::vector<InstanceBatch> per_window(windows.size());
  for (size_t w = 0; w < windows.size(); ++w) {
    std::array<size_t, 1> one{w};
    per_window[w] = build_instances(windows, one, catalog, sampler, opt, instance_rng);
  }
  auto order = shuffled_indices(windows.size(), rng);

  double mip_sum = 0, sad_sum = 0;
  size_t mip_count = 0, sad_count = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(opt.batch_size));
    InstanceBatch batch;
    for (size_t i = start; i < end; ++i) {
      const InstanceBatch& w = per_window[order[i]];
      batch.mip.insert(batch.mip.end(), w.mip.begin(), w.mip.end());
      batch.sad.insert(batch.sad.end(), w.sad.begin(), w.sad.end());
    }
    if (batch.mip.empty() && batch.sad.empty()) continue;

    Tape<float> tape;
    for (auto* p : param_ptrs) tape.watch(*p);
    Fwd<float> ctx{tape, true, opt.dropout, &rng};

    Tensor<float> total = TensorF::scalar(0.0f);
    if (!batch.mip.empty()) {
      auto l = mip_loss(ctx, params, batch.mip);
      mip_sum += static_cast<double>(l[0]) * static_cast<double>(batch.mip.size());
      mip_count += batch.mip.size();
      total = add(tape, total, scale(tape, l, static_cast<float>(opt.lambda_mip)));
    }
    if (!batch.sad.empty()) {
      auto l = sad_loss(ctx, params, batch.sad);
      sad_sum += static_cast<double>(l[0]) * static_cast<double>(batch.sad.size());
      sad_count += batch.sad.size();
      total = add(tape, total, scale(tape, l, static_cast<float>(opt.lambda_sad)));
    }
    tape.backward(total);
    auto grads = collect_gradients(tape, param_ptrs);
    clip_global_norm(grads, opt.max_grad_norm);
    adam_step(param_ptrs, grads, adam);
  }
  EpochMetrics m;
  if (mip_count > 0) m.mip = mip_sum / static_cast<double>(mip_count);
  if (sad_count > 0) m.sad = sad_sum / static_cast<double>(sad_count);
  return m;
}

EpochMetrics pretrain_loss_snapshot(const DualEncoderParams<float>& params,
                                    const std::vector<std::vector<int>>& windows,
                                    const Catalog& catalog, const NegativeSampler& sampler,
                                    const PretrainOptions& opt, std::uint64_t instance_seed) {
  detail::require(!windows.empty(), "pretrain_loss_snapshot: no windows");
  std::mt19937 rng = make_rng(static_cast<std::uint32_t>(instance_seed), 0x5eed);
  InstanceBatch batch;
  for (size_t w = 0; w < windows.size(); ++w) {
    std::array<size_t, 1> one{w};
    InstanceBatch wb = build_instances(windows, one, catalog, sampler, opt, rng);
    batch.mip.insert(batch.mip.end(), wb.mip.begin(), wb.mip.end());
    batch.sad.insert(batch.sad.end(), wb.sad.begin(), wb.sad.end());
  }

  Tape<float> tape;  // nothing watched: values only
  Fwd<float> ctx{tape};
  EpochMetrics m;
  if (!batch.mip.empty()) m.mip = mip_loss(ctx, params, batch.mip)[0];
  if (!batch.sad.empty()) m.sad = sad_loss(ctx, params, batch.sad)[0];
  return m;
}

PretrainResult pretrain_model(DualEncoderParams<float>& params, const InteractionLog& log,
                              const Catalog& catalog, const NegativeSampler& sampler,
                              const PretrainOptions& opt) {
  auto windows = item_windows(log, params.config.max_items);
  detail::require(!windows.empty(), "pretrain_model: interaction log yields no windows");
  AdamState<float> adam;
  adam.lr = opt.lr;
  auto param_ptrs = parameters(params);
  adam.init(param_ptrs);
  std::mt19937 rng = make_rng(opt.seed, 0x11);
  PretrainResult result;
  for (int e = 0; e < opt.epochs; ++e)
    result.epochs.push_back(pretrain_epoch(params, windows, catalog, sampler, opt, adam, rng));
  return result;
}

double generator_epoch(GeneratorParams<float>& gen,
                       const std::vector<std::vector<int>>& windows, const Catalog& catalog,
                       const GeneratorTrainOptions& opt, AdamState<float>& adam,
                       std::mt19937& rng) {
  auto param_ptrs = parameters(gen);
  auto order = shuffled_indices(windows.size(), rng);
  double loss_sum = 0;
  size_t pair_count = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(opt.batch_size));
    Tape<float> tape;
    for (auto* p : param_ptrs) tape.watch(*p);
    Fwd<float> ctx{tape, true, opt.dropout, &rng};
    std::vector<Tensor<float>> terms;
    for (size_t bi = start; bi < end; ++bi) {
      const auto& window = windows[order[bi]];
      if (window.size() < 2) continue;
      auto scores = next_item_scores_all_positions(ctx, gen, window);
      const Index vocab = scores.shape[1];
      for (size_t t = 0; t + 1 < window.size(); ++t) {
        if (window[t] == kPadId || window[t + 1] == kPadId) continue;
        const int positive = window[t + 1];
        std::array<int, 1> excl{positive};
        const int negative = uniform_negative(catalog, excl, rng);
        auto pos_s = select_elem(tape, scores, static_cast<Index>(t) * vocab + positive);
        auto neg_s = select_elem(tape, scores, static_cast<Index>(t) * vocab + negative);
        terms.push_back(softplus(tape, neg(tape, sub(tape, pos_s, neg_s))));
      }
    }
    if (terms.empty()) continue;
    auto loss = mean(tape, stack_scalars<float>(tape, terms));
    loss_sum += static_cast<double>(loss[0]) * static_cast<double>(terms.size());
    pair_count += terms.size();
    tape.backward(loss);
    auto grads = collect_gradients(tape, param_ptrs);
    clip_global_norm(grads, opt.max_grad_norm);
    adam_step(param_ptrs, grads, adam);
  }
  return pair_count > 0 ? loss_sum / static_cast<double>(pair_count) : 0.0;
}

double generator_loss_snapshot(const GeneratorParams<float>& gen,
                               const std::vector<std::vector<int>>& windows,
                               const Catalog& catalog, std::uint64_t seed) {
  std::mt19937 rng = make_rng(seed, 0x6e);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<Tensor<float>> terms;
  for (const auto& window : windows) {
    if (window.size() < 2) continue;
    auto scores = next_item_scores_all_positions(ctx, gen, window);
    const Index vocab = scores.shape[1];
    for (size_t t = 0; t + 1 < window.size(); ++t) {
      if (window[t] == kPadId || window[t + 1] == kPadId) continue;
      const int positive = window[t + 1];
      std::array<int, 1> excl{positive};
      const int negative = uniform_negative(catalog, excl, rng);
      auto pos_s = select_elem(tape, scores, static_cast<Index>(t) * vocab + positive);
      auto neg_s = select_elem(tape, scores, static_cast<Index>(t) * vocab + negative);
      terms.push_back(softplus(tape, neg(tape, sub(tape, pos_s, neg_s))));
    }
  }
  detail::require(!terms.empty(), "generator_loss_snapshot: no training pairs");
  return mean(tape, stack_scalars<float>(tape, terms))[0];
}

GeneratorParams<float> train_generator(const InteractionLog& log, const Catalog& catalog,
                                       const ModelConfig& config,
                                       const GeneratorTrainOptions& opt) {
  auto windows = item_windows(log, config.max_items);
  detail::require(!windows.empty(), "train_generator: interaction log yields no windows");
  std::mt19937 init_rng = make_rng(opt.seed, 0x47);
  GeneratorParams<float> gen =
      init_generator<float>(config, catalog.item_vocab_size(), init_rng);
  AdamState<float> adam;
  adam.lr = opt.lr;
  auto param_ptrs = parameters(gen);
  adam.init(param_ptrs);
  std::mt19937 rng = make_rng(opt.seed, 0x48);
  for (int e = 0; e < opt.epochs; ++e) generator_epoch(gen, windows, catalog, opt, adam, rng);
  return gen;
}

double finetune_epoch(DualEncoderParams<float>& params,
                      const std::vector<ConversationRecord>& records,
                      const InteractionLog& log, const NegativeSampler& sampler,
                      const FinetuneOptions& opt, AdamState<float>& adam, std::mt19937& rng) {
  detail::require(!records.empty(), "finetune_epoch: no records");
  auto param_ptrs = parameters(params);

  // fresh target/negative pairs per epoch, fixed up front from one derived
  // seed so finetune_loss_snapshot can rebuild them
  const std::uint32_t instance_seed = rng();
  std::mt19937 neg_rng = make_rng(instance_seed, 0xf1);
  auto negatives = draw_record_negatives(records, log, params.config, sampler, neg_rng);

  auto order = shuffled_indices(records.size(), rng);
  double loss_sum = 0;
  size_t count = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(opt.batch_size));
    std::vector<ConversationRecord> batch;
    std::vector<int> batch_negs;
    for (size_t i = start; i < end; ++i) {
      batch.push_back(records[order[i]]);
      batch_negs.push_back(negatives[order[i]]);
    }

    Tape<float> tape;
    for (auto* p : param_ptrs) tape.watch(*p);
    Fwd<float> ctx{tape, true, opt.dropout, &rng};
    auto loss = pairwise_rank_loss(ctx, params, batch, batch_negs, log);
    loss_sum += static_cast<double>(loss[0]) * static_cast<double>(batch.size());
    count += batch.size();
    tape.backward(loss);
    auto grads = collect_gradients(tape, param_ptrs);
    clip_global_norm(grads, opt.max_grad_norm);
    adam_step(param_ptrs, grads, adam);
  }
  return loss_sum / static_cast<double>(count);
}

double finetune_loss_snapshot(const DualEncoderParams<float>& params,
                              const std::vector<ConversationRecord>& records,
                              const InteractionLog& log, const NegativeSampler& sampler,
                              std::uint64_t instance_seed) {
  detail::require(!records.empty(), "finetune_loss_snapshot: no records");
  std::mt19937 neg_rng = make_rng(static_cast<std::uint32_t>(instance_seed), 0xf1);
  auto negatives = draw_record_negatives(records, log, params.config, sampler, neg_rng);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  return pairwise_rank_loss(ctx, params, records, negatives, log)[0];
}

FinetuneResult finetune_model(DualEncoderParams<float>& params, const SplitSpec& split,
                              const InteractionLog& log, const Catalog& catalog,
                              const NegativeSampler& sampler, const FinetuneOptions& opt) {
  detail::require(!split.train.empty(), "finetune_model: empty training split");
  AdamState<float> adam;
  adam.lr = opt.lr;
  auto param_ptrs = parameters(params);
  adam.init(param_ptrs);
  std::mt19937 rng = make_rng(opt.seed, 0x22);

  FinetuneResult result;
  const bool use_valid = !split.valid.empty() && catalog.item_count() >= 101;
  double best_ndcg = -1.0;
  int stale = 0;
  std::vector<std::vector<float>> best_params;
  auto snapshot = [&]() {
    best_params.clear();
    for (auto* p : param_ptrs) best_params.push_back(p->data);
  };

  for (int e = 0; e < opt.epochs; ++e) {
    result.epoch_losses.push_back(
        finetune_epoch(params, split.train, log, sampler, opt, adam, rng));
    if (!use_valid) {
      result.best_epoch = e;
      continue;
    }
    EvalResult valid = evaluate(params, catalog, log, split.valid, opt.seed);
    result.valid_ndcg.push_back(valid.ndcg10);
    if (valid.ndcg10 > best_ndcg) {
      best_ndcg = valid.ndcg10;
      result.best_epoch = e;
      stale = 0;
      snapshot();
    } else if (++stale >= opt.patience) {
      break;
    }
  }
  if (use_valid && !best_params.empty())
    for (size_t i = 0; i < param_ptrs.size(); ++i) param_ptrs[i]->data = best_params[i];
  return result;
}

}  // namespace convrec
