#pragma once

#include "convrec/data.hpp"
#include "convrec/eval.hpp"
#include "convrec/model.hpp"
#include "convrec/negsampler.hpp"
#include "convrec/optim.hpp"
#include "convrec/pretrain.hpp"

#include <cstdint>
#include <vector>

namespace convrec {

struct PretrainOptions {
  int epochs = 30;
  int batch_size = 256;
  float lr = 1e-3f;
  double mask_prob = 0.2;
  double substitution_prob = 0.5;
  double lambda_mip = 1.0;
  double lambda_sad = 1.0;
  double max_grad_norm = 0.1;
  std::uint64_t seed = 42;
  float dropout = 0.2f;
};

struct EpochMetrics {
  double mip = 0;
  double sad = 0;
  double total() const { return mip + sad; }
};

/// One optimization pass over the windows: builds masked-item and
/// substituted-attribute instances per batch, combines the weighted losses,
/// clips the global gradient norm, and applies Adam.
EpochMetrics pretrain_epoch(DualEncoderParams<float>& params,
                            const std::vector<std::vector<int>>& windows,
                            const Catalog& catalog, const NegativeSampler& sampler,
                            const PretrainOptions& opt, AdamState<float>& adam,
                            std::mt19937& rng);

/// Forward-only loss over the instance set an epoch derives from
/// `instance_seed` (the first value the epoch draws from its rng). Copy the
/// epoch rng beforehand and draw once to obtain it; before/after calls then
/// measure descent on the exact instances that epoch trained on.
EpochMetrics pretrain_loss_snapshot(const DualEncoderParams<float>& params,
                                    const std::vector<std::vector<int>>& windows,
                                    const Catalog& catalog, const NegativeSampler& sampler,
                                    const PretrainOptions& opt, std::uint64_t instance_seed);

struct PretrainResult {
  std::vector<EpochMetrics> epochs;
};

PretrainResult pretrain_model(DualEncoderParams<float>& params, const InteractionLog& log,
                              const Catalog& catalog, const NegativeSampler& sampler,
                              const PretrainOptions& opt);

struct GeneratorTrainOptions {
  int epochs = 30;
  int batch_size = 64;
  float lr = 1e-3f;
  double max_grad_norm = 0.1;
  std::uint64_t seed = 42;
  float dropout = 0.0f;
};

double generator_epoch(GeneratorParams<float>& gen,
                       const std::vector<std::vector<int>>& windows, const Catalog& catalog,
                       const GeneratorTrainOptions& opt, AdamState<float>& adam,
                       std::mt19937& rng);

double generator_loss_snapshot(const GeneratorParams<float>& gen,
                               const std::vector<std::vector<int>>& windows,
                               const Catalog& catalog, std::uint64_t seed);

/// Next-item model trained with the pairwise ranking loss against uniform
/// negatives at every prefix position; parameters are frozen afterward.
GeneratorParams<float> train_generator(const InteractionLog& log, const Catalog& catalog,
                                       const ModelConfig& config,
                                       const GeneratorTrainOptions& opt);

struct FinetuneOptions {
  int epochs = 50;
  int batch_size = 256;
  float lr = 1e-4f;
  double max_grad_norm = 0.1;
  std::uint64_t seed = 42;
  int patience = 5;
  float dropout = 0.2f;
};

double finetune_epoch(DualEncoderParams<float>& params,
                      const std::vector<ConversationRecord>& records,
                      const InteractionLog& log, const NegativeSampler& sampler,
                      const FinetuneOptions& opt, AdamState<float>& adam, std::mt19937& rng);

double finetune_loss_snapshot(const DualEncoderParams<float>& params,
                              const std::vector<ConversationRecord>& records,
                              const InteractionLog& log, const NegativeSampler& sampler,
                              std::uint64_t instance_seed);

struct FinetuneResult {
  std::vector<double> epoch_losses;
  std::vector<double> valid_ndcg;  // empty when there is no validation split
  int best_epoch = -1;             // epoch whose parameters were kept
};

/// Optimizes the pairwise objective with early stopping on validation
/// NDCG@10 (patience per options); restores the best parameters at the end.
FinetuneResult finetune_model(DualEncoderParams<float>& params, const SplitSpec& split,
                              const InteractionLog& log, const Catalog& catalog,
                              const NegativeSampler& sampler, const FinetuneOptions& opt);

}  // namespace convrec
