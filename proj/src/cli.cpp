#include "convrec/cli.hpp"

#include "convrec/checkpoint.hpp"
#include "convrec/data.hpp"
#include "convrec/eval.hpp"
#include "convrec/pipeline.hpp"
#include "convrec/simulator.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

namespace convrec {

namespace {

namespace fs = std::filesystem;

struct RunConfig {
  std::string items_file;
  std::string interactions_file;
  std::string records_file;
  std::string out_dir = "out";
  std::string ckpt;
  std::string init_ckpt;
  std::string generator_ckpt;
  std::string model_name = "model";

  int dim = 64;
  int layers = 2;
  int heads = 2;
  int max_items = 50;
  int max_attrs = 15;
  float dropout = 0.2f;

  int batch_size = 256;
  std::uint64_t seed = 42;
  double mask_prob = 0.2;
  double substitution_prob = 0.5;
  double lambda_mip = 1.0;
  double lambda_sad = 1.0;
  bool no_mip = false;
  bool no_sad = false;

  double lr = -1.0;  // overrides the stage default when positive
  double pretrain_lr = 1e-3;
  double finetune_lr = 1e-4;
  int epochs = -1;  // overrides the stage default when positive
  int pretrain_epochs = 30;
  int finetune_epochs = 50;
  int generator_epochs = 30;
  int patience = 5;

  std::string neg_policy = "auto";  // pretrain: generator; finetune: uniform
  int top_k = 100;
  bool no_train_generator = false;
  int min_item_frequency = 1;

  int num_users = 50;
  int num_items = 200;
  int num_attrs = 20;
  int attrs_per_item = 4;
  int sessions_per_user = 3;
  int interactions_per_user = 20;

  bool explicit_dim = false;

  ModelConfig model() const {
    ModelConfig m;
    m.dim = dim;
    m.layers = layers;
    m.heads = heads;
    m.max_items = max_items;
    m.max_attrs = max_attrs;
    m.dropout = dropout;
    return m;
  }
  int stage_epochs(int fallback) const { return epochs > 0 ? epochs : fallback; }
  double stage_lr(double fallback) const { return lr > 0 ? lr : fallback; }
};

/// Exclusive-create lock file; concurrent writers to one output directory
/// fail fast instead of interleaving.
class OutDirLock {
 public:
  explicit OutDirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw std::runtime_error("output directory is locked by another run: " +
                               path_.string());
    std::fclose(f);
  }
  ~OutDirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutDirLock(const OutDirLock&) = delete;
  OutDirLock& operator=(const OutDirLock&) = delete;

 private:
  fs::path path_;
};

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

struct LoadedData {
  Catalog catalog;
  InteractionLog log;
};

LoadedData load_inputs(const RunConfig& cfg) {
  detail::require(!cfg.items_file.empty(), "missing --items");
  detail::require(!cfg.interactions_file.empty(), "missing --interactions");
  LoadedData data;
  data.catalog = load_catalog(cfg.items_file);
  data.log = load_interactions(cfg.interactions_file, data.catalog, cfg.min_item_frequency);
  return data;
}

void persist_id_maps(const LoadedData& data, const fs::path& out) {
  write_idmap((out / "item_ids.tsv").string(), data.catalog.items);
  write_idmap((out / "attr_ids.tsv").string(), data.catalog.attrs);
  write_idmap((out / "user_ids.tsv").string(), data.log.users);
}

NegativePolicy resolve_policy(const RunConfig& cfg, bool pretrain_stage) {
  NegativePolicy policy;
  std::string kind = cfg.neg_policy;
  if (kind == "auto") kind = pretrain_stage ? "generator" : "uniform";
  if (kind == "generator")
    policy.kind = NegativePolicy::Kind::generator;
  else if (kind == "uniform")
    policy.kind = NegativePolicy::Kind::uniform;
  else
    throw std::runtime_error("unknown --neg-policy '" + kind + "'");
  policy.top_k = cfg.top_k;
  return policy;
}

int cmd_gen_synthetic(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  OutDirLock lock(cfg.out_dir);
  SyntheticSpec spec;
  spec.seed = cfg.seed;
  spec.num_users = cfg.num_users;
  spec.num_items = cfg.num_items;
  spec.num_attrs = cfg.num_attrs;
  spec.attrs_per_item = cfg.attrs_per_item;
  spec.sessions_per_user = cfg.sessions_per_user;
  spec.interactions_per_user = cfg.interactions_per_user;
  SyntheticData data = generate_synthetic(spec);
  const fs::path out = cfg.out_dir;
  write_catalog((out / "items.tsv").string(), data.catalog);
  write_interactions((out / "interactions.tsv").string(), data.log, data.catalog);
  write_records((out / "records.tsv").string(), data.records, data.catalog, data.log);
  std::cout << "gen-synthetic: " << data.catalog.item_count() << " items, "
            << data.log.user_count() << " users, " << data.log.total_interactions()
            << " interactions, " << data.records.size() << " records\n";
  return 0;
}

int cmd_simulate(const RunConfig& cfg) {
  LoadedData data = load_inputs(cfg);
  fs::create_directories(cfg.out_dir);
  OutDirLock lock(cfg.out_dir);
  const fs::path out = cfg.out_dir;
  auto records = simulate_dataset(data.log, data.catalog, cfg.seed);
  write_records((out / "records.tsv").string(), records, data.catalog, data.log);
  persist_id_maps(data, out);

  double attr_sum = 0;
  for (const auto& rec : records) attr_sum += static_cast<double>(rec.attributes.size());
  const double mean_attrs =
      records.empty() ? 0.0 : attr_sum / static_cast<double>(records.size());
  std::ofstream summary(out / "summary.txt");
  summary << "records\t" << records.size() << "\n";
  summary << "mean_attrs\t" << fmt6(mean_attrs) << "\n";
  std::cout << "simulate: " << records.size() << " records, mean attrs " << fmt6(mean_attrs)
            << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
  LoadedData data = load_inputs(cfg);
  fs::create_directories(cfg.out_dir);
  OutDirLock lock(cfg.out_dir);
  const fs::path out = cfg.out_dir;
  persist_id_maps(data, out);

  NegativePolicy policy = resolve_policy(cfg, /*pretrain_stage=*/true);
  std::shared_ptr<const GeneratorParams<float>> generator;
  if (policy.kind == NegativePolicy::Kind::generator) {
    if (!cfg.generator_ckpt.empty()) {
      generator = std::make_shared<const GeneratorParams<float>>(
          generator_from_checkpoint(load_checkpoint(cfg.generator_ckpt)));
    } else if (cfg.no_train_generator) {
      throw std::runtime_error(
          "generator policy requires --generator-ckpt when --no-train-generator is set");
    } else {
      GeneratorTrainOptions gopt;
      gopt.epochs = cfg.generator_epochs;
      gopt.seed = cfg.seed;
      GeneratorParams<float> gen =
          train_generator(data.log, data.catalog, cfg.model(), gopt);
      save_checkpoint(make_checkpoint(gen, {{"seed", std::to_string(cfg.seed)}}),
                      (out / "generator.ckpt").string());
      generator = std::make_shared<const GeneratorParams<float>>(std::move(gen));
    }
  }
  NegativeSampler sampler(data.catalog, policy, generator);

  PretrainOptions opt;
  opt.epochs = cfg.stage_epochs(cfg.pretrain_epochs);
  opt.batch_size = cfg.batch_size;
  opt.lr = static_cast<float>(cfg.stage_lr(cfg.pretrain_lr));
  opt.mask_prob = cfg.mask_prob;
  opt.substitution_prob = cfg.substitution_prob;
  opt.lambda_mip = cfg.no_mip ? 0.0 : cfg.lambda_mip;
  opt.lambda_sad = cfg.no_sad ? 0.0 : cfg.lambda_sad;
  opt.seed = cfg.seed;
  opt.dropout = cfg.dropout;
  detail::require(opt.lambda_mip > 0 || opt.lambda_sad > 0,
                  "nothing to pretrain: both objectives disabled");

  std::mt19937 init_rng = make_rng(cfg.seed, 0x1d);
  auto params = init_dual_encoder<float>(cfg.model(), data.catalog.item_vocab_size(),
                                         data.catalog.attr_vocab_size(), init_rng);
  PretrainResult result = pretrain_model(params, data.log, data.catalog, sampler, opt);

  std::ofstream log_file(out / "pretrain_log.tsv");
  for (size_t e = 0; e < result.epochs.size(); ++e)
    log_file << e << '\t' << fmt6(result.epochs[e].mip) << '\t' << fmt6(result.epochs[e].sad)
             << '\n';
  save_checkpoint(make_checkpoint(params, {{"seed", std::to_string(cfg.seed)}}),
                  (out / "dual_encoder.ckpt").string());
  std::cout << "pretrain: " << result.epochs.size() << " epochs, final mip "
            << fmt6(result.epochs.back().mip) << " sad " << fmt6(result.epochs.back().sad)
            << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& cfg) {
  LoadedData data = load_inputs(cfg);
  detail::require(!cfg.records_file.empty(), "missing --records");
  auto records = load_records(cfg.records_file, data.catalog, data.log);
  SplitSpec split = leave_one_out_split(records);
  detail::require(!split.train.empty(), "no training records after the split");

  fs::create_directories(cfg.out_dir);
  OutDirLock lock(cfg.out_dir);
  const fs::path out = cfg.out_dir;
  persist_id_maps(data, out);

  DualEncoderParams<float> params = [&] {
    if (!cfg.init_ckpt.empty()) {
      auto loaded = dual_encoder_from_checkpoint(load_checkpoint(cfg.init_ckpt));
      if (cfg.explicit_dim && loaded.config.dim != cfg.dim)
        throw std::runtime_error("checkpoint dim " + std::to_string(loaded.config.dim) +
                                 " does not match --dim " + std::to_string(cfg.dim));
      detail::require(loaded.item_vocab == data.catalog.item_vocab_size() &&
                          loaded.attr_vocab == data.catalog.attr_vocab_size(),
                      "checkpoint vocabulary does not match the catalog");
      return loaded;
    }
    std::mt19937 init_rng = make_rng(cfg.seed, 0x1d);
    return init_dual_encoder<float>(cfg.model(), data.catalog.item_vocab_size(),
                                    data.catalog.attr_vocab_size(), init_rng);
  }();

  NegativePolicy policy = resolve_policy(cfg, /*pretrain_stage=*/false);
  std::shared_ptr<const GeneratorParams<float>> generator;
  if (policy.kind == NegativePolicy::Kind::generator) {
    detail::require(!cfg.generator_ckpt.empty(),
                    "generator negatives during fine-tuning require --generator-ckpt");
    generator = std::make_shared<const GeneratorParams<float>>(
        generator_from_checkpoint(load_checkpoint(cfg.generator_ckpt)));
  }
  NegativeSampler sampler(data.catalog, policy, generator);

  FinetuneOptions opt;
  opt.epochs = cfg.stage_epochs(cfg.finetune_epochs);
  opt.batch_size = cfg.batch_size;
  opt.lr = static_cast<float>(cfg.stage_lr(cfg.finetune_lr));
  opt.seed = cfg.seed;
  opt.patience = cfg.patience;
  opt.dropout = cfg.dropout;
  FinetuneResult result = finetune_model(params, split, data.log, data.catalog, sampler, opt);

  std::ofstream log_file(out / "finetune_log.tsv");
  for (size_t e = 0; e < result.epoch_losses.size(); ++e) {
    log_file << e << '\t' << fmt6(result.epoch_losses[e]);
    if (e < result.valid_ndcg.size()) log_file << '\t' << fmt6(result.valid_ndcg[e]);
    log_file << '\n';
  }
  save_checkpoint(make_checkpoint(params, {{"seed", std::to_string(cfg.seed)}}),
                  (out / "finetuned.ckpt").string());
  std::cout << "finetune: " << result.epoch_losses.size() << " epochs, best epoch "
            << result.best_epoch << ", final loss " << fmt6(result.epoch_losses.back())
            << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  LoadedData data = load_inputs(cfg);
  detail::require(!cfg.records_file.empty(), "missing --records");
  detail::require(!cfg.ckpt.empty(), "missing --ckpt");
  auto records = load_records(cfg.records_file, data.catalog, data.log);
  SplitSpec split = leave_one_out_split(records);
  detail::require(!split.test.empty(), "evaluation needs a non-empty test split");

  auto params = dual_encoder_from_checkpoint(load_checkpoint(cfg.ckpt));
  detail::require(params.item_vocab == data.catalog.item_vocab_size() &&
                      params.attr_vocab == data.catalog.attr_vocab_size(),
                  "checkpoint vocabulary does not match the catalog");

  fs::create_directories(cfg.out_dir);
  OutDirLock lock(cfg.out_dir);
  const fs::path out = cfg.out_dir;
  EvalResult result = evaluate(params, data.catalog, data.log, split.test, cfg.seed);

  std::ofstream report(out / "report.tsv");
  report << cfg.model_name << '\t' << fmt6(result.mrr) << '\t' << fmt6(result.ndcg10) << '\t'
         << result.ranks.size() << '\n';
  std::ofstream ranks(out / "ranks.tsv");
  for (size_t i = 0; i < result.ranks.size(); ++i)
    ranks << i << '\t' << data.log.users.raw_of(result.users[i]) << '\t' << result.ranks[i]
          << '\n';
  std::cout << "evaluate: " << cfg.model_name << " MRR " << fmt6(result.mrr) << " NDCG@10 "
            << fmt6(result.ndcg10) << " over " << result.ranks.size() << " records\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  RunConfig cfg;
  CLI::App app{"dual-encoder conversational recommendation toolkit"};
  app.fallthrough();
  app.set_config("--config", "", "flat key = value configuration file");

  app.add_option("--items", cfg.items_file, "item-attribute TSV");
  app.add_option("--interactions", cfg.interactions_file, "interaction TSV");
  app.add_option("--records", cfg.records_file, "conversation record TSV");
  app.add_option("--out-dir", cfg.out_dir, "output directory");
  app.add_option("--ckpt", cfg.ckpt, "checkpoint to evaluate");
  app.add_option("--init-ckpt", cfg.init_ckpt, "checkpoint to start fine-tuning from");
  app.add_option("--generator-ckpt", cfg.generator_ckpt, "frozen negative-generator checkpoint");
  app.add_option("--model-name", cfg.model_name, "label used in evaluation reports");

  auto* dim_opt = app.add_option("--dim", cfg.dim, "embedding dimension");
  app.add_option("--layers", cfg.layers, "self-attention blocks per encoder");
  app.add_option("--heads", cfg.heads, "attention heads");
  app.add_option("--max-items", cfg.max_items, "item sequence positions");
  app.add_option("--max-attrs", cfg.max_attrs, "attribute sequence positions");
  app.add_option("--dropout", cfg.dropout, "training dropout rate");

  app.add_option("--batch-size", cfg.batch_size, "sequences per optimization step");
  app.add_option("--seed", cfg.seed, "master random seed");
  app.add_option("--mask-prob", cfg.mask_prob, "per-position mask probability");
  app.add_option("--substitution-prob", cfg.substitution_prob,
                 "per-attribute substitution probability");
  app.add_option("--lambda-mip", cfg.lambda_mip, "masked-item objective weight");
  app.add_option("--lambda-sad", cfg.lambda_sad, "attribute-discrimination objective weight");
  app.add_flag("--no-mip", cfg.no_mip, "disable the masked-item objective");
  app.add_flag("--no-sad", cfg.no_sad, "disable the attribute-discrimination objective");

  app.add_option("--lr", cfg.lr, "learning rate override for the running stage");
  app.add_option("--pretrain-lr", cfg.pretrain_lr, "pre-training learning rate");
  app.add_option("--finetune-lr", cfg.finetune_lr, "fine-tuning learning rate");
  app.add_option("--epochs", cfg.epochs, "epoch override for the running stage");
  app.add_option("--pretrain-epochs", cfg.pretrain_epochs, "pre-training epochs");
  app.add_option("--finetune-epochs", cfg.finetune_epochs, "fine-tuning epochs");
  app.add_option("--generator-epochs", cfg.generator_epochs, "generator training epochs");
  app.add_option("--patience", cfg.patience, "early-stopping patience (validation NDCG@10)");

  app.add_option("--neg-policy", cfg.neg_policy, "negative sampling policy")
      ->check(CLI::IsMember({"auto", "uniform", "generator"}));
  app.add_option("--top-k", cfg.top_k, "generator sampling pool size");
  app.add_flag("--no-train-generator", cfg.no_train_generator,
               "fail instead of training a missing generator");
  app.add_option("--min-item-frequency", cfg.min_item_frequency,
                 "drop interactions of items seen fewer times than this");

  app.add_option("--num-users", cfg.num_users, "synthetic: user count");
  app.add_option("--num-items", cfg.num_items, "synthetic: item count");
  app.add_option("--num-attrs", cfg.num_attrs, "synthetic: attribute count");
  app.add_option("--attrs-per-item", cfg.attrs_per_item, "synthetic: attributes per item");
  app.add_option("--sessions-per-user", cfg.sessions_per_user,
                 "synthetic: conversations per user");
  app.add_option("--interactions-per-user", cfg.interactions_per_user,
                 "synthetic: interactions per user");

  auto* gen = app.add_subcommand("gen-synthetic", "write a planted synthetic dataset");
  auto* sim = app.add_subcommand("simulate", "simulate conversation records");
  auto* pre = app.add_subcommand("pretrain", "run the two pre-training objectives");
  auto* fin = app.add_subcommand("finetune", "optimize the pairwise ranking objective");
  auto* eva = app.add_subcommand("evaluate", "leave-one-out ranking evaluation");
  app.require_subcommand(1);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) std::cerr << "convrec: " << e.what() << "\n";
    return app.exit(e);
  }
  cfg.explicit_dim = dim_opt->count() > 0;

  try {
    if (gen->parsed()) return cmd_gen_synthetic(cfg);
    if (sim->parsed()) return cmd_simulate(cfg);
    if (pre->parsed()) return cmd_pretrain(cfg);
    if (fin->parsed()) return cmd_finetune(cfg);
    if (eva->parsed()) return cmd_evaluate(cfg);
    std::cerr << "convrec: no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "convrec: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace convrec
