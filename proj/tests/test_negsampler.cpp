#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "convrec/negsampler.hpp"
#include "convrec/pipeline.hpp"

#include <cmath>
#include <map>

using namespace convrec;

namespace {

Catalog catalog_of(int items, int attrs = 6, int attrs_per_item = 2) {
  SyntheticSpec spec;
  spec.seed = 17;
  spec.num_users = 2;
  spec.num_items = items;
  spec.num_attrs = attrs;
  spec.attrs_per_item = attrs_per_item;
  return generate_synthetic(spec).catalog;
}

ModelConfig gen_config(int max_items = 12) {
  ModelConfig cfg;
  cfg.dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_items = max_items;
  cfg.max_attrs = 4;
  cfg.dropout = 0.0f;
  return cfg;
}

/// Alternating two-item log: every prefix ending in `a` is followed by `b`.
InteractionLog cycle_log(int users, int length) {
  InteractionLog log;
  for (int u = 0; u < users; ++u) {
    log.users.add("u" + std::to_string(u));
    std::vector<int> seq;
    for (int t = 0; t < length; ++t) seq.push_back(t % 2 == 0 ? kFirstItemId : kFirstItemId + 1);
    log.sequences.push_back(std::move(seq));
  }
  return log;
}

}  // namespace

TEST_CASE("uniform negative: forced choice, exclusion, uniformity") {
  Catalog three = catalog_of(3);
  std::mt19937 rng = make_rng(1);
  // exclude two of three items -> the remaining one always
  std::vector<int> excl{kFirstItemId, kFirstItemId + 1};
  for (int trial = 0; trial < 20; ++trial)
    CHECK(uniform_negative(three, excl, rng) == kFirstItemId + 2);

  std::vector<int> all{kFirstItemId, kFirstItemId + 1, kFirstItemId + 2};
  CHECK_THROWS(uniform_negative(three, all, rng));

  Catalog fifty = catalog_of(50);
  std::vector<int> exclude_one{kFirstItemId + 7};
  std::map<int, int> counts;
  const int draws = 10000;
  for (int trial = 0; trial < draws; ++trial) {
    int item = uniform_negative(fifty, exclude_one, rng);
    CHECK(item != kFirstItemId + 7);
    counts[item]++;
  }
  // chi-square over the 49 allowed items; 74.919 is the 1% critical value
  const double expected = static_cast<double>(draws) / 49.0;
  double chi2 = 0;
  for (int item = kFirstItemId; item < fifty.items.end_id(); ++item) {
    if (item == kFirstItemId + 7) continue;
    const double diff = counts[item] - expected;
    chi2 += diff * diff / expected;
  }
  CHECK(chi2 < 74.919);
}

TEST_CASE("generator training overfits a deterministic alternation") {
  Catalog cat = catalog_of(6);
  InteractionLog log = cycle_log(4, 12);
  GeneratorTrainOptions opt;
  opt.epochs = 60;
  opt.seed = 5;
  opt.lr = 5e-3f;
  GeneratorParams<float> gen = train_generator(log, cat, gen_config(), opt);

  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<int> prefix{kFirstItemId};  // ... a
  auto scores = next_item_scores(ctx, gen, prefix);
  const float score_b = scores[kFirstItemId + 1];
  CHECK(score_b > scores[kFirstItemId]);
  for (int other = kFirstItemId + 2; other < cat.items.end_id(); ++other)
    CHECK(score_b > scores[other]);
}

TEST_CASE("generator training descends") {
  Catalog cat = catalog_of(12);
  SyntheticSpec spec;
  spec.seed = 3;
  spec.num_users = 6;
  spec.num_items = 12;
  spec.num_attrs = 6;
  spec.attrs_per_item = 2;
  spec.interactions_per_user = 10;
  SyntheticData data = generate_synthetic(spec);
  auto windows = item_windows(data.log, 10);

  std::mt19937 init_rng = make_rng(9, 0x47);
  GeneratorParams<float> gen =
      init_generator<float>(gen_config(10), data.catalog.item_vocab_size(), init_rng);
  const double before = generator_loss_snapshot(gen, windows, data.catalog, 1);

  GeneratorTrainOptions opt;
  opt.epochs = 50;
  opt.seed = 9;
  AdamState<float> adam;
  adam.lr = opt.lr;
  auto ptrs = parameters(gen);
  adam.init(ptrs);
  std::mt19937 rng = make_rng(9, 0x48);
  for (int e = 0; e < opt.epochs; ++e)
    generator_epoch(gen, windows, data.catalog, opt, adam, rng);
  const double after = generator_loss_snapshot(gen, windows, data.catalog, 1);
  CHECK(after < before);
}

TEST_CASE("frozen generator parameters are untouched by sampling") {
  Catalog cat = catalog_of(8);
  InteractionLog log = cycle_log(2, 8);
  GeneratorTrainOptions opt;
  opt.epochs = 3;
  opt.seed = 2;
  GeneratorParams<float> gen = train_generator(log, cat, gen_config(), opt);

  std::vector<std::vector<float>> snapshot;
  for (auto* p : parameters(gen)) snapshot.push_back(p->data);
  std::mt19937 rng = make_rng(4);
  std::vector<int> prefix{kFirstItemId, kFirstItemId + 1};
  std::vector<int> excl{kFirstItemId + 2};
  for (int trial = 0; trial < 200; ++trial)
    (void)generator_sample(gen, prefix, excl, 5, cat, rng);
  auto ptrs = parameters(gen);
  for (size_t i = 0; i < ptrs.size(); ++i) CHECK(ptrs[i]->data == snapshot[i]);
}

TEST_CASE("generator_sample contract") {
  Catalog cat = catalog_of(30);
  std::mt19937 init_rng = make_rng(11, 0x47);
  GeneratorParams<float> gen =
      init_generator<float>(gen_config(), cat.item_vocab_size(), init_rng);
  std::vector<int> prefix{kFirstItemId + 3, kFirstItemId + 9};
  std::vector<int> excl{kFirstItemId + 1, kFirstItemId + 4};

  // top_k = 1 degenerates to the arg-max candidate
  auto dist1 = generator_topk_distribution(gen, prefix, excl, 1, cat);
  REQUIRE(dist1.size() == 1);
  std::mt19937 rng = make_rng(5);
  for (int trial = 0; trial < 10; ++trial)
    CHECK(generator_sample(gen, prefix, excl, 1, cat, rng) == dist1[0].item);

  // empty prefix falls back to a uniform draw honoring exclusions
  std::vector<int> empty;
  for (int trial = 0; trial < 200; ++trial) {
    int item = generator_sample(gen, empty, excl, 5, cat, rng);
    CHECK(item >= kFirstItemId);
    CHECK(item != excl[0]);
    CHECK(item != excl[1]);
  }

  // samples always come from the current top_k and never from exclusions
  const int top_k = 7;
  auto dist = generator_topk_distribution(gen, prefix, excl, top_k, cat);
  REQUIRE(dist.size() == static_cast<size_t>(top_k));
  std::map<int, int> counts;
  const int draws = 10000;
  for (int trial = 0; trial < draws; ++trial) {
    int item = generator_sample(gen, prefix, excl, top_k, cat, rng);
    CHECK(std::find_if(dist.begin(), dist.end(),
                       [&](const ScoredItem& s) { return s.item == item; }) != dist.end());
    CHECK(std::find(excl.begin(), excl.end(), item) == excl.end());
    CHECK(item != kPadId);
    CHECK(item != kItemMaskId);
    counts[item]++;
  }
  // total variation between empirical frequencies and the softmax weights
  double tv = 0;
  for (const auto& entry : dist)
    tv += std::abs(static_cast<double>(counts[entry.item]) / draws - entry.prob);
  CHECK(tv / 2.0 <= 0.05);
}

TEST_CASE("overfit generator proposes the pattern continuation as negative") {
  Catalog cat = catalog_of(10);
  InteractionLog log = cycle_log(4, 12);
  GeneratorTrainOptions opt;
  opt.epochs = 60;
  opt.seed = 6;
  opt.lr = 5e-3f;
  GeneratorParams<float> gen = train_generator(log, cat, gen_config(), opt);

  // ground truth c after prefix [a]: the overfit model should still push b
  const int true_item = kFirstItemId + 2;
  std::vector<int> prefix{kFirstItemId};
  std::vector<int> excl{true_item};
  std::mt19937 rng = make_rng(7);
  std::map<int, int> counts;
  for (int trial = 0; trial < 1000; ++trial)
    counts[generator_sample(gen, prefix, excl, 100, cat, rng)]++;
  int best_item = -1, best_count = -1;
  for (const auto& [item, count] : counts)
    if (count > best_count) {
      best_count = count;
      best_item = item;
    }
  CHECK(best_item == kFirstItemId + 1);
}

TEST_CASE("negative sampler policy wiring") {
  Catalog cat = catalog_of(12);
  CHECK_THROWS(NegativeSampler(cat, NegativePolicy{NegativePolicy::Kind::generator, 10}));

  NegativeSampler uniform(cat, NegativePolicy{});
  std::mt19937 rng = make_rng(8);
  std::vector<int> prefix{kFirstItemId};
  std::vector<int> excl{kFirstItemId + 5};
  for (int trial = 0; trial < 100; ++trial)
    CHECK(uniform.sample(prefix, excl, rng) != kFirstItemId + 5);
}
