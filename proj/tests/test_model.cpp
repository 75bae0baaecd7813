#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "convrec/model.hpp"
#include "testutil.hpp"

#include <cmath>
#include <random>

using namespace convrec;
using convrec::test::finite_diff;
using convrec::test::grad_close;

namespace {

ModelConfig tiny_config(int dim = 8, int layers = 1) {
  ModelConfig cfg;
  cfg.dim = dim;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.max_items = 8;
  cfg.max_attrs = 6;
  cfg.dropout = 0.0f;
  return cfg;
}

template <class S>
DualEncoderParams<S> tiny_model(uint64_t seed = 1, int dim = 8, int layers = 1,
                                int item_vocab = 12, int attr_vocab = 9) {
  std::mt19937 rng = make_rng(seed);
  return init_dual_encoder<S>(tiny_config(dim, layers), item_vocab, attr_vocab, rng);
}

template <class S, class P>
void copy_parameters_into(P& src, P& dst) {
  auto s = parameters(src);
  auto d = parameters(dst);
  REQUIRE(s.size() == d.size());
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s[i]->data.size(); ++j)
      d[i]->data[j] = s[i]->data[j];
}

DualEncoderParams<double> to_double(DualEncoderParams<float>& src) {
  std::mt19937 rng = make_rng(0);
  auto dst = init_dual_encoder<double>(src.config, src.item_vocab, src.attr_vocab, rng);
  auto s = parameters(src);
  auto d = parameters(dst);
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s[i]->data.size(); ++j)
      d[i]->data[j] = static_cast<double>(s[i]->data[j]);
  return dst;
}

}  // namespace

TEST_CASE("encode handles all-padding input with finite outputs") {
  auto p = tiny_model<float>(3);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<int> pads{kPadId, kPadId, kPadId};
  auto enc = encode_items(ctx, p, pads);
  CHECK(enc.last == 2);  // defined: last position when nothing is non-pad
  for (float v : enc.hidden.data) CHECK(std::isfinite(v));

  auto enca = encode_attributes(ctx, p, pads);
  for (float v : enca.hidden.data) CHECK(std::isfinite(v));
}

TEST_CASE("causal encoding: future edits never touch earlier positions") {
  auto p = tiny_model<float>(4);
  std::vector<int> seq{2, 3, 4, 5};
  Tape<float> tape;
  Fwd<float> ctx{tape};
  auto base = encode_items(ctx, p, seq, /*causal=*/true);

  std::vector<int> edited = seq;
  edited[3] = 7;
  auto changed = encode_items(ctx, p, edited, /*causal=*/true);
  for (Index t = 0; t < 3; ++t)
    for (Index c = 0; c < 8; ++c) CHECK(base.hidden.at(t, c) == changed.hidden.at(t, c));
}

TEST_CASE("bidirectional encoding: future edits reach earlier positions") {
  auto p = tiny_model<float>(5);
  std::vector<int> seq{2, 3, 4, 5};
  Tape<float> tape;
  Fwd<float> ctx{tape};
  auto base = encode_items(ctx, p, seq, /*causal=*/false);
  std::vector<int> edited = seq;
  edited[3] = 7;
  auto changed = encode_items(ctx, p, edited, /*causal=*/false);
  bool any_earlier_changed = false;
  for (Index t = 0; t < 3 && !any_earlier_changed; ++t)
    for (Index c = 0; c < 8; ++c)
      if (base.hidden.at(t, c) != changed.hidden.at(t, c)) {
        any_earlier_changed = true;
        break;
      }
  CHECK(any_earlier_changed);
}

TEST_CASE("attribute encoder is order sensitive and deterministic") {
  auto p = tiny_model<float>(6);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<int> ab{1, 2};
  std::vector<int> ba{2, 1};
  auto enc_ab = encode_attributes(ctx, p, ab);
  auto enc_ab2 = encode_attributes(ctx, p, ab);
  CHECK(enc_ab.hidden.data == enc_ab2.hidden.data);

  auto enc_ba = encode_attributes(ctx, p, ba);
  auto last_ab = enc_ab.hidden.mat().row(enc_ab.last);
  auto last_ba = enc_ba.hidden.mat().row(enc_ba.last);
  CHECK((last_ab - last_ba).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("encode validates ids and length") {
  auto p = tiny_model<float>(7);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<int> bad{999};
  CHECK_THROWS_AS(encode_items(ctx, p, bad), std::invalid_argument);
  std::vector<int> overlong(9, 2);  // max_items is 8
  CHECK_THROWS_AS(encode_items(ctx, p, overlong), std::invalid_argument);
  std::vector<int> bad_attr{100};
  CHECK_THROWS_AS(encode_attributes(ctx, p, bad_attr), std::invalid_argument);
}

TEST_CASE("preference scores: zero fusion matrix and hand-set d=2 case") {
  auto p = tiny_model<float>(8);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  for (auto& v : p.w_fuse.data) v = 0;
  TensorF s_hist = TensorF::vector({1, 2, 3, 4, 5, 6, 7, 8});
  TensorF s_conv = TensorF::vector({8, 7, 6, 5, 4, 3, 2, 1});
  std::vector<int> ids{2, 3, 4};
  auto scores = preference_scores(ctx, p, s_hist, s_conv, ids);
  for (float v : scores.data) CHECK(v == 0.0f);

  // d=2 hand computation: W stacked identities, embedding [2,3] -> score 5
  ModelConfig cfg2 = tiny_config(2, 1);
  std::mt19937 rng = make_rng(1);
  auto p2 = init_dual_encoder<float>(cfg2, 5, 4, rng);
  p2.w_fuse.data = {1, 0, 0, 1, 1, 0, 0, 1};  // 4x2 [I; I]
  p2.item_encoder.embeddings.at(3, 0) = 2;
  p2.item_encoder.embeddings.at(3, 1) = 3;
  TensorF si = TensorF::vector({1, 0});
  TensorF sa = TensorF::vector({0, 1});
  std::vector<int> one{3};
  auto s = preference_scores(ctx, p2, si, sa, one);
  CHECK(s[0] == doctest::Approx(5.0f).epsilon(1e-6));

  std::vector<int> invalid{99};
  CHECK_THROWS_AS(preference_scores(ctx, p2, si, sa, invalid), std::invalid_argument);
}

TEST_CASE("preference scores batched equals one-by-one") {
  auto p = tiny_model<float>(9);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::mt19937 rng = make_rng(2);
  std::uniform_real_distribution<float> dist(-1, 1);
  TensorF s_hist = TensorF::zeros({8});
  TensorF s_conv = TensorF::zeros({8});
  for (auto& v : s_hist.data) v = dist(rng);
  for (auto& v : s_conv.data) v = dist(rng);

  std::vector<int> ids{2, 5, 7, 9, 11};
  auto batched = preference_scores(ctx, p, s_hist, s_conv, ids);
  for (size_t i = 0; i < ids.size(); ++i) {
    std::vector<int> one{ids[i]};
    auto single = preference_scores(ctx, p, s_hist, s_conv, one);
    CHECK(std::abs(batched[static_cast<Index>(i)] - single[0]) < 1e-5f);
  }
}

TEST_CASE("masked item logit against a straight-line reimplementation") {
  auto p = tiny_model<float>(10);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::mt19937 rng = make_rng(3);
  std::uniform_real_distribution<float> dist(-1, 1);
  TensorF f_pos = TensorF::zeros({8});
  TensorF s_attr = TensorF::zeros({8});
  for (auto& v : f_pos.data) v = dist(rng);
  for (auto& v : s_attr.data) v = dist(rng);
  const int candidate = 6;

  auto logit = masked_item_logit(ctx, p, f_pos, s_attr, candidate);

  // independent loops: concat^T * W * emb
  double expect = 0;
  for (int j = 0; j < 8; ++j) {
    double proj = 0;
    for (int i = 0; i < 16; ++i) {
      const double cat_i = i < 8 ? f_pos[i] : s_attr[i - 8];
      proj += cat_i * p.w_fuse.at(i, j);
    }
    expect += proj * p.item_encoder.embeddings.at(candidate, j);
  }
  CHECK(logit[0] == doctest::Approx(static_cast<float>(expect)).epsilon(1e-5));

  // zero embedding row: logit 0 -> probability one half
  for (int j = 0; j < 8; ++j) p.item_encoder.embeddings.at(7, j) = 0;
  auto zero_logit = masked_item_logit(ctx, p, f_pos, s_attr, 7);
  CHECK(zero_logit[0] == 0.0f);
  auto prob = sigmoid(tape, zero_logit);
  CHECK(prob[0] == doctest::Approx(0.5f));

  // bilinearity: doubling the candidate embedding doubles the logit
  for (int j = 0; j < 8; ++j) p.item_encoder.embeddings.at(6, j) *= 2.0f;
  auto doubled = masked_item_logit(ctx, p, f_pos, s_attr, candidate);
  CHECK(doubled[0] == doctest::Approx(2.0f * logit[0]).epsilon(1e-4));

  CHECK_THROWS_AS(masked_item_logit(ctx, p, f_pos, s_attr, kPadId), std::invalid_argument);
  CHECK_THROWS_AS(masked_item_logit(ctx, p, f_pos, s_attr, kItemMaskId), std::invalid_argument);
}

TEST_CASE("substitution logit identities and reimplementation") {
  auto p = tiny_model<float>(11);
  Tape<float> tape;
  Fwd<float> ctx{tape};

  for (auto& v : p.w_disc.data) v = 0;
  TensorF f_item = TensorF::vector({1, 0, 0, 0, 0, 0, 0, 0});
  TensorF f_attr = TensorF::vector({1, 0, 0, 0, 0, 0, 0, 0});
  auto zero = substitution_logit(ctx, p, f_item, f_attr);
  CHECK(zero[0] == 0.0f);
  CHECK(sigmoid(tape, zero)[0] == doctest::Approx(0.5f));

  // identity matrix with aligned unit vectors: logit 1, sigma(1) ~ 0.7311
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) p.w_disc.at(i, j) = (i == j) ? 1.0f : 0.0f;
  auto one = substitution_logit(ctx, p, f_item, f_attr);
  CHECK(one[0] == doctest::Approx(1.0f));
  CHECK(sigmoid(tape, one)[0] == doctest::Approx(0.7310586f).epsilon(1e-5));

  std::mt19937 rng = make_rng(4);
  std::uniform_real_distribution<float> dist(-1, 1);
  for (auto& v : p.w_disc.data) v = dist(rng);
  TensorF a = TensorF::zeros({8});
  TensorF b = TensorF::zeros({8});
  for (auto& v : a.data) v = dist(rng);
  for (auto& v : b.data) v = dist(rng);
  auto logit = substitution_logit(ctx, p, a, b);
  double expect = 0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) expect += a[i] * p.w_disc.at(i, j) * b[j];
  CHECK(logit[0] == doctest::Approx(static_cast<float>(expect)).epsilon(1e-5));
}

TEST_CASE("generator: zero weights give uniform next-item distribution") {
  ModelConfig cfg = tiny_config();
  std::mt19937 rng = make_rng(5);
  auto gen = init_generator<float>(cfg, 10, rng);
  for (auto* t : parameters(gen))
    for (auto& v : t->data) v = 0;
  // layer-norm gains back to 1 so the blocks stay well-defined
  for (auto& layer : gen.encoder.layers) {
    for (auto& v : layer.ln1_g.data) v = 1;
    for (auto& v : layer.ln2_g.data) v = 1;
  }
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<int> prefix{2, 3};
  auto scores = next_item_scores(ctx, gen, prefix);
  CHECK(scores.size() == 10);
  for (float v : scores.data) CHECK(v == 0.0f);
  auto probs = softmax_rows(tape, scores);
  for (float v : probs.data) CHECK(v == doctest::Approx(0.1f).epsilon(1e-5));

  std::vector<int> empty;
  CHECK_THROWS_AS(next_item_scores(ctx, gen, empty), std::invalid_argument);
}

TEST_CASE("generator causality") {
  ModelConfig cfg = tiny_config();
  std::mt19937 rng = make_rng(6);
  auto gen = init_generator<float>(cfg, 12, rng);
  Tape<float> tape;
  Fwd<float> ctx{tape};
  std::vector<int> a{2, 3, 4};
  std::vector<int> b{2, 3, 9};
  auto sa = next_item_scores_all_positions(ctx, gen, a);
  auto sb = next_item_scores_all_positions(ctx, gen, b);
  for (Index c = 0; c < sa.shape[1]; ++c) {
    CHECK(sa.at(0, c) == sb.at(0, c));
    CHECK(sa.at(1, c) == sb.at(1, c));
  }
}

TEST_CASE("padding rows never influence non-pad outputs") {
  auto p = tiny_model<float>(12);
  std::vector<int> seq{2, 3, kPadId, kPadId};
  Tape<float> t1;
  Fwd<float> c1{t1};
  auto base = encode_items(c1, p, seq);

  // perturb the padding embedding row and re-encode
  for (int j = 0; j < 8; ++j) p.item_encoder.embeddings.at(kPadId, j) += 10.0f;
  Tape<float> t2;
  Fwd<float> c2{t2};
  auto perturbed = encode_items(c2, p, seq);
  for (Index t = 0; t < 2; ++t)
    for (Index c = 0; c < 8; ++c) CHECK(base.hidden.at(t, c) == perturbed.hidden.at(t, c));
}

TEST_CASE("item and attribute encoders share no parameter storage") {
  auto p = tiny_model<float>(13);
  std::vector<int> attrs{1, 3, 5};
  Tape<float> t1;
  Fwd<float> c1{t1};
  auto base = encode_attributes(c1, p, attrs);

  for (auto& v : p.item_encoder.embeddings.data) v += 1.0f;
  for (auto& v : p.item_encoder.layers[0].attn_wq.data) v += 1.0f;
  Tape<float> t2;
  Fwd<float> c2{t2};
  auto after = encode_attributes(c2, p, attrs);
  CHECK(base.hidden.data == after.hidden.data);
}

TEST_CASE("head gradients match finite differences end to end") {
  auto pf = tiny_model<float>(14);
  auto p = to_double(pf);
  // redraw weights at O(0.3) scale: the h=1e-3 central-difference oracle needs
  // parameters well above h, otherwise its own truncation error dominates
  {
    std::mt19937 wrng = make_rng(140);
    std::uniform_real_distribution<double> wdist(-0.3, 0.3);
    for (auto* t : parameters(p))
      for (auto& v : t->data) v = wdist(wrng);
    for (auto& layer : p.item_encoder.layers) {
      for (auto& v : layer.ln1_g.data) v = 1.0 + 0.1 * wdist(wrng);
      for (auto& v : layer.ln2_g.data) v = 1.0 + 0.1 * wdist(wrng);
    }
    for (auto& layer : p.attr_encoder.layers) {
      for (auto& v : layer.ln1_g.data) v = 1.0 + 0.1 * wdist(wrng);
      for (auto& v : layer.ln2_g.data) v = 1.0 + 0.1 * wdist(wrng);
    }
  }
  std::vector<int> item_seq{2, kItemMaskId, 4, 5};
  std::vector<int> attr_seq{1, 4, 2};
  const int positive = 6, negative = 9;

  auto forward = [&](Tape<double>& t) -> Tensor<double> {
    Fwd<double> ctx{t};
    auto items = encode_items(ctx, p, item_seq);
    auto attrs = encode_attributes(ctx, p, attr_seq);
    auto f_pos = select_row(t, items.hidden, 1);
    auto s_attr = select_row(t, attrs.hidden, attrs.last);

    // ranking-style losses over all three heads
    auto pos_logit = masked_item_logit(ctx, p, f_pos, s_attr, positive);
    auto neg_logit = masked_item_logit(ctx, p, f_pos, s_attr, negative);
    auto mip = softplus(t, neg(t, sub(t, pos_logit, neg_logit)));

    auto f_attr = select_row(t, attrs.hidden, 0);
    auto disc = softplus(t, neg(t, substitution_logit(ctx, p, f_pos, f_attr)));

    auto s_hist = select_row(t, items.hidden, items.last);
    std::vector<int> cands{positive, negative};
    auto scores = preference_scores(ctx, p, s_hist, s_attr, cands);
    auto diff = sub(t, select_elem(t, scores, 0), select_elem(t, scores, 1));
    auto rank = softplus(t, neg(t, diff));

    std::vector<Tensor<double>> parts{mip, disc, rank};
    return sum(t, stack_scalars<double>(t, parts));
  };

  Tape<double> tape;
  auto params = parameters(p);
  for (auto* t : params) tape.watch(*t);
  auto loss = forward(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> grads;
  for (auto* t : params) {
    auto g = tape.grad(*t);
    grads.emplace_back(g.begin(), g.end());
  }

  auto loss_fn = [&]() {
    Tape<double> t2;
    return forward(t2)[0];
  };
  std::mt19937 rng = make_rng(15);
  for (const auto& probe : finite_diff(params, loss_fn, 1e-3, 6, rng))
    CHECK_MESSAGE(grad_close(grads[probe.param][probe.coord], probe.fd, 1e-3, 1e-9),
                  "param ", probe.param, " coord ", probe.coord, " ad=",
                  grads[probe.param][probe.coord], " fd=", probe.fd);
}

TEST_CASE("dropout is applied in training mode only and is seeded") {
  auto p = tiny_model<float>(16);
  p.config.dropout = 0.5f;
  std::vector<int> seq{2, 3, 4};

  Tape<float> t1;
  std::mt19937 r1 = make_rng(30);
  Fwd<float> train1{t1, true, 0.5f, &r1};
  auto a = encode_items(train1, p, seq);

  Tape<float> t2;
  std::mt19937 r2 = make_rng(30);
  Fwd<float> train2{t2, true, 0.5f, &r2};
  auto b = encode_items(train2, p, seq);
  CHECK(a.hidden.data == b.hidden.data);  // same seed, same noise

  Tape<float> t3;
  Fwd<float> eval{t3};
  auto c = encode_items(eval, p, seq);
  Tape<float> t4;
  Fwd<float> eval2{t4};
  auto d = encode_items(eval2, p, seq);
  CHECK(c.hidden.data == d.hidden.data);  // eval mode is noise free
}
