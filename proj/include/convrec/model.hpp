#pragma once

#include "convrec/data.hpp"
#include "convrec/rng.hpp"
#include "convrec/tape.hpp"

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace convrec {

struct ModelConfig {
  int dim = 64;
  int layers = 2;
  int heads = 2;
  int max_items = 50;   // item-sequence positions
  int max_attrs = 15;   // attribute-sequence positions
  float dropout = 0.2f;

  void validate() const {
    detail::require(dim >= 1 && layers >= 1 && heads >= 1, "model config: counts must be >= 1");
    detail::require(dim % heads == 0, "model config: dim must be divisible by heads");
    detail::require(max_items >= 1 && max_attrs >= 1, "model config: lengths must be >= 1");
    detail::require(dropout >= 0.0f && dropout < 1.0f, "model config: dropout in [0,1)");
  }
};

template <class S>
struct LayerWeights {
  Tensor<S> attn_wq, attn_bq, attn_wk, attn_bk, attn_wv, attn_bv, attn_wo, attn_bo;
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<S> ln2_g, ln2_b;
};

template <class S>
struct EncoderParams {
  Tensor<S> embeddings;  // vocab x d
  Tensor<S> positions;   // max_len x d, learnable
  std::vector<LayerWeights<S>> layers;
};

/// The two self-attention stacks share an architecture but never parameters.
/// w_fuse maps the concatenated history/conversation state pair onto item
/// embeddings; w_disc scores item-position representations against encoded
/// attribute positions.
template <class S>
struct DualEncoderParams {
  ModelConfig config;
  int item_vocab = 0;  // |I| + 2 (padding + mask rows)
  int attr_vocab = 0;  // |A| + 1 (padding row)
  EncoderParams<S> item_encoder;
  EncoderParams<S> attr_encoder;
  Tensor<S> w_fuse;  // 2d x d
  Tensor<S> w_disc;  // d x d
};

/// Left-to-right next-item scorer with tied item embeddings; its parameter
/// set is fully disjoint from the dual encoder's.
template <class S>
struct GeneratorParams {
  ModelConfig config;
  int item_vocab = 0;
  EncoderParams<S> encoder;
};

// --- initialization ---------------------------------------------------------

namespace modeldetail {

template <class S>
Tensor<S> init_weight(std::vector<Index> shape, std::mt19937& rng) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.data) v = truncated_normal<S>(rng, S(0.02));
  return t;
}

template <class S>
EncoderParams<S> init_encoder(int vocab, int max_len, const ModelConfig& cfg,
                              std::mt19937& rng) {
  const Index d = cfg.dim;
  EncoderParams<S> enc;
  enc.embeddings = init_weight<S>({vocab, d}, rng);
  enc.positions = init_weight<S>({max_len, d}, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerWeights<S> w;
    w.attn_wq = init_weight<S>({d, d}, rng);
    w.attn_bq = Tensor<S>::zeros({d});
    w.attn_wk = init_weight<S>({d, d}, rng);
    w.attn_bk = Tensor<S>::zeros({d});
    w.attn_wv = init_weight<S>({d, d}, rng);
    w.attn_bv = Tensor<S>::zeros({d});
    w.attn_wo = init_weight<S>({d, d}, rng);
    w.attn_bo = Tensor<S>::zeros({d});
    w.ln1_g = Tensor<S>::full({d}, S(1));
    w.ln1_b = Tensor<S>::zeros({d});
    w.ffn_w1 = init_weight<S>({d, 4 * d}, rng);
    w.ffn_b1 = Tensor<S>::zeros({4 * d});
    w.ffn_w2 = init_weight<S>({4 * d, d}, rng);
    w.ffn_b2 = Tensor<S>::zeros({d});
    w.ln2_g = Tensor<S>::full({d}, S(1));
    w.ln2_b = Tensor<S>::zeros({d});
    enc.layers.push_back(std::move(w));
  }
  return enc;
}

}  // namespace modeldetail

template <class S>
DualEncoderParams<S> init_dual_encoder(const ModelConfig& cfg, int item_vocab, int attr_vocab,
                                       std::mt19937& rng) {
  cfg.validate();
  DualEncoderParams<S> p;
  p.config = cfg;
  p.item_vocab = item_vocab;
  p.attr_vocab = attr_vocab;
  p.item_encoder = modeldetail::init_encoder<S>(item_vocab, cfg.max_items, cfg, rng);
  p.attr_encoder = modeldetail::init_encoder<S>(attr_vocab, cfg.max_attrs, cfg, rng);
  p.w_fuse = modeldetail::init_weight<S>({2 * cfg.dim, cfg.dim}, rng);
  p.w_disc = modeldetail::init_weight<S>({cfg.dim, cfg.dim}, rng);
  return p;
}

template <class S>
GeneratorParams<S> init_generator(const ModelConfig& cfg, int item_vocab, std::mt19937& rng) {
  cfg.validate();
  GeneratorParams<S> p;
  p.config = cfg;
  p.item_vocab = item_vocab;
  p.encoder = modeldetail::init_encoder<S>(item_vocab, cfg.max_items, cfg, rng);
  return p;
}

// --- parameter enumeration ---------------------------------------------------

template <class S, class Fn>
void for_each_parameter(EncoderParams<S>& enc, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".emb", enc.embeddings);
  fn(prefix + ".pos", enc.positions);
  for (size_t l = 0; l < enc.layers.size(); ++l) {
    auto& w = enc.layers[l];
    const std::string base = prefix + ".l" + std::to_string(l) + ".";
    fn(base + "attn_wq", w.attn_wq);
    fn(base + "attn_bq", w.attn_bq);
    fn(base + "attn_wk", w.attn_wk);
    fn(base + "attn_bk", w.attn_bk);
    fn(base + "attn_wv", w.attn_wv);
    fn(base + "attn_bv", w.attn_bv);
    fn(base + "attn_wo", w.attn_wo);
    fn(base + "attn_bo", w.attn_bo);
    fn(base + "ln1_g", w.ln1_g);
    fn(base + "ln1_b", w.ln1_b);
    fn(base + "ffn_w1", w.ffn_w1);
    fn(base + "ffn_b1", w.ffn_b1);
    fn(base + "ffn_w2", w.ffn_w2);
    fn(base + "ffn_b2", w.ffn_b2);
    fn(base + "ln2_g", w.ln2_g);
    fn(base + "ln2_b", w.ln2_b);
  }
}

template <class S, class Fn>
void for_each_parameter(DualEncoderParams<S>& p, Fn&& fn) {
  for_each_parameter(p.item_encoder, "item", fn);
  for_each_parameter(p.attr_encoder, "attr", fn);
  fn("fuse.w", p.w_fuse);
  fn("disc.w", p.w_disc);
}

template <class S, class Fn>
void for_each_parameter(GeneratorParams<S>& p, Fn&& fn) {
  for_each_parameter(p.encoder, "gen", fn);
}

template <class S>
std::vector<Tensor<S>*> parameters(DualEncoderParams<S>& p) {
  std::vector<Tensor<S>*> out;
  for_each_parameter(p, [&](const std::string&, Tensor<S>& t) { out.push_back(&t); });
  return out;
}

template <class S>
std::vector<Tensor<S>*> parameters(GeneratorParams<S>& p) {
  std::vector<Tensor<S>*> out;
  for_each_parameter(p, [&](const std::string&, Tensor<S>& t) { out.push_back(&t); });
  return out;
}

// --- forward passes -----------------------------------------------------------

/// Context for one forward pass: the tape plus dropout settings. Evaluation
/// passes leave `training` false so no noise enters the graph.
template <class S>
struct Fwd {
  Tape<S>& tape;
  bool training = false;
  S dropout = S(0);
  std::mt19937* rng = nullptr;

  bool dropping() const { return training && dropout > S(0) && rng != nullptr; }
};

template <class S>
struct Encoded {
  Tensor<S> hidden;  // len x d
  Index last = 0;    // last non-padding position; len-1 for an all-padding input
};

inline Index last_non_pad(std::span<const int> ids) {
  for (Index i = static_cast<Index>(ids.size()) - 1; i >= 0; --i)
    if (ids[static_cast<size_t>(i)] != kPadId) return i;
  return static_cast<Index>(ids.size()) - 1;
}

namespace modeldetail {

/// Additive attention mask: 0 where attention is allowed, -1e9 where the key
/// is padding or (causal) lies in the future.
template <class S>
Tensor<S> attention_mask(std::span<const int> ids, bool causal) {
  const Index len = static_cast<Index>(ids.size());
  Tensor<S> m = Tensor<S>::zeros({len, len});
  for (Index q = 0; q < len; ++q)
    for (Index k = 0; k < len; ++k) {
      const bool banned = ids[static_cast<size_t>(k)] == kPadId || (causal && k > q);
      if (banned) m.at(q, k) = S(-1e9);
    }
  return m;
}

template <class S>
Tensor<S> self_attention_block(Fwd<S>& ctx, const LayerWeights<S>& w, const Tensor<S>& x,
                               const Tensor<S>& mask, int heads) {
  auto& t = ctx.tape;
  const Index d = x.shape[1];
  const Index dk = d / heads;
  const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(dk));

  auto q = add_bias(t, matmul(t, x, w.attn_wq), w.attn_bq);
  auto k = add_bias(t, matmul(t, x, w.attn_wk), w.attn_bk);
  auto v = add_bias(t, matmul(t, x, w.attn_wv), w.attn_bv);

  std::vector<Tensor<S>> head_ctx;
  for (int h = 0; h < heads; ++h) {
    auto qh = slice_cols(t, q, h * dk, dk);
    auto kh = slice_cols(t, k, h * dk, dk);
    auto vh = slice_cols(t, v, h * dk, dk);
    auto logits = add(t, scale(t, matmul_nt(t, qh, kh), inv_sqrt_dk), mask);
    auto attn = softmax_rows(t, logits);
    if (ctx.dropping()) attn = dropout(t, attn, ctx.dropout, *ctx.rng);
    head_ctx.push_back(matmul(t, attn, vh));
  }
  auto merged = concat_cols<S>(t, head_ctx);
  auto attn_out = add_bias(t, matmul(t, merged, w.attn_wo), w.attn_bo);
  auto x1 = layer_norm(t, add(t, x, attn_out), w.ln1_g, w.ln1_b);

  auto inner = gelu(t, add_bias(t, matmul(t, x1, w.ffn_w1), w.ffn_b1));
  auto ffn_out = add_bias(t, matmul(t, inner, w.ffn_w2), w.ffn_b2);
  if (ctx.dropping()) ffn_out = dropout(t, ffn_out, ctx.dropout, *ctx.rng);
  return layer_norm(t, add(t, x1, ffn_out), w.ln2_g, w.ln2_b);
}

template <class S>
Encoded<S> encode_sequence(Fwd<S>& ctx, const EncoderParams<S>& enc, std::span<const int> ids,
                           bool causal, int heads) {
  detail::require(!ids.empty(), "encode: empty sequence");
  detail::require(static_cast<Index>(ids.size()) <= enc.positions.shape[0],
                  "encode: sequence length " + std::to_string(ids.size()) +
                      " exceeds maximum " + std::to_string(enc.positions.shape[0]));
  auto& t = ctx.tape;
  const Index len = static_cast<Index>(ids.size());
  auto x = add(t, embedding_lookup(t, enc.embeddings, ids),
               slice_rows(t, enc.positions, 0, len));
  auto mask = attention_mask<S>(ids, causal);
  for (const auto& w : enc.layers) x = self_attention_block(ctx, w, x, mask, heads);
  return {std::move(x), last_non_pad(ids)};
}

}  // namespace modeldetail

/// Bidirectional by default; `causal` restricts position t to keys <= t.
/// Row k of `hidden` is the contextual representation of sequence position k;
/// `last` indexes the state summarizing the whole (non-padded) sequence.
template <class S>
Encoded<S> encode_items(Fwd<S>& ctx, const DualEncoderParams<S>& p, std::span<const int> ids,
                        bool causal = false) {
  for (int id : ids)
    detail::require(id >= 0 && id < p.item_vocab, "encode_items: invalid item id");
  return modeldetail::encode_sequence(ctx, p.item_encoder, ids, causal, p.config.heads);
}

template <class S>
Encoded<S> encode_attributes(Fwd<S>& ctx, const DualEncoderParams<S>& p,
                             std::span<const int> ids) {
  for (int id : ids)
    detail::require(id >= 0 && id < p.attr_vocab, "encode_attributes: invalid attribute id");
  return modeldetail::encode_sequence(ctx, p.attr_encoder, ids, /*causal=*/false,
                                      p.config.heads);
}

/// Unnormalized preference scores for `item_ids` given the history state and
/// the conversation state: concat(s_hist, s_conv)^T * W_fuse * emb[item].
template <class S>
Tensor<S> preference_scores(Fwd<S>& ctx, const DualEncoderParams<S>& p, const Tensor<S>& s_hist,
                            const Tensor<S>& s_conv, std::span<const int> item_ids) {
  auto& t = ctx.tape;
  for (int id : item_ids)
    detail::require(id >= 0 && id < p.item_vocab, "preference_scores: invalid item id");
  auto proj = vecmat(t, concat_vec(t, s_hist, s_conv), p.w_fuse);
  auto emb = embedding_lookup(t, p.item_encoder.embeddings, item_ids);
  return matvec(t, emb, proj);
}

/// Masked-position recovery logit for one candidate: the position's
/// contextual state paired with the encoding of the hidden item's attributes,
/// pushed through the same fusion matrix as preference_scores.
template <class S>
Tensor<S> masked_item_logit(Fwd<S>& ctx, const DualEncoderParams<S>& p, const Tensor<S>& f_pos,
                            const Tensor<S>& s_attrs, int candidate) {
  detail::require(candidate != kPadId && candidate != kItemMaskId,
                  "masked_item_logit: candidate must be a real item");
  std::array<int, 1> one{candidate};
  auto scores = preference_scores(ctx, p, f_pos, s_attrs, one);
  return select_elem(ctx.tape, scores, 0);
}

/// Original-vs-substituted attribute logit: f_item^T * W_disc * f_attr.
template <class S>
Tensor<S> substitution_logit(Fwd<S>& ctx, const DualEncoderParams<S>& p, const Tensor<S>& f_item,
                             const Tensor<S>& f_attr) {
  auto& t = ctx.tape;
  return dot(t, vecmat(t, f_item, p.w_disc), f_attr);
}

/// Next-item scores over the full item vocabulary from a causal encoding of
/// the prefix. Embeddings are tied between input and output.
template <class S>
Tensor<S> next_item_scores(Fwd<S>& ctx, const GeneratorParams<S>& p,
                           std::span<const int> prefix) {
  detail::require(!prefix.empty(), "next_item_scores: empty prefix");
  for (int id : prefix)
    detail::require(id >= 0 && id < p.item_vocab, "next_item_scores: invalid item id");
  auto enc = modeldetail::encode_sequence(ctx, p.encoder, prefix, /*causal=*/true,
                                          p.config.heads);
  auto h = select_row(ctx.tape, enc.hidden, enc.last);
  return matvec(ctx.tape, p.encoder.embeddings, h);
}

/// Next-item scores at every prefix position of one causal encoding; row t
/// scores the item following position t. Used by generator training.
template <class S>
Tensor<S> next_item_scores_all_positions(Fwd<S>& ctx, const GeneratorParams<S>& p,
                                         std::span<const int> sequence) {
  detail::require(!sequence.empty(), "next_item_scores_all_positions: empty sequence");
  auto enc = modeldetail::encode_sequence(ctx, p.encoder, sequence, /*causal=*/true,
                                          p.config.heads);
  return matmul_nt(ctx.tape, enc.hidden, p.encoder.embeddings);
}

}  // namespace convrec
