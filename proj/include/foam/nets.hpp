#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "foam/common.hpp"
#include "foam/params.hpp"
#include "foam/tape.hpp"

namespace foam::nets {

// Architecture hyperparameters. The toy profile keeps every stage small
// enough for CPU training while preserving the full structure; the large
// profile exists for config arithmetic only.
struct NetConfig {
  int dim = 64;           // model width D
  int heads = 4;          // attention heads (must divide dim)
  int ff_dim = 128;       // transformer feed-forward hidden width
  int encoder_layers = 2; // latent-encoder depth
  int decoder_layers = 3; // conditional-decoder depth
  int vis_tokens = 16;    // vision tokens per view (4x4 map at 32x32 input)
  int goal_tokens = 16;   // goal-image feature tokens
  int text_raw = 24;      // raw instruction embedding width before the MLP
  int num_views = 1;
  int vocab = 32;         // instruction vocabulary capacity
  double dropout = 0.1;   // transformer sublayer dropout rate (0 disables)
};

inline NetConfig toy_net_config() { return NetConfig{}; }

inline NetConfig large_net_config() {
  NetConfig c;
  c.dim = 512;
  c.heads = 8;
  c.ff_dim = 2048;
  c.encoder_layers = 4;
  c.decoder_layers = 7;
  c.vis_tokens = 300;
  c.goal_tokens = 300;
  c.text_raw = 384;
  return c;
}

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"dim", c.dim},
       {"heads", c.heads},
       {"ff_dim", c.ff_dim},
       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers},
       {"vis_tokens", c.vis_tokens},
       {"goal_tokens", c.goal_tokens},
       {"text_raw", c.text_raw},
       {"num_views", c.num_views},
       {"vocab", c.vocab},
       {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  j.at("dim").get_to(c.dim);
  j.at("heads").get_to(c.heads);
  j.at("ff_dim").get_to(c.ff_dim);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("vis_tokens").get_to(c.vis_tokens);
  j.at("goal_tokens").get_to(c.goal_tokens);
  j.at("text_raw").get_to(c.text_raw);
  j.at("num_views").get_to(c.num_views);
  j.at("vocab").get_to(c.vocab);
  j.at("dropout").get_to(c.dropout);
}

// ---------------------------------------------------------------------------
// Parameter construction. Values are drawn through Rng in insertion order, so
// a fixed seed fixes the whole initialization regardless of scalar type.

template <typename T>
void fill_uniform(Param<T>& p, Rng& rng, double bound) {
  for (auto& v : p.value) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void add_linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng,
                bool frozen = false, bool zero_init = false) {
  if (zero_init) {  // identity-at-init layers consume no rng draws
    ps.add(name + "/w", {in, out}, frozen);
    ps.add(name + "/b", {out}, frozen);
    return;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fill_uniform(ps.add(name + "/w", {in, out}, frozen), rng, bound);
  fill_uniform(ps.add(name + "/b", {out}, frozen), rng, bound);
}

template <typename T>
void add_layer_norm(ParamStore<T>& ps, const std::string& name, int dim, bool frozen = false) {
  auto& g = ps.add(name + "/g", {dim}, frozen);
  std::fill(g.value.begin(), g.value.end(), T(1));
  ps.add(name + "/b", {dim}, frozen);
}

template <typename T>
void add_tokens(ParamStore<T>& ps, const std::string& name, int count, int dim, Rng& rng,
                double bound = 0.1) {
  fill_uniform(ps.add(name, {count, dim}, false), rng, bound);
}

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng,
              bool frozen = false) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
  fill_uniform(ps.add(name + "/w", {cout, cin, 3, 3}, frozen), rng, bound);
  fill_uniform(ps.add(name + "/b", {cout}, frozen), rng, bound);
}

template <typename T>
void add_mha(ParamStore<T>& ps, const std::string& name, int dim, Rng& rng) {
  add_linear(ps, name + "/q", dim, dim, rng);
  // No key bias: softmax is invariant to the uniform score shift a key bias
  // produces, so the parameter would be a pure zero-gradient direction.
  fill_uniform(ps.add(name + "/k/w", {dim, dim}, false), rng,
               1.0 / std::sqrt(static_cast<double>(dim)));
  add_linear(ps, name + "/v", dim, dim, rng);
  add_linear(ps, name + "/o", dim, dim, rng);
}

template <typename T>
void add_encoder_layer(ParamStore<T>& ps, const std::string& name, const NetConfig& cfg,
                       Rng& rng) {
  add_layer_norm(ps, name + "/ln1", cfg.dim);
  add_mha(ps, name + "/attn", cfg.dim, rng);
  add_layer_norm(ps, name + "/ln2", cfg.dim);
  add_linear(ps, name + "/ff1", cfg.dim, cfg.ff_dim, rng);
  add_linear(ps, name + "/ff2", cfg.ff_dim, cfg.dim, rng);
}

template <typename T>
void add_decoder_layer(ParamStore<T>& ps, const std::string& name, const NetConfig& cfg,
                       Rng& rng) {
  add_layer_norm(ps, name + "/ln1", cfg.dim);
  add_mha(ps, name + "/self", cfg.dim, rng);
  add_layer_norm(ps, name + "/ln2", cfg.dim);
  add_mha(ps, name + "/cross", cfg.dim, rng);
  add_layer_norm(ps, name + "/ln3", cfg.dim);
  add_linear(ps, name + "/ff1", cfg.dim, cfg.ff_dim, rng);
  add_linear(ps, name + "/ff2", cfg.ff_dim, cfg.dim, rng);
}

template <typename T>
void add_encoder_stack(ParamStore<T>& ps, const std::string& prefix, const NetConfig& cfg,
                       Rng& rng) {
  for (int l = 0; l < cfg.encoder_layers; ++l)
    add_encoder_layer(ps, prefix + "/l" + std::to_string(l), cfg, rng);
  add_layer_norm(ps, prefix + "/ln_f", cfg.dim);
}

template <typename T>
void add_decoder_stack(ParamStore<T>& ps, const std::string& prefix, const NetConfig& cfg,
                       Rng& rng) {
  for (int l = 0; l < cfg.decoder_layers; ++l)
    add_decoder_layer(ps, prefix + "/l" + std::to_string(l), cfg, rng);
  add_layer_norm(ps, prefix + "/ln_f", cfg.dim);
}

// Three stride-2 conv stages (dim/4, dim/2, dim channels). With cond_dim > 0
// each stage gains zero-initialized scale/shift projections, so the block
// starts as an identity-modulated (plain) CNN.
template <typename T>
void add_film_cnn(ParamStore<T>& ps, const std::string& prefix, const NetConfig& cfg,
                  int cond_dim, Rng& rng, bool frozen = false) {
  const int chans[3] = {cfg.dim / 4, cfg.dim / 2, cfg.dim};
  int cin = 3;
  for (int s = 0; s < 3; ++s) {
    const std::string stage = prefix + "/s" + std::to_string(s);
    add_conv(ps, stage + "/conv", cin, chans[s], rng, frozen);
    if (cond_dim > 0) {
      add_linear(ps, stage + "/film_s", cond_dim, chans[s], rng, frozen, /*zero_init=*/true);
      add_linear(ps, stage + "/film_t", cond_dim, chans[s], rng, frozen, /*zero_init=*/true);
    }
    cin = chans[s];
  }
}

template <typename T>
void add_text_encoder(ParamStore<T>& ps, const std::string& prefix, const NetConfig& cfg,
                      Rng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(cfg.text_raw));
  fill_uniform(ps.add(prefix + "/embed", {cfg.vocab, cfg.text_raw}, false), rng, bound);
  add_linear(ps, prefix + "/mlp1", cfg.text_raw, cfg.dim, rng);
  add_linear(ps, prefix + "/mlp2", cfg.dim, cfg.dim, rng);
}

// ---------------------------------------------------------------------------
// Forward builders. Each looks its parameters up by name and appends to the
// tape; non-frozen parameters enter as differentiable leaves, frozen ones as
// constants (their analytic gradient is therefore identically zero).

template <typename T>
struct DropoutCtx {
  Rng* rng = nullptr;
  T rate = T(0);
  bool enabled() const { return rng != nullptr && rate > T(0); }
};

template <typename T>
typename Tape<T>::Ref param_ref(Tape<T>& tape, ParamStore<T>& ps, const std::string& name) {
  Param<T>& p = ps.at(name);
  if (p.frozen) return tape.constant(p.value, p.dims);
  return tape.leaf(p.value, p.dims, &p.grad);
}

template <typename T>
typename Tape<T>::Ref maybe_dropout(Tape<T>& tape, typename Tape<T>::Ref x,
                                    DropoutCtx<T>* drop) {
  if (drop == nullptr || !drop->enabled()) return x;
  const size_t n = Tape<T>::numel(tape.dims(x));
  std::vector<T> keep(n);
  for (auto& k : keep) k = drop->rng->uniform() < static_cast<double>(drop->rate) ? T(0) : T(1);
  return tape.dropout(x, keep, T(1) - drop->rate);
}

template <typename T>
typename Tape<T>::Ref linear_fwd(Tape<T>& tape, ParamStore<T>& ps, const std::string& name,
                                 typename Tape<T>::Ref x) {
  return tape.add_bias(tape.matmul(x, param_ref(tape, ps, name + "/w")),
                       param_ref(tape, ps, name + "/b"));
}

template <typename T>
typename Tape<T>::Ref layer_norm_fwd(Tape<T>& tape, ParamStore<T>& ps, const std::string& name,
                                     typename Tape<T>::Ref x) {
  return tape.layer_norm(x, param_ref(tape, ps, name + "/g"), param_ref(tape, ps, name + "/b"));
}

// Additive attention mask: 0 where the key is valid, -1e9 where masked. The
// -1e9 shift underflows to an exactly-zero softmax weight, so masked keys
// contribute nothing, bit for bit. key_valid is row-major [batch, keys].
template <typename T>
typename Tape<T>::Ref make_key_mask(Tape<T>& tape, const std::vector<uint8_t>& key_valid, int B,
                                    int heads, int Sq, int Sk) {
  if (static_cast<int>(key_valid.size()) != B * Sk)
    throw std::invalid_argument("make_key_mask: key_valid size");
  std::vector<T> m(static_cast<size_t>(B) * heads * Sq * Sk);
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int q = 0; q < Sq; ++q)
        for (int k = 0; k < Sk; ++k)
          m[(((static_cast<size_t>(b) * heads + h) * Sq) + q) * Sk + k] =
              key_valid[static_cast<size_t>(b) * Sk + k] ? T(0) : T(-1e9);
  return tape.constant(std::move(m), {B * heads, Sq, Sk});
}

// Multi-head attention, queries from q_in and keys/values from kv_in (self
// attention when they coincide). mask_add, if >= 0, is an additive score
// tensor shaped [B*heads, Sq, Sk].
template <typename T>
typename Tape<T>::Ref mha_fwd(Tape<T>& tape, ParamStore<T>& ps, const std::string& name,
                              typename Tape<T>::Ref q_in, typename Tape<T>::Ref kv_in, int heads,
                              typename Tape<T>::Ref mask_add = -1) {
  const int dim = tape.dims(q_in).back();
  const int dh = dim / heads;
  auto q = tape.split_heads(linear_fwd(tape, ps, name + "/q", q_in), heads);
  auto k = tape.split_heads(
      tape.matmul(kv_in, param_ref(tape, ps, name + "/k/w")), heads);
  auto v = tape.split_heads(linear_fwd(tape, ps, name + "/v", kv_in), heads);
  auto scores = tape.scale(tape.bmm(q, k, /*trans_b=*/true),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  if (mask_add >= 0) scores = tape.add(scores, mask_add);
  auto probs = tape.softmax_rows(scores);
  auto ctx = tape.merge_heads(tape.bmm(probs, v, /*trans_b=*/false), heads);
  return linear_fwd(tape, ps, name + "/o", ctx);
}

template <typename T>
typename Tape<T>::Ref encoder_layer_fwd(Tape<T>& tape, ParamStore<T>& ps,
                                        const std::string& name, typename Tape<T>::Ref x,
                                        int heads, typename Tape<T>::Ref mask_add,
                                        DropoutCtx<T>* drop) {
  auto h = layer_norm_fwd(tape, ps, name + "/ln1", x);
  x = tape.add(x, maybe_dropout(tape, mha_fwd(tape, ps, name + "/attn", h, h, heads, mask_add),
                                drop));
  auto f = layer_norm_fwd(tape, ps, name + "/ln2", x);
  f = linear_fwd(tape, ps, name + "/ff2", tape.relu(linear_fwd(tape, ps, name + "/ff1", f)));
  return tape.add(x, maybe_dropout(tape, f, drop));
}

template <typename T>
typename Tape<T>::Ref decoder_layer_fwd(Tape<T>& tape, ParamStore<T>& ps,
                                        const std::string& name, typename Tape<T>::Ref x,
                                        typename Tape<T>::Ref memory, int heads,
                                        DropoutCtx<T>* drop) {
  auto h = layer_norm_fwd(tape, ps, name + "/ln1", x);
  x = tape.add(x, maybe_dropout(tape, mha_fwd(tape, ps, name + "/self", h, h, heads), drop));
  auto q = layer_norm_fwd(tape, ps, name + "/ln2", x);
  x = tape.add(x, maybe_dropout(tape, mha_fwd(tape, ps, name + "/cross", q, memory, heads),
                                drop));
  auto f = layer_norm_fwd(tape, ps, name + "/ln3", x);
  f = linear_fwd(tape, ps, name + "/ff2", tape.relu(linear_fwd(tape, ps, name + "/ff1", f)));
  return tape.add(x, maybe_dropout(tape, f, drop));
}

// Pre-norm encoder stack with final norm; shape-preserving [B, S, D].
template <typename T>
typename Tape<T>::Ref transformer_encode(Tape<T>& tape, ParamStore<T>& ps,
                                         const std::string& prefix, typename Tape<T>::Ref x,
                                         const NetConfig& cfg,
                                         typename Tape<T>::Ref mask_add = -1,
                                         DropoutCtx<T>* drop = nullptr) {
  for (int l = 0; l < cfg.encoder_layers; ++l)
    x = encoder_layer_fwd(tape, ps, prefix + "/l" + std::to_string(l), x, cfg.heads, mask_add,
                          drop);
  return layer_norm_fwd(tape, ps, prefix + "/ln_f", x);
}

// Pre-norm decoder stack (self-attention over queries, cross-attention into
// memory); positional information is the caller's responsibility, so with no
// memory positions attached the output is invariant to memory row order.
template <typename T>
typename Tape<T>::Ref transformer_decode(Tape<T>& tape, ParamStore<T>& ps,
                                         const std::string& prefix,
                                         typename Tape<T>::Ref queries,
                                         typename Tape<T>::Ref memory, const NetConfig& cfg,
                                         DropoutCtx<T>* drop = nullptr) {
  auto x = queries;
  for (int l = 0; l < cfg.decoder_layers; ++l)
    x = decoder_layer_fwd(tape, ps, prefix + "/l" + std::to_string(l), x, memory, cfg.heads,
                          drop);
  return layer_norm_fwd(tape, ps, prefix + "/ln_f", x);
}

// FiLM-conditioned CNN: image [B, 3, H, W] (values in [0,1]) to tokens
// [B, (H/8)*(W/8), dim]. cond, if >= 0, is [B, cond_dim] and modulates every
// stage per-channel; zero-initialized projections make this an identity at
// initialization.
template <typename T>
typename Tape<T>::Ref film_cnn_fwd(Tape<T>& tape, ParamStore<T>& ps, const std::string& prefix,
                                   typename Tape<T>::Ref image, const NetConfig& cfg,
                                   typename Tape<T>::Ref cond = -1) {
  auto x = image;
  for (int s = 0; s < 3; ++s) {
    const std::string stage = prefix + "/s" + std::to_string(s);
    x = tape.conv3x3s2(x, param_ref(tape, ps, stage + "/conv/w"),
                       param_ref(tape, ps, stage + "/conv/b"));
    const auto dx = tape.dims(x);
    const int B = dx[0], C = dx[1], HW = dx[2] * dx[3];
    if (cond >= 0) {
      auto sc = linear_fwd(tape, ps, stage + "/film_s", cond);
      auto sh = linear_fwd(tape, ps, stage + "/film_t", cond);
      x = tape.reshape(tape.film(tape.reshape(x, {B, C, HW}), sc, sh), dx);
    }
    x = tape.relu(x);
  }
  const auto df = tape.dims(x);
  // [B, C, H', W'] -> [B, H'*W', C] token sequence
  return tape.transpose_12(tape.reshape(x, {df[0], df[1], df[2] * df[3]}));
}

// Instruction encoder: embedding table, order-invariant mean pool, then a
// two-layer MLP to the model width. Returns [B, dim].
template <typename T>
typename Tape<T>::Ref text_encode_fwd(Tape<T>& tape, ParamStore<T>& ps,
                                      const std::string& prefix,
                                      const std::vector<std::vector<int>>& token_lists,
                                      const NetConfig& cfg) {
  if (token_lists.empty()) throw std::invalid_argument("text_encode: empty batch");
  auto table = param_ref(tape, ps, prefix + "/embed");
  std::vector<typename Tape<T>::Ref> pooled;
  pooled.reserve(token_lists.size());
  for (const auto& ids : token_lists) {
    if (ids.empty()) throw std::invalid_argument("text_encode: empty token list");
    auto emb = tape.embedding(table, ids, 1, static_cast<int>(ids.size()));
    pooled.push_back(tape.reshape(tape.mean_tokens(emb), {1, 1, cfg.text_raw}));
  }
  const int B = static_cast<int>(token_lists.size());
  auto stacked = tape.reshape(tape.concat_tokens(pooled), {B, cfg.text_raw});
  auto h = tape.relu(linear_fwd(tape, ps, prefix + "/mlp1", stacked));
  return linear_fwd(tape, ps, prefix + "/mlp2", h);
}

// ---------------------------------------------------------------------------
// Tape-free forward of the (unconditioned) CNN for cached features and
// inference paths. Produces bit-identical tokens to film_cnn_fwd with no
// conditioning, for a single image in channel-planar layout [3, H, W].

inline std::vector<float> cnn_tokens_raw(const ParamStore<float>& ps, const std::string& prefix,
                                         const std::vector<float>& image, int H, int W,
                                         const NetConfig& cfg) {
  if (image.size() != static_cast<size_t>(3) * H * W)
    throw std::invalid_argument("cnn_tokens_raw: image size");
  const int chans[3] = {cfg.dim / 4, cfg.dim / 2, cfg.dim};
  std::vector<float> x = image;
  int cin = 3, h = H, w = W;
  for (int s = 0; s < 3; ++s) {
    const std::string stage = prefix + "/s" + std::to_string(s) + "/conv";
    const auto& cw = ps.at(stage + "/w");
    const auto& cb = ps.at(stage + "/b");
    const int oh = (h + 1) / 2, ow = (w + 1) / 2;
    std::vector<float> y(static_cast<size_t>(chans[s]) * oh * ow);
    detail::conv3x3s2_plain(x.data(), cw.value.data(), cb.value.data(), y.data(), 1, cin, h, w,
                            chans[s], oh, ow);
    for (auto& v : y) v = v > 0.f ? v : 0.f;
    x = std::move(y);
    cin = chans[s];
    h = oh;
    w = ow;
  }
  const int tokens = h * w;
  std::vector<float> out(static_cast<size_t>(tokens) * cin);
  for (int c = 0; c < cin; ++c)
    for (int t = 0; t < tokens; ++t)
      out[static_cast<size_t>(t) * cin + c] = x[static_cast<size_t>(c) * tokens + t];
  return out;
}

// Interleaved [H, W, 3] frame (as stored in datasets) to planar [3, H, W].
template <typename T>
std::vector<T> hwc_to_chw(const std::vector<float>& hwc, int H, int W) {
  std::vector<T> out(hwc.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<size_t>(c) * H + y) * W + x] =
            static_cast<T>(hwc[(static_cast<size_t>(y) * W + x) * 3 + c]);
  return out;
}

}  // namespace foam::nets
