#pragma once

#include <json.hpp>
#include <type_traits>
#include <string>
#include <vector>

#include "foam/common.hpp"
#include "foam/dataset.hpp"
#include "foam/nets.hpp"
#include "foam/params.hpp"
#include "foam/tape.hpp"

namespace foam::policy {

// Conditioning variants: the full goal-conditioned model with foresight
// supervision, the same model without foresight, and the two single-modality
// baselines (language-only and goal-image-only).
enum class Variant { FULL, NO_FA, LANG_ONLY, IMG_ONLY };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::FULL: return "FULL";
    case Variant::NO_FA: return "NO_FA";
    case Variant::LANG_ONLY: return "LANG_ONLY";
    case Variant::IMG_ONLY: return "IMG_ONLY";
  }
  return "FULL";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "FULL") return Variant::FULL;
  if (s == "NO_FA") return Variant::NO_FA;
  if (s == "LANG_ONLY") return Variant::LANG_ONLY;
  if (s == "IMG_ONLY") return Variant::IMG_ONLY;
  throw std::invalid_argument("unknown variant: " + s);
}

struct FoamConfig {
  nets::NetConfig net;
  int k = 40;           // action chunk size (close to the episode horizon)
  int z_dim = 8;
  int action_dim = 3;
  int proprio_dim = 3;
  int image_size = 32;
  double alpha = 1.0;   // action-loss weight
  double beta = 2.0;    // foresight-loss weight
  double gamma = 10.0;  // KL weight
  double huber_delta = 1.0;
  Variant variant = Variant::FULL;
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;

  int memory_tokens() const {
    return 3 + net.goal_tokens + net.vis_tokens * net.num_views;
  }
  // Weight actually applied to the foresight term: only the full model
  // carries foresight supervision.
  double beta_effective() const { return variant == Variant::FULL ? beta : 0.0; }
};

inline void to_json(nlohmann::json& j, const FoamConfig& c) {
  j = {{"net", c.net},
       {"k", c.k},
       {"z_dim", c.z_dim},
       {"action_dim", c.action_dim},
       {"proprio_dim", c.proprio_dim},
       {"image_size", c.image_size},
       {"alpha", c.alpha},
       {"beta", c.beta},
       {"gamma", c.gamma},
       {"huber_delta", c.huber_delta},
       {"variant", variant_name(c.variant)},
       {"lr", c.lr},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2}};
}

inline void from_json(const nlohmann::json& j, FoamConfig& c) {
  j.at("net").get_to(c.net);
  j.at("k").get_to(c.k);
  j.at("z_dim").get_to(c.z_dim);
  j.at("action_dim").get_to(c.action_dim);
  j.at("proprio_dim").get_to(c.proprio_dim);
  j.at("image_size").get_to(c.image_size);
  j.at("alpha").get_to(c.alpha);
  j.at("beta").get_to(c.beta);
  j.at("gamma").get_to(c.gamma);
  j.at("huber_delta").get_to(c.huber_delta);
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  j.at("lr").get_to(c.lr);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
}

// Index of the decoded foresight frame supervised at timestep t: the frame
// that should coincide with the episode goal, clamp(k - t, 0, k - 1).
inline int foresight_target_index(int t, int k) {
  if (t < 0) throw std::invalid_argument("foresight_target_index: negative t");
  const int raw = k - t;
  return std::max(0, std::min(raw, k - 1));
}

// ---------------------------------------------------------------------------

template <typename T>
struct FoamModel {
  FoamConfig cfg;
  nets::ParamStore<T> params;
  dataset::NormStats norm;
};

// Creates every parameter of the model in a fixed order with a fixed RNG
// stream, so a seed fully determines the initialization and all variants
// share one parameter layout (variants differ only in the forward pass).
template <typename T>
FoamModel<T> build_foam_model(const FoamConfig& cfg, uint64_t seed) {
  using namespace nets;
  if (cfg.net.dim % cfg.net.heads != 0)
    throw std::invalid_argument("model dim must be divisible by heads");
  FoamModel<T> m;
  m.cfg = cfg;
  const int D = cfg.net.dim;
  Rng rng(seed_combine(seed, 0x4d4f44454cull));
  auto& ps = m.params;

  // latent (CVAE posterior) encoder
  add_tokens(ps, "lat/cls", 1, D, rng);
  add_linear(ps, "lat/act_in", cfg.action_dim, D, rng);
  add_linear(ps, "lat/prop_in", cfg.proprio_dim, D, rng);
  add_tokens(ps, "lat/pos", 2 + cfg.k, D, rng);
  add_encoder_stack(ps, "lat/enc", cfg.net, rng);
  add_linear(ps, "lat/mu", D, cfg.z_dim, rng);
  add_linear(ps, "lat/logvar", D, cfg.z_dim, rng);

  // conditioning encoders
  add_text_encoder(ps, "txt", cfg.net, rng);
  add_film_cnn(ps, "vis", cfg.net, /*cond_dim=*/D, rng);
  add_film_cnn(ps, "goal", cfg.net, /*cond_dim=*/0, rng, /*frozen=*/true);

  // memory assembly and decoder
  add_linear(ps, "mem/z_in", cfg.z_dim, D, rng);
  add_linear(ps, "mem/prop_in", cfg.proprio_dim, D, rng);
  add_linear(ps, "mem/goal_proj", D, D, rng);
  add_tokens(ps, "mem/pos", cfg.memory_tokens(), D, rng);
  add_decoder_stack(ps, "dec", cfg.net, rng);
  add_tokens(ps, "dec/queries", cfg.k, D, rng);
  add_linear(ps, "head/action", D, cfg.action_dim, rng);
  add_linear(ps, "head/fore", D, cfg.net.goal_tokens * D, rng);

  // learned substitutes for withheld conditioning modalities
  add_tokens(ps, "null/instr", 1, D, rng);
  add_tokens(ps, "null/goal", 1, D, rng);

  m.norm.action_mean.assign(cfg.action_dim, 0.f);
  m.norm.action_std.assign(cfg.action_dim, 1.f);
  m.norm.proprio_mean.assign(cfg.proprio_dim, 0.f);
  m.norm.proprio_std.assign(cfg.proprio_dim, 1.f);
  return m;
}

// A normalized, assembled training batch. goal_feat holds the frozen goal
// encoder's features (cached outside the tape; they serve as both the goal
// conditioning tokens and the foresight regression target).
template <typename T>
struct TrainBatch {
  int batch = 0;
  std::vector<T> actions;   // [B, k, action_dim], normalized targets
  std::vector<T> mask;      // [B, k], 1 on real steps
  std::vector<T> proprio;   // [B, proprio_dim], normalized
  std::vector<T> frames;    // [B, 3, H, W], raw [0,1]
  std::vector<std::vector<int>> instr;
  std::vector<T> goal_feat; // [B, S_goal, D]
  std::vector<int> fore_idx;  // [B]
  std::vector<T> z_eps;     // [B, z_dim] latent noise for reparameterization
};

struct LossBreakdown {
  double action_loss = 0.0;
  double foresight_loss = 0.0;
  double kl_loss = 0.0;
  double total = 0.0;
};

// Exact element-wise cast of an assembled batch (float -> double for the
// finite-difference verification path).
template <typename B, typename A>
TrainBatch<B> convert_batch(const TrainBatch<A>& in) {
  TrainBatch<B> out;
  out.batch = in.batch;
  auto cast = [](const std::vector<A>& src, std::vector<B>& dst) {
    dst.resize(src.size());
    for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<B>(src[i]);
  };
  cast(in.actions, out.actions);
  cast(in.mask, out.mask);
  cast(in.proprio, out.proprio);
  cast(in.frames, out.frames);
  cast(in.goal_feat, out.goal_feat);
  cast(in.z_eps, out.z_eps);
  out.instr = in.instr;
  out.fore_idx = in.fore_idx;
  return out;
}

enum class ForesightMode { None, Selected, All };

template <typename T>
struct ForwardRefs {
  int mu = -1, logvar = -1, z = -1;
  int dec_tokens = -1;    // decoder output [B, k, D]
  int actions = -1;       // action head output [B, k, action_dim]
  int foresight_all = -1; // [B, k, S_goal*D] in ForesightMode::All
  int loss_action = -1, loss_foresight = -1, loss_kl = -1, total = -1;
};

namespace detail {

// Broadcasts a learned [1, D] token across the batch (and optionally across
// `rows` positions) as a [B, rows, D] block with gradients flowing back.
template <typename T>
int tile_token(nets::Tape<T>& tape, nets::ParamStore<T>& ps, const std::string& name, int B,
               int rows) {
  auto tok = nets::param_ref(tape, ps, name);  // [1, D]
  const int D = tape.dims(tok)[1];
  int block = tok;
  if (rows > 1) {
    auto ones = tape.constant(std::vector<T>(static_cast<size_t>(rows), T(1)), {rows, 1});
    block = tape.matmul(ones, tok);  // [rows, D]
  }
  auto zeros = tape.constant(std::vector<T>(static_cast<size_t>(B) * rows * D, T(0)),
                             {B, rows, D});
  return tape.add_broadcast_block(zeros, block);
}

}  // namespace detail

// Builds the conditioned memory bank [z, proprio, instruction, goal tokens,
// vision tokens] with positional embeddings. Variant substitutions happen
// here, at the input level, so a withheld modality never touches the tape:
// LANG_ONLY replaces the goal tokens by a learned null token, IMG_ONLY
// replaces the instruction embedding (memory token and FiLM conditioning
// alike) by a learned null token.
template <typename T>
int build_memory(nets::Tape<T>& tape, FoamModel<T>& m, int frames, int proprio,
                 const std::vector<std::vector<int>>& instr, int goal_feat, int z) {
  using namespace nets;
  const FoamConfig& cfg = m.cfg;
  const int B = tape.dims(frames)[0];
  const int D = cfg.net.dim;

  int instr_emb;  // [B, D]
  if (cfg.variant == Variant::IMG_ONLY) {
    instr_emb = tape.reshape(detail::tile_token(tape, m.params, "null/instr", B, 1), {B, D});
  } else {
    instr_emb = text_encode_fwd(tape, m.params, "txt", instr, cfg.net);
  }

  auto vis = film_cnn_fwd(tape, m.params, "vis", frames, cfg.net, instr_emb);
  if (tape.dims(vis)[1] != cfg.net.vis_tokens)
    throw std::invalid_argument("vision token count does not match config");

  int goal_tokens;  // [B, S_goal, D]
  if (cfg.variant == Variant::LANG_ONLY) {
    goal_tokens = detail::tile_token(tape, m.params, "null/goal", B, cfg.net.goal_tokens);
  } else {
    goal_tokens = linear_fwd(tape, m.params, "mem/goal_proj", goal_feat);
  }

  auto z_tok = tape.reshape(linear_fwd(tape, m.params, "mem/z_in", z), {B, 1, D});
  auto prop_tok = tape.reshape(linear_fwd(tape, m.params, "mem/prop_in", proprio), {B, 1, D});
  auto instr_tok = tape.reshape(instr_emb, {B, 1, D});

  auto memory = tape.concat_tokens({z_tok, prop_tok, instr_tok, goal_tokens, vis});
  return tape.add_broadcast_block(memory, param_ref(tape, m.params, "mem/pos"));
}

// Runs the decoder stack over the learned chunk queries against a memory
// bank; returns the decoded query tokens [B, k, D].
template <typename T>
int decode_from_memory(nets::Tape<T>& tape, FoamModel<T>& m, int memory,
                       std::type_identity_t<nets::DropoutCtx<T>*> drop) {
  using namespace nets;
  const int B = tape.dims(memory)[0];
  const int D = m.cfg.net.dim;
  auto zeros = tape.constant(
      std::vector<T>(static_cast<size_t>(B) * m.cfg.k * D, T(0)), {B, m.cfg.k, D});
  auto queries = tape.add_broadcast_block(zeros, param_ref(tape, m.params, "dec/queries"));
  return transformer_decode(tape, m.params, "dec", queries, memory, m.cfg.net, drop);
}

// Posterior over z from the action chunk and proprioception: a CLS readout
// of a masked transformer encoder. Padded chunk rows are masked out of every
// attention, so their content cannot reach mu/logvar even bitwise.
template <typename T>
void encode_latent_refs(nets::Tape<T>& tape, FoamModel<T>& m, int actions, int proprio,
                        const std::vector<T>& mask, std::type_identity_t<nets::DropoutCtx<T>*> drop, int& mu_out,
                        int& logvar_out) {
  using namespace nets;
  const FoamConfig& cfg = m.cfg;
  const int B = tape.dims(actions)[0];
  const int D = cfg.net.dim;
  const int S = 2 + cfg.k;

  auto cls = detail::tile_token(tape, m.params, "lat/cls", B, 1);
  auto prop_tok =
      tape.reshape(linear_fwd(tape, m.params, "lat/prop_in", proprio), {B, 1, D});
  auto act_tok = linear_fwd(tape, m.params, "lat/act_in", actions);  // [B, k, D]
  auto seq = tape.add_broadcast_block(tape.concat_tokens({cls, prop_tok, act_tok}),
                                      param_ref(tape, m.params, "lat/pos"));

  std::vector<uint8_t> key_valid(static_cast<size_t>(B) * S, 1);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < cfg.k; ++j)
      key_valid[static_cast<size_t>(b) * S + 2 + j] =
          mask[static_cast<size_t>(b) * cfg.k + j] != T(0) ? 1 : 0;
  auto mask_add = make_key_mask<T>(tape, key_valid, B, cfg.net.heads, S, S);

  auto enc = transformer_encode(tape, m.params, "lat/enc", seq, cfg.net, mask_add, drop);
  auto readout = tape.select_token(enc, std::vector<int>(static_cast<size_t>(B), 0));
  mu_out = linear_fwd(tape, m.params, "lat/mu", readout);
  logvar_out = linear_fwd(tape, m.params, "lat/logvar", readout);
}

// Full training-time forward pass: posterior, reparameterized z, conditioned
// decoding, and the three-term loss.
template <typename T>
ForwardRefs<T> forward_foam(nets::Tape<T>& tape, FoamModel<T>& m, const TrainBatch<T>& batch,
                            ForesightMode fore_mode, std::type_identity_t<nets::DropoutCtx<T>*> drop) {
  using namespace nets;
  const FoamConfig& cfg = m.cfg;
  const int B = batch.batch;
  const int D = cfg.net.dim;
  const int H = cfg.image_size;

  ForwardRefs<T> r;
  auto actions_t = tape.constant(batch.actions, {B, cfg.k, cfg.action_dim});
  auto mask_t = tape.constant(batch.mask, {B, cfg.k});
  auto proprio_t = tape.constant(batch.proprio, {B, cfg.proprio_dim});
  auto frames_t = tape.constant(batch.frames, {B, 3, H, H});
  auto goal_t = tape.constant(batch.goal_feat, {B, cfg.net.goal_tokens, D});

  encode_latent_refs(tape, m, actions_t, proprio_t, batch.mask, drop, r.mu, r.logvar);

  // z = mu + exp(logvar / 2) * eps
  auto eps_t = tape.constant(batch.z_eps, {B, cfg.z_dim});
  auto sigma = tape.exp(tape.scale(r.logvar, T(0.5)));
  r.z = tape.add(r.mu, tape.mul(sigma, eps_t));

  auto memory = build_memory(tape, m, frames_t, proprio_t, batch.instr, goal_t, r.z);
  r.dec_tokens = decode_from_memory(tape, m, memory, drop);
  r.actions = linear_fwd(tape, m.params, "head/action", r.dec_tokens);

  r.loss_action = tape.masked_l1(r.actions, actions_t, mask_t);
  r.loss_kl = tape.kl_gauss(r.mu, r.logvar);

  const double beta_eff = cfg.beta_effective();
  if (fore_mode != ForesightMode::None && beta_eff != 0.0) {
    int selected;  // [B, S_goal * D]
    if (fore_mode == ForesightMode::All) {
      r.foresight_all = linear_fwd(tape, m.params, "head/fore", r.dec_tokens);
      selected = tape.select_token(r.foresight_all, batch.fore_idx);
    } else {
      auto sel_tok = tape.select_token(r.dec_tokens, batch.fore_idx);  // [B, D]
      selected = linear_fwd(tape, m.params, "head/fore", sel_tok);
    }
    auto pred = tape.reshape(selected, {B, cfg.net.goal_tokens, D});
    r.loss_foresight = tape.huber_mean(pred, goal_t, static_cast<T>(cfg.huber_delta));
    r.total = tape.lincomb({r.loss_action, r.loss_foresight, r.loss_kl},
                           {static_cast<T>(cfg.alpha), static_cast<T>(beta_eff),
                            static_cast<T>(cfg.gamma)});
  } else {
    r.total = tape.lincomb({r.loss_action, r.loss_kl},
                           {static_cast<T>(cfg.alpha), static_cast<T>(cfg.gamma)});
  }
  return r;
}

template <typename T>
LossBreakdown breakdown_from_refs(const nets::Tape<T>& tape, const ForwardRefs<T>& r,
                                  const FoamConfig& cfg) {
  LossBreakdown b;
  b.action_loss = static_cast<double>(tape.val(r.loss_action)[0]);
  b.foresight_loss =
      r.loss_foresight >= 0 ? static_cast<double>(tape.val(r.loss_foresight)[0]) : 0.0;
  b.kl_loss = static_cast<double>(tape.val(r.loss_kl)[0]);
  // Recompose in double so the reported total satisfies the weighted-sum
  // identity exactly; the tape's own total differs only by float rounding.
  b.total = cfg.alpha * b.action_loss + cfg.beta_effective() * b.foresight_loss +
            cfg.gamma * b.kl_loss;
  return b;
}

// Standalone reparameterization (outside the tape): rng == nullptr selects
// inference mode, where z is exactly zero.
template <typename T>
std::vector<T> reparameterize(const std::vector<T>& mu, const std::vector<T>& logvar,
                              Rng* rng) {
  if (mu.size() != logvar.size()) throw std::invalid_argument("reparameterize: size mismatch");
  std::vector<T> z(mu.size(), T(0));
  if (rng == nullptr) return z;  // inference: z = 0
  for (size_t i = 0; i < z.size(); ++i)
    z[i] = mu[i] + std::exp(logvar[i] / T(2)) * static_cast<T>(rng->gauss());
  return z;
}

// ---------------------------------------------------------------------------
// Float-precision entry points used by training and evaluation.

struct LatentOut {
  std::vector<float> mu, logvar;
};

struct DecoderOut {
  std::vector<float> actions;    // [k, action_dim], normalized
  std::vector<float> foresight;  // [k, S_goal, dim]
};

// Frozen goal-encoder features of one H x W x 3 frame -> [S_goal * D].
std::vector<float> encode_goal_tokens(const FoamModel<float>& m,
                                      const std::vector<float>& frame_hwc);

// Per-episode cached goal features for a demo set.
std::vector<std::vector<float>> cache_goal_features(const FoamModel<float>& m,
                                                    const dataset::DemoSet& set);

// Assembles a normalized batch from (episode, t) picks; draws the latent
// noise for each sample from rng.
TrainBatch<float> make_batch(const FoamModel<float>& m, const dataset::DemoSet& set,
                             const std::vector<std::vector<float>>& goal_cache,
                             const std::vector<std::pair<int, int>>& picks, Rng& rng);

// One forward/backward/Adam update. Throws (with the loss values in the
// message) if the loss goes non-finite.
LossBreakdown train_step(FoamModel<float>& m, const TrainBatch<float>& batch, Rng& step_rng);

// Posterior for one normalized chunk (test/inspection path).
LatentOut encode_latent(FoamModel<float>& m, const std::vector<float>& actions_norm,
                        const std::vector<float>& proprio_norm, const std::vector<float>& mask);

// Inference-time decode (z = 0, no dropout): one observation to a normalized
// action chunk [k * action_dim].
std::vector<float> decode_chunk(FoamModel<float>& m, const std::vector<float>& frame_hwc,
                                const std::vector<float>& proprio_raw,
                                const std::vector<int>& instr_tokens,
                                const std::vector<float>& goal_feat);

// Same pass but also materializing every foresight frame (shape contract
// and inspection path).
DecoderOut decode_full(FoamModel<float>& m, const std::vector<float>& frame_hwc,
                       const std::vector<float>& proprio_raw,
                       const std::vector<int>& instr_tokens,
                       const std::vector<float>& goal_feat);

void save_model(const FoamModel<float>& m, const std::string& path);
FoamModel<float> load_model(const std::string& path);

// FNV digest of the frozen goal-encoder parameter bytes (bit-stability check).
uint64_t goal_encoder_digest(const FoamModel<float>& m);

}  // namespace foam::policy
