#include "foam/policy.hpp"

#include <sstream>

namespace foam::policy {

using nets::Tape;

std::vector<float> encode_goal_tokens(const FoamModel<float>& m,
                                      const std::vector<float>& frame_hwc) {
  const int H = m.cfg.image_size;
  const auto chw = nets::hwc_to_chw<float>(frame_hwc, H, H);
  return nets::cnn_tokens_raw(m.params, "goal", chw, H, H, m.cfg.net);
}

std::vector<std::vector<float>> cache_goal_features(const FoamModel<float>& m,
                                                    const dataset::DemoSet& set) {
  std::vector<std::vector<float>> cache(set.episodes.size());
  for (size_t i = 0; i < set.episodes.size(); ++i)
    cache[i] = encode_goal_tokens(m, set.episodes[i].goal_image);
  return cache;
}

TrainBatch<float> make_batch(const FoamModel<float>& m, const dataset::DemoSet& set,
                             const std::vector<std::vector<float>>& goal_cache,
                             const std::vector<std::pair<int, int>>& picks, Rng& rng) {
  const FoamConfig& cfg = m.cfg;
  const int H = cfg.image_size;
  if (static_cast<int>(set.height) != H || static_cast<int>(set.width) != H)
    throw std::invalid_argument("make_batch: image size mismatch");
  TrainBatch<float> b;
  b.batch = static_cast<int>(picks.size());
  b.actions.reserve(static_cast<size_t>(b.batch) * cfg.k * cfg.action_dim);
  b.mask.reserve(static_cast<size_t>(b.batch) * cfg.k);
  b.frames.reserve(static_cast<size_t>(b.batch) * 3 * H * H);
  for (const auto& [ep, t] : picks) {
    auto chunk = dataset::sample_chunk(set, ep, t, cfg.k);
    dataset::normalize_rows(chunk.actions_chunk, m.norm.action_mean, m.norm.action_std);
    dataset::normalize_rows(chunk.proprio_t, m.norm.proprio_mean, m.norm.proprio_std);
    b.actions.insert(b.actions.end(), chunk.actions_chunk.begin(), chunk.actions_chunk.end());
    b.mask.insert(b.mask.end(), chunk.mask.begin(), chunk.mask.end());
    b.proprio.insert(b.proprio.end(), chunk.proprio_t.begin(), chunk.proprio_t.end());
    const auto chw = nets::hwc_to_chw<float>(chunk.frame_t, H, H);
    b.frames.insert(b.frames.end(), chw.begin(), chw.end());
    b.instr.push_back(chunk.instruction_tokens);
    const auto& feat = goal_cache.at(static_cast<size_t>(ep));
    b.goal_feat.insert(b.goal_feat.end(), feat.begin(), feat.end());
    b.fore_idx.push_back(foresight_target_index(t, cfg.k));
  }
  b.z_eps.resize(static_cast<size_t>(b.batch) * cfg.z_dim);
  for (auto& e : b.z_eps) e = static_cast<float>(rng.gauss());
  return b;
}

LossBreakdown train_step(FoamModel<float>& m, const TrainBatch<float>& batch, Rng& step_rng) {
  Tape<float> tape;
  nets::DropoutCtx<float> drop{&step_rng, static_cast<float>(m.cfg.net.dropout)};
  auto refs = forward_foam(tape, m, batch, ForesightMode::Selected, &drop);
  const LossBreakdown out = breakdown_from_refs(tape, refs, m.cfg);
  if (!std::isfinite(out.total)) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss at step " << m.params.step() + 1
        << " (action=" << out.action_loss << ", foresight=" << out.foresight_loss
        << ", kl=" << out.kl_loss << ")";
    throw std::runtime_error(msg.str());
  }
  m.params.zero_grads();
  tape.backward(refs.total);
  m.params.adam_step(static_cast<float>(m.cfg.lr), static_cast<float>(m.cfg.adam_beta1),
                     static_cast<float>(m.cfg.adam_beta2));
  return out;
}

LatentOut encode_latent(FoamModel<float>& m, const std::vector<float>& actions_norm,
                        const std::vector<float>& proprio_norm,
                        const std::vector<float>& mask) {
  const FoamConfig& cfg = m.cfg;
  if (actions_norm.size() != static_cast<size_t>(cfg.k) * cfg.action_dim ||
      mask.size() != static_cast<size_t>(cfg.k) ||
      proprio_norm.size() != static_cast<size_t>(cfg.proprio_dim))
    throw std::invalid_argument("encode_latent: shape mismatch");
  Tape<float> tape;
  auto actions = tape.constant(actions_norm, {1, cfg.k, cfg.action_dim});
  auto proprio = tape.constant(proprio_norm, {1, cfg.proprio_dim});
  int mu = -1, logvar = -1;
  encode_latent_refs(tape, m, actions, proprio, mask, nullptr, mu, logvar);
  return {tape.val(mu), tape.val(logvar)};
}

namespace {

// Shared inference-time forward: z = 0, no dropout. Returns the decoder
// tokens ref; refs for the heads are appended by the callers.
int infer_decode_tokens(Tape<float>& tape, FoamModel<float>& m,
                        const std::vector<float>& frame_hwc,
                        const std::vector<float>& proprio_raw,
                        const std::vector<int>& instr_tokens,
                        const std::vector<float>& goal_feat) {
  const FoamConfig& cfg = m.cfg;
  const int H = cfg.image_size;
  if (frame_hwc.size() != static_cast<size_t>(H) * H * 3)
    throw std::invalid_argument("decode: frame size mismatch");
  if (goal_feat.size() != static_cast<size_t>(cfg.net.goal_tokens) * cfg.net.dim)
    throw std::invalid_argument("decode: goal feature size mismatch");
  std::vector<float> prop = proprio_raw;
  dataset::normalize_rows(prop, m.norm.proprio_mean, m.norm.proprio_std);

  auto frames = tape.constant(nets::hwc_to_chw<float>(frame_hwc, H, H), {1, 3, H, H});
  auto proprio = tape.constant(prop, {1, cfg.proprio_dim});
  auto goal = tape.constant(goal_feat, {1, cfg.net.goal_tokens, cfg.net.dim});
  auto z = tape.constant(std::vector<float>(static_cast<size_t>(cfg.z_dim), 0.f),
                         {1, cfg.z_dim});
  auto memory = build_memory(tape, m, frames, proprio, {instr_tokens}, goal, z);
  return decode_from_memory(tape, m, memory, nullptr);
}

}  // namespace

std::vector<float> decode_chunk(FoamModel<float>& m, const std::vector<float>& frame_hwc,
                                const std::vector<float>& proprio_raw,
                                const std::vector<int>& instr_tokens,
                                const std::vector<float>& goal_feat) {
  Tape<float> tape;
  auto dec = infer_decode_tokens(tape, m, frame_hwc, proprio_raw, instr_tokens, goal_feat);
  auto actions = nets::linear_fwd(tape, m.params, "head/action", dec);
  return tape.val(actions);
}

DecoderOut decode_full(FoamModel<float>& m, const std::vector<float>& frame_hwc,
                       const std::vector<float>& proprio_raw,
                       const std::vector<int>& instr_tokens,
                       const std::vector<float>& goal_feat) {
  Tape<float> tape;
  auto dec = infer_decode_tokens(tape, m, frame_hwc, proprio_raw, instr_tokens, goal_feat);
  DecoderOut out;
  out.actions = tape.val(nets::linear_fwd(tape, m.params, "head/action", dec));
  out.foresight = tape.val(nets::linear_fwd(tape, m.params, "head/fore", dec));
  return out;
}

void save_model(const FoamModel<float>& m, const std::string& path) {
  nets::CheckpointData data;
  data.config_json = nlohmann::json(m.cfg).dump();
  nets::store_to_checkpoint(m.params, data);
  data.arrays.push_back({"norm/action_mean", {m.cfg.action_dim}, m.norm.action_mean});
  data.arrays.push_back({"norm/action_std", {m.cfg.action_dim}, m.norm.action_std});
  data.arrays.push_back({"norm/proprio_mean", {m.cfg.proprio_dim}, m.norm.proprio_mean});
  data.arrays.push_back({"norm/proprio_std", {m.cfg.proprio_dim}, m.norm.proprio_std});
  nets::save_checkpoint(path, data);
}

FoamModel<float> load_model(const std::string& path) {
  const nets::CheckpointData data = nets::load_checkpoint(path);
  const FoamConfig cfg = nlohmann::json::parse(data.config_json).get<FoamConfig>();
  FoamModel<float> m = build_foam_model<float>(cfg, /*seed=*/0);
  nets::store_from_checkpoint(data, m.params);
  m.norm.action_mean = data.find("norm/action_mean").data;
  m.norm.action_std = data.find("norm/action_std").data;
  m.norm.proprio_mean = data.find("norm/proprio_mean").data;
  m.norm.proprio_std = data.find("norm/proprio_std").data;
  return m;
}

uint64_t goal_encoder_digest(const FoamModel<float>& m) {
  Fnv1a h;
  for (const auto& p : m.params.all()) {
    if (!p.frozen) continue;
    h.update(p.name.data(), p.name.size());
    h.update_vec(p.value);
  }
  return h.h;
}

}  // namespace foam::policy
