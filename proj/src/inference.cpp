#include "foam/inference.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "foam/dataset.hpp"

namespace foam::inference {

ActionBuffer::ActionBuffer(int horizon, int chunk, int dim)
    : L_(horizon), k_(chunk), dim_(dim) {
  if (horizon < 1 || chunk < 1 || dim < 1)
    throw std::invalid_argument("ActionBuffer: horizon, chunk and dim must be positive");
  const size_t cols = static_cast<size_t>(L_) + k_;
  storage_.assign(static_cast<size_t>(L_) * cols * dim_,
                  std::numeric_limits<float>::quiet_NaN());
  valid_.assign(static_cast<size_t>(L_) * cols, 0);
  row_filled_.assign(static_cast<size_t>(L_), 0);
}

void ActionBuffer::insert(int t, const std::vector<float>& chunk) {
  if (t < 0 || t >= L_) throw std::invalid_argument("ActionBuffer::insert: step out of range");
  if (row_filled_[static_cast<size_t>(t)])
    throw std::invalid_argument("ActionBuffer::insert: step already has a prediction");
  if (chunk.size() != static_cast<size_t>(k_) * dim_)
    throw std::invalid_argument("ActionBuffer::insert: chunk size mismatch");
  for (float v : chunk)
    if (!std::isfinite(v))
      throw std::invalid_argument("ActionBuffer::insert: non-finite prediction");
  const size_t cols = static_cast<size_t>(L_) + k_;
  for (int j = 0; j < k_; ++j) {
    const size_t cell = static_cast<size_t>(t) * cols + (static_cast<size_t>(t) + j);
    valid_[cell] = 1;
    std::copy_n(chunk.begin() + static_cast<size_t>(j) * dim_, dim_,
                storage_.begin() + cell * dim_);
  }
  row_filled_[static_cast<size_t>(t)] = 1;
}

bool ActionBuffer::valid(int row, int col) const {
  if (row < 0 || row >= L_ || col < 0 || col >= L_ + k_) return false;
  return valid_[static_cast<size_t>(row) * (static_cast<size_t>(L_) + k_) + col] != 0;
}

std::vector<double> ActionBuffer::aggregate(int t, const AggConfig& cfg) const {
  if (t < 0 || t >= L_)
    throw std::invalid_argument("ActionBuffer::aggregate: step out of range");
  if (cfg.r < 1) throw std::invalid_argument("ActionBuffer::aggregate: range must be >= 1");
  if (cfg.r > L_)
    throw std::invalid_argument("ActionBuffer::aggregate: range exceeds the horizon");
  if (cfg.lambda < 0) throw std::invalid_argument("ActionBuffer::aggregate: negative decay");

  const size_t cols = static_cast<size_t>(L_) + k_;
  std::vector<const float*> window;  // oldest-first
  for (int s = std::max(0, t - cfg.r + 1); s <= t; ++s) {
    const size_t cell = static_cast<size_t>(s) * cols + t;
    if (valid_[cell]) window.push_back(storage_.data() + cell * dim_);
  }
  if (window.empty())
    throw std::runtime_error("ActionBuffer::aggregate: no predictions cover this step");

  std::vector<double> out(static_cast<size_t>(dim_), 0.0);
  double wsum = 0.0;
  const size_t n = window.size();
  for (size_t i = 0; i < n; ++i) {
    const size_t age = cfg.newest_first ? n - 1 - i : i;
    const double w = std::exp(-cfg.lambda * static_cast<double>(age));
    wsum += w;
    for (int d = 0; d < dim_; ++d) out[static_cast<size_t>(d)] += w * window[i][d];
  }
  for (double& v : out) v /= wsum;
  return out;
}

EpisodeResult rollout(policy::FoamModel<float>& m, const toyenv::EnvConfig& env_cfg,
                      const toyenv::TaskSpec& task, const std::vector<float>& goal_image,
                      const RolloutConfig& rc) {
  EpisodeResult result;
  toyenv::WorldState state = toyenv::reset(env_cfg, task, rc.seed);
  const std::vector<float> goal_feat = policy::encode_goal_tokens(m, goal_image);
  ActionBuffer buffer(rc.L, m.cfg.k, m.cfg.action_dim);

  for (int t = 0; t < rc.L; ++t) {
    if (rc.pre_step) rc.pre_step(state, t);
    const toyenv::Observation obs = toyenv::observe(state);
    const std::vector<float> chunk =
        policy::decode_chunk(m, obs.image, obs.proprio, task.instruction_tokens, goal_feat);
    buffer.insert(t, chunk);
    std::vector<double> action = buffer.aggregate(t, rc.agg);
    dataset::denormalize_rows(action, m.norm.action_mean, m.norm.action_std);

    toyenv::ActionCommand cmd;
    cmd.delta = {action[0], action[1]};
    cmd.gripper_cmd = action[2];
    state = toyenv::step(state, cmd);

    Fnv1a digest;
    digest.update_vec(chunk);
    StepRecord rec;
    rec.t = t;
    rec.chunk_digest = digest.h;
    rec.action = {action[0], action[1], action[2]};
    rec.x = state.gripper_pos.x;
    rec.y = state.gripper_pos.y;
    rec.gripper_open = state.gripper_open;
    rec.held = state.held_object.has_value();
    result.trajectory.push_back(rec);

    if (toyenv::check_success(state, task)) {
      result.success = true;
      result.steps = t + 1;
      return result;
    }
  }
  result.success = false;
  result.steps = rc.L;
  return result;
}

void write_trace(const std::string& path, const toyenv::TaskSpec& task,
                 const EpisodeResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_trace: cannot open " + path);
  nlohmann::json header{{"task", task.name},
                        {"task_id", task.task_id},
                        {"success", result.success},
                        {"steps", result.steps}};
  out << header.dump() << "\n";
  for (const auto& r : result.trajectory) {
    char digest_hex[17];
    std::snprintf(digest_hex, sizeof digest_hex, "%016llx",
                  static_cast<unsigned long long>(r.chunk_digest));
    nlohmann::json rec{{"t", r.t},
                       {"chunk_digest", digest_hex},
                       {"action", {r.action[0], r.action[1], r.action[2]}},
                       {"gripper", {r.x, r.y}},
                       {"gripper_open", r.gripper_open},
                       {"held", r.held}};
    out << rec.dump() << "\n";
  }
  if (!out.good()) throw std::runtime_error("write_trace: write failed for " + path);
}

}  // namespace foam::inference
