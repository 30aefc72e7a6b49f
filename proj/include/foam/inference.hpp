#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "foam/policy.hpp"
#include "foam/toyenv.hpp"

namespace foam::inference {

// Buffered chunk execution: every control step the policy predicts a full
// action chunk; the buffer keeps all past chunks, and the command actually
// executed at step t is an exponentially weighted average of every not-yet-
// expired prediction for t. The aggregation range r is independent of the
// chunk size k the model was trained with.

struct AggConfig {
  int r = 12;          // how many recent chunk predictions participate
  double lambda = 0.05;  // weight decay: w_i = exp(-lambda * i)
  // i = 0 at the oldest window entry by default (older predictions carry
  // more weight); set to weight the newest prediction most instead.
  bool newest_first = false;
};

// Storage matrix [L x (L+k) x dim]: row s holds the chunk predicted at step
// s, spanning columns s..s+k-1. Cells never written stay NaN-poisoned so an
// out-of-contract read is loud.
class ActionBuffer {
 public:
  ActionBuffer(int horizon, int chunk, int dim);

  // Records the chunk predicted at step t (normalized action space,
  // row-major [k x dim]). Each step may be written exactly once.
  void insert(int t, const std::vector<float>& chunk);

  // Weighted average over the valid cells of column t among rows
  // max(0, t-r+1)..t, ordered oldest-first. Double accumulation.
  std::vector<double> aggregate(int t, const AggConfig& cfg) const;

  bool valid(int row, int col) const;
  int horizon() const { return L_; }
  int chunk() const { return k_; }
  int dim() const { return dim_; }

 private:
  int L_, k_, dim_;
  std::vector<float> storage_;
  std::vector<uint8_t> valid_;
  std::vector<uint8_t> row_filled_;
};

struct StepRecord {
  int t = 0;
  uint64_t chunk_digest = 0;        // hash of the raw predicted chunk
  std::array<double, 3> action{};   // denormalized command passed to the env
  double x = 0, y = 0;              // gripper position after the step
  bool gripper_open = true;
  bool held = false;
};

struct EpisodeResult {
  bool success = false;
  int steps = 0;
  std::vector<StepRecord> trajectory;
};

struct RolloutConfig {
  int L = 60;
  AggConfig agg{};
  uint64_t seed = 0;
  // Invoked before each step's observation; disturbance experiments use it
  // to drop the held object or add distractors mid-episode.
  std::function<void(toyenv::WorldState&, int)> pre_step;
};

// Full closed-loop episode: observe, decode a chunk with z = 0, insert,
// aggregate, denormalize, step. Stops at task success or after L steps.
EpisodeResult rollout(policy::FoamModel<float>& m, const toyenv::EnvConfig& env_cfg,
                      const toyenv::TaskSpec& task, const std::vector<float>& goal_image,
                      const RolloutConfig& rc);

// One JSON record per line: header with task/outcome, then per-step records.
void write_trace(const std::string& path, const toyenv::TaskSpec& task,
                 const EpisodeResult& result);

}  // namespace foam::inference
