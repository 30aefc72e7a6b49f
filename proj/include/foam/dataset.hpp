#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "foam/common.hpp"
#include "foam/toyenv.hpp"

namespace foam::dataset {

// One successful expert demonstration. frames[t] is the observation BEFORE
// action t is applied, so frames[T-1] shows the settled scene the expert
// leaves behind and doubles as the oracle goal image.
struct Episode {
  uint32_t task_id = 0;
  std::vector<int> instruction_tokens;
  std::vector<float> actions;     // T x action_dim, row-major
  std::vector<float> proprio;     // T x proprio_dim
  std::vector<float> frames;      // T x H x W x 3
  std::vector<float> goal_image;  // H x W x 3
  bool success = false;
};

struct DemoSet {
  uint32_t action_dim = toyenv::kActionDim;
  uint32_t horizon = toyenv::kHorizon;
  uint32_t height = toyenv::kImageSize;
  uint32_t width = toyenv::kImageSize;
  std::vector<Episode> episodes;

  size_t frame_size() const { return static_cast<size_t>(height) * width * 3; }
};

// Training view of one timestep: the k-step action chunk starting at t,
// padded past the episode end by repeating the last real action (mask 0).
struct ChunkSample {
  int t = 0;
  int episode_index = 0;
  std::vector<float> actions_chunk;  // k x action_dim
  std::vector<float> mask;           // k, 1 = real step
  std::vector<float> proprio_t;
  std::vector<float> frame_t;
  std::vector<int> instruction_tokens;
  std::vector<float> goal_image;
};

// Per-dimension z-score statistics with a floored std so constant channels
// stay finite.
struct NormStats {
  std::vector<float> action_mean, action_std;
  std::vector<float> proprio_mean, proprio_std;
};

struct GoalPairRecord {
  std::vector<float> initial_image;
  std::vector<int> instruction_tokens;
  std::vector<float> goal_image;
  uint32_t task_id = 0;
};

// Rolls the scripted expert until `per_task` successful episodes exist for
// every task; failed rollouts are discarded and re-seeded deterministically.
// Throws std::runtime_error if the retry budget is exhausted.
DemoSet collect_demos(const toyenv::EnvConfig& cfg, const std::vector<toyenv::TaskSpec>& tasks,
                      int per_task, uint64_t seed, double expert_noise);

ChunkSample sample_chunk(const DemoSet& set, int episode_index, int t, int k);

NormStats compute_norm_stats(const DemoSet& set);

// Row-major z-score transform; arithmetic runs in double regardless of the
// element type so denormalize(normalize(x)) recovers x to ~1e-16 relative
// before any storage rounding.
template <typename T>
void normalize_rows(std::vector<T>& rows, const std::vector<float>& mean,
                    const std::vector<float>& std) {
  const size_t dim = mean.size();
  for (size_t i = 0; i < rows.size(); i += dim)
    for (size_t d = 0; d < dim; ++d)
      rows[i + d] = static_cast<T>((static_cast<double>(rows[i + d]) - mean[d]) /
                                   static_cast<double>(std[d]));
}

template <typename T>
void denormalize_rows(std::vector<T>& rows, const std::vector<float>& mean,
                      const std::vector<float>& std) {
  const size_t dim = mean.size();
  for (size_t i = 0; i < rows.size(); i += dim)
    for (size_t d = 0; d < dim; ++d)
      rows[i + d] = static_cast<T>(static_cast<double>(rows[i + d]) *
                                       static_cast<double>(std[d]) +
                                   static_cast<double>(mean[d]));
}

// Emits one (first frame, instruction, final frame) record per episode whose
// last `kCleanWindow` frames are static within `clean_threshold` mean
// absolute pixel difference — the cleaning pass that drops episodes still in
// motion at the end.
std::vector<GoalPairRecord> extract_goal_pairs(const DemoSet& set, double clean_threshold = 1e-3);

void save_demoset(const DemoSet& set, const std::string& path);
DemoSet load_demoset(const std::string& path);

// Order-independent content digest: equal multisets of episodes (plus header
// geometry) produce equal digests regardless of episode order.
uint64_t demoset_digest(const DemoSet& set);

}  // namespace foam::dataset
