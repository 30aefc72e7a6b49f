#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "foam/dataset.hpp"
#include "foam/nets.hpp"
#include "foam/params.hpp"
#include "foam/toyenv.hpp"

namespace foam::goalgen {

// Toy goal-image predictor: maps (initial observation, instruction) to the
// expected scene after the task completes. The predictor is an
// instruction-conditioned image EDITOR: an instruction-modulated conv encoder
// reads the initial image into a grid of patch tokens, a shared per-token MLP
// emits one edit patch per grid cell, and the assembled edit is added to the
// initial image. Because the patch head slides with the scene, edits learned
// on one layout transfer to layouts never demonstrated.

// Defaults are the shipped operating point: wide enough conv stages to gate
// block colors apart (the yellow block sits closest to the background in
// pixel distance, so under-trained edits all drift toward "yellow moved"),
// while the patch-head width is kept at the point where adjacent-slot
// placements remain the dominant residual confusion.
struct GoalGenConfig {
  int dim = 96;          // conv encoder width (stages dim/4, dim/2, dim)
  int hidden = 128;      // per-token edit MLP width
  int text_raw = 24;     // instruction embedding width before the MLP
  int vocab = 32;
  int image_size = 32;   // must be divisible by 8 (three stride-2 stages)
  double lr = 1e-3;
  int batch = 8;
  int steps = 8000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
};

void to_json(nlohmann::json& j, const GoalGenConfig& c);
void from_json(const nlohmann::json& j, GoalGenConfig& c);

struct GoalPredictor {
  GoalGenConfig cfg;
  nets::ParamStore<float> params;
  bool trained = false;
};

// Fresh predictor with seed-determined parameters (untrained until fitted).
GoalPredictor build_goal_predictor(const GoalGenConfig& cfg, uint64_t seed);

// Pixel L2 regression on (initial image, instruction) -> goal image over the
// cleaned pair set. Deterministic given (config, seed). Throws on empty pairs.
GoalPredictor train_goal_predictor(const std::vector<dataset::GoalPairRecord>& pairs,
                                   const GoalGenConfig& cfg, uint64_t seed);

// Deterministic prediction, clamped to [0,1], same shape as the input image.
// Throws if the predictor has not been trained. (Non-const for parameter
// lookup only; prediction mutates nothing.)
std::vector<float> predict_goal(GoalPredictor& p, const std::vector<float>& initial_image,
                                const std::vector<int>& instruction_tokens);

// Mean squared training-set reconstruction error of the (clamped) predictions.
double training_mse(GoalPredictor& p, const std::vector<dataset::GoalPairRecord>& pairs);

uint64_t predictor_digest(const GoalPredictor& p);

void save_predictor(const GoalPredictor& p, const std::string& path);
GoalPredictor load_predictor(const std::string& path);

// --- Goal image provenance -------------------------------------------------

enum class GoalSource { ORACLE_LAST_FRAME, FILE, GENERATED };

const char* goal_source_name(GoalSource s);
GoalSource goal_source_from_string(const std::string& s);

// The oracle goal for a reset: run the scripted expert to the horizon and
// render the final frame. Pure function of (env config, task, seed).
std::vector<float> oracle_goal_image(const toyenv::EnvConfig& env_cfg,
                                     const toyenv::TaskSpec& task, uint64_t seed);

// Raw float image container for FILE-sourced goals.
void save_goal_image(const std::string& path, const std::vector<float>& image);
std::vector<float> load_goal_image(const std::string& path);

// Resolves a goal image for one rollout. `file_path` is required for FILE,
// `predictor` for GENERATED (where the goal is predicted from the reset's
// initial observation). Throws on a missing requirement.
std::vector<float> resolve_goal(GoalSource source, const toyenv::EnvConfig& env_cfg,
                                const toyenv::TaskSpec& task, uint64_t seed,
                                GoalPredictor* predictor, const std::string& file_path);

// --- Fidelity metrics -------------------------------------------------------

struct FidelityReport {
  std::vector<int> task_ids;              // row/column order of the matrix
  std::vector<std::string> task_names;
  std::vector<double> per_task_mse;       // prediction vs own oracle goal
  std::vector<double> confusion;          // [tasks x tasks], rows sum to 1
  double consistency = 0.0;               // argmin(row) == own task rate
  int most_confused_row = -1;             // task with the largest off-diagonal mass
  int most_confused_col = -1;
  int samples_per_task = 0;
};

nlohmann::json fidelity_to_json(const FidelityReport& r);

// Semantic-alignment measurement: for held-out resets of every seen task,
// compare the predicted goal against the oracle goals of all seen tasks from
// the same reset seed. A prediction is consistent when no other task's goal
// is strictly closer (ties count as consistent, so an oracle predictor is
// consistent by construction). GENERATED uses `predictor`; ORACLE_LAST_FRAME
// reproduces the oracle goal and serves as the 1.0-consistency baseline.
FidelityReport goal_fidelity_report(const toyenv::EnvConfig& env_cfg,
                                    const std::vector<toyenv::TaskSpec>& tasks,
                                    GoalSource source, GoalPredictor* predictor,
                                    int samples_per_task, uint64_t seed_base);

}  // namespace foam::goalgen
