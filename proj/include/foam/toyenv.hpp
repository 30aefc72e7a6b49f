#pragma once

#include <optional>
#include <string>
#include <vector>

#include "foam/common.hpp"

namespace foam::toyenv {

// Deterministic 2D manipulation world on the unit square. Rendering,
// dynamics and the scripted expert are pure functions of the state, so
// parallel rollouts need no synchronization.

constexpr int kImageSize = 32;
constexpr int kActionDim = 3;
constexpr int kProprioDim = 3;
constexpr int kHorizon = 40;          // fixed episode length T
constexpr double kMaxDelta = 0.05;    // per-axis displacement bound
constexpr double kAttachRadius = 0.03;
constexpr double kBowlRadius = 0.06;
constexpr double kSlotRadius = 0.05;

enum class ShapeKind { Block, Bowl, Slot, Locker };

enum class Family { PickToBowl, Transfer, InsertSlot, LockerPlace };

const char* family_name(Family f);
Family family_from_name(const std::string& name);

struct ObjectState {
  int id = 0;
  int color = 0;
  ShapeKind kind = ShapeKind::Block;
  Vec2 pos;
  std::optional<int> layer;        // set once a block is deposited in a locker
  std::optional<bool> lid_closed;  // lockers only
};

struct WorldState {
  Vec2 gripper_pos;
  bool gripper_open = true;
  std::optional<int> held_object;
  std::vector<ObjectState> objects;
  int step_count = 0;

  const ObjectState* find(int id) const;
  const ObjectState* first_of(ShapeKind kind) const;
};

struct TaskSpec {
  int task_id = 0;
  std::vector<int> instruction_tokens;
  Family family = Family::PickToBowl;
  int target_color = 0;
  std::optional<int> target_layer;  // locker layer, or slot index for InsertSlot
  std::string name;
  bool unseen = false;
};

struct Observation {
  std::vector<float> image;  // kImageSize x kImageSize x 3, row-major HWC, [0,1]
  std::vector<float> proprio;  // x, y, gripper_open
};

struct ActionCommand {
  Vec2 delta;               // clamped to +-kMaxDelta per axis by step()
  double gripper_cmd = 1.0; // >= 0.5 means open
};

enum class PerturbKind { DropHeld, AddDistractor };

// --- Instruction vocabulary ---

const std::vector<std::string>& vocab();
int token_id(const std::string& word);
std::vector<int> instruction_for(Family family, int color, std::optional<int> layer);
std::string instruction_text(const std::vector<int>& tokens);

int color_count();
const std::string& color_name(int color);
int color_id(const std::string& name);

// --- Scene/task registry ---

struct SpawnRect {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
  Vec2 sample(Rng& rng) const;
};

struct EnvConfig {
  int env_version = 1;
  std::vector<TaskSpec> tasks;
  SpawnRect gripper_spawn{0.35, 0.05, 0.65, 0.15};
  SpawnRect block_spawn{0.22, 0.45, 0.78, 0.82};
  SpawnRect bowl_spawn{0.20, 0.14, 0.80, 0.30};
  SpawnRect transfer_block_spawn{0.12, 0.50, 0.45, 0.82};
  SpawnRect transfer_zone_spawn{0.60, 0.15, 0.88, 0.42};
  SpawnRect slot_pair_spawn{0.30, 0.14, 0.70, 0.32};
  SpawnRect insert_block_spawn{0.22, 0.55, 0.78, 0.82};
  SpawnRect locker_spawn{0.38, 0.55, 0.62, 0.66};
  SpawnRect locker_block_spawn{0.25, 0.18, 0.75, 0.38};
  double expert_noise = 0.0;  // per-axis uniform noise bound for the expert

  const TaskSpec& task(int task_id) const;
  std::vector<TaskSpec> seen_tasks() const;
  std::vector<TaskSpec> unseen_tasks() const;
};

// Built-in toy registry: 10 seen tasks (4 pick, 2 transfer, 2 insert,
// 2 locker) plus 2 unseen recolored pick tasks.
EnvConfig default_env_config();
EnvConfig load_env_config(const std::string& path);
void save_env_config(const EnvConfig& cfg, const std::string& path);

// --- Core operations ---

WorldState reset(const EnvConfig& cfg, const TaskSpec& task, uint64_t seed);
WorldState step(const WorldState& state, const ActionCommand& a);
Observation observe(const WorldState& state);
bool check_success(const WorldState& state, const TaskSpec& task);
ActionCommand expert_action(const WorldState& state, const TaskSpec& task, Rng& rng,
                            double noise = 0.0);
WorldState perturb(const WorldState& state, PerturbKind kind);

// Render only; observe() = {render, proprio}.
std::vector<float> render(const WorldState& state);

}  // namespace foam::toyenv
