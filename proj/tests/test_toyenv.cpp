#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

#include "foam/common.hpp"
#include "foam/toyenv.hpp"

using namespace foam;
using namespace foam::toyenv;

namespace {

bool states_equal(const WorldState& a, const WorldState& b) {
  if (a.gripper_pos.x != b.gripper_pos.x || a.gripper_pos.y != b.gripper_pos.y) return false;
  if (a.gripper_open != b.gripper_open || a.held_object != b.held_object) return false;
  if (a.step_count != b.step_count || a.objects.size() != b.objects.size()) return false;
  for (size_t i = 0; i < a.objects.size(); ++i) {
    const auto &x = a.objects[i], &y = b.objects[i];
    if (x.id != y.id || x.color != y.color || x.kind != y.kind) return false;
    if (x.pos.x != y.pos.x || x.pos.y != y.pos.y) return false;
    if (x.layer != y.layer || x.lid_closed != y.lid_closed) return false;
  }
  return true;
}

struct Rollout {
  WorldState final_state;
  bool success = false;
};

Rollout run_expert(const EnvConfig& cfg, const TaskSpec& task, uint64_t seed, double noise) {
  WorldState s = reset(cfg, task, seed);
  Rng rng(seed_combine(seed, 777));
  for (int t = 0; t < kHorizon; ++t) s = step(s, expert_action(s, task, rng, noise));
  return {s, check_success(s, task)};
}

}  // namespace

TEST_CASE("reset is deterministic per seed and sensitive to it") {
  const EnvConfig cfg = default_env_config();
  const TaskSpec& pick_red = cfg.task(0);
  CHECK(states_equal(reset(cfg, pick_red, 7), reset(cfg, pick_red, 7)));

  const WorldState a = reset(cfg, pick_red, 1);
  const WorldState b = reset(cfg, pick_red, 2);
  const ObjectState* ta = a.objects.data();  // target block is object 0 (red first)
  const ObjectState* tb = b.objects.data();
  CHECK((ta->pos.x != tb->pos.x || ta->pos.y != tb->pos.y));
}

TEST_CASE("reset: locker scenes start closed with an empty gripper") {
  const EnvConfig cfg = default_env_config();
  for (uint64_t seed : {0ull, 3ull, 11ull}) {
    const WorldState s = reset(cfg, cfg.task(8), seed);
    const ObjectState* locker = s.first_of(ShapeKind::Locker);
    REQUIRE(locker != nullptr);
    CHECK(locker->lid_closed == true);
    CHECK(!s.held_object.has_value());
    CHECK(s.gripper_open);
  }
}

TEST_CASE("reset rejects unknown task ids") {
  const EnvConfig cfg = default_env_config();
  TaskSpec bogus = cfg.task(0);
  bogus.task_id = 99;
  CHECK_THROWS_AS((void)reset(cfg, bogus, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)cfg.task(99), std::invalid_argument);
}

TEST_CASE("reset keeps blocks separated and inside the workspace") {
  const EnvConfig cfg = default_env_config();
  for (const auto& task : cfg.tasks) {
    for (uint64_t seed = 0; seed < 50; ++seed) {
      const WorldState s = reset(cfg, task, seed);
      std::vector<Vec2> blocks;
      for (const auto& o : s.objects) {
        CHECK(o.pos.x >= 0.0);
        CHECK(o.pos.x <= 1.0);
        CHECK(o.pos.y >= 0.0);
        CHECK(o.pos.y <= 1.0);
        if (o.kind == ShapeKind::Block) blocks.push_back(o.pos);
      }
      for (size_t i = 0; i < blocks.size(); ++i)
        for (size_t j = i + 1; j < blocks.size(); ++j) CHECK(dist(blocks[i], blocks[j]) >= 0.1);
    }
  }
}

TEST_CASE("step: additive kinematics with clamping") {
  WorldState s;
  s.gripper_pos = {0.2, 0.5};
  s.gripper_open = true;

  WorldState z = step(s, {{0.0, 0.0}, 1.0});
  CHECK(z.gripper_pos.x == 0.2);
  CHECK(z.gripper_pos.y == 0.5);
  CHECK(z.step_count == 1);

  WorldState m = step(s, {{0.05, 0.0}, 1.0});
  CHECK(m.gripper_pos.x == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(m.gripper_pos.y == 0.5);

  // Oversized deltas are clamped to the per-axis bound.
  WorldState c = step(s, {{10.0, -10.0}, 1.0});
  CHECK(c.gripper_pos.x == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(c.gripper_pos.y == doctest::Approx(0.45).epsilon(1e-12));

  // Positions never leave the unit square.
  s.gripper_pos = {0.99, 0.01};
  WorldState e = step(s, {{0.05, -0.05}, 1.0});
  CHECK(e.gripper_pos.x == 1.0);
  CHECK(e.gripper_pos.y == 0.0);
}

TEST_CASE("step: attach within radius, release at position") {
  WorldState s;
  s.gripper_pos = {0.5, 0.5};
  s.gripper_open = true;
  ObjectState block;
  block.id = 0;
  block.color = 0;
  block.kind = ShapeKind::Block;
  block.pos = {0.52, 0.5};  // distance 0.02 < attach radius 0.03
  s.objects.push_back(block);

  WorldState g = step(s, {{0.0, 0.0}, 0.0});
  CHECK(g.held_object == 0);
  CHECK(!g.gripper_open);
  CHECK(g.objects[0].pos.x == g.gripper_pos.x);

  // The held block tracks the gripper.
  WorldState moved = step(g, {{0.03, -0.02}, 0.0});
  CHECK(moved.held_object == 0);
  CHECK(moved.objects[0].pos.x == moved.gripper_pos.x);
  CHECK(moved.objects[0].pos.y == moved.gripper_pos.y);

  // Opening releases at the current position.
  WorldState rel = step(moved, {{0.0, 0.0}, 1.0});
  CHECK(!rel.held_object.has_value());
  CHECK(rel.gripper_open);
  CHECK(rel.objects[0].pos.x == rel.gripper_pos.x);

  // Out of range: no attach.
  WorldState far = s;
  far.objects[0].pos = {0.6, 0.5};
  WorldState miss = step(far, {{0.0, 0.0}, 0.0});
  CHECK(!miss.held_object.has_value());
}

TEST_CASE("step: nearest block wins when several are in reach") {
  WorldState s;
  s.gripper_pos = {0.5, 0.5};
  s.gripper_open = true;
  for (int i = 0; i < 2; ++i) {
    ObjectState b;
    b.id = i;
    b.kind = ShapeKind::Block;
    b.pos = {0.5 + (i == 0 ? 0.025 : 0.01), 0.5};
    s.objects.push_back(b);
  }
  CHECK(step(s, {{0.0, 0.0}, 0.0}).held_object == 1);
}

TEST_CASE("render is pure and in range") {
  const EnvConfig cfg = default_env_config();
  const WorldState s = reset(cfg, cfg.task(2), 5);
  const auto img1 = render(s);
  const auto img2 = render(s);
  CHECK(img1 == img2);
  CHECK(img1.size() == static_cast<size_t>(kImageSize) * kImageSize * 3);
  for (float v : img1) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("render: closed locker hides its contents") {
  // Two states differing only in which layer holds the block must render
  // identically while the lid is closed, and differently once it is open.
  WorldState base;
  base.gripper_pos = {0.5, 0.1};
  base.gripper_open = true;
  ObjectState locker;
  locker.id = 0;
  locker.kind = ShapeKind::Locker;
  locker.pos = {0.5, 0.6};
  locker.lid_closed = true;
  ObjectState block;
  block.id = 1;
  block.color = 0;
  block.kind = ShapeKind::Block;

  WorldState bottom = base;
  block.layer = 0;
  block.pos = {0.5, 0.54};
  bottom.objects = {locker, block};

  WorldState top = base;
  block.layer = 1;
  block.pos = {0.5, 0.66};
  top.objects = {locker, block};

  CHECK(render(bottom) == render(top));

  WorldState bottom_open = bottom, top_open = top;
  bottom_open.objects[0].lid_closed = false;
  top_open.objects[0].lid_closed = false;
  CHECK(render(bottom_open) != render(top_open));
}

TEST_CASE("render: moving a visible block changes pixels") {
  const EnvConfig cfg = default_env_config();
  WorldState s = reset(cfg, cfg.task(0), 3);
  WorldState t = s;
  t.objects[0].pos.x = clampd(t.objects[0].pos.x + 0.2, 0.0, 1.0);
  CHECK(render(s) != render(t));
}

TEST_CASE("check_success: per-family predicates") {
  const EnvConfig cfg = default_env_config();

  // Freshly reset scenes never start successful.
  for (const auto& task : cfg.tasks)
    for (uint64_t seed = 0; seed < 20; ++seed) CHECK(!check_success(reset(cfg, task, seed), task));

  // Target block inside the bowl radius counts as success.
  WorldState s = reset(cfg, cfg.task(0), 4);
  const ObjectState* bowl = s.first_of(ShapeKind::Bowl);
  REQUIRE(bowl != nullptr);
  for (auto& o : s.objects) {
    if (o.kind == ShapeKind::Block && o.color == cfg.task(0).target_color)
      o.pos = {bowl->pos.x + 0.05, bowl->pos.y};
  }
  CHECK(check_success(s, cfg.task(0)));
  // ... but not when the block is held.
  WorldState held = s;
  held.held_object = 0;
  held.gripper_open = false;
  CHECK(!check_success(held, cfg.task(0)));

  // Wrong locker layer is a failure.
  WorldState l = reset(cfg, cfg.task(8), 4);  // target_layer = 0
  for (auto& o : l.objects) {
    if (o.kind == ShapeKind::Block) o.layer = 1;
  }
  CHECK(!check_success(l, cfg.task(8)));
  for (auto& o : l.objects) {
    if (o.kind == ShapeKind::Block) o.layer = 0;
  }
  CHECK(check_success(l, cfg.task(8)));
}

TEST_CASE("expert: noise-free rollouts repeat bitwise") {
  const EnvConfig cfg = default_env_config();
  for (int task_id : {0, 4, 6, 9}) {
    const Rollout a = run_expert(cfg, cfg.task(task_id), 13, 0.0);
    const Rollout b = run_expert(cfg, cfg.task(task_id), 13, 0.0);
    CHECK(states_equal(a.final_state, b.final_state));
    CHECK(render(a.final_state) == render(b.final_state));
  }
}

TEST_CASE("expert: closes the gripper at the grasp waypoint") {
  const EnvConfig cfg = default_env_config();
  WorldState s = reset(cfg, cfg.task(0), 21);
  // Teleport the gripper onto the target block: the controller must command
  // a close (< 0.5) rather than keep approaching.
  for (const auto& o : s.objects) {
    if (o.kind == ShapeKind::Block && o.color == cfg.task(0).target_color) s.gripper_pos = o.pos;
  }
  Rng rng(0);
  CHECK(expert_action(s, cfg.task(0), rng, 0.0).gripper_cmd < 0.5);
}

TEST_CASE("expert: >=99% success over 1000 seeds per task") {
  const EnvConfig cfg = default_env_config();
  for (const auto& task : cfg.tasks) {
    int ok = 0;
    const int n = 1000;
    for (uint64_t seed = 0; seed < n; ++seed) ok += run_expert(cfg, task, seed, 0.0).success;
    INFO("task ", task.name, " successes ", ok, "/", n);
    CHECK(ok >= 990);
  }
}

TEST_CASE("expert: noisy rollouts still succeed") {
  const EnvConfig cfg = default_env_config();
  for (const auto& task : cfg.tasks) {
    int ok = 0;
    const int n = 200;
    for (uint64_t seed = 0; seed < n; ++seed) ok += run_expert(cfg, task, seed, 0.005).success;
    INFO("task ", task.name, " successes ", ok, "/", n);
    CHECK(ok >= 198);
  }
}

TEST_CASE("expert: throws when the target color is absent") {
  const EnvConfig cfg = default_env_config();
  WorldState s = reset(cfg, cfg.task(0), 2);
  TaskSpec task = cfg.task(0);
  task.target_color = color_id("gray");
  Rng rng(0);
  CHECK_THROWS_AS((void)expert_action(s, task, rng, 0.0), std::invalid_argument);
}

TEST_CASE("ambiguity: locker layer pair shares one final goal image") {
  // Same seed, both locker tasks: the closed lid hides which layer holds the
  // block and the expert parks at the same home pose, so the final frames
  // must be bitwise identical. This holds with and without expert noise.
  const EnvConfig cfg = default_env_config();
  for (double noise : {0.0, 0.002}) {
    for (uint64_t seed = 0; seed < 100; ++seed) {
      const Rollout bottom = run_expert(cfg, cfg.task(8), seed, noise);
      const Rollout top = run_expert(cfg, cfg.task(9), seed, noise);
      REQUIRE(bottom.success);
      REQUIRE(top.success);
      CHECK(render(bottom.final_state) == render(top.final_state));
    }
  }
}

TEST_CASE("recolor closure: unseen scenes differ only in the recolored block") {
  const EnvConfig cfg = default_env_config();
  for (uint64_t seed = 0; seed < 25; ++seed) {
    const WorldState seen = reset(cfg, cfg.task(1), seed);     // pick_green
    const WorldState unseen = reset(cfg, cfg.task(10), seed);  // pick_purple
    REQUIRE(seen.objects.size() == unseen.objects.size());
    Vec2 recolored{-1, -1};
    for (size_t i = 0; i < seen.objects.size(); ++i) {
      CHECK(seen.objects[i].pos.x == unseen.objects[i].pos.x);
      CHECK(seen.objects[i].pos.y == unseen.objects[i].pos.y);
      if (seen.objects[i].color != unseen.objects[i].color) {
        CHECK(seen.objects[i].color == color_id("green"));
        CHECK(unseen.objects[i].color == color_id("purple"));
        recolored = seen.objects[i].pos;
      }
    }
    REQUIRE(recolored.x >= 0.0);

    // Pixel diffs are confined to the recolored block's square.
    const auto img_a = render(seen);
    const auto img_b = render(unseen);
    const int bx = static_cast<int>(recolored.x * kImageSize);
    const int by = static_cast<int>(recolored.y * kImageSize);
    bool any_diff = false;
    for (int py = 0; py < kImageSize; ++py) {
      for (int px = 0; px < kImageSize; ++px) {
        const size_t at = (static_cast<size_t>(py) * kImageSize + px) * 3;
        const bool diff = img_a[at] != img_b[at] || img_a[at + 1] != img_b[at + 1] ||
                          img_a[at + 2] != img_b[at + 2];
        any_diff = any_diff || diff;
        if (diff) {
          CHECK(std::abs(px - bx) <= 2);
          CHECK(std::abs(py - by) <= 2);
        }
      }
    }
    CHECK(any_diff);

    // Dynamics ignore color: the same action sequence yields the same motion.
    WorldState a = seen, b = unseen;
    Rng rng(seed_combine(seed, 9));
    for (int t = 0; t < 10; ++t) {
      const ActionCommand cmd{{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)},
                              rng.uniform()};
      a = step(a, cmd);
      b = step(b, cmd);
      CHECK(a.gripper_pos.x == b.gripper_pos.x);
      CHECK(a.held_object == b.held_object);
    }
  }
}

TEST_CASE("perturb: drop_held detaches in place and the expert recovers") {
  const EnvConfig cfg = default_env_config();
  for (int task_id : {0, 5, 7, 8}) {
    const TaskSpec& task = cfg.task(task_id);
    for (uint64_t seed = 0; seed < 50; ++seed) {
      WorldState s = reset(cfg, task, seed);
      Rng rng(seed_combine(seed, 777));
      int dropped_at = -1;
      for (int t = 0; t < kHorizon; ++t) {
        if (dropped_at < 0 && s.held_object) {
          // Carry for three steps, then force the object out of the gripper.
          int steps_held = 0;
          while (steps_held < 3 && t < kHorizon) {
            s = step(s, expert_action(s, task, rng, 0.0));
            ++t;
            ++steps_held;
          }
          if (!s.held_object) break;  // already released (short path)
          const WorldState d = perturb(s, PerturbKind::DropHeld);
          CHECK(!d.held_object.has_value());
          const ObjectState* blk = d.find(*s.held_object);
          REQUIRE(blk != nullptr);
          CHECK(blk->pos.x == d.gripper_pos.x);
          CHECK(blk->pos.y == d.gripper_pos.y);
          s = d;
          dropped_at = t;
        }
        s = step(s, expert_action(s, task, rng, 0.0));
      }
      INFO("task ", task.name, " seed ", seed, " dropped at ", dropped_at);
      CHECK(check_success(s, task));
    }
  }
}

TEST_CASE("perturb: drop_held requires a held object") {
  const EnvConfig cfg = default_env_config();
  const WorldState s = reset(cfg, cfg.task(0), 1);
  CHECK_THROWS_AS((void)perturb(s, PerturbKind::DropHeld), std::invalid_argument);
}

TEST_CASE("perturb: add_distractor inserts one clear block") {
  const EnvConfig cfg = default_env_config();
  for (int task_id : {0, 4, 6, 8}) {
    const WorldState s = reset(cfg, cfg.task(task_id), 9);
    const WorldState p = perturb(s, PerturbKind::AddDistractor);
    CHECK(p.objects.size() == s.objects.size() + 1);
    const ObjectState& extra = p.objects.back();
    CHECK(extra.kind == ShapeKind::Block);
    CHECK(extra.color == color_id("gray"));
    for (const auto& o : s.objects) CHECK(dist(extra.pos, o.pos) >= 0.1);
    // The success oracle is unaffected by the distractor.
    CHECK(check_success(p, cfg.task(task_id)) == check_success(s, cfg.task(task_id)));
  }
}

TEST_CASE("instructions derive deterministically from the task") {
  const EnvConfig cfg = default_env_config();
  for (const auto& task : cfg.tasks) {
    CHECK(task.instruction_tokens ==
          instruction_for(task.family, task.target_color, task.target_layer));
  }
  CHECK(instruction_text(cfg.task(0).instruction_tokens) == "pick red block into bowl");
  CHECK(instruction_text(cfg.task(9).instruction_tokens) == "place red block into top locker layer");
  CHECK(instruction_text(cfg.task(6).instruction_tokens) == "insert blue block into left slot");
  CHECK_THROWS_AS((void)token_id("flumph"), std::invalid_argument);
  CHECK_THROWS_AS((void)color_id("chartreuse"), std::invalid_argument);
}

TEST_CASE("env config round-trips through JSON") {
  const EnvConfig cfg = default_env_config();
  const std::string path = "test_env_config.json";
  save_env_config(cfg, path);
  const EnvConfig loaded = load_env_config(path);
  CHECK(loaded.tasks.size() == cfg.tasks.size());
  for (size_t i = 0; i < cfg.tasks.size(); ++i) {
    CHECK(loaded.tasks[i].task_id == cfg.tasks[i].task_id);
    CHECK(loaded.tasks[i].family == cfg.tasks[i].family);
    CHECK(loaded.tasks[i].target_color == cfg.tasks[i].target_color);
    CHECK(loaded.tasks[i].target_layer == cfg.tasks[i].target_layer);
    CHECK(loaded.tasks[i].instruction_tokens == cfg.tasks[i].instruction_tokens);
    CHECK(loaded.tasks[i].unseen == cfg.tasks[i].unseen);
  }
  CHECK(loaded.block_spawn.x0 == cfg.block_spawn.x0);
  CHECK(loaded.block_spawn.y1 == cfg.block_spawn.y1);
  // Scene construction agrees bitwise between original and round-tripped config.
  CHECK(states_equal(reset(cfg, cfg.task(3), 17), reset(loaded, loaded.task(3), 17)));
  std::remove(path.c_str());
}

TEST_CASE("env config load rejects bad versions") {
  const std::string path = "test_env_bad_version.json";
  {
    std::FILE* f = std::fopen(path.c_str(), "w");
    REQUIRE(f != nullptr);
    std::fputs("{\"env_version\": 2, \"tasks\": []}", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS((void)load_env_config(path), std::runtime_error);
  std::remove(path.c_str());
}
