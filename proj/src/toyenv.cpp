#include "foam/toyenv.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace foam::toyenv {

namespace {

// Fixed palette. Blocks use entries 0..5; 6 is reserved for distractors
// injected by perturb(). Receptacles have their own colors below.
struct Rgb {
  float r, g, b;
};

const std::array<std::pair<const char*, Rgb>, 7> kColors = {{
    {"red", {0.85f, 0.10f, 0.10f}},
    {"green", {0.10f, 0.70f, 0.15f}},
    {"blue", {0.12f, 0.25f, 0.85f}},
    {"yellow", {0.90f, 0.80f, 0.10f}},
    {"purple", {0.60f, 0.10f, 0.75f}},
    {"orange", {0.95f, 0.55f, 0.05f}},
    {"gray", {0.45f, 0.45f, 0.50f}},
}};

constexpr Rgb kBackground{0.86f, 0.86f, 0.86f};
constexpr Rgb kBowlRing{0.10f, 0.40f, 0.35f};
constexpr Rgb kBowlInterior{0.75f, 0.80f, 0.78f};
constexpr Rgb kSlotBorder{0.25f, 0.25f, 0.30f};
constexpr Rgb kSlotInterior{0.92f, 0.90f, 0.82f};
constexpr Rgb kLockerLid{0.52f, 0.36f, 0.18f};
constexpr Rgb kLockerBorder{0.30f, 0.20f, 0.10f};
constexpr Rgb kLockerInterior{0.95f, 0.94f, 0.90f};
constexpr Rgb kGripperClosed{0.02f, 0.02f, 0.02f};
constexpr Rgb kGripperOpen{0.30f, 0.30f, 0.34f};

constexpr double kBlockHalf = 0.045;
constexpr double kSlotHalf = 0.055;
constexpr double kSlotBorderHalf = 0.030;
constexpr double kBowlRingInner = 0.035;
constexpr double kBowlRingOuter = 0.075;
constexpr double kLockerHalfW = 0.15;
constexpr double kLockerHalfH = 0.12;
constexpr double kLockerOpenMargin = 0.05;
constexpr double kLockerZoneOffset = 0.06;
constexpr double kExpertSpeed = 0.048;
// Phase tolerances must exceed noise*sqrt(2) or a noisy expert can orbit a
// waypoint forever; 0.008 covers the 0.005 per-axis noise bound.
constexpr double kGraspTol = 0.008;
constexpr double kReleaseTol = 0.008;
constexpr Vec2 kHomePose{0.5, 0.10};
constexpr double kHomeTol = 0.02;
constexpr double kBlockMinSep = 0.11;
constexpr double kReceptacleClearance = 0.14;
constexpr double kSlotPairOffset = 0.06;

const std::vector<std::string> kVocab = {
    "pick", "place", "transfer", "insert", "block",  "bowl",   "slot",  "locker",
    "zone", "into",  "to",       "left",   "right",  "bottom", "top",   "layer",
    "red",  "green", "blue",     "yellow", "purple", "orange", "gray"};

bool locker_lid_open_at(const ObjectState& locker, Vec2 gripper) {
  return std::abs(gripper.x - locker.pos.x) <= kLockerHalfW + kLockerOpenMargin &&
         std::abs(gripper.y - locker.pos.y) <= kLockerHalfH + kLockerOpenMargin;
}

Vec2 locker_zone_center(const ObjectState& locker, int layer) {
  return {locker.pos.x, locker.pos.y + (layer == 0 ? -kLockerZoneOffset : kLockerZoneOffset)};
}

// Returns the layer index the gripper is over, or -1.
int locker_zone_at(const ObjectState& locker, Vec2 gripper) {
  if (std::abs(gripper.x - locker.pos.x) > kLockerHalfW - 0.02) return -1;
  const double dy = gripper.y - locker.pos.y;
  if (dy >= -kLockerHalfH && dy < 0.0) return 0;
  if (dy >= 0.0 && dy <= kLockerHalfH) return 1;
  return -1;
}

const ObjectState* target_block(const WorldState& state, const TaskSpec& task) {
  for (const auto& o : state.objects) {
    if (o.kind == ShapeKind::Block && o.color == task.target_color) return &o;
  }
  return nullptr;
}

std::vector<const ObjectState*> slots_in_order(const WorldState& state) {
  std::vector<const ObjectState*> out;
  for (const auto& o : state.objects) {
    if (o.kind == ShapeKind::Slot) out.push_back(&o);
  }
  return out;
}

}  // namespace

const char* family_name(Family f) {
  switch (f) {
    case Family::PickToBowl: return "pick_to_bowl";
    case Family::Transfer: return "transfer";
    case Family::InsertSlot: return "insert_slot";
    case Family::LockerPlace: return "locker_place";
  }
  return "unknown";
}

Family family_from_name(const std::string& name) {
  if (name == "pick_to_bowl") return Family::PickToBowl;
  if (name == "transfer") return Family::Transfer;
  if (name == "insert_slot") return Family::InsertSlot;
  if (name == "locker_place") return Family::LockerPlace;
  throw std::invalid_argument("unknown task family: " + name);
}

const ObjectState* WorldState::find(int id) const {
  for (const auto& o : objects) {
    if (o.id == id) return &o;
  }
  return nullptr;
}

const ObjectState* WorldState::first_of(ShapeKind kind) const {
  for (const auto& o : objects) {
    if (o.kind == kind) return &o;
  }
  return nullptr;
}

const std::vector<std::string>& vocab() { return kVocab; }

int token_id(const std::string& word) {
  for (size_t i = 0; i < kVocab.size(); ++i) {
    if (kVocab[i] == word) return static_cast<int>(i);
  }
  throw std::invalid_argument("unknown vocabulary word: " + word);
}

int color_count() { return static_cast<int>(kColors.size()); }

const std::string& color_name(int color) {
  if (color < 0 || color >= color_count()) throw std::invalid_argument("bad color id");
  static std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [n, rgb] : kColors) v.emplace_back(n);
    return v;
  }();
  return names[color];
}

int color_id(const std::string& name) {
  for (int i = 0; i < color_count(); ++i) {
    if (name == kColors[i].first) return i;
  }
  throw std::invalid_argument("unknown color: " + name);
}

std::vector<int> instruction_for(Family family, int color, std::optional<int> layer) {
  const int color_tok = token_id(color_name(color));
  switch (family) {
    case Family::PickToBowl:
      return {token_id("pick"), color_tok, token_id("block"), token_id("into"), token_id("bowl")};
    case Family::Transfer:
      return {token_id("transfer"), color_tok, token_id("block"), token_id("to"), token_id("zone")};
    case Family::InsertSlot:
      return {token_id("insert"), color_tok, token_id("block"), token_id("into"),
              token_id(layer.value_or(0) == 0 ? "left" : "right"), token_id("slot")};
    case Family::LockerPlace:
      return {token_id("place"), color_tok, token_id("block"), token_id("into"),
              token_id(layer.value_or(0) == 0 ? "bottom" : "top"), token_id("locker"),
              token_id("layer")};
  }
  throw std::invalid_argument("bad family");
}

std::string instruction_text(const std::vector<int>& tokens) {
  std::string s;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= static_cast<int>(kVocab.size()))
      throw std::invalid_argument("token id out of range");
    if (i) s += ' ';
    s += kVocab[tokens[i]];
  }
  return s;
}

Vec2 SpawnRect::sample(Rng& rng) const {
  return {rng.uniform(x0, x1), rng.uniform(y0, y1)};
}

const TaskSpec& EnvConfig::task(int task_id) const {
  for (const auto& t : tasks) {
    if (t.task_id == task_id) return t;
  }
  throw std::invalid_argument("unknown task_id: " + std::to_string(task_id));
}

std::vector<TaskSpec> EnvConfig::seen_tasks() const {
  std::vector<TaskSpec> out;
  for (const auto& t : tasks)
    if (!t.unseen) out.push_back(t);
  return out;
}

std::vector<TaskSpec> EnvConfig::unseen_tasks() const {
  std::vector<TaskSpec> out;
  for (const auto& t : tasks)
    if (t.unseen) out.push_back(t);
  return out;
}

namespace {

TaskSpec make_task(int id, Family family, const std::string& color,
                   std::optional<int> layer, const std::string& name, bool unseen) {
  TaskSpec t;
  t.task_id = id;
  t.family = family;
  t.target_color = color_id(color);
  t.target_layer = layer;
  t.instruction_tokens = instruction_for(family, t.target_color, layer);
  t.name = name;
  t.unseen = unseen;
  return t;
}

}  // namespace

EnvConfig default_env_config() {
  EnvConfig cfg;
  cfg.tasks = {
      make_task(0, Family::PickToBowl, "red", std::nullopt, "pick_red", false),
      make_task(1, Family::PickToBowl, "green", std::nullopt, "pick_green", false),
      make_task(2, Family::PickToBowl, "blue", std::nullopt, "pick_blue", false),
      make_task(3, Family::PickToBowl, "yellow", std::nullopt, "pick_yellow", false),
      make_task(4, Family::Transfer, "red", std::nullopt, "transfer_red", false),
      make_task(5, Family::Transfer, "yellow", std::nullopt, "transfer_yellow", false),
      make_task(6, Family::InsertSlot, "blue", 0, "insert_left", false),
      make_task(7, Family::InsertSlot, "blue", 1, "insert_right", false),
      make_task(8, Family::LockerPlace, "red", 0, "locker_bottom", false),
      make_task(9, Family::LockerPlace, "red", 1, "locker_top", false),
      make_task(10, Family::PickToBowl, "purple", std::nullopt, "pick_purple", true),
      make_task(11, Family::PickToBowl, "orange", std::nullopt, "pick_orange", true),
  };
  return cfg;
}

namespace {

using nlohmann::json;

json rect_to_json(const SpawnRect& r) { return json{{"x0", r.x0}, {"y0", r.y0}, {"x1", r.x1}, {"y1", r.y1}}; }

SpawnRect rect_from_json(const json& j) {
  return SpawnRect{j.at("x0").get<double>(), j.at("y0").get<double>(),
                   j.at("x1").get<double>(), j.at("y1").get<double>()};
}

}  // namespace

void save_env_config(const EnvConfig& cfg, const std::string& path) {
  json j;
  j["env_version"] = cfg.env_version;
  j["expert_noise"] = cfg.expert_noise;
  j["spawn"] = {
      {"gripper", rect_to_json(cfg.gripper_spawn)},
      {"pick_blocks", rect_to_json(cfg.block_spawn)},
      {"bowl", rect_to_json(cfg.bowl_spawn)},
      {"transfer_blocks", rect_to_json(cfg.transfer_block_spawn)},
      {"transfer_zone", rect_to_json(cfg.transfer_zone_spawn)},
      {"slot_pair", rect_to_json(cfg.slot_pair_spawn)},
      {"insert_block", rect_to_json(cfg.insert_block_spawn)},
      {"locker", rect_to_json(cfg.locker_spawn)},
      {"locker_block", rect_to_json(cfg.locker_block_spawn)},
  };
  j["tasks"] = json::array();
  for (const auto& t : cfg.tasks) {
    json tj;
    tj["task_id"] = t.task_id;
    tj["family"] = family_name(t.family);
    tj["color"] = color_name(t.target_color);
    if (t.target_layer) tj["layer"] = *t.target_layer;
    tj["name"] = t.name;
    tj["unseen"] = t.unseen;
    j["tasks"].push_back(tj);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write env config: " + path);
  out << j.dump(2) << "\n";
}

EnvConfig load_env_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read env config: " + path);
  json j;
  in >> j;
  if (!j.contains("env_version")) throw std::runtime_error("env config missing env_version");
  if (j["env_version"].get<int>() != 1)
    throw std::runtime_error("unsupported env_version: " + j["env_version"].dump());
  EnvConfig cfg;
  cfg.env_version = 1;
  cfg.expert_noise = j.value("expert_noise", 0.0);
  if (j.contains("spawn")) {
    const auto& s = j["spawn"];
    if (s.contains("gripper")) cfg.gripper_spawn = rect_from_json(s["gripper"]);
    if (s.contains("pick_blocks")) cfg.block_spawn = rect_from_json(s["pick_blocks"]);
    if (s.contains("bowl")) cfg.bowl_spawn = rect_from_json(s["bowl"]);
    if (s.contains("transfer_blocks")) cfg.transfer_block_spawn = rect_from_json(s["transfer_blocks"]);
    if (s.contains("transfer_zone")) cfg.transfer_zone_spawn = rect_from_json(s["transfer_zone"]);
    if (s.contains("slot_pair")) cfg.slot_pair_spawn = rect_from_json(s["slot_pair"]);
    if (s.contains("insert_block")) cfg.insert_block_spawn = rect_from_json(s["insert_block"]);
    if (s.contains("locker")) cfg.locker_spawn = rect_from_json(s["locker"]);
    if (s.contains("locker_block")) cfg.locker_block_spawn = rect_from_json(s["locker_block"]);
  }
  for (const auto& tj : j.at("tasks")) {
    const Family family = family_from_name(tj.at("family").get<std::string>());
    std::optional<int> layer;
    if (tj.contains("layer")) layer = tj["layer"].get<int>();
    cfg.tasks.push_back(make_task(tj.at("task_id").get<int>(), family,
                                  tj.at("color").get<std::string>(), layer,
                                  tj.value("name", std::string("task")), tj.value("unseen", false)));
  }
  return cfg;
}

namespace {

// Rejection-sample a position at least min_sep away from taken points.
Vec2 sample_clear(const SpawnRect& rect, Rng& rng, const std::vector<Vec2>& taken,
                  double min_sep) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    Vec2 p = rect.sample(rng);
    bool ok = true;
    for (const auto& q : taken) {
      if (dist(p, q) < min_sep) {
        ok = false;
        break;
      }
    }
    if (ok) return p;
  }
  return rect.sample(rng);  // degenerate rects fall back to overlap
}

// Scene block colors for a pick task. Unseen colors take the slot of the
// color they recolor (purple <- green, blue <- orange), so the layout of an
// unseen scene matches the seen scene from the same seed exactly.
std::vector<int> pick_scene_colors(const TaskSpec& task) {
  std::vector<int> colors = {color_id("red"), color_id("green"), color_id("blue"),
                             color_id("yellow")};
  if (std::find(colors.begin(), colors.end(), task.target_color) == colors.end()) {
    if (task.target_color == color_id("purple")) {
      colors[1] = task.target_color;
    } else {
      colors[2] = task.target_color;
    }
  }
  return colors;
}

}  // namespace

WorldState reset(const EnvConfig& cfg, const TaskSpec& task, uint64_t seed) {
  (void)cfg.task(task.task_id);  // validates task_id against the registry
  // The stream is seeded from (seed, family) only: tasks sharing a scene
  // template produce identical layouts for the same seed.
  Rng rng(seed_combine(seed, static_cast<uint64_t>(task.family) + 101));
  WorldState s;
  s.gripper_pos = cfg.gripper_spawn.sample(rng);
  s.gripper_open = true;
  int next_id = 0;
  std::vector<Vec2> taken;

  auto add_block = [&](int color, Vec2 pos) {
    ObjectState o;
    o.id = next_id++;
    o.color = color;
    o.kind = ShapeKind::Block;
    o.pos = pos;
    s.objects.push_back(o);
    taken.push_back(pos);
  };
  auto add_shape = [&](ShapeKind kind, Vec2 pos) {
    ObjectState o;
    o.id = next_id++;
    o.kind = kind;
    o.pos = pos;
    if (kind == ShapeKind::Locker) o.lid_closed = true;
    s.objects.push_back(o);
    taken.push_back(pos);
  };

  switch (task.family) {
    case Family::PickToBowl: {
      for (int c : pick_scene_colors(task)) add_block(c, sample_clear(cfg.block_spawn, rng, taken, kBlockMinSep));
      add_shape(ShapeKind::Bowl, sample_clear(cfg.bowl_spawn, rng, taken, kReceptacleClearance));
      break;
    }
    case Family::Transfer: {
      add_block(color_id("red"), sample_clear(cfg.transfer_block_spawn, rng, taken, kBlockMinSep));
      add_block(color_id("yellow"), sample_clear(cfg.transfer_block_spawn, rng, taken, kBlockMinSep));
      add_shape(ShapeKind::Slot, sample_clear(cfg.transfer_zone_spawn, rng, taken, kReceptacleClearance));
      break;
    }
    case Family::InsertSlot: {
      add_block(color_id("blue"), sample_clear(cfg.insert_block_spawn, rng, taken, kBlockMinSep));
      const Vec2 c = cfg.slot_pair_spawn.sample(rng);
      add_shape(ShapeKind::Slot, {c.x - kSlotPairOffset, c.y});
      add_shape(ShapeKind::Slot, {c.x + kSlotPairOffset, c.y});
      break;
    }
    case Family::LockerPlace: {
      add_block(color_id("red"), sample_clear(cfg.locker_block_spawn, rng, taken, kBlockMinSep));
      add_shape(ShapeKind::Locker, cfg.locker_spawn.sample(rng));
      break;
    }
  }
  return s;
}

WorldState step(const WorldState& state, const ActionCommand& a) {
  WorldState s = state;
  const double dx = clampd(a.delta.x, -kMaxDelta, kMaxDelta);
  const double dy = clampd(a.delta.y, -kMaxDelta, kMaxDelta);
  s.gripper_pos.x = clampd(s.gripper_pos.x + dx, 0.0, 1.0);
  s.gripper_pos.y = clampd(s.gripper_pos.y + dy, 0.0, 1.0);

  const bool want_open = a.gripper_cmd >= 0.5;

  // Held object tracks the gripper.
  if (s.held_object) {
    for (auto& o : s.objects) {
      if (o.id == *s.held_object) o.pos = s.gripper_pos;
    }
  }

  const ObjectState* locker = s.first_of(ShapeKind::Locker);
  const bool lid_open_now = locker && locker_lid_open_at(*locker, s.gripper_pos);

  if (!want_open && !s.held_object) {
    // A commanded-closed gripper grabs the nearest free block in reach.
    // This also covers re-grasping after a forced drop, where the gripper
    // was never commanded open in between.
    int best = -1;
    double best_d = 0.0;
    for (const auto& o : s.objects) {
      if (o.kind != ShapeKind::Block) continue;
      if (o.layer && !lid_open_now) continue;  // contents of a closed locker
      const double d = dist(o.pos, s.gripper_pos);
      if (d > kAttachRadius) continue;
      if (best < 0 || d < best_d) {  // ties go to the lowest id
        best = o.id;
        best_d = d;
      }
    }
    if (best >= 0) {
      s.held_object = best;
      for (auto& o : s.objects) {
        if (o.id == best) {
          o.pos = s.gripper_pos;
          o.layer.reset();
        }
      }
    }
  } else if (want_open && !s.gripper_open && s.held_object) {
    // Release at the current position; over an open locker layer zone the
    // block is deposited into that layer.
    for (auto& o : s.objects) {
      if (o.id != *s.held_object) continue;
      o.pos = s.gripper_pos;
      if (locker && lid_open_now) {
        const int zone = locker_zone_at(*locker, s.gripper_pos);
        if (zone >= 0) {
          o.layer = zone;
          o.pos = locker_zone_center(*locker, zone);
        }
      }
    }
    s.held_object.reset();
  }

  s.gripper_open = want_open;

  for (auto& o : s.objects) {
    if (o.kind == ShapeKind::Locker) o.lid_closed = !locker_lid_open_at(o, s.gripper_pos);
  }
  s.step_count += 1;
  return s;
}

namespace {

inline void put_pixel(std::vector<float>& img, int px, int py, Rgb c) {
  if (px < 0 || px >= kImageSize || py < 0 || py >= kImageSize) return;
  float* p = img.data() + (static_cast<size_t>(py) * kImageSize + px) * 3;
  p[0] = c.r;
  p[1] = c.g;
  p[2] = c.b;
}

// Iterates pixels whose centers fall in the world-space bbox and calls
// fn(px, py, wx, wy) with the pixel's center in world coordinates.
template <typename Fn>
void for_pixels_in(double x0, double y0, double x1, double y1, Fn&& fn) {
  const int px0 = std::max(0, static_cast<int>(std::floor(x0 * kImageSize - 0.5)));
  const int py0 = std::max(0, static_cast<int>(std::floor(y0 * kImageSize - 0.5)));
  const int px1 = std::min(kImageSize - 1, static_cast<int>(std::ceil(x1 * kImageSize - 0.5)));
  const int py1 = std::min(kImageSize - 1, static_cast<int>(std::ceil(y1 * kImageSize - 0.5)));
  for (int py = py0; py <= py1; ++py) {
    const double wy = (py + 0.5) / kImageSize;
    for (int px = px0; px <= px1; ++px) {
      const double wx = (px + 0.5) / kImageSize;
      fn(px, py, wx, wy);
    }
  }
}

void draw_block(std::vector<float>& img, Vec2 pos, int color) {
  const Rgb c = kColors[static_cast<size_t>(color)].second;
  for_pixels_in(pos.x - kBlockHalf, pos.y - kBlockHalf, pos.x + kBlockHalf, pos.y + kBlockHalf,
                [&](int px, int py, double wx, double wy) {
                  if (std::abs(wx - pos.x) <= kBlockHalf && std::abs(wy - pos.y) <= kBlockHalf)
                    put_pixel(img, px, py, c);
                });
}

}  // namespace

std::vector<float> render(const WorldState& state) {
  std::vector<float> img(static_cast<size_t>(kImageSize) * kImageSize * 3);
  for (size_t i = 0; i < img.size(); i += 3) {
    img[i] = kBackground.r;
    img[i + 1] = kBackground.g;
    img[i + 2] = kBackground.b;
  }

  for (const auto& o : state.objects) {
    if (o.kind == ShapeKind::Bowl) {
      for_pixels_in(o.pos.x - kBowlRingOuter, o.pos.y - kBowlRingOuter,
                    o.pos.x + kBowlRingOuter, o.pos.y + kBowlRingOuter,
                    [&](int px, int py, double wx, double wy) {
                      const double r = std::hypot(wx - o.pos.x, wy - o.pos.y);
                      if (r <= kBowlRingInner)
                        put_pixel(img, px, py, kBowlInterior);
                      else if (r <= kBowlRingOuter)
                        put_pixel(img, px, py, kBowlRing);
                    });
    } else if (o.kind == ShapeKind::Slot) {
      for_pixels_in(o.pos.x - kSlotHalf, o.pos.y - kSlotHalf, o.pos.x + kSlotHalf,
                    o.pos.y + kSlotHalf, [&](int px, int py, double wx, double wy) {
                      const double ax = std::abs(wx - o.pos.x);
                      const double ay = std::abs(wy - o.pos.y);
                      if (ax > kSlotHalf || ay > kSlotHalf) return;
                      put_pixel(img, px, py,
                                std::max(ax, ay) >= kSlotBorderHalf ? kSlotBorder : kSlotInterior);
                    });
    }
  }

  const ObjectState* locker = state.first_of(ShapeKind::Locker);
  if (locker) {
    const bool closed = locker->lid_closed.value_or(true);
    for_pixels_in(locker->pos.x - kLockerHalfW, locker->pos.y - kLockerHalfH,
                  locker->pos.x + kLockerHalfW, locker->pos.y + kLockerHalfH,
                  [&](int px, int py, double wx, double wy) {
                    const double ax = std::abs(wx - locker->pos.x);
                    const double ay = std::abs(wy - locker->pos.y);
                    if (ax > kLockerHalfW || ay > kLockerHalfH) return;
                    const bool border = ax >= kLockerHalfW - 0.015 || ay >= kLockerHalfH - 0.015;
                    if (closed) {
                      put_pixel(img, px, py, border ? kLockerBorder : kLockerLid);
                    } else {
                      // Open locker: interior with a shelf divider; contents
                      // are drawn by the block pass below.
                      const bool divider = ay <= 0.008;
                      put_pixel(img, px, py,
                                border || divider ? kLockerBorder : kLockerInterior);
                    }
                  });
  }

  for (const auto& o : state.objects) {
    if (o.kind != ShapeKind::Block) continue;
    if (o.layer && locker && locker->lid_closed.value_or(true)) continue;  // hidden contents
    draw_block(img, o.pos, o.color);
  }

  const Rgb gc = state.gripper_open ? kGripperOpen : kGripperClosed;
  const int gx = static_cast<int>(std::floor(state.gripper_pos.x * kImageSize));
  const int gy = static_cast<int>(std::floor(state.gripper_pos.y * kImageSize));
  put_pixel(img, gx, gy, gc);
  put_pixel(img, gx - 1, gy, gc);
  put_pixel(img, gx + 1, gy, gc);
  put_pixel(img, gx, gy - 1, gc);
  put_pixel(img, gx, gy + 1, gc);
  return img;
}

Observation observe(const WorldState& state) {
  Observation obs;
  obs.image = render(state);
  obs.proprio = {static_cast<float>(state.gripper_pos.x), static_cast<float>(state.gripper_pos.y),
                 state.gripper_open ? 1.0f : 0.0f};
  return obs;
}

bool check_success(const WorldState& state, const TaskSpec& task) {
  const ObjectState* block = target_block(state, task);
  if (!block) return false;
  const bool held = state.held_object && *state.held_object == block->id;
  switch (task.family) {
    case Family::PickToBowl: {
      const ObjectState* bowl = state.first_of(ShapeKind::Bowl);
      return bowl && !held && dist(block->pos, bowl->pos) <= kBowlRadius;
    }
    case Family::Transfer: {
      const auto slots = slots_in_order(state);
      return !slots.empty() && !held && dist(block->pos, slots[0]->pos) <= kSlotRadius;
    }
    case Family::InsertSlot: {
      const auto slots = slots_in_order(state);
      const size_t idx = static_cast<size_t>(task.target_layer.value_or(0));
      return idx < slots.size() && !held && dist(block->pos, slots[idx]->pos) <= kSlotRadius;
    }
    case Family::LockerPlace:
      return block->layer && *block->layer == task.target_layer.value_or(0);
  }
  return false;
}

ActionCommand expert_action(const WorldState& state, const TaskSpec& task, Rng& rng,
                            double noise) {
  const ObjectState* block = target_block(state, task);
  if (!block) throw std::invalid_argument("expert: no block with the task's target color");

  Vec2 place;
  switch (task.family) {
    case Family::PickToBowl: {
      const ObjectState* bowl = state.first_of(ShapeKind::Bowl);
      if (!bowl) throw std::invalid_argument("expert: scene has no bowl");
      place = bowl->pos;
      break;
    }
    case Family::Transfer: {
      const auto slots = slots_in_order(state);
      if (slots.empty()) throw std::invalid_argument("expert: scene has no zone");
      place = slots[0]->pos;
      break;
    }
    case Family::InsertSlot: {
      const auto slots = slots_in_order(state);
      const size_t idx = static_cast<size_t>(task.target_layer.value_or(0));
      if (idx >= slots.size()) throw std::invalid_argument("expert: missing slot");
      place = slots[idx]->pos;
      break;
    }
    case Family::LockerPlace: {
      const ObjectState* locker = state.first_of(ShapeKind::Locker);
      if (!locker) throw std::invalid_argument("expert: scene has no locker");
      place = locker_zone_center(*locker, task.target_layer.value_or(0));
      break;
    }
  }

  auto move_toward = [&](Vec2 target, double grip) {
    ActionCommand a;
    a.delta = {clampd(target.x - state.gripper_pos.x, -kExpertSpeed, kExpertSpeed),
               clampd(target.y - state.gripper_pos.y, -kExpertSpeed, kExpertSpeed)};
    if (noise > 0.0) {
      a.delta.x = clampd(a.delta.x + rng.uniform(-noise, noise), -kMaxDelta, kMaxDelta);
      a.delta.y = clampd(a.delta.y + rng.uniform(-noise, noise), -kMaxDelta, kMaxDelta);
    }
    a.gripper_cmd = grip;
    return a;
  };

  if (check_success(state, task)) {
    // Retreat to the home pose so episodes end in a settled frame. The last
    // hop is noise-free and unclamped (home tolerance < speed), and because
    // the remaining offset is computed exactly at this magnitude the gripper
    // lands on the home pose bitwise — scenes that should share a goal image
    // do so exactly, not approximately.
    if (dist(state.gripper_pos, kHomePose) > kHomeTol) return move_toward(kHomePose, 1.0);
    return ActionCommand{
        {kHomePose.x - state.gripper_pos.x, kHomePose.y - state.gripper_pos.y}, 1.0};
  }

  const bool holding_target = state.held_object && *state.held_object == block->id;
  if (!holding_target) {
    if (state.held_object) return ActionCommand{{0.0, 0.0}, 1.0};  // drop a wrong block
    if (dist(state.gripper_pos, block->pos) > kGraspTol) return move_toward(block->pos, 1.0);
    return ActionCommand{{0.0, 0.0}, 0.0};  // grasp
  }
  if (dist(state.gripper_pos, place) > kReleaseTol) return move_toward(place, 0.0);
  return ActionCommand{{0.0, 0.0}, 1.0};  // release
}

WorldState perturb(const WorldState& state, PerturbKind kind) {
  WorldState s = state;
  if (kind == PerturbKind::DropHeld) {
    if (!s.held_object) throw std::invalid_argument("perturb: drop_held with empty gripper");
    // The object is forced out of the gripper and left where it is; the
    // gripper's open/closed state is untouched.
    s.held_object.reset();
    return s;
  }
  // AddDistractor: one extra gray block at the first free grid location.
  int max_id = -1;
  for (const auto& o : s.objects) max_id = std::max(max_id, o.id);
  ObjectState extra;
  extra.id = max_id + 1;
  extra.color = color_id("gray");
  extra.kind = ShapeKind::Block;
  extra.pos = {0.05, 0.05};
  const double cells[5] = {0.15, 0.31, 0.47, 0.63, 0.79};
  bool placed = false;
  for (int iy = 0; iy < 5 && !placed; ++iy) {
    for (int ix = 0; ix < 5 && !placed; ++ix) {
      const Vec2 p{cells[ix], cells[iy]};
      bool free = dist(p, s.gripper_pos) >= 0.12;
      for (const auto& o : s.objects) {
        if (dist(p, o.pos) < 0.12 + (o.kind == ShapeKind::Locker ? 0.12 : 0.0)) free = false;
      }
      if (free) {
        extra.pos = p;
        placed = true;
      }
    }
  }
  s.objects.push_back(extra);
  return s;
}

}  // namespace foam::toyenv
