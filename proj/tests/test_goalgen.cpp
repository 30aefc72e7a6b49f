#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>

#include "foam/dataset.hpp"
#include "foam/goalgen.hpp"
#include "foam/toyenv.hpp"

using namespace foam;
using goalgen::GoalGenConfig;
using goalgen::GoalPredictor;
using goalgen::GoalSource;

namespace {

const toyenv::EnvConfig& env_cfg() {
  static const toyenv::EnvConfig cfg = toyenv::default_env_config();
  return cfg;
}

// Training pairs from an expert demo corpus over the seen tasks. Collected
// once; fidelity seed bases are disjoint from the collection seed so fidelity
// measures held-out resets.
const std::vector<dataset::GoalPairRecord>& train_pairs() {
  static const std::vector<dataset::GoalPairRecord> pairs = [] {
    const auto set = dataset::collect_demos(env_cfg(), env_cfg().seen_tasks(),
                                            /*per_task=*/30, /*seed=*/4242,
                                            /*expert_noise=*/0.005);
    return dataset::extract_goal_pairs(set);
  }();
  return pairs;
}

GoalGenConfig test_cfg() {
  GoalGenConfig cfg;  // defaults are the shipped toy profile
  return cfg;
}

// Small profile for contract checks that do not need edit quality.
GoalGenConfig mini_cfg() {
  GoalGenConfig cfg;
  cfg.dim = 16;
  cfg.hidden = 16;
  cfg.batch = 4;
  cfg.steps = 25;
  return cfg;
}

// One trained predictor shared by the quality checks (training is the
// expensive part; every consumer treats it as read-only or re-derives).
GoalPredictor& trained() {
  static GoalPredictor p = goalgen::train_goal_predictor(train_pairs(), test_cfg(), 7);
  return p;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("goal predictor construction and input validation") {
  SUBCASE("empty pair set is rejected") {
    CHECK_THROWS_AS(goalgen::train_goal_predictor({}, test_cfg(), 1), std::invalid_argument);
  }
  SUBCASE("mismatched image size is rejected") {
    dataset::GoalPairRecord bad;
    bad.initial_image.assign(10, 0.f);
    bad.goal_image.assign(10, 0.f);
    bad.instruction_tokens = {1, 2};
    CHECK_THROWS_AS(goalgen::train_goal_predictor({bad}, test_cfg(), 1),
                    std::invalid_argument);
  }
  SUBCASE("untrained predictor refuses to predict") {
    auto p = goalgen::build_goal_predictor(test_cfg(), 3);
    CHECK_FALSE(p.trained);
    const std::vector<float> img(32 * 32 * 3,  0.5f);
    CHECK_THROWS_AS(goalgen::predict_goal(p, img, {1, 2}), std::runtime_error);
  }
  SUBCASE("seeded construction is deterministic and seed-sensitive") {
    auto a = goalgen::build_goal_predictor(test_cfg(), 11);
    auto b = goalgen::build_goal_predictor(test_cfg(), 11);
    auto c = goalgen::build_goal_predictor(test_cfg(), 12);
    CHECK(goalgen::predictor_digest(a) == goalgen::predictor_digest(b));
    CHECK(goalgen::predictor_digest(a) != goalgen::predictor_digest(c));
  }
}

TEST_CASE("goal source names round-trip and reject unknowns") {
  CHECK(goalgen::goal_source_from_string("oracle") == GoalSource::ORACLE_LAST_FRAME);
  CHECK(goalgen::goal_source_from_string("file") == GoalSource::FILE);
  CHECK(goalgen::goal_source_from_string("generated") == GoalSource::GENERATED);
  for (auto s : {GoalSource::ORACLE_LAST_FRAME, GoalSource::FILE, GoalSource::GENERATED})
    CHECK(goalgen::goal_source_from_string(goalgen::goal_source_name(s)) == s);
  CHECK_THROWS_AS(goalgen::goal_source_from_string("telepathy"), std::invalid_argument);
}

TEST_CASE("oracle goal image is the settled expert outcome") {
  const auto& cfg = env_cfg();
  const auto& task = cfg.task(0);
  const auto a = goalgen::oracle_goal_image(cfg, task, 900);
  const auto b = goalgen::oracle_goal_image(cfg, task, 900);
  const auto other_seed = goalgen::oracle_goal_image(cfg, task, 901);
  REQUIRE(a.size() == size_t(32 * 32 * 3));
  CHECK(a == b);
  CHECK(a != other_seed);

  SUBCASE("expert run from the same seed reaches success") {
    auto state = toyenv::reset(cfg, task, 900);
    Rng rng(1);
    for (int t = 0; t < toyenv::kHorizon; ++t)
      state = toyenv::step(state, toyenv::expert_action(state, task, rng, 0.0));
    CHECK(toyenv::check_success(state, task));
    CHECK(toyenv::render(state) == a);
  }
}

TEST_CASE("goal image files round-trip and reject corruption") {
  const auto path = temp_path("goalgen_img.bin");
  const auto img = goalgen::oracle_goal_image(env_cfg(), env_cfg().task(2), 17);
  goalgen::save_goal_image(path, img);
  CHECK(goalgen::load_goal_image(path) == img);

  SUBCASE("bad magic") {
    const auto bad = temp_path("goalgen_img_bad.bin");
    FILE* f = fopen(bad.c_str(), "wb");
    fputs("NOTANIMAGE", f);
    fclose(f);
    CHECK_THROWS_AS(goalgen::load_goal_image(bad), std::runtime_error);
    std::remove(bad.c_str());
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(goalgen::load_goal_image(temp_path("goalgen_nothere.bin")),
                    std::runtime_error);
  }
  std::remove(path.c_str());
}

TEST_CASE("resolve_goal dispatches by source and validates requirements") {
  const auto& cfg = env_cfg();
  const auto& task = cfg.task(4);

  SUBCASE("oracle source equals the oracle helper") {
    CHECK(goalgen::resolve_goal(GoalSource::ORACLE_LAST_FRAME, cfg, task, 33, nullptr, "") ==
          goalgen::oracle_goal_image(cfg, task, 33));
  }
  SUBCASE("file source loads the stored image; empty path is an error") {
    const auto path = temp_path("goalgen_resolve.bin");
    const auto img = goalgen::oracle_goal_image(cfg, task, 34);
    goalgen::save_goal_image(path, img);
    CHECK(goalgen::resolve_goal(GoalSource::FILE, cfg, task, 0, nullptr, path) == img);
    CHECK_THROWS_AS(goalgen::resolve_goal(GoalSource::FILE, cfg, task, 0, nullptr, ""),
                    std::invalid_argument);
    std::remove(path.c_str());
  }
  SUBCASE("generated source requires a trained predictor") {
    CHECK_THROWS_AS(goalgen::resolve_goal(GoalSource::GENERATED, cfg, task, 0, nullptr, ""),
                    std::invalid_argument);
    auto untrained = goalgen::build_goal_predictor(test_cfg(), 1);
    CHECK_THROWS_AS(goalgen::resolve_goal(GoalSource::GENERATED, cfg, task, 0, &untrained, ""),
                    std::invalid_argument);
  }
}

TEST_CASE("training is deterministic in its seed") {
  // Small profile: this checks the reproducibility contract, not edit quality.
  const auto& pairs = train_pairs();
  const std::vector<dataset::GoalPairRecord> few(pairs.begin(), pairs.begin() + 8);
  auto a = goalgen::train_goal_predictor(few, mini_cfg(), 5);
  auto b = goalgen::train_goal_predictor(few, mini_cfg(), 5);
  auto c = goalgen::train_goal_predictor(few, mini_cfg(), 6);
  CHECK(goalgen::predictor_digest(a) == goalgen::predictor_digest(b));
  CHECK(goalgen::predictor_digest(a) != goalgen::predictor_digest(c));
}

TEST_CASE("trained predictor fits the corpus and edits cleanly") {
  auto& p = trained();
  CHECK(p.trained);
  static const double fit = goalgen::training_mse(p, train_pairs());
  CHECK(fit < 0.01);

  // Prediction contract on a held-out reset.
  const auto& cfg = env_cfg();
  const auto& task = cfg.task(1);
  const auto obs = toyenv::observe(toyenv::reset(cfg, task, 31337));
  const auto out = goalgen::predict_goal(p, obs.image, task.instruction_tokens);
  REQUIRE(out.size() == obs.image.size());
  for (float v : out) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }

  SUBCASE("prediction is a pure function of its inputs") {
    CHECK(goalgen::predict_goal(p, obs.image, task.instruction_tokens) == out);
  }
  SUBCASE("single prediction stays inside the toy latency budget") {
    const auto t0 = std::chrono::steady_clock::now();
    goalgen::predict_goal(p, obs.image, task.instruction_tokens);
    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    CHECK(ms < 50.0);
  }
}

TEST_CASE("trained predictor round-trips through checkpoint files") {
  auto& p = trained();
  const auto path = temp_path("goalgen_ckpt.bin");
  goalgen::save_predictor(p, path);
  auto loaded = goalgen::load_predictor(path);
  CHECK(loaded.trained);
  CHECK(goalgen::predictor_digest(loaded) == goalgen::predictor_digest(p));

  const auto& cfg = env_cfg();
  const auto& task = cfg.task(6);
  const auto obs = toyenv::observe(toyenv::reset(cfg, task, 99));
  CHECK(goalgen::predict_goal(loaded, obs.image, task.instruction_tokens) ==
        goalgen::predict_goal(p, obs.image, task.instruction_tokens));
  std::remove(path.c_str());
}

TEST_CASE("generated goals pick out their own task on held-out resets") {
  const auto& cfg = env_cfg();
  static const auto report = goalgen::goal_fidelity_report(
      cfg, cfg.seen_tasks(), GoalSource::GENERATED, &trained(),
      /*samples_per_task=*/20, /*seed_base=*/99991);
  const size_t n = report.task_ids.size();
  REQUIRE(n == cfg.seen_tasks().size());
  CHECK(report.consistency >= 0.8);
  CHECK(report.consistency <= 1.0);
  CHECK(report.samples_per_task == 20);
  for (size_t row = 0; row < n; ++row) {
    double sum = 0.0;
    for (size_t col = 0; col < n; ++col) sum += report.confusion[row * n + col];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Adjacent-slot placements are geometrically the closest goal pair in the
  // environment, so residual confusion should concentrate there: the insert
  // family's mean off-diagonal row mass strictly exceeds every other family's.
  std::map<toyenv::Family, double> off_mass;
  std::map<toyenv::Family, int> fam_rows;
  for (size_t row = 0; row < n; ++row) {
    const auto fam = cfg.task(report.task_ids[row]).family;
    double off = 0.0;
    for (size_t col = 0; col < n; ++col)
      if (col != row) off += report.confusion[row * n + col];
    off_mass[fam] += off;
    fam_rows[fam] += 1;
  }
  for (auto& [fam, mass] : off_mass) mass /= fam_rows.at(fam);
  const double insert_mass = off_mass.at(toyenv::Family::InsertSlot);
  for (const auto& [fam, mass] : off_mass)
    if (fam != toyenv::Family::InsertSlot) CHECK(insert_mass > mass);

  // The single most confused cell also sits between the two insert tasks.
  REQUIRE(report.most_confused_row >= 0);
  REQUIRE(report.most_confused_col >= 0);
  CHECK(cfg.task(report.task_ids[report.most_confused_row]).family ==
        toyenv::Family::InsertSlot);
  CHECK(cfg.task(report.task_ids[report.most_confused_col]).family ==
        toyenv::Family::InsertSlot);

  SUBCASE("report serializes with the full matrix") {
    const auto j = goalgen::fidelity_to_json(report);
    CHECK(j.at("consistency").get<double>() == report.consistency);
    CHECK(j.at("samples_per_task").get<int>() == 20);
    REQUIRE(j.at("confusion").size() == n);
    REQUIRE(j.at("confusion").at(0).size() == n);
    CHECK(j.at("task_names").size() == n);
    CHECK(j.at("most_confused_row").get<int>() == report.most_confused_row);
    CHECK(j.at("most_confused_col").get<int>() == report.most_confused_col);
  }
}

TEST_CASE("oracle-source fidelity is perfectly consistent by construction") {
  const auto& cfg = env_cfg();
  const auto report = goalgen::goal_fidelity_report(cfg, cfg.seen_tasks(),
                                                    GoalSource::ORACLE_LAST_FRAME, nullptr,
                                                    /*samples_per_task=*/3, /*seed_base=*/555);
  const size_t n = report.task_ids.size();
  REQUIRE(n == cfg.seen_tasks().size());
  CHECK(report.consistency == 1.0);
  for (size_t row = 0; row < n; ++row) {
    double sum = 0.0;
    for (size_t col = 0; col < n; ++col) sum += report.confusion[row * n + col];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(report.confusion[row * n + row] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(report.per_task_mse[row] == 0.0);
  }
  CHECK(report.most_confused_row == -1);

  SUBCASE("parameter validation") {
    CHECK_THROWS_AS(goalgen::goal_fidelity_report(cfg, {}, GoalSource::ORACLE_LAST_FRAME,
                                                  nullptr, 1, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(goalgen::goal_fidelity_report(cfg, cfg.seen_tasks(),
                                                  GoalSource::ORACLE_LAST_FRAME, nullptr, 0, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(goalgen::goal_fidelity_report(cfg, cfg.seen_tasks(), GoalSource::FILE,
                                                  nullptr, 1, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(goalgen::goal_fidelity_report(cfg, cfg.seen_tasks(), GoalSource::GENERATED,
                                                  nullptr, 1, 0),
                    std::invalid_argument);
  }
}
