#include "foam/goalgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "foam/tape.hpp"

namespace foam::goalgen {

using nets::Tape;

void to_json(nlohmann::json& j, const GoalGenConfig& c) {
  j = nlohmann::json{{"dim", c.dim},
                     {"hidden", c.hidden},
                     {"text_raw", c.text_raw},
                     {"vocab", c.vocab},
                     {"image_size", c.image_size},
                     {"lr", c.lr},
                     {"batch", c.batch},
                     {"steps", c.steps},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2}};
}

void from_json(const nlohmann::json& j, GoalGenConfig& c) {
  j.at("dim").get_to(c.dim);
  j.at("hidden").get_to(c.hidden);
  j.at("text_raw").get_to(c.text_raw);
  j.at("vocab").get_to(c.vocab);
  j.at("image_size").get_to(c.image_size);
  j.at("lr").get_to(c.lr);
  j.at("batch").get_to(c.batch);
  j.at("steps").get_to(c.steps);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
}

namespace {

constexpr uint64_t kGoalInitTag = 0x474f414cULL;  // model-init rng stream id

// The conv/text builders are shared with the policy networks and read their
// widths from a NetConfig; only these fields are exercised here.
nets::NetConfig shim_net(const GoalGenConfig& c) {
  nets::NetConfig n;
  n.dim = c.dim;
  n.text_raw = c.text_raw;
  n.vocab = c.vocab;
  n.dropout = 0.0;
  return n;
}

constexpr int kPatch = 8;  // pixels per conv token side (three stride-2 stages)

int grid_side(const GoalGenConfig& c) { return c.image_size / kPatch; }

int pixel_count(const GoalGenConfig& c) { return c.image_size * c.image_size * 3; }

// Shared forward: the instruction conditions the conv encoder (which object
// matters is a property of the command, not the pixels), a globally-pooled
// modulation lets every patch token see the whole edit, and a shared per-token
// MLP emits one 8x8 edit patch per grid cell. The assembled edit is ADDED to
// the initial image — the net learns the scene change a completed task leaves
// behind, not a from-scratch rendering, so the weights slide across layouts
// never demonstrated. frames is [B, 3, H, W] (planar); initial_flat is the
// same frames as [B, H*W*3] interleaved rows; the result is a raw (unclamped)
// [B, H*W*3] image.
int forward_raw(Tape<float>& tape, GoalPredictor& p, int frames, int initial_flat,
                const std::vector<std::vector<int>>& instr) {
  const GoalGenConfig& cfg = p.cfg;
  const nets::NetConfig net = shim_net(cfg);
  const int G = grid_side(cfg);
  auto cond = nets::text_encode_fwd(tape, p.params, "txt", instr, net);     // [B, dim]
  auto tok = nets::film_cnn_fwd(tape, p.params, "enc", frames, net, cond);  // [B, G*G, dim]
  const int B = tape.dims(tok)[0];
  tok = tape.add_broadcast_block(tok, nets::param_ref(tape, p.params, "pos"));
  // Squeeze-excite-style global pass (zero-initialized, so an identity at
  // start): the mean token AND the instruction modulate every token's
  // channels, giving each patch the whole-scene and whole-command context its
  // local receptive field lacks.
  auto g = tape.mean_tokens(tok);  // [B, dim]
  auto s = tape.add(nets::linear_fwd(tape, p.params, "mix_s", g),
                    nets::linear_fwd(tape, p.params, "cmix_s", cond));
  auto sh = tape.add(nets::linear_fwd(tape, p.params, "mix_t", g),
                     nets::linear_fwd(tape, p.params, "cmix_t", cond));
  tok = tape.relu(tape.transpose_12(tape.film(tape.transpose_12(tok), s, sh)));
  auto h = tape.relu(nets::linear_fwd(tape, p.params, "pt1", tok));  // [B, G*G, hidden]
  h = tape.relu(nets::linear_fwd(tape, p.params, "pt2", h));
  auto edit = nets::linear_fwd(tape, p.params, "out", h);            // [B, G*G, patch px]
  auto img = tape.patch_to_image(edit, G, G, kPatch, kPatch, 3);
  return tape.add(img, initial_flat);
}

void check_pair_shapes(const std::vector<dataset::GoalPairRecord>& pairs,
                       const GoalGenConfig& cfg) {
  const size_t px = static_cast<size_t>(pixel_count(cfg));
  for (const auto& pr : pairs) {
    if (pr.initial_image.size() != px || pr.goal_image.size() != px)
      throw std::invalid_argument("goal pairs: image size mismatch with config");
    if (pr.instruction_tokens.empty())
      throw std::invalid_argument("goal pairs: empty instruction");
  }
}

}  // namespace

GoalPredictor build_goal_predictor(const GoalGenConfig& cfg, uint64_t seed) {
  if (cfg.dim % 4 != 0 || cfg.dim <= 0) throw std::invalid_argument("goalgen: dim must be 4n");
  if (cfg.hidden <= 0) throw std::invalid_argument("goalgen: non-positive layer width");
  if (cfg.image_size <= 0 || cfg.image_size % kPatch != 0)
    throw std::invalid_argument("goalgen: image size must be a positive multiple of 8");
  GoalPredictor p;
  p.cfg = cfg;
  const nets::NetConfig net = shim_net(cfg);
  const int G = grid_side(cfg);
  Rng rng(seed_combine(seed, kGoalInitTag));
  nets::add_film_cnn(p.params, "enc", net, /*cond_dim=*/cfg.dim, rng);
  nets::add_text_encoder(p.params, "txt", net, rng);
  nets::add_tokens(p.params, "pos", G * G, cfg.dim, rng);
  nets::add_linear(p.params, "mix_s", cfg.dim, cfg.dim, rng, false, /*zero_init=*/true);
  nets::add_linear(p.params, "mix_t", cfg.dim, cfg.dim, rng, false, /*zero_init=*/true);
  nets::add_linear(p.params, "cmix_s", cfg.dim, cfg.dim, rng, false, /*zero_init=*/true);
  nets::add_linear(p.params, "cmix_t", cfg.dim, cfg.dim, rng, false, /*zero_init=*/true);
  nets::add_linear(p.params, "pt1", cfg.dim, cfg.hidden, rng);
  nets::add_linear(p.params, "pt2", cfg.hidden, cfg.hidden, rng);
  nets::add_linear(p.params, "out", cfg.hidden, kPatch * kPatch * 3, rng);
  return p;
}

GoalPredictor train_goal_predictor(const std::vector<dataset::GoalPairRecord>& pairs,
                                   const GoalGenConfig& cfg, uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("train_goal_predictor: empty pair set");
  check_pair_shapes(pairs, cfg);
  GoalPredictor p = build_goal_predictor(cfg, seed);
  const int H = cfg.image_size;
  const int px = pixel_count(cfg);
  for (int step = 0; step < cfg.steps; ++step) {
    Rng srng(seed_combine(seed, static_cast<uint64_t>(step) + 1));
    const int B = cfg.batch;
    std::vector<float> frames, flat, targets;
    frames.reserve(static_cast<size_t>(B) * px);
    flat.reserve(static_cast<size_t>(B) * px);
    targets.reserve(static_cast<size_t>(B) * px);
    std::vector<std::vector<int>> instr;
    instr.reserve(B);
    for (int b = 0; b < B; ++b) {
      const auto& pr = pairs[srng.uniform_index(pairs.size())];
      const auto chw = nets::hwc_to_chw<float>(pr.initial_image, H, H);
      frames.insert(frames.end(), chw.begin(), chw.end());
      flat.insert(flat.end(), pr.initial_image.begin(), pr.initial_image.end());
      targets.insert(targets.end(), pr.goal_image.begin(), pr.goal_image.end());
      instr.push_back(pr.instruction_tokens);
    }
    Tape<float> tape;
    auto in = tape.constant(std::move(frames), {B, 3, H, H});
    auto base = tape.constant(std::move(flat), {B, px});
    auto out = forward_raw(tape, p, in, base, instr);
    auto loss = tape.mse_mean(out, tape.constant(std::move(targets), {B, px}));
    const double lv = static_cast<double>(tape.val(loss)[0]);
    if (!std::isfinite(lv)) {
      std::ostringstream msg;
      msg << "train_goal_predictor: non-finite loss at step " << step + 1;
      throw std::runtime_error(msg.str());
    }
    p.params.zero_grads();
    tape.backward(loss);
    p.params.adam_step(static_cast<float>(cfg.lr), static_cast<float>(cfg.adam_beta1),
                       static_cast<float>(cfg.adam_beta2));
  }
  p.trained = true;
  return p;
}

std::vector<float> predict_goal(GoalPredictor& p, const std::vector<float>& initial_image,
                                const std::vector<int>& instruction_tokens) {
  if (!p.trained) throw std::runtime_error("predict_goal: predictor has not been trained");
  const int H = p.cfg.image_size;
  if (initial_image.size() != static_cast<size_t>(pixel_count(p.cfg)))
    throw std::invalid_argument("predict_goal: image size mismatch");
  Tape<float> tape;
  auto in = tape.constant(nets::hwc_to_chw<float>(initial_image, H, H), {1, 3, H, H});
  auto base = tape.constant(initial_image, {1, static_cast<int>(initial_image.size())});
  auto out = forward_raw(tape, p, in, base, {instruction_tokens});
  std::vector<float> img = tape.val(out);
  for (auto& v : img) v = std::clamp(v, 0.f, 1.f);
  return img;
}

double training_mse(GoalPredictor& p, const std::vector<dataset::GoalPairRecord>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("training_mse: empty pair set");
  double total = 0.0;
  for (const auto& pr : pairs) {
    const auto pred = predict_goal(p, pr.initial_image, pr.instruction_tokens);
    double acc = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred[i]) - pr.goal_image[i];
      acc += d * d;
    }
    total += acc / static_cast<double>(pred.size());
  }
  return total / static_cast<double>(pairs.size());
}

uint64_t predictor_digest(const GoalPredictor& p) {
  Fnv1a h;
  for (const auto& pm : p.params.all()) {
    h.update(pm.name.data(), pm.name.size());
    h.update_vec(pm.value);
  }
  h.update_pod(static_cast<uint8_t>(p.trained));
  return h.h;
}

void save_predictor(const GoalPredictor& p, const std::string& path) {
  nets::CheckpointData data;
  nlohmann::json j = p.cfg;
  j["trained"] = p.trained;
  data.config_json = j.dump();
  nets::store_to_checkpoint(p.params, data);
  nets::save_checkpoint(path, data);
}

GoalPredictor load_predictor(const std::string& path) {
  const nets::CheckpointData data = nets::load_checkpoint(path);
  const nlohmann::json j = nlohmann::json::parse(data.config_json);
  GoalPredictor p = build_goal_predictor(j.get<GoalGenConfig>(), 0);
  nets::store_from_checkpoint(data, p.params);
  p.trained = j.value("trained", false);
  return p;
}

// --- Goal image provenance ---------------------------------------------------

const char* goal_source_name(GoalSource s) {
  switch (s) {
    case GoalSource::ORACLE_LAST_FRAME: return "oracle";
    case GoalSource::FILE: return "file";
    case GoalSource::GENERATED: return "generated";
  }
  throw std::invalid_argument("goal_source_name: bad enum value");
}

GoalSource goal_source_from_string(const std::string& s) {
  if (s == "oracle") return GoalSource::ORACLE_LAST_FRAME;
  if (s == "file") return GoalSource::FILE;
  if (s == "generated") return GoalSource::GENERATED;
  throw std::invalid_argument("unknown goal source: " + s +
                              " (expected oracle|file|generated)");
}

std::vector<float> oracle_goal_image(const toyenv::EnvConfig& env_cfg,
                                     const toyenv::TaskSpec& task, uint64_t seed) {
  toyenv::WorldState state = toyenv::reset(env_cfg, task, seed);
  Rng rng(seed_combine(seed, 0x4f5241434cULL));  // unused at zero expert noise
  for (int t = 0; t < toyenv::kHorizon; ++t)
    state = toyenv::step(state, toyenv::expert_action(state, task, rng, 0.0));
  return toyenv::render(state);
}

namespace {
constexpr char kGoalImageMagic[8] = {'F', 'O', 'A', 'M', 'G', 'I', '0', '\n'};
}

void save_goal_image(const std::string& path, const std::vector<float>& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_goal_image: cannot open " + path);
  f.write(kGoalImageMagic, sizeof(kGoalImageMagic));
  const uint32_t count = static_cast<uint32_t>(image.size());
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  f.write(reinterpret_cast<const char*>(image.data()),
          static_cast<std::streamsize>(image.size() * sizeof(float)));
  if (!f) throw std::runtime_error("save_goal_image: write failed for " + path);
}

std::vector<float> load_goal_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_goal_image: cannot open " + path);
  char magic[sizeof(kGoalImageMagic)];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kGoalImageMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_goal_image: bad magic in " + path);
  uint32_t count = 0;
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::vector<float> image(count);
  f.read(reinterpret_cast<char*>(image.data()),
         static_cast<std::streamsize>(static_cast<size_t>(count) * sizeof(float)));
  if (!f) throw std::runtime_error("load_goal_image: truncated file " + path);
  for (const float v : image)
    if (!std::isfinite(v)) throw std::runtime_error("load_goal_image: non-finite pixel");
  return image;
}

std::vector<float> resolve_goal(GoalSource source, const toyenv::EnvConfig& env_cfg,
                                const toyenv::TaskSpec& task, uint64_t seed,
                                GoalPredictor* predictor, const std::string& file_path) {
  switch (source) {
    case GoalSource::ORACLE_LAST_FRAME:
      return oracle_goal_image(env_cfg, task, seed);
    case GoalSource::FILE:
      if (file_path.empty())
        throw std::invalid_argument("resolve_goal: FILE source requires a path");
      return load_goal_image(file_path);
    case GoalSource::GENERATED: {
      if (predictor == nullptr || !predictor->trained)
        throw std::invalid_argument("resolve_goal: GENERATED source requires a trained predictor");
      const toyenv::WorldState state = toyenv::reset(env_cfg, task, seed);
      return predict_goal(*predictor, toyenv::observe(state).image, task.instruction_tokens);
    }
  }
  throw std::invalid_argument("resolve_goal: bad source enum value");
}

// --- Fidelity metrics --------------------------------------------------------

nlohmann::json fidelity_to_json(const FidelityReport& r) {
  const size_t n = r.task_ids.size();
  nlohmann::json rows = nlohmann::json::array();
  for (size_t i = 0; i < n; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (size_t jcol = 0; jcol < n; ++jcol) row.push_back(r.confusion[i * n + jcol]);
    rows.push_back(std::move(row));
  }
  return nlohmann::json{{"task_ids", r.task_ids},
                        {"task_names", r.task_names},
                        {"per_task_mse", r.per_task_mse},
                        {"confusion", std::move(rows)},
                        {"consistency", r.consistency},
                        {"most_confused_row", r.most_confused_row},
                        {"most_confused_col", r.most_confused_col},
                        {"samples_per_task", r.samples_per_task}};
}

FidelityReport goal_fidelity_report(const toyenv::EnvConfig& env_cfg,
                                    const std::vector<toyenv::TaskSpec>& tasks,
                                    GoalSource source, GoalPredictor* predictor,
                                    int samples_per_task, uint64_t seed_base) {
  if (tasks.empty()) throw std::invalid_argument("fidelity: empty task list");
  if (samples_per_task <= 0) throw std::invalid_argument("fidelity: samples_per_task < 1");
  if (source == GoalSource::FILE)
    throw std::invalid_argument("fidelity: FILE source has no generator to measure");
  if (source == GoalSource::GENERATED && (predictor == nullptr || !predictor->trained))
    throw std::invalid_argument("fidelity: GENERATED source requires a trained predictor");

  const size_t n = tasks.size();
  FidelityReport r;
  r.samples_per_task = samples_per_task;
  r.per_task_mse.assign(n, 0.0);
  r.confusion.assign(n * n, 0.0);
  for (const auto& t : tasks) {
    r.task_ids.push_back(t.task_id);
    r.task_names.push_back(t.name);
  }

  auto mse = [](const std::vector<float>& a, const std::vector<float>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    return acc / static_cast<double>(a.size());
  };

  int consistent = 0;
  for (int s = 0; s < samples_per_task; ++s) {
    const uint64_t seed = seed_combine(seed_base, static_cast<uint64_t>(s));
    // One shared candidate set per sample: every task's oracle outcome from
    // this reset seed. Rows then score their prediction against all of them.
    std::vector<std::vector<float>> oracle(n);
    for (size_t c = 0; c < n; ++c) oracle[c] = oracle_goal_image(env_cfg, tasks[c], seed);
    for (size_t row = 0; row < n; ++row) {
      std::vector<float> pred;
      if (source == GoalSource::GENERATED) {
        const toyenv::WorldState st = toyenv::reset(env_cfg, tasks[row], seed);
        pred = predict_goal(*predictor, toyenv::observe(st).image,
                            tasks[row].instruction_tokens);
      } else {
        pred = oracle[row];
      }
      const double own = mse(pred, oracle[row]);
      r.per_task_mse[row] += own;
      // Ties keep the row's own task, so an exact oracle reproduction is
      // consistent by construction.
      size_t winner = row;
      double best = own;
      for (size_t c = 0; c < n; ++c) {
        if (c == row) continue;
        const double m = mse(pred, oracle[c]);
        if (m < best) {
          best = m;
          winner = c;
        }
      }
      r.confusion[row * n + winner] += 1.0;
      if (winner == row) ++consistent;
    }
  }

  for (size_t i = 0; i < n * n; ++i) r.confusion[i] /= static_cast<double>(samples_per_task);
  r.consistency = static_cast<double>(consistent) / (static_cast<double>(n) * samples_per_task);
  double worst = 0.0;
  for (size_t row = 0; row < n; ++row)
    for (size_t col = 0; col < n; ++col)
      if (row != col && r.confusion[row * n + col] > worst) {
        worst = r.confusion[row * n + col];
        r.most_confused_row = static_cast<int>(row);
        r.most_confused_col = static_cast<int>(col);
      }
  return r;
}

}  // namespace foam::goalgen
