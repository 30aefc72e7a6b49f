#include "foam/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace foam::dataset {

using namespace foam::toyenv;

namespace {

constexpr char kMagic[6] = {'F', 'O', 'A', 'M', 'D', 'S'};
constexpr uint32_t kFormatVersion = 1;
constexpr int kCleanWindow = 3;

Episode run_episode(const EnvConfig& cfg, const TaskSpec& task, uint64_t rollout_seed,
                    double expert_noise) {
  Episode ep;
  ep.task_id = static_cast<uint32_t>(task.task_id);
  ep.instruction_tokens = task.instruction_tokens;
  const int T = kHorizon;
  ep.actions.reserve(static_cast<size_t>(T) * kActionDim);
  ep.proprio.reserve(static_cast<size_t>(T) * kProprioDim);
  ep.frames.reserve(static_cast<size_t>(T) * kImageSize * kImageSize * 3);

  WorldState s = reset(cfg, task, rollout_seed);
  Rng expert_rng(seed_combine(rollout_seed, 0x45585052ULL));  // expert stream
  for (int t = 0; t < T; ++t) {
    const Observation obs = observe(s);
    ep.frames.insert(ep.frames.end(), obs.image.begin(), obs.image.end());
    ep.proprio.insert(ep.proprio.end(), obs.proprio.begin(), obs.proprio.end());
    const ActionCommand a = expert_action(s, task, expert_rng, expert_noise);
    ep.actions.push_back(static_cast<float>(a.delta.x));
    ep.actions.push_back(static_cast<float>(a.delta.y));
    ep.actions.push_back(static_cast<float>(a.gripper_cmd));
    s = step(s, a);
  }
  ep.success = check_success(s, task);
  const size_t fs = static_cast<size_t>(kImageSize) * kImageSize * 3;
  ep.goal_image.assign(ep.frames.end() - fs, ep.frames.end());
  return ep;
}

}  // namespace

DemoSet collect_demos(const EnvConfig& cfg, const std::vector<TaskSpec>& tasks, int per_task,
                      uint64_t seed, double expert_noise) {
  if (per_task < 1) throw std::invalid_argument("collect_demos: per_task must be >= 1");
  DemoSet set;
  for (const auto& task : tasks) {
    int kept = 0;
    const int budget = per_task * 20;
    for (int attempt = 0; attempt < budget && kept < per_task; ++attempt) {
      // The attempt stream is shared by every task (not salted by task_id), so
      // tasks whose scenes come from the same family template demonstrate the
      // SAME layouts under different instructions. Conditioned consumers then
      // cannot fit the corpus while ignoring the instruction or goal.
      const uint64_t rollout_seed = seed_combine(seed, static_cast<uint64_t>(attempt));
      Episode ep = run_episode(cfg, task, rollout_seed, expert_noise);
      if (!ep.success) continue;  // failed rollouts are dropped, next attempt reseeds
      set.episodes.push_back(std::move(ep));
      ++kept;
    }
    if (kept < per_task)
      throw std::runtime_error("collect_demos: expert could not reach " +
                               std::to_string(per_task) + " successes for task " + task.name);
  }
  return set;
}

ChunkSample sample_chunk(const DemoSet& set, int episode_index, int t, int k) {
  if (episode_index < 0 || episode_index >= static_cast<int>(set.episodes.size()))
    throw std::out_of_range("sample_chunk: episode index");
  const int T = static_cast<int>(set.horizon);
  if (t < 0 || t >= T) throw std::out_of_range("sample_chunk: t outside [0, T-1]");
  if (k < 1) throw std::invalid_argument("sample_chunk: k must be >= 1");
  const Episode& ep = set.episodes[static_cast<size_t>(episode_index)];
  const int dim = static_cast<int>(set.action_dim);

  ChunkSample out;
  out.t = t;
  out.episode_index = episode_index;
  out.actions_chunk.resize(static_cast<size_t>(k) * dim);
  out.mask.resize(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    // Steps past the end repeat the last real action row with mask 0.
    const int src = std::min(t + j, T - 1);
    out.mask[static_cast<size_t>(j)] = (t + j <= T - 1) ? 1.0f : 0.0f;
    std::copy_n(ep.actions.begin() + static_cast<size_t>(src) * dim, dim,
                out.actions_chunk.begin() + static_cast<size_t>(j) * dim);
  }
  out.proprio_t.assign(ep.proprio.begin() + static_cast<size_t>(t) * kProprioDim,
                       ep.proprio.begin() + static_cast<size_t>(t + 1) * kProprioDim);
  const size_t fs = set.frame_size();
  out.frame_t.assign(ep.frames.begin() + static_cast<size_t>(t) * fs,
                     ep.frames.begin() + static_cast<size_t>(t + 1) * fs);
  out.instruction_tokens = ep.instruction_tokens;
  out.goal_image = ep.goal_image;
  return out;
}

namespace {

void accumulate_stats(const std::vector<float>& rows, int dim, std::vector<double>& sum,
                      std::vector<double>& sumsq, size_t& count) {
  for (size_t i = 0; i < rows.size(); i += dim) {
    for (int d = 0; d < dim; ++d) {
      sum[static_cast<size_t>(d)] += rows[i + d];
      sumsq[static_cast<size_t>(d)] += static_cast<double>(rows[i + d]) * rows[i + d];
    }
    ++count;
  }
}

void finalize_stats(const std::vector<double>& sum, const std::vector<double>& sumsq,
                    size_t count, std::vector<float>& mean, std::vector<float>& std) {
  const int dim = static_cast<int>(sum.size());
  mean.resize(sum.size());
  std.resize(sum.size());
  for (int d = 0; d < dim; ++d) {
    const double m = sum[static_cast<size_t>(d)] / static_cast<double>(count);
    const double var =
        std::max(0.0, sumsq[static_cast<size_t>(d)] / static_cast<double>(count) - m * m);
    mean[static_cast<size_t>(d)] = static_cast<float>(m);
    std[static_cast<size_t>(d)] = static_cast<float>(std::max(std::sqrt(var), 1e-6));
  }
}

}  // namespace

NormStats compute_norm_stats(const DemoSet& set) {
  if (set.episodes.empty()) throw std::invalid_argument("compute_norm_stats: empty demoset");
  const int adim = static_cast<int>(set.action_dim);
  std::vector<double> asum(adim, 0.0), asumsq(adim, 0.0);
  std::vector<double> psum(kProprioDim, 0.0), psumsq(kProprioDim, 0.0);
  size_t arows = 0, prows = 0;
  for (const auto& ep : set.episodes) {
    accumulate_stats(ep.actions, adim, asum, asumsq, arows);
    accumulate_stats(ep.proprio, kProprioDim, psum, psumsq, prows);
  }
  NormStats st;
  finalize_stats(asum, asumsq, arows, st.action_mean, st.action_std);
  finalize_stats(psum, psumsq, prows, st.proprio_mean, st.proprio_std);
  return st;
}

std::vector<GoalPairRecord> extract_goal_pairs(const DemoSet& set, double clean_threshold) {
  std::vector<GoalPairRecord> out;
  const size_t fs = set.frame_size();
  const int T = static_cast<int>(set.horizon);
  for (const auto& ep : set.episodes) {
    // The episode qualifies when its last few frames are pairwise static:
    // an expert still in motion at the end leaves a misleading goal frame.
    bool clean = T >= kCleanWindow;
    for (int a = T - kCleanWindow; clean && a < T; ++a) {
      for (int b = a + 1; clean && b < T; ++b) {
        double diff = 0.0;
        const float* fa = ep.frames.data() + static_cast<size_t>(a) * fs;
        const float* fb = ep.frames.data() + static_cast<size_t>(b) * fs;
        for (size_t i = 0; i < fs; ++i) diff += std::abs(static_cast<double>(fa[i]) - fb[i]);
        clean = diff / static_cast<double>(fs) < clean_threshold;
      }
    }
    if (!clean) continue;
    GoalPairRecord rec;
    rec.initial_image.assign(ep.frames.begin(), ep.frames.begin() + fs);
    rec.instruction_tokens = ep.instruction_tokens;
    rec.goal_image.assign(ep.frames.end() - fs, ep.frames.end());
    rec.task_id = ep.task_id;
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("demoset load: truncated file");
  return v;
}

void write_f32s(std::ofstream& out, const std::vector<float>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_f32s(std::ifstream& in, std::vector<float>& v, size_t n) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw std::runtime_error("demoset load: truncated array");
}

}  // namespace

void save_demoset(const DemoSet& set, const std::string& path) {
  // Write to a temp file and rename so readers never observe a partial file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("demoset save: cannot open " + tmp);
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<uint32_t>(set.episodes.size()));
    write_u32(out, set.action_dim);
    write_u32(out, set.horizon);
    write_u32(out, set.height);
    write_u32(out, set.width);
    for (const auto& ep : set.episodes) {
      write_u32(out, ep.task_id);
      write_u32(out, static_cast<uint32_t>(ep.instruction_tokens.size()));
      for (int tok : ep.instruction_tokens) write_u32(out, static_cast<uint32_t>(tok));
      write_f32s(out, ep.actions);
      write_f32s(out, ep.proprio);
      write_f32s(out, ep.frames);
      write_f32s(out, ep.goal_image);
      const char success = ep.success ? 1 : 0;
      out.write(&success, 1);
    }
    if (!out) throw std::runtime_error("demoset save: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("demoset save: rename to " + path + " failed");
}

DemoSet load_demoset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("demoset load: cannot open " + path);
  char magic[6] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("demoset load: bad magic in " + path);
  const uint32_t version = read_u32(in);
  if (version != kFormatVersion)
    throw std::runtime_error("demoset load: unsupported format_version " +
                             std::to_string(version));
  DemoSet set;
  const uint32_t count = read_u32(in);
  set.action_dim = read_u32(in);
  set.horizon = read_u32(in);
  set.height = read_u32(in);
  set.width = read_u32(in);
  const size_t fs = set.frame_size();
  set.episodes.resize(count);
  for (auto& ep : set.episodes) {
    ep.task_id = read_u32(in);
    const uint32_t ntok = read_u32(in);
    ep.instruction_tokens.resize(ntok);
    for (auto& tok : ep.instruction_tokens) tok = static_cast<int>(read_u32(in));
    read_f32s(in, ep.actions, static_cast<size_t>(set.horizon) * set.action_dim);
    read_f32s(in, ep.proprio, static_cast<size_t>(set.horizon) * toyenv::kProprioDim);
    read_f32s(in, ep.frames, static_cast<size_t>(set.horizon) * fs);
    read_f32s(in, ep.goal_image, fs);
    char success = 0;
    in.read(&success, 1);
    if (!in) throw std::runtime_error("demoset load: truncated episode");
    ep.success = success != 0;
  }
  return set;
}

uint64_t demoset_digest(const DemoSet& set) {
  Fnv1a header;
  header.update_pod(set.action_dim);
  header.update_pod(set.horizon);
  header.update_pod(set.height);
  header.update_pod(set.width);
  // Episode hashes are combined by addition so the digest is independent of
  // episode order but still sensitive to duplicates.
  uint64_t acc = header.h;
  for (const auto& ep : set.episodes) {
    Fnv1a h;
    h.update_pod(ep.task_id);
    h.update_vec(ep.instruction_tokens);
    h.update_vec(ep.actions);
    h.update_vec(ep.proprio);
    h.update_vec(ep.frames);
    h.update_vec(ep.goal_image);
    h.update_pod(ep.success);
    acc += h.h;
  }
  return acc;
}

}  // namespace foam::dataset
