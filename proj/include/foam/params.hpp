#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "foam/common.hpp"

namespace foam::nets {

// A named trainable array with its gradient accumulator and Adam moments.
// Frozen parameters keep their values fixed: the optimizer skips them and the
// model builder never puts them on the tape as differentiable leaves, so
// their gradient stays identically zero.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> m;  // Adam first moment
  std::vector<T> v;  // Adam second moment
  bool frozen = false;

  size_t size() const { return value.size(); }
};

// Ordered parameter collection. Insertion order is part of the contract: it
// fixes both the RNG consumption order at initialization and the array order
// in checkpoints, which keeps save/load bit-exact and runs reproducible.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, std::vector<int> dims, bool frozen = false) {
    if (index_.count(name)) throw std::invalid_argument("param exists: " + name);
    size_t n = 1;
    for (int d : dims) n *= static_cast<size_t>(d);
    Param<T> p;
    p.name = name;
    p.dims = std::move(dims);
    p.value.assign(n, T(0));
    p.grad.assign(n, T(0));
    p.m.assign(n, T(0));
    p.v.assign(n, T(0));
    p.frozen = frozen;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such param: " + name);
    return params_[it->second];
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such param: " + name);
    return params_[it->second];
  }

  std::deque<Param<T>>& all() { return params_; }
  const std::deque<Param<T>>& all() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  size_t trainable_size() const {
    size_t n = 0;
    for (const auto& p : params_)
      if (!p.frozen) n += p.size();
    return n;
  }

  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

  // Standard bias-corrected Adam over all non-frozen parameters. Throws on
  // non-finite gradients; parameters with zero gradient and zero moments are
  // left bit-identical.
  void adam_step(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
    for (const auto& p : params_) {
      if (p.frozen) continue;
      for (T g : p.grad)
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("adam_step: non-finite gradient in " + p.name);
    }
    ++step_;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), double(step_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), double(step_)));
    for (auto& p : params_) {
      if (p.frozen) continue;
      for (size_t i = 0; i < p.size(); ++i) {
        const T g = p.grad[i];
        p.m[i] = beta1 * p.m[i] + (T(1) - beta1) * g;
        p.v[i] = beta2 * p.v[i] + (T(1) - beta2) * g * g;
        if (p.m[i] == T(0) && p.v[i] == T(0)) continue;  // exact no-op on zero history
        const T mhat = p.m[i] / bc1;
        const T vhat = p.v[i] / bc2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  std::deque<Param<T>> params_;  // deque: references from add() stay valid as the store grows
  std::unordered_map<std::string, size_t> index_;
  int64_t step_ = 0;
};

// Copies values (and optimizer state) between stores with identical
// structure, matching by name. Used to mirror a float-trained model into a
// double store for finite-difference verification.
template <typename A, typename B>
void copy_store_values(const ParamStore<A>& src, ParamStore<B>& dst) {
  for (auto& pd : dst.all()) {
    const auto& ps = src.at(pd.name);
    if (ps.dims != pd.dims) throw std::invalid_argument("copy_store_values: shape mismatch " + pd.name);
    for (size_t i = 0; i < pd.size(); ++i) {
      pd.value[i] = static_cast<B>(ps.value[i]);
      pd.m[i] = static_cast<B>(ps.m[i]);
      pd.v[i] = static_cast<B>(ps.v[i]);
    }
  }
  dst.set_step(src.step());
}

// ---------------------------------------------------------------------------
// Checkpoint container: header {magic "FOAMCK", u32 version, embedded config
// JSON}, then named f32 arrays with explicit shapes. Bit-exact roundtrip.

struct NamedArray {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

struct CheckpointData {
  std::string config_json;
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw std::out_of_range("checkpoint missing array: " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return true;
    return false;
  }
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// Parameter values, Adam moments, and the step counter as checkpoint arrays.
template <typename T>
void store_to_checkpoint(const ParamStore<T>& store, CheckpointData& out) {
  auto push = [&out](const std::string& name, const std::vector<int>& dims,
                     const std::vector<T>& src) {
    NamedArray a;
    a.name = name;
    a.dims = dims;
    a.data.resize(src.size());
    for (size_t i = 0; i < src.size(); ++i) a.data[i] = static_cast<float>(src[i]);
    out.arrays.push_back(std::move(a));
  };
  for (const auto& p : store.all()) push("param/" + p.name, p.dims, p.value);
  for (const auto& p : store.all()) {
    if (p.frozen) continue;  // frozen params carry no optimizer state
    push("adam_m/" + p.name, p.dims, p.m);
    push("adam_v/" + p.name, p.dims, p.v);
  }
  out.arrays.push_back({"opt/step", {1}, {static_cast<float>(store.step())}});
}

// Restores into a store whose structure (names, shapes, frozen flags) was
// already built by the model constructor.
template <typename T>
void store_from_checkpoint(const CheckpointData& data, ParamStore<T>& store) {
  auto pull = [](const NamedArray& a, const std::vector<int>& dims, std::vector<T>& dst,
                 const std::string& what) {
    if (a.dims != dims) throw std::invalid_argument("checkpoint shape mismatch: " + what);
    dst.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) dst[i] = static_cast<T>(a.data[i]);
  };
  for (auto& p : store.all()) {
    pull(data.find("param/" + p.name), p.dims, p.value, p.name);
    if (!p.frozen) {
      pull(data.find("adam_m/" + p.name), p.dims, p.m, p.name);
      pull(data.find("adam_v/" + p.name), p.dims, p.v, p.name);
    }
  }
  store.set_step(static_cast<int64_t>(data.find("opt/step").data.at(0)));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification (f64 mode).

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  size_t coords_checked = 0;
};

// loss_fn(bool want_grad) must return the scalar loss for the current store
// values; when want_grad is true it must also accumulate gradients into the
// store (after a zero_grads() by the caller). Checks central differences on
// up to samples_per_param randomly chosen coordinates of every non-frozen
// parameter: rel = |fd - an| / max(|fd| + |an|, 1e-8).
template <typename LossFn>
GradCheckReport grad_check(ParamStore<double>& store, LossFn&& loss_fn, int samples_per_param,
                           uint64_t seed, double eps = 1e-5) {
  store.zero_grads();
  const double base = loss_fn(true);
  if (!std::isfinite(base)) throw std::runtime_error("grad_check: non-finite loss");
  std::vector<std::vector<double>> analytic;
  analytic.reserve(store.all().size());
  for (const auto& p : store.all()) {
    for (double g : p.grad)
      if (!std::isfinite(g)) throw std::runtime_error("grad_check: non-finite gradient in " + p.name);
    analytic.push_back(p.grad);
  }

  GradCheckReport rep;
  Rng rng(seed_combine(seed, 0x47524144ull));
  for (size_t pi = 0; pi < store.all().size(); ++pi) {
    auto& p = store.all()[pi];
    if (p.frozen) continue;
    const size_t n = p.size();
    const size_t count = std::min<size_t>(static_cast<size_t>(samples_per_param), n);
    for (size_t s = 0; s < count; ++s) {
      const size_t i = count == n ? s : rng.uniform_index(n);
      const double keep = p.value[i];
      p.value[i] = keep + eps;
      const double lp = loss_fn(false);
      p.value[i] = keep - eps;
      const double lm = loss_fn(false);
      p.value[i] = keep;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw std::runtime_error("grad_check: non-finite perturbed loss");
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = analytic[pi][i];
      // Coordinates whose true gradient is (structurally or by sign
      // cancellation) zero sit below what central differences can measure:
      // fd is pure rounding jitter, about ulp(loss)/(2*eps). When both
      // values are under that floor they agree to measurement precision; a
      // genuinely missing gradient would leave fd far above it.
      const double rel = (std::abs(an) < 1e-9 && std::abs(fd) < 1e-9)
                             ? 0.0
                             : std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-8);
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p.name;
        rep.worst_index = i;
        rep.worst_analytic = an;
        rep.worst_numeric = fd;
      }
    }
  }
  return rep;
}

}  // namespace foam::nets
