#pragma once

// Conditional average-velocity network u(z, t, dt, c): an MLP over the data
// coordinates, sinusoidal embeddings of t and dt, and a learned condition
// embedding with a trailing null-token row.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "meanflow/common.hpp"
#include "meanflow/graph.hpp"

namespace meanflow {

enum class Activation { Tanh, Silu };

inline const char* activation_name(Activation a) {
  return a == Activation::Tanh ? "tanh" : "silu";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "silu") return Activation::Silu;
  throw std::invalid_argument("unknown activation: " + s);
}

struct NetConfig {
  int data_dim = 2;
  std::vector<int> hidden = {128, 128, 128};
  int time_embed_dim = 32;  // even; split between sin and cos phases
  int num_conditions = 4;   // K classes; the embedding table has K+1 rows
  int cond_embed_dim = 16;
  Activation activation = Activation::Silu;

  int input_dim() const { return data_dim + 2 * time_embed_dim + cond_embed_dim; }
};

class VelocityModel {
 public:
  NetConfig cfg;
  std::vector<std::string> param_names;
  std::vector<Value> params;  // cond_table, then weight/bias per layer

  VelocityModel() = default;
  VelocityModel(VelocityModel&&) = default;
  VelocityModel& operator=(VelocityModel&&) = default;

  // Deep copy: parameter leaves are cloned so the copies train independently.
  VelocityModel(const VelocityModel& other)
      : cfg(other.cfg),
        param_names(other.param_names),
        freq_row_(other.freq_row_),
        phase_row_(other.phase_row_) {
    params.reserve(other.params.size());
    for (const auto& p : other.params) {
      params.push_back(Value::leaf(p.shape(), p.data()));
    }
  }
  VelocityModel& operator=(const VelocityModel& other) {
    if (this != &other) *this = VelocityModel(other);
    return *this;
  }

  const Value& cond_table() const { return params[0]; }

  /// Batched evaluation. Z is [B, data_dim], T and DT are [B, 1] with
  /// 0 <= dt <= t <= 1 per row, conds has one entry per row.
  Value forward_batch(const Value& Z, const Value& T, const Value& DT,
                      const std::vector<Condition>& conds) const {
    const auto& zs = Z.shape();
    if (zs.size() != 2 || zs[1] != cfg.data_dim) {
      throw std::invalid_argument("forward: z must be [B, data_dim]");
    }
    const int b = zs[0];
    auto col = [&](const Value& v, const char* what) {
      const auto& s = v.shape();
      if (s.size() != 2 || s[0] != b || s[1] != 1) {
        throw std::invalid_argument(std::string("forward: ") + what + " must be [B, 1]");
      }
    };
    col(T, "t");
    col(DT, "dt");
    if (static_cast<int>(conds.size()) != b) {
      throw std::invalid_argument("forward: condition count mismatch");
    }
    std::vector<int> idx(conds.size());
    for (std::size_t i = 0; i < conds.size(); ++i) {
      const double t = T.data()[i], dt = DT.data()[i];
      if (!(t >= 0.0 && t <= 1.0) || !(dt >= 0.0 && dt <= t)) {
        throw std::invalid_argument("forward: need 0 <= dt <= t <= 1, got t=" +
                                    std::to_string(t) + " dt=" + std::to_string(dt));
      }
      if (conds[i].is_null) {
        idx[i] = cfg.num_conditions;
      } else {
        if (conds[i].index < 0 || conds[i].index >= cfg.num_conditions) {
          throw std::invalid_argument("forward: condition index out of range");
        }
        idx[i] = conds[i].index;
      }
    }

    eval_count_.fetch_add(static_cast<std::uint64_t>(b), std::memory_order_relaxed);

    Value h = concat({Z, time_embed(T), time_embed(DT), take_rows(cond_table(), idx)});
    const std::size_t layers = (params.size() - 1) / 2;
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      h = activate(affine(h, params[1 + 2 * l], params[2 + 2 * l]));
    }
    return affine(h, params[params.size() - 2], params[params.size() - 1]);
  }

  /// Single-point evaluation; returns a [data_dim] value.
  Value forward(const Value& z, double t, double dt, Condition c) const {
    Value zrow = reshape(z, {1, cfg.data_dim});
    Value out = forward_batch(zrow, Value::leaf({1, 1}, {t}), Value::leaf({1, 1}, {dt}), {c});
    return reshape(out, {cfg.data_dim});
  }

  /// Sinusoidal features of a [B, 1] column: sin(w_j * x + phase_j) with
  /// interleaved 0 and pi/2 phases, so x = 0 maps to (0, 1, 0, 1, ...).
  Value time_embed(const Value& x) const { return sin(add(matmul(x, freq_row_), phase_row_)); }

  std::uint64_t eval_count() const { return eval_count_.load(std::memory_order_relaxed); }
  void reset_eval_count() const { eval_count_.store(0, std::memory_order_relaxed); }

  friend VelocityModel init_model(const NetConfig& cfg, std::uint64_t seed);

 private:
  Value activate(const Value& v) const {
    return cfg.activation == Activation::Tanh ? tanh(v) : silu(v);
  }

  Value freq_row_, phase_row_;  // [1, time_embed_dim] constants
  mutable std::atomic<std::uint64_t> eval_count_{0};
};

/// Fresh model with He-style uniform fan-in init and a zero output head, so
/// the untrained network returns exactly zero everywhere.
inline VelocityModel init_model(const NetConfig& cfg, std::uint64_t seed) {
  if (cfg.data_dim <= 0 || cfg.time_embed_dim <= 0 || cfg.time_embed_dim % 2 != 0 ||
      cfg.num_conditions <= 0 || cfg.cond_embed_dim <= 0 || cfg.hidden.empty()) {
    throw std::invalid_argument("init_model: invalid dimensions");
  }
  for (int h : cfg.hidden) {
    if (h <= 0) throw std::invalid_argument("init_model: invalid hidden width");
  }

  VelocityModel m;
  m.cfg = cfg;
  Rng rng(seed);
  auto uniform_leaf = [&rng](std::vector<int> shape, double bound) {
    std::vector<double> d(detail::shape_numel(shape));
    for (double& v : d) v = bound * (2.0 * rng.uniform01() - 1.0);
    return Value::leaf(std::move(shape), std::move(d));
  };

  m.param_names.push_back("cond_table");
  m.params.push_back(uniform_leaf({cfg.num_conditions + 1, cfg.cond_embed_dim},
                                  1.0 / std::sqrt(static_cast<double>(cfg.cond_embed_dim))));

  std::vector<int> dims;
  dims.push_back(cfg.input_dim());
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(cfg.data_dim);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool head = l + 2 == dims.size();
    const std::string base = head ? "head" : "layers." + std::to_string(l);
    m.param_names.push_back(base + ".weight");
    if (head) {
      m.params.push_back(Value::zeros({dims[l], dims[l + 1]}));
    } else {
      m.params.push_back(uniform_leaf({dims[l], dims[l + 1]},
                                      std::sqrt(6.0 / static_cast<double>(dims[l]))));
    }
    m.param_names.push_back(base + ".bias");
    m.params.push_back(Value::zeros({1, dims[l + 1]}));
  }

  // Geometric frequencies 2*pi .. 200*pi give the MLP resolution across the
  // unit time interval; paired entries differ only by a quarter-period phase.
  const int half = cfg.time_embed_dim / 2;
  std::vector<double> freqs(cfg.time_embed_dim), phases(cfg.time_embed_dim);
  for (int j = 0; j < half; ++j) {
    const double w =
        2.0 * kPi * (half == 1 ? 1.0 : std::pow(100.0, static_cast<double>(j) / (half - 1)));
    freqs[2 * j] = w;
    freqs[2 * j + 1] = w;
    phases[2 * j] = 0.0;
    phases[2 * j + 1] = kPi / 2.0;
  }
  m.freq_row_ = Value::leaf({1, cfg.time_embed_dim}, std::move(freqs));
  m.phase_row_ = Value::leaf({1, cfg.time_embed_dim}, std::move(phases));
  return m;
}

/// Plain-vector convenience wrapper around forward().
template <class Model>
std::vector<double> u_eval(const Model& model, const std::vector<double>& z, double t,
                           double dt, Condition c) {
  Value out = model.forward(Value::leaf({static_cast<int>(z.size())}, z), t, dt, c);
  return out.data();
}

}  // namespace meanflow
