#pragma once

// AdamW with decoupled weight decay, linear warmup plus staged step decay,
// and the training loop over either objective.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "meanflow/common.hpp"
#include "meanflow/data.hpp"
#include "meanflow/flow.hpp"
#include "meanflow/guidance.hpp"
#include "meanflow/net.hpp"

namespace meanflow {

enum class Objective { Fm, MeanFlow };

inline const char* objective_name(Objective o) {
  return o == Objective::Fm ? "fm" : "meanflow";
}

inline Objective objective_from_name(const std::string& s) {
  if (s == "fm") return Objective::Fm;
  if (s == "meanflow") return Objective::MeanFlow;
  throw std::invalid_argument("unknown objective: " + s);
}

struct TrainConfig {
  Objective objective = Objective::MeanFlow;
  int steps = 20000;
  int batch_size = 256;
  double lr_max = 1e-3;
  int warmup_steps = 500;
  // Absolute (step, lr) drops; desk default mirrors a 10x / 100x staging at
  // 62.5% and 87.5% of the run.
  std::vector<std::pair<int, double>> decay_milestones = {{12500, 1e-4}, {17500, 1e-5}};
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 1e-6;
  double drop_prob = 0.1;
  double grad_clip = 0.0;  // 0 disables clipping
  TimePairConfig time_pair;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints

  void validate() const {
    if (steps < 0 || batch_size < 1) throw std::invalid_argument("train: invalid steps/batch");
    if (warmup_steps < 0 || (steps > 0 && warmup_steps >= steps)) {
      throw std::invalid_argument("train: warmup_steps must be < steps");
    }
    if (!(lr_max > 0.0)) throw std::invalid_argument("train: lr_max must be positive");
    int prev = -1;
    for (const auto& [s, lr] : decay_milestones) {
      if (s <= prev) throw std::invalid_argument("train: milestones must increase in step");
      if (!(lr > 0.0)) throw std::invalid_argument("train: milestone lr must be positive");
      prev = s;
    }
  }
};

/// Rescale the desk schedule shape (2.5% linear warmup, 10x and 100x drops at
/// 62.5% and 87.5%) to a different run length.
inline TrainConfig scaled_schedule(TrainConfig cfg, int steps) {
  cfg.steps = steps;
  cfg.warmup_steps = std::max(1, steps / 40);
  cfg.decay_milestones = {{steps * 5 / 8, cfg.lr_max / 10.0},
                          {steps * 7 / 8, cfg.lr_max / 100.0}};
  return cfg;
}

/// Linear ramp from 0 to lr_max over warmup_steps, then piecewise-constant
/// drops at the milestones.
inline double lr_at_step(const TrainConfig& cfg, int step) {
  if (step < 0 || step >= cfg.steps) throw std::invalid_argument("lr_at_step: step out of range");
  if (step < cfg.warmup_steps) {
    return cfg.lr_max * static_cast<double>(step) / cfg.warmup_steps;
  }
  double lr = cfg.lr_max;
  for (const auto& [s, milestone_lr] : cfg.decay_milestones) {
    if (step >= s) lr = milestone_lr;
  }
  return lr;
}

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

inline OptimizerState make_optimizer_state(const std::vector<Value>& params) {
  OptimizerState st;
  for (const auto& p : params) {
    st.m.emplace_back(p.numel(), 0.0);
    st.v.emplace_back(p.numel(), 0.0);
  }
  return st;
}

/// One AdamW step with bias correction and decoupled decay:
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + 1e-8) + wd * theta).
inline void adamw_update(std::vector<Value>& params, const std::vector<Value>& grads,
                         OptimizerState& state, double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adamw_update: parameter/gradient count mismatch");
  }
  if (!(lr >= 0.0)) throw std::invalid_argument("adamw_update: negative learning rate");
  constexpr double eps = 1e-8;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].mutable_data();
    const auto& g = grads[i].data();
    if (g.size() != theta.size()) throw std::invalid_argument("adamw_update: shape mismatch");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (!std::isfinite(g[j])) throw NumericError("adamw_update: non-finite gradient");
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + cfg.weight_decay * theta[j]);
    }
  }
}

struct TraceRow {
  int step;
  double loss;
  double lr;
};

struct TrainResult {
  std::vector<TraceRow> trace;
};

/// Run the loop: sample batch, loss, gradients, AdamW, schedule. Deterministic
/// given (config, seed). Non-finite losses or gradients abort with a
/// diagnostic carrying the step and learning rate.
inline TrainResult train(
    VelocityModel& model, const ToyDataset& dataset, const TrainConfig& cfg,
    const std::function<void(int, const VelocityModel&)>& on_checkpoint = {}) {
  cfg.validate();
  Rng rng(cfg.seed);
  OptimizerState opt = make_optimizer_state(model.params);
  TrainResult result;
  result.trace.reserve(cfg.steps);

  TimePairConfig tp = cfg.time_pair;
  if (cfg.objective == Objective::Fm) tp.neq_ratio = 0.0;  // instantaneous supervision only

  for (int step = 0; step < cfg.steps; ++step) {
    const double lr = lr_at_step(cfg, step);
    double loss_value = 0.0;
    try {
      FlowBatch batch = sample_training_batch(dataset, cfg.batch_size, cfg.drop_prob, tp, rng);
      auto loss_fn = [&](const std::vector<Value>&) {
        return cfg.objective == Objective::Fm ? fm_loss(model, batch)
                                              : meanflow_loss(model, batch);
      };
      auto [loss, grads] = value_and_grad(loss_fn, model.params);
      loss_value = loss.item();

      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) {
          for (double v : g.data()) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
          const double factor = cfg.grad_clip / norm;
          for (auto& g : grads) {
            for (double& v : g.mutable_data()) v *= factor;
          }
        }
      }
      adamw_update(model.params, grads, opt, lr, cfg);
    } catch (const NumericError& e) {
      throw NumericError("training aborted at step " + std::to_string(step) +
                         " (lr=" + std::to_string(lr) + ", last loss=" +
                         std::to_string(loss_value) + "): " + e.what());
    }
    result.trace.push_back({step, loss_value, lr});
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      on_checkpoint(step + 1, model);
    }
  }
  return result;
}

}  // namespace meanflow
