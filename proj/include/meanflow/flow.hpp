#pragma once

// Linear flow paths, ground-truth instantaneous velocities, the flow-matching
// loss, and the average-velocity loss whose regression target is computed by
// one forward-mode directional derivative and frozen with stop_gradient.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "meanflow/common.hpp"
#include "meanflow/graph.hpp"

namespace meanflow {

/// One training point on the path z_t = (1-t) x + t eps with velocity eps - x.
struct FlowSample {
  std::vector<double> x, eps;
  double r = 0.0, t = 0.0;
  std::vector<double> z_t, v;
  Condition c;
};

inline FlowSample make_flow_sample(std::vector<double> x, std::vector<double> eps, double r,
                                   double t, Condition c) {
  if (x.size() != eps.size() || x.empty()) {
    throw std::invalid_argument("make_flow_sample: x/eps size mismatch");
  }
  if (!(r >= 0.0 && r <= t && t <= 1.0)) {
    throw std::invalid_argument("make_flow_sample: need 0 <= r <= t <= 1");
  }
  FlowSample s;
  s.r = r;
  s.t = t;
  s.c = c;
  s.z_t.resize(x.size());
  s.v.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    s.z_t[i] = (1.0 - t) * x[i] + t * eps[i];
    s.v[i] = eps[i] - x[i];
  }
  s.x = std::move(x);
  s.eps = std::move(eps);
  return s;
}

struct FlowBatch {
  std::vector<FlowSample> samples;

  int size() const { return static_cast<int>(samples.size()); }
  int data_dim() const {
    if (samples.empty()) throw std::invalid_argument("FlowBatch: empty");
    const std::size_t d = samples[0].x.size();
    for (const auto& s : samples) {
      if (s.x.size() != d) throw std::invalid_argument("FlowBatch: mixed data_dim");
    }
    return static_cast<int>(d);
  }
};

namespace detail {

struct StagedBatch {
  Value Z, T, DT, V;    // [n,d], [n,1], [n,1], [n,d]
  Value t_minus_r;      // [n,1]
  std::vector<Condition> conds;
};

inline StagedBatch stage_batch(const FlowBatch& batch, const std::vector<int>& rows) {
  const int d = batch.data_dim();
  const int n = static_cast<int>(rows.size());
  std::vector<double> z(static_cast<std::size_t>(n) * d), v(static_cast<std::size_t>(n) * d);
  std::vector<double> t(n), dt(n);
  StagedBatch st;
  st.conds.reserve(rows.size());
  for (int i = 0; i < n; ++i) {
    const FlowSample& s = batch.samples[rows[i]];
    std::copy(s.z_t.begin(), s.z_t.end(), z.begin() + static_cast<std::size_t>(i) * d);
    std::copy(s.v.begin(), s.v.end(), v.begin() + static_cast<std::size_t>(i) * d);
    t[i] = s.t;
    dt[i] = s.t - s.r;
    st.conds.push_back(s.c);
  }
  st.Z = Value::leaf({n, d}, std::move(z));
  st.V = Value::leaf({n, d}, std::move(v));
  st.T = Value::leaf({n, 1}, std::move(t));
  st.DT = Value::leaf({n, 1}, dt);
  st.t_minus_r = Value::leaf({n, 1}, std::move(dt));
  return st;
}

inline std::vector<int> all_rows(const FlowBatch& b) {
  std::vector<int> rows(b.samples.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return rows;
}

// Prediction and directional derivative of the model along (v, 1, 1): the
// total time derivative of u(z_t, t, dt) with r held fixed, where dz/dt = v
// and d(dt)/dt = 1.
template <class Model>
std::pair<Value, Value> u_and_dudt(const Model& model, const StagedBatch& st) {
  const auto& conds = st.conds;
  auto f = [&model, &conds](const std::vector<Value>& in) {
    return model.forward_batch(in[0], in[1], in[2], conds);
  };
  const int n = st.T.shape()[0];
  return jvp(f, {st.Z, st.T, st.DT},
             {st.V, Value::full({n, 1}, 1.0), Value::full({n, 1}, 1.0)});
}

}  // namespace detail

/// Mean squared error of u(z_t, t, 0, c) against the ground-truth velocity.
/// Every sample must have r == t.
template <class Model>
Value fm_loss(const Model& model, const FlowBatch& batch) {
  if (batch.samples.empty()) throw std::invalid_argument("fm_loss: empty batch");
  for (const auto& s : batch.samples) {
    if (s.r != s.t) throw std::invalid_argument("fm_loss: batch contains r != t samples");
  }
  auto st = detail::stage_batch(batch, detail::all_rows(batch));
  Value pred = model.forward_batch(st.Z, st.T, st.DT, st.conds);
  return scale(sqnorm(sub(pred, st.V)), 1.0 / batch.size());
}

/// Frozen regression target u_tgt = v - (t-r) * d/dt u(z_t, t, t-r, c) for a
/// single sample, computed with one JVP along (v, 1, 1).
template <class Model>
Value meanflow_target(const Model& model, const FlowSample& sample) {
  FlowBatch one;
  one.samples.push_back(sample);
  auto st = detail::stage_batch(one, {0});
  auto [pred, dudt] = detail::u_and_dudt(model, st);
  (void)pred;
  Value tgt = sub(st.V, mul(st.t_minus_r, dudt));
  return reshape(stop_gradient(tgt), {static_cast<int>(sample.x.size())});
}

/// Mean squared error of u(z_t, t, t-r, c) against the frozen target. Samples
/// with r == t contribute plain flow-matching terms (their target is exactly
/// v and needs no derivative), so on an all-equal batch this reproduces
/// fm_loss arithmetic exactly. `freeze_target` exists for tests that verify
/// the stop-gradient marker changes the gradient; training always freezes.
template <class Model>
Value meanflow_loss(const Model& model, const FlowBatch& batch, bool freeze_target = true) {
  if (batch.samples.empty()) throw std::invalid_argument("meanflow_loss: empty batch");
  std::vector<int> eq_rows, neq_rows;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    (batch.samples[i].r == batch.samples[i].t ? eq_rows : neq_rows)
        .push_back(static_cast<int>(i));
  }

  Value total;
  if (!eq_rows.empty()) {
    auto st = detail::stage_batch(batch, eq_rows);
    Value pred = model.forward_batch(st.Z, st.T, st.DT, st.conds);
    total = sqnorm(sub(pred, st.V));
  }
  if (!neq_rows.empty()) {
    auto st = detail::stage_batch(batch, neq_rows);
    auto [pred, dudt] = detail::u_and_dudt(model, st);
    Value tgt = sub(st.V, mul(st.t_minus_r, dudt));
    if (freeze_target) tgt = stop_gradient(tgt);
    Value sq = sqnorm(sub(pred, tgt));
    total = total.defined() ? add(total, sq) : sq;
  }
  return scale(total, 1.0 / batch.size());
}

}  // namespace meanflow
