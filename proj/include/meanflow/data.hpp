#pragma once

// Analytically tractable conditional 2D datasets. Every dataset assigns each
// draw a class in [0, K); training batches replace the class with the null
// token at the condition-dropout rate.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "meanflow/common.hpp"
#include "meanflow/flow.hpp"
#include "meanflow/guidance.hpp"

namespace meanflow {

enum class DatasetKind { Delta, GaussianMixture, Moons, Checkerboard };

inline const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::Delta: return "delta";
    case DatasetKind::GaussianMixture: return "gaussian_mixture";
    case DatasetKind::Moons: return "moons";
    case DatasetKind::Checkerboard: return "checkerboard";
  }
  return "?";
}

inline DatasetKind dataset_kind_from_name(const std::string& s) {
  if (s == "delta") return DatasetKind::Delta;
  if (s == "gaussian_mixture") return DatasetKind::GaussianMixture;
  if (s == "moons") return DatasetKind::Moons;
  if (s == "checkerboard") return DatasetKind::Checkerboard;
  throw std::invalid_argument("unknown dataset kind: " + s);
}

struct DatasetConfig {
  DatasetKind kind = DatasetKind::GaussianMixture;
  int num_classes = 4;
  // delta: the per-class points; gaussian_mixture: component means.
  // Empty means are placed evenly on a circle of radius 2*sqrt(2), which for
  // K = 4 is the four corners (+-2, +-2).
  std::vector<std::array<double, 2>> means;
  double scale = 0.3;        // gaussian_mixture component std
  double noise = 0.1;        // moons jitter std
  int board_size = 4;        // checkerboard cells per side
  double board_extent = 2.0; // checkerboard covers [-extent, extent]^2
  std::uint64_t seed = 0;
};

struct ToyDataset {
  DatasetConfig cfg;
  std::vector<std::array<double, 2>> class_points;      // delta / mixture means
  std::vector<std::vector<std::array<int, 2>>> cells;   // checkerboard, per class

  int num_classes() const { return cfg.num_classes; }
};

inline ToyDataset make_dataset(const DatasetConfig& cfg) {
  if (cfg.num_classes < 1) throw std::invalid_argument("make_dataset: need at least one class");
  ToyDataset ds;
  ds.cfg = cfg;
  switch (cfg.kind) {
    case DatasetKind::Delta:
    case DatasetKind::GaussianMixture: {
      if (cfg.kind == DatasetKind::GaussianMixture && !(cfg.scale > 0.0)) {
        throw std::invalid_argument("make_dataset: mixture scale must be positive");
      }
      if (!cfg.means.empty()) {
        if (static_cast<int>(cfg.means.size()) != cfg.num_classes) {
          throw std::invalid_argument("make_dataset: means count must equal num_classes");
        }
        ds.class_points = cfg.means;
      } else {
        const double radius = 2.0 * std::sqrt(2.0);
        for (int k = 0; k < cfg.num_classes; ++k) {
          const double a = 2.0 * kPi * k / cfg.num_classes + kPi / 4.0;
          ds.class_points.push_back({radius * std::cos(a), radius * std::sin(a)});
        }
      }
      break;
    }
    case DatasetKind::Moons:
      if (cfg.num_classes != 2) {
        throw std::invalid_argument("make_dataset: moons has exactly two classes");
      }
      if (!(cfg.noise >= 0.0)) throw std::invalid_argument("make_dataset: negative noise");
      break;
    case DatasetKind::Checkerboard: {
      if (cfg.board_size < 2 || !(cfg.board_extent > 0.0)) {
        throw std::invalid_argument("make_dataset: invalid checkerboard geometry");
      }
      // Round-robin the dark cells over the classes.
      ds.cells.resize(cfg.num_classes);
      int dark = 0;
      for (int i = 0; i < cfg.board_size; ++i) {
        for (int j = 0; j < cfg.board_size; ++j) {
          if ((i + j) % 2 == 0) ds.cells[dark++ % cfg.num_classes].push_back({i, j});
        }
      }
      if (dark < cfg.num_classes) {
        throw std::invalid_argument("make_dataset: more classes than checkerboard cells");
      }
      break;
    }
  }
  return ds;
}

/// One point from the given class's component of the dataset.
inline std::array<double, 2> draw_point(const ToyDataset& ds, int cls, Rng& rng) {
  if (cls < 0 || cls >= ds.num_classes()) {
    throw std::invalid_argument("draw_point: class out of range");
  }
  switch (ds.cfg.kind) {
    case DatasetKind::Delta:
      return ds.class_points[cls];
    case DatasetKind::GaussianMixture: {
      const auto& m = ds.class_points[cls];
      return {m[0] + ds.cfg.scale * rng.normal(), m[1] + ds.cfg.scale * rng.normal()};
    }
    case DatasetKind::Moons: {
      const double a = kPi * rng.uniform01();
      double x, y;
      if (cls == 0) {
        x = std::cos(a);
        y = std::sin(a) - 0.25;
      } else {
        x = 1.0 - std::cos(a);
        y = 0.25 - std::sin(a);
      }
      return {2.0 * x - 1.0 + ds.cfg.noise * rng.normal(),
              2.0 * y + ds.cfg.noise * rng.normal()};
    }
    case DatasetKind::Checkerboard: {
      const auto& cells = ds.cells[cls];
      const auto& cell = cells[rng.uniform_int(static_cast<int>(cells.size()))];
      const double side = 2.0 * ds.cfg.board_extent / ds.cfg.board_size;
      return {-ds.cfg.board_extent + (cell[0] + rng.uniform01()) * side,
              -ds.cfg.board_extent + (cell[1] + rng.uniform01()) * side};
    }
  }
  throw std::invalid_argument("draw_point: unknown kind");
}

inline int draw_class(const ToyDataset& ds, Rng& rng) {
  return rng.uniform_int(ds.num_classes());
}

/// Draws with classes uniform over [0, K), or fixed when cls >= 0.
inline std::vector<std::array<double, 2>> draw_points(const ToyDataset& ds, int n, int cls,
                                                      Rng& rng) {
  std::vector<std::array<double, 2>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    out.push_back(draw_point(ds, cls >= 0 ? cls : draw_class(ds, rng), rng));
  }
  return out;
}

/// B flow samples: x from the dataset, eps standard normal, (r, t) from the
/// time-pair law, and the condition dropped to the null token independently
/// with probability drop_prob.
inline FlowBatch sample_training_batch(const ToyDataset& ds, int batch_size, double drop_prob,
                                       const TimePairConfig& tp, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_training_batch: batch_size < 1");
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) {
    throw std::invalid_argument("sample_training_batch: drop_prob must be in [0, 1]");
  }
  FlowBatch batch;
  batch.samples.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const int cls = draw_class(ds, rng);
    const auto p = draw_point(ds, cls, rng);
    std::vector<double> eps = {rng.normal(), rng.normal()};
    const auto [r, t] = sample_time_pair(tp, rng);
    const Condition c =
        rng.uniform01() < drop_prob ? Condition::null() : Condition::cls(cls);
    batch.samples.push_back(make_flow_sample({p[0], p[1]}, std::move(eps), r, t, c));
  }
  return batch;
}

}  // namespace meanflow
