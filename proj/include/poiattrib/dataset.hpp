#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"

namespace poiattrib {

/// Earliest arrival (raw epoch seconds) across all stays.
inline double earliest_arrival_epoch(const std::vector<Trajectory>& trajectories) {
  double t0 = std::numeric_limits<double>::infinity();
  for (const auto& t : trajectories)
    for (const auto& s : t.stays) t0 = std::min(t0, s.arrival_epoch_s);
  if (!std::isfinite(t0))
    throw Error(ErrorKind::validation, "normalize_timestamps: no stays");
  return t0;
}

/// Shifts arrival_s/departure_s so the earliest arrival maps to zero
/// (or to `origin_epoch_s` when a training-time origin must be reused).
/// Raw epoch fields are untouched; dwell times are preserved.
inline void normalize_timestamps(std::vector<Trajectory>& trajectories,
                                 std::optional<double> origin_epoch_s = std::nullopt) {
  const double t0 = origin_epoch_s ? *origin_epoch_s : earliest_arrival_epoch(trajectories);
  for (auto& t : trajectories)
    for (auto& s : t.stays) {
      s.arrival_s = s.arrival_epoch_s - t0;
      s.departure_s = s.departure_epoch_s - t0;
    }
}

/// GPS noise model: per-stay sigma drawn uniformly from `sigma_choices`
/// (degrees), then independent zero-mean Gaussian offsets on lat and lon.
struct NoiseConfig {
  std::vector<double> sigma_choices;
  std::uint64_t rng_seed = 0;

  bool valid() const {
    for (double s : sigma_choices)
      if (!(s >= 0.0)) return false;
    return !sigma_choices.empty();
  }
};

/// Perturbs stay coordinates in place. Timestamps, labels, and ordering are
/// never altered. Deterministic given the seed.
inline void add_gaussian_noise(std::vector<Trajectory>& trajectories, const NoiseConfig& cfg) {
  if (!cfg.valid())
    throw Error(ErrorKind::validation, "add_gaussian_noise: invalid NoiseConfig");
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_int_distribution<std::size_t> pick(0, cfg.sigma_choices.size() - 1);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& t : trajectories)
    for (auto& s : t.stays) {
      const double sigma = cfg.sigma_choices[pick(rng)];
      // Draw even when sigma == 0 so the stream position does not depend on
      // which sigma was selected.
      const double dlat = unit(rng) * sigma;
      const double dlon = unit(rng) * sigma;
      s.location.lat = std::clamp(s.location.lat + dlat, -90.0, 90.0);
      s.location.lon = std::clamp(s.location.lon + dlon, -180.0, 180.0);
    }
}

/// Splits trajectories by user into disjoint train/test sets.
/// Deterministic given the seed.
inline std::pair<std::vector<Trajectory>, std::vector<Trajectory>> split_train_test(
    std::vector<Trajectory> trajectories, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw Error(ErrorKind::validation, "split_train_test: ratio must be in (0, 1)");
  if (trajectories.size() < 2)
    throw Error(ErrorKind::validation, "split_train_test: need at least 2 users");

  std::sort(trajectories.begin(), trajectories.end(),
            [](const Trajectory& a, const Trajectory& b) { return a.user_id < b.user_id; });
  std::vector<std::size_t> order(trajectories.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = trajectories.size();
  auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  std::pair<std::vector<Trajectory>, std::vector<Trajectory>> out;
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? out.first : out.second).push_back(std::move(trajectories[order[i]]));
  auto by_user = [](const Trajectory& a, const Trajectory& b) { return a.user_id < b.user_id; };
  std::sort(out.first.begin(), out.first.end(), by_user);
  std::sort(out.second.begin(), out.second.end(), by_user);
  return out;
}

}  // namespace poiattrib
