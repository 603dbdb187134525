#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/geo.hpp"

namespace poiattrib {

/// Feasible-POI hypothesis space for one stay: the POIs within the search
/// radius, nearest first, truncated to `max_size` and padded with invalid
/// slots up to it.
struct CandidateSet {
  std::vector<std::string> poi_ids;   ///< size == max_size; padding slots hold ""
  std::vector<double> distance_m;     ///< aligned; padding slots hold +inf
  std::vector<char> valid;            ///< aligned; 1 for real candidates
  std::size_t max_size = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), char{1}));
  }
  bool empty() const { return count() == 0; }
  bool contains(const std::string& poi_id) const {
    for (std::size_t i = 0; i < poi_ids.size(); ++i)
      if (valid[i] && poi_ids[i] == poi_id) return true;
    return false;
  }
};

/// Uniform grid over projected catalog coordinates; each POI lives in exactly
/// one cell. Immutable after build, safe for concurrent queries.
class SpatialGridIndex {
 public:
  SpatialGridIndex(const PoiCatalog& catalog, double cell_size_m = 100.0)
      : cell_size_(cell_size_m) {
    if (!(cell_size_m > 0.0))
      throw Error(ErrorKind::validation, "grid cell size must be positive");
    projected_.reserve(catalog.pois.size());
    for (std::size_t i = 0; i < catalog.pois.size(); ++i) {
      const ProjectedPoint p = project(catalog.pois[i].location, catalog.origin);
      projected_.push_back(p);
      cells_[key(cell_of(p.x), cell_of(p.y))].push_back(i);
    }
  }

  /// Catalog indices of POIs within `radius_m` of `q`, sorted by
  /// (distance, catalog index).
  std::vector<std::pair<double, std::size_t>> radius_query(const ProjectedPoint& q,
                                                           double radius_m) const {
    std::vector<std::pair<double, std::size_t>> hits;
    const double r2 = radius_m * radius_m;
    const std::int64_t cx0 = cell_of(q.x - radius_m), cx1 = cell_of(q.x + radius_m);
    const std::int64_t cy0 = cell_of(q.y - radius_m), cy1 = cell_of(q.y + radius_m);
    for (std::int64_t cx = cx0; cx <= cx1; ++cx)
      for (std::int64_t cy = cy0; cy <= cy1; ++cy) {
        auto it = cells_.find(key(cx, cy));
        if (it == cells_.end()) continue;
        for (std::size_t idx : it->second) {
          const double d2 = squared_distance(q, projected_[idx]);
          if (d2 <= r2) hits.emplace_back(std::sqrt(d2), idx);
        }
      }
    std::sort(hits.begin(), hits.end());
    return hits;
  }

  const ProjectedPoint& projected(std::size_t catalog_index) const {
    return projected_[catalog_index];
  }

  double cell_size_m() const { return cell_size_; }

 private:
  std::int64_t cell_of(double v) const {
    return static_cast<std::int64_t>(std::floor(v / cell_size_));
  }
  static std::uint64_t key(std::int64_t cx, std::int64_t cy) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(cx)) << 32) |
           static_cast<std::uint64_t>(static_cast<std::uint32_t>(cy));
  }

  double cell_size_;
  std::vector<ProjectedPoint> projected_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

/// All POIs within `radius_m` of the stay, nearest first, truncated to K.
/// Ties in distance break by catalog order (ids are unique, so this is a
/// total order). An empty result is legal.
inline CandidateSet build_candidate_set(const Stay& stay, const PoiCatalog& catalog,
                                        const SpatialGridIndex& index, double radius_m,
                                        std::size_t k) {
  if (!(radius_m > 0.0))
    throw Error(ErrorKind::validation, "build_candidate_set: radius must be positive");
  if (k < 1) throw Error(ErrorKind::validation, "build_candidate_set: K must be >= 1");

  const ProjectedPoint q = project(stay.location, catalog.origin);
  auto hits = index.radius_query(q, radius_m);
  if (hits.size() > k) hits.resize(k);

  CandidateSet out;
  out.max_size = k;
  out.poi_ids.assign(k, std::string{});
  out.distance_m.assign(k, std::numeric_limits<double>::infinity());
  out.valid.assign(k, 0);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    out.poi_ids[i] = catalog.pois[hits[i].second].id;
    out.distance_m[i] = hits[i].first;
    out.valid[i] = 1;
  }
  return out;
}

}  // namespace poiattrib
