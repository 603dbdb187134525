#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/grid_index.hpp"

namespace poiattrib {

/// Nearest-centroid heuristic: POIs within the threshold ranked by projected
/// distance ascending, ties by poi id ascending, truncated to k.
inline std::vector<std::string> closest_centroid_topk(const Stay& stay,
                                                      const PoiCatalog& catalog,
                                                      const SpatialGridIndex& index,
                                                      std::size_t k, double threshold_m) {
  if (!(threshold_m > 0.0))
    throw Error(ErrorKind::validation, "distance threshold must be positive");
  if (k < 1) throw Error(ErrorKind::validation, "k must be >= 1");
  const auto hits = index.radius_query(project(stay.location, catalog.origin), threshold_m);
  std::vector<std::pair<double, std::string>> ranked;
  ranked.reserve(hits.size());
  for (const auto& [dist, idx] : hits)
    ranked.emplace_back(dist, catalog.pois[idx].id);
  std::sort(ranked.begin(), ranked.end());
  if (ranked.size() > k) ranked.resize(k);
  std::vector<std::string> ids;
  ids.reserve(ranked.size());
  for (auto& [dist, id] : ranked) ids.push_back(std::move(id));
  return ids;
}

}  // namespace poiattrib
