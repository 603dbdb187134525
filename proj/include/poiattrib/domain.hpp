#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "poiattrib/error.hpp"
#include "poiattrib/geo.hpp"

namespace poiattrib {

using CategoryId = std::uint32_t;

/// Bidirectional map between category names and dense indices 0..V-1.
/// Indices are assigned in lexicographic name order, so two catalogs with the
/// same category set always agree on ids.
class CategoryVocab {
 public:
  CategoryVocab() = default;

  /// Builds the vocabulary from an arbitrary collection of names
  /// (duplicates collapse).
  static CategoryVocab from_names(std::vector<std::string> names) {
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    CategoryVocab v;
    v.names_ = std::move(names);
    for (CategoryId i = 0; i < v.names_.size(); ++i) v.index_[v.names_[i]] = i;
    return v;
  }

  std::size_t size() const { return names_.size(); }

  const std::string& name(CategoryId id) const {
    if (id >= names_.size())
      throw Error(ErrorKind::unknown_category,
                  "category id " + std::to_string(id) + " out of range");
    return names_[id];
  }

  std::optional<CategoryId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  CategoryId require(const std::string& name) const {
    auto id = find(name);
    if (!id) throw Error(ErrorKind::unknown_category, "unknown category '" + name + "'");
    return *id;
  }

  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, CategoryId> index_;
};

/// A named place with one or more semantic categories.
struct Poi {
  std::string id;
  GeoPoint location;
  std::vector<CategoryId> categories;  ///< sorted, unique, non-empty
};

/// One contextual visit. Timestamps are kept twice: `arrival_s`/`departure_s`
/// are seconds since the dataset's earliest arrival (what the sequence model
/// consumes), `arrival_epoch_s`/`departure_epoch_s` are the raw epoch seconds
/// needed for hour-of-day features.
struct Stay {
  GeoPoint location;
  double arrival_s = 0.0;
  double departure_s = 0.0;
  double arrival_epoch_s = 0.0;
  double departure_epoch_s = 0.0;
  std::string true_poi;  ///< ground-truth poi id; empty when unlabeled

  double dwell_s() const { return departure_s - arrival_s; }
};

/// Chronologically ordered, temporally disjoint stays of one user.
struct Trajectory {
  std::string user_id;
  std::vector<Stay> stays;
};

/// POI catalog plus the vocabulary and projection origin derived from it.
/// The origin is the arithmetic centroid of the catalog coordinates; every
/// projected quantity in the pipeline is relative to it.
struct PoiCatalog {
  std::vector<Poi> pois;
  CategoryVocab vocab;
  GeoPoint origin;
  std::unordered_map<std::string, std::size_t> index_by_id;

  const Poi* find(const std::string& id) const {
    auto it = index_by_id.find(id);
    return it == index_by_id.end() ? nullptr : &pois[it->second];
  }

  const Poi& require(const std::string& id) const {
    const Poi* p = find(id);
    if (!p) throw Error(ErrorKind::unknown_poi, "unknown poi id '" + id + "'");
    return *p;
  }

  void rebuild_index() {
    index_by_id.clear();
    for (std::size_t i = 0; i < pois.size(); ++i) {
      auto [it, inserted] = index_by_id.emplace(pois[i].id, i);
      if (!inserted)
        throw Error(ErrorKind::duplicate_id, "duplicate poi id '" + pois[i].id + "'");
    }
  }

  void recompute_origin() {
    double lat = 0.0, lon = 0.0;
    if (pois.empty()) {
      origin = {0.0, 0.0};
      return;
    }
    for (const Poi& p : pois) {
      lat += p.location.lat;
      lon += p.location.lon;
    }
    origin = {lat / static_cast<double>(pois.size()),
              lon / static_cast<double>(pois.size())};
  }
};

struct TrajectoryViolation {
  enum class Kind { negative_dwell, out_of_order, overlap };
  Kind kind;
  std::size_t index;  ///< first stay of the offending pair (or the stay itself)
  std::string detail;
};

/// Empty result iff the trajectory is sorted by arrival and temporally
/// disjoint and every stay has departure >= arrival.
inline std::vector<TrajectoryViolation> validate_trajectory(const Trajectory& t) {
  std::vector<TrajectoryViolation> out;
  using Kind = TrajectoryViolation::Kind;
  for (std::size_t i = 0; i < t.stays.size(); ++i) {
    const Stay& s = t.stays[i];
    if (s.departure_s < s.arrival_s)
      out.push_back({Kind::negative_dwell, i,
                     "stay " + std::to_string(i) + " departs before it arrives"});
    if (i + 1 < t.stays.size()) {
      const Stay& next = t.stays[i + 1];
      if (next.arrival_s < s.arrival_s)
        out.push_back({Kind::out_of_order, i,
                       "stay " + std::to_string(i + 1) + " arrives before stay " +
                           std::to_string(i)});
      else if (next.arrival_s < s.departure_s)
        out.push_back({Kind::overlap, i,
                       "stays " + std::to_string(i) + " and " + std::to_string(i + 1) +
                           " overlap in time"});
    }
  }
  return out;
}

}  // namespace poiattrib
