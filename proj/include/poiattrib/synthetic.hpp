#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poiattrib/csv.hpp"
#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/geo.hpp"

namespace poiattrib {

/// Desk-scale labeled mobility generator. Users carry a Dirichlet preference
/// over categories; each stay picks a category from the preference, a POI of
/// that category, and an arrival hour from the category's hour-of-day
/// Gaussian. Stays sit exactly on their POI, so ground truth is exact until
/// noise is injected downstream.
struct SyntheticConfig {
  std::uint64_t rng_seed = 0;
  int n_users = 10;
  int n_pois = 100;
  int n_categories = 4;
  int days = 7;
  double extent_m = 1000.0;            ///< side of the square placement area
  GeoPoint center{34.0, -118.25};      ///< geographic center of the area
  std::vector<double> category_hour_means;    ///< empty -> evenly spaced over the day
  std::vector<double> category_hour_stddevs;  ///< empty -> all 0.75 h
  std::vector<double> category_count_weights = {0.7, 0.2, 0.1};  ///< POI carries 1, 2, ... categories
  double preference_concentration = 0.5;      ///< Dirichlet alpha per category
  int stays_per_user_day = 6;
  double dwell_min_minutes = 20.0;
  double dwell_max_minutes = 90.0;

  void validate() const {
    if (n_users < 1 || n_pois < 1 || n_categories < 1 || days < 1 || stays_per_user_day < 1)
      throw Error(ErrorKind::validation, "synthetic config: all counts must be >= 1");
    if (!(extent_m > 0.0))
      throw Error(ErrorKind::validation, "synthetic config: extent must be positive");
    if (!(preference_concentration > 0.0))
      throw Error(ErrorKind::validation, "synthetic config: concentration must be positive");
    if (!category_hour_means.empty() &&
        category_hour_means.size() != static_cast<std::size_t>(n_categories))
      throw Error(ErrorKind::validation, "synthetic config: hour means size mismatch");
    if (!category_hour_stddevs.empty() &&
        category_hour_stddevs.size() != static_cast<std::size_t>(n_categories))
      throw Error(ErrorKind::validation, "synthetic config: hour stddevs size mismatch");
    double weight_sum = 0.0;
    for (double w : category_count_weights) {
      if (!(w >= 0.0))
        throw Error(ErrorKind::validation, "synthetic config: count weights must be >= 0");
      weight_sum += w;
    }
    if (!(weight_sum > 0.0))
      throw Error(ErrorKind::validation, "synthetic config: count weights must not all be zero");
  }

  std::vector<double> hour_means() const {
    if (!category_hour_means.empty()) return category_hour_means;
    std::vector<double> m(n_categories);
    for (int c = 0; c < n_categories; ++c)
      m[c] = (c + 0.5) * 24.0 / static_cast<double>(n_categories);
    return m;
  }

  std::vector<double> hour_stddevs() const {
    if (!category_hour_stddevs.empty()) return category_hour_stddevs;
    return std::vector<double>(n_categories, 0.75);
  }
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = nlohmann::json{{"rng_seed", c.rng_seed},
                     {"n_users", c.n_users},
                     {"n_pois", c.n_pois},
                     {"n_categories", c.n_categories},
                     {"days", c.days},
                     {"extent_m", c.extent_m},
                     {"center_lat", c.center.lat},
                     {"center_lon", c.center.lon},
                     {"category_hour_means", c.category_hour_means},
                     {"category_hour_stddevs", c.category_hour_stddevs},
                     {"category_count_weights", c.category_count_weights},
                     {"preference_concentration", c.preference_concentration},
                     {"stays_per_user_day", c.stays_per_user_day},
                     {"dwell_min_minutes", c.dwell_min_minutes},
                     {"dwell_max_minutes", c.dwell_max_minutes}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.n_users = j.value("n_users", c.n_users);
  c.n_pois = j.value("n_pois", c.n_pois);
  c.n_categories = j.value("n_categories", c.n_categories);
  c.days = j.value("days", c.days);
  c.extent_m = j.value("extent_m", c.extent_m);
  c.center.lat = j.value("center_lat", c.center.lat);
  c.center.lon = j.value("center_lon", c.center.lon);
  c.category_hour_means = j.value("category_hour_means", c.category_hour_means);
  c.category_hour_stddevs = j.value("category_hour_stddevs", c.category_hour_stddevs);
  c.category_count_weights = j.value("category_count_weights", c.category_count_weights);
  c.preference_concentration = j.value("preference_concentration", c.preference_concentration);
  c.stays_per_user_day = j.value("stays_per_user_day", c.stays_per_user_day);
  c.dwell_min_minutes = j.value("dwell_min_minutes", c.dwell_min_minutes);
  c.dwell_max_minutes = j.value("dwell_max_minutes", c.dwell_max_minutes);
}

struct SyntheticDataset {
  PoiCatalog catalog;
  std::vector<Trajectory> trajectories;  ///< labeled, normalized timestamps
};

namespace detail {

inline std::string padded_id(const char* prefix, int i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%0*d", prefix, std::min(width, 16), i);
  return buf;
}

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int V = cfg.n_categories;
  const auto means = cfg.hour_means();
  const auto stds = cfg.hour_stddevs();

  SyntheticDataset out;

  std::vector<std::string> cat_names(V);
  for (int c = 0; c < V; ++c) cat_names[c] = detail::padded_id("cat_", c, 3);
  out.catalog.vocab = CategoryVocab::from_names(cat_names);

  // POIs: uniform in the extent, category count drawn from the configured mix.
  double count_weight_total = 0.0;
  for (double w : cfg.category_count_weights) count_weight_total += w;
  const int poi_width = std::max(4, static_cast<int>(std::to_string(cfg.n_pois).size()));
  for (int i = 0; i < cfg.n_pois; ++i) {
    Poi p;
    p.id = detail::padded_id("p", i, poi_width);
    const double x = (unit(rng) - 0.5) * cfg.extent_m;
    const double y = (unit(rng) - 0.5) * cfg.extent_m;
    p.location = unproject({x, y}, cfg.center);
    const double u = unit(rng);
    int n_cats = static_cast<int>(cfg.category_count_weights.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < cfg.category_count_weights.size(); ++k) {
      acc += cfg.category_count_weights[k];
      if (u < acc / count_weight_total) {
        n_cats = static_cast<int>(k) + 1;
        break;
      }
    }
    n_cats = std::min(n_cats, V);
    std::vector<CategoryId> pool(V);
    for (int c = 0; c < V; ++c) pool[c] = out.catalog.vocab.require(cat_names[c]);
    for (int k = 0; k < n_cats; ++k) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const std::size_t j = pick(rng);
      p.categories.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    std::sort(p.categories.begin(), p.categories.end());
    out.catalog.pois.push_back(std::move(p));
  }

  // Every category must be attached to at least one POI so user preferences
  // are always realizable.
  std::vector<std::vector<std::size_t>> pois_of_category(V);
  for (std::size_t i = 0; i < out.catalog.pois.size(); ++i)
    for (CategoryId c : out.catalog.pois[i].categories) pois_of_category[c].push_back(i);
  for (int c = 0; c < V; ++c)
    if (pois_of_category[c].empty()) {
      const auto host = static_cast<std::size_t>(c) % out.catalog.pois.size();
      out.catalog.pois[host].categories.push_back(static_cast<CategoryId>(c));
      std::sort(out.catalog.pois[host].categories.begin(),
                out.catalog.pois[host].categories.end());
      pois_of_category[c].push_back(host);
    }

  out.catalog.rebuild_index();
  out.catalog.recompute_origin();

  // Users and their stays.
  const int user_width = std::max(3, static_cast<int>(std::to_string(cfg.n_users).size()));
  std::gamma_distribution<double> gamma(cfg.preference_concentration, 1.0);
  std::uniform_real_distribution<double> dwell_min(cfg.dwell_min_minutes, cfg.dwell_max_minutes);

  for (int u = 0; u < cfg.n_users; ++u) {
    Trajectory traj;
    traj.user_id = detail::padded_id("u", u, user_width);

    std::vector<double> pref(V);
    double pref_sum = 0.0;
    for (int c = 0; c < V; ++c) {
      pref[c] = std::max(gamma(rng), 1e-12);
      pref_sum += pref[c];
    }
    for (double& p : pref) p /= pref_sum;
    std::discrete_distribution<int> pick_category(pref.begin(), pref.end());

    for (int day = 0; day < cfg.days; ++day) {
      std::vector<Stay> day_stays;
      for (int k = 0; k < cfg.stays_per_user_day; ++k) {
        const int c = pick_category(rng);
        std::uniform_int_distribution<std::size_t> pick_poi(0, pois_of_category[c].size() - 1);
        const Poi& poi = out.catalog.pois[pois_of_category[c][pick_poi(rng)]];

        std::normal_distribution<double> hour_dist(means[c], stds[c]);
        double hour = hour_dist(rng);
        for (int tries = 0; (hour < 0.0 || hour >= 24.0) && tries < 100; ++tries)
          hour = hour_dist(rng);
        hour = std::clamp(hour, 0.0, 23.999);

        Stay s;
        s.location = poi.location;
        s.arrival_epoch_s = static_cast<double>(day) * 86400.0 + hour * 3600.0;
        s.departure_epoch_s = s.arrival_epoch_s + dwell_min(rng) * 60.0;
        s.true_poi = poi.id;
        day_stays.push_back(std::move(s));
      }
      std::sort(day_stays.begin(), day_stays.end(),
                [](const Stay& a, const Stay& b) { return a.arrival_epoch_s < b.arrival_epoch_s; });
      for (auto& s : day_stays) {
        if (!traj.stays.empty() && s.arrival_epoch_s < traj.stays.back().departure_epoch_s)
          continue;  // drop overlapping stays to keep the trajectory disjoint
        traj.stays.push_back(std::move(s));
      }
    }
    out.trajectories.push_back(std::move(traj));
  }

  // Normalized clock starts at the earliest arrival.
  double t0 = std::numeric_limits<double>::infinity();
  for (const auto& t : out.trajectories)
    for (const auto& s : t.stays) t0 = std::min(t0, s.arrival_epoch_s);
  if (std::isfinite(t0))
    for (auto& t : out.trajectories)
      for (auto& s : t.stays) {
        s.arrival_s = s.arrival_epoch_s - t0;
        s.departure_s = s.departure_epoch_s - t0;
      }

  return out;
}

/// Writes pois.csv, stays.csv, and manifest.json under `dir`.
inline void write_synthetic(const SyntheticDataset& data, const SyntheticConfig& cfg,
                            const std::string& dir) {
  save_pois(data.catalog, dir + "/pois.csv");
  save_stays(data.trajectories, dir + "/stays.csv");

  std::size_t n_stays = 0;
  for (const auto& t : data.trajectories) n_stays += t.stays.size();
  nlohmann::json manifest{{"seed", cfg.rng_seed},
                          {"config", cfg},
                          {"n_pois", data.catalog.pois.size()},
                          {"n_users", data.trajectories.size()},
                          {"n_stays", n_stays},
                          {"n_categories", data.catalog.vocab.size()}};
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw Error(ErrorKind::io, "cannot open '" + dir + "/manifest.json' for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw Error(ErrorKind::io, "error writing manifest.json");
}

}  // namespace poiattrib
