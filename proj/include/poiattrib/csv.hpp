#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"

namespace poiattrib {

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& path, std::size_t lineno) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw Error(ErrorKind::parse,
                path + ":" + std::to_string(lineno) + ": expected a number, got '" + s + "'");
  return v;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

inline constexpr const char* kPoiCsvHeader = "poi_id,lat,lon,categories";
inline constexpr const char* kStayCsvHeader =
    "user_id,lat,lon,arrival_epoch_s,departure_epoch_s,poi_id";

/// Loads a POI catalog. Category names are split on ';', interned into a
/// deterministic vocabulary (lexicographic order), and each POI's category
/// list is stored sorted and deduplicated.
inline PoiCatalog load_pois(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");

  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line))
    throw Error(ErrorKind::parse, path + ": empty file");
  ++lineno;
  detail::strip_cr(line);
  if (line != kPoiCsvHeader)
    throw Error(ErrorKind::parse, path + ":1: expected header '" +
                                      std::string(kPoiCsvHeader) + "'");

  struct Row {
    std::string id;
    GeoPoint loc;
    std::vector<std::string> cats;
  };
  std::vector<Row> rows;
  std::vector<std::string> all_names;

  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto fields = detail::split(line, ',');
    if (fields.size() != 4)
      throw Error(ErrorKind::parse,
                  path + ":" + std::to_string(lineno) + ": expected 4 fields, got " +
                      std::to_string(fields.size()));
    Row row;
    row.id = fields[0];
    if (row.id.empty())
      throw Error(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": empty poi_id");
    row.loc = {detail::parse_double(fields[1], path, lineno),
               detail::parse_double(fields[2], path, lineno)};
    if (!row.loc.valid())
      throw Error(ErrorKind::parse,
                  path + ":" + std::to_string(lineno) + ": coordinates out of range");
    for (auto& name : detail::split(fields[3], ';'))
      if (!name.empty()) row.cats.push_back(name);
    if (row.cats.empty())
      throw Error(ErrorKind::empty_category,
                  path + ":" + std::to_string(lineno) + ": poi '" + row.id +
                      "' has no categories");
    for (const auto& c : row.cats) all_names.push_back(c);
    rows.push_back(std::move(row));
  }

  PoiCatalog catalog;
  catalog.vocab = CategoryVocab::from_names(std::move(all_names));
  catalog.pois.reserve(rows.size());
  for (auto& row : rows) {
    Poi poi;
    poi.id = std::move(row.id);
    poi.location = row.loc;
    for (const auto& name : row.cats) poi.categories.push_back(catalog.vocab.require(name));
    std::sort(poi.categories.begin(), poi.categories.end());
    poi.categories.erase(std::unique(poi.categories.begin(), poi.categories.end()),
                         poi.categories.end());
    catalog.pois.push_back(std::move(poi));
  }
  catalog.rebuild_index();
  catalog.recompute_origin();
  return catalog;
}

inline void save_pois(const PoiCatalog& catalog, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot open '" + path + "' for writing");
  out << kPoiCsvHeader << "\n";
  for (const Poi& p : catalog.pois) {
    out << p.id << ',' << detail::fmt_double(p.location.lat) << ','
        << detail::fmt_double(p.location.lon) << ',';
    for (std::size_t i = 0; i < p.categories.size(); ++i) {
      if (i) out << ';';
      out << catalog.vocab.name(p.categories[i]);
    }
    out << "\n";
  }
  if (!out) throw Error(ErrorKind::io, "error writing '" + path + "'");
}

/// Loads stays grouped into one trajectory per user (users sorted by id,
/// stays sorted by arrival). Timestamps are raw epoch seconds; call
/// normalize_timestamps() before feeding the stays to the model.
inline std::vector<Trajectory> load_stays(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");

  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line))
    throw Error(ErrorKind::parse, path + ": empty file");
  ++lineno;
  detail::strip_cr(line);
  if (line != kStayCsvHeader)
    throw Error(ErrorKind::parse, path + ":1: expected header '" +
                                      std::string(kStayCsvHeader) + "'");

  std::map<std::string, std::vector<Stay>> by_user;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto fields = detail::split(line, ',');
    if (fields.size() != 6)
      throw Error(ErrorKind::parse,
                  path + ":" + std::to_string(lineno) + ": expected 6 fields, got " +
                      std::to_string(fields.size()));
    if (fields[0].empty())
      throw Error(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": empty user_id");
    Stay s;
    s.location = {detail::parse_double(fields[1], path, lineno),
                  detail::parse_double(fields[2], path, lineno)};
    if (!s.location.valid())
      throw Error(ErrorKind::parse,
                  path + ":" + std::to_string(lineno) + ": coordinates out of range");
    s.arrival_epoch_s = detail::parse_double(fields[3], path, lineno);
    s.departure_epoch_s = detail::parse_double(fields[4], path, lineno);
    if (s.departure_epoch_s < s.arrival_epoch_s)
      throw Error(ErrorKind::parse,
                  path + ":" + std::to_string(lineno) + ": departure before arrival");
    s.arrival_s = s.arrival_epoch_s;
    s.departure_s = s.departure_epoch_s;
    if (!fields[5].empty()) s.true_poi = fields[5];
    by_user[fields[0]].push_back(std::move(s));
  }

  std::vector<Trajectory> out;
  out.reserve(by_user.size());
  for (auto& [user, stays] : by_user) {
    std::stable_sort(stays.begin(), stays.end(),
                     [](const Stay& a, const Stay& b) { return a.arrival_s < b.arrival_s; });
    out.push_back(Trajectory{user, std::move(stays)});
  }
  return out;
}

inline void save_stays(const std::vector<Trajectory>& trajectories, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot open '" + path + "' for writing");
  out << kStayCsvHeader << "\n";
  for (const Trajectory& t : trajectories)
    for (const Stay& s : t.stays) {
      out << t.user_id << ',' << detail::fmt_double(s.location.lat) << ','
          << detail::fmt_double(s.location.lon) << ','
          << detail::fmt_double(s.arrival_epoch_s) << ','
          << detail::fmt_double(s.departure_epoch_s) << ','
          << s.true_poi << "\n";
    }
  if (!out) throw Error(ErrorKind::io, "error writing '" + path + "'");
}

}  // namespace poiattrib
