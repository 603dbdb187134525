#pragma once

#include <cmath>

namespace poiattrib {

/// WGS84 coordinate in degrees.
struct GeoPoint {
  double lat = 0.0;  ///< [-90, 90]
  double lon = 0.0;  ///< [-180, 180]

  bool valid() const {
    return std::isfinite(lat) && std::isfinite(lon) &&
           lat >= -90.0 && lat <= 90.0 && lon >= -180.0 && lon <= 180.0;
  }
};

/// Meters east/north of a projection origin.
struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
};

inline constexpr double kEarthRadiusM = 6'371'000.0;
inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDegToRad = kPi / 180.0;

/// Local equirectangular projection around `origin`. Metric-accurate at city
/// scale and trivially invertible; see unproject().
inline ProjectedPoint project(const GeoPoint& p, const GeoPoint& origin) {
  const double scale = kEarthRadiusM * kDegToRad;
  return {(p.lon - origin.lon) * std::cos(origin.lat * kDegToRad) * scale,
          (p.lat - origin.lat) * scale};
}

inline GeoPoint unproject(const ProjectedPoint& p, const GeoPoint& origin) {
  const double scale = kEarthRadiusM * kDegToRad;
  return {origin.lat + p.y / scale,
          origin.lon + p.x / (scale * std::cos(origin.lat * kDegToRad))};
}

inline double squared_distance(const ProjectedPoint& a, const ProjectedPoint& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

inline double distance_m(const ProjectedPoint& a, const ProjectedPoint& b) {
  return std::sqrt(squared_distance(a, b));
}

}  // namespace poiattrib
