#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/geo.hpp"
#include "poiattrib/numeric.hpp"
#include "poiattrib/serio.hpp"

namespace poiattrib {

/// How arrival time enters the density: a scalar hour in [0,24), or the pair
/// (sin, cos) of the hour angle to avoid the midnight seam.
enum class HourFeature : std::uint16_t { scalar = 0, cyclic = 1 };

inline int kde_feature_dim(HourFeature mode) { return mode == HourFeature::scalar ? 3 : 4; }

struct KdeOptions {
  HourFeature hour_mode = HourFeature::scalar;
  std::size_t subsample_cap = 20000;  ///< max training points per category
  std::uint64_t subsample_seed = 0;
  double floor_log_density = -30.0;
};

/// Spatiotemporal features of a stay: projected (x, y) in meters plus the
/// hour-of-day features. Hour comes from the raw arrival epoch, so it is
/// invariant to the dataset's normalized clock.
inline Eigen::RowVectorXd stay_features(const Stay& s, const GeoPoint& origin,
                                        HourFeature mode) {
  const ProjectedPoint xy = project(s.location, origin);
  double tod = std::fmod(s.arrival_epoch_s, 86400.0);
  if (tod < 0.0) tod += 86400.0;
  const double hour = tod / 3600.0;
  Eigen::RowVectorXd f(kde_feature_dim(mode));
  f(0) = xy.x;
  f(1) = xy.y;
  if (mode == HourFeature::scalar) {
    f(2) = hour;
  } else {
    const double angle = 2.0 * kPi * hour / 24.0;
    f(2) = std::sin(angle);
    f(3) = std::cos(angle);
  }
  return f;
}

/// Per-feature standardization fitted on the pooled training points and
/// shared by every category, so per-category densities stay comparable.
struct FeatureScaler {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd stddev;
  std::vector<std::uint8_t> degenerate;  ///< 1 where stddev was forced to 1

  static FeatureScaler fit(const Eigen::MatrixXd& pooled) {
    if (pooled.rows() < 1)
      throw Error(ErrorKind::validation, "cannot fit a scaler on zero points");
    FeatureScaler s;
    s.mean = pooled.colwise().mean();
    const Eigen::RowVectorXd var =
        (pooled.rowwise() - s.mean).array().square().colwise().mean().matrix();
    s.stddev = var.array().sqrt().matrix();
    s.degenerate.assign(static_cast<std::size_t>(pooled.cols()), 0);
    for (Eigen::Index d = 0; d < s.stddev.size(); ++d)
      if (!(s.stddev(d) > 1e-12)) {
        s.stddev(d) = 1.0;
        s.degenerate[static_cast<std::size_t>(d)] = 1;
      }
    return s;
  }

  Eigen::RowVectorXd scale(const Eigen::RowVectorXd& f) const {
    return ((f - mean).array() / stddev.array()).matrix();
  }
};

/// One category's Gaussian product KDE over scaled features.
struct CategoryKde {
  CategoryId id = 0;
  bool empty = true;
  Eigen::MatrixXd points;     ///< m x D, already scaled
  Eigen::VectorXd bandwidth;  ///< per dimension, Scott's rule
};

struct KdeBank {
  HourFeature hour_mode = HourFeature::scalar;
  GeoPoint origin;
  FeatureScaler scaler;
  double floor_log_density = -30.0;
  std::uint64_t vocab_hash_value = 0;
  std::vector<CategoryKde> kdes;  ///< index = category id; covers the vocab

  int dim() const { return kde_feature_dim(hour_mode); }
};

/// log of the KDE density at an already-scaled query point. The density is
/// w.r.t. scaled feature space: mean over points of the product of
/// per-dimension normal kernels.
inline double log_density_scaled(const CategoryKde& kde, const Eigen::RowVectorXd& q) {
  const auto m = kde.points.rows();
  const auto dim = kde.points.cols();
  double norm = -0.5 * static_cast<double>(dim) * std::log(2.0 * kPi) -
                std::log(static_cast<double>(m));
  for (Eigen::Index d = 0; d < dim; ++d) norm -= std::log(kde.bandwidth(d));
  const Eigen::VectorXd exponents =
      (((kde.points.rowwise() - q).array().rowwise() /
        kde.bandwidth.transpose().array())
           .square()
           .rowwise()
           .sum() *
       -0.5)
          .matrix();
  const double mx = exponents.maxCoeff();
  double s = 0.0;
  for (Eigen::Index j = 0; j < m; ++j) s += std::exp(exponents(j) - mx);
  return norm + mx + std::log(s);
}

/// Crowd-level log Pr(t, l | c) for a stay; floored so that far-away or
/// empty categories never contribute -inf to a score.
inline double log_density(const KdeBank& bank, CategoryId category, const Stay& stay) {
  if (category >= bank.kdes.size())
    throw Error(ErrorKind::unknown_category,
                "category id " + std::to_string(category) + " not in the density bank");
  const CategoryKde& kde = bank.kdes[category];
  if (kde.empty) return bank.floor_log_density;
  const Eigen::RowVectorXd q =
      bank.scaler.scale(stay_features(stay, bank.origin, bank.hour_mode));
  return std::max(log_density_scaled(kde, q), bank.floor_log_density);
}

/// Fits one KDE per category: every labeled stay contributes one point to
/// each category of its true POI; a single scaler is fitted on the pooled
/// points; per-dimension bandwidths follow Scott's rule on the category's own
/// points. Oversized categories are uniformly subsampled with a fixed seed.
inline KdeBank fit_kde_bank(const std::vector<Trajectory>& trajectories,
                            const PoiCatalog& catalog, const KdeOptions& opts = {}) {
  const int dim = kde_feature_dim(opts.hour_mode);
  const std::size_t vocab = catalog.vocab.size();

  std::vector<std::vector<Eigen::RowVectorXd>> raw(vocab);
  std::size_t total = 0;
  for (const auto& traj : trajectories)
    for (const auto& stay : traj.stays) {
      if (stay.true_poi.empty()) continue;
      const Poi& poi = catalog.require(stay.true_poi);
      const Eigen::RowVectorXd f = stay_features(stay, catalog.origin, opts.hour_mode);
      for (CategoryId c : poi.categories) {
        raw[c].push_back(f);
        ++total;
      }
    }
  if (total == 0)
    throw Error(ErrorKind::validation, "no labeled stays to fit densities on");

  Eigen::MatrixXd pooled(static_cast<Eigen::Index>(total), dim);
  Eigen::Index row = 0;
  for (const auto& pts : raw)
    for (const auto& f : pts) pooled.row(row++) = f;

  KdeBank bank;
  bank.hour_mode = opts.hour_mode;
  bank.origin = catalog.origin;
  bank.floor_log_density = opts.floor_log_density;
  bank.vocab_hash_value = vocab_hash(catalog.vocab);
  bank.scaler = FeatureScaler::fit(pooled);
  bank.kdes.resize(vocab);

  for (std::size_t c = 0; c < vocab; ++c) {
    CategoryKde& kde = bank.kdes[c];
    kde.id = static_cast<CategoryId>(c);
    auto& pts = raw[c];
    if (pts.empty()) continue;

    // deterministic uniform subsample via partial Fisher-Yates
    if (pts.size() > opts.subsample_cap) {
      std::mt19937_64 rng(opts.subsample_seed + 0x9e3779b97f4a7c15ULL * (c + 1));
      for (std::size_t i = 0; i < opts.subsample_cap; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pts.size() - 1);
        std::swap(pts[i], pts[pick(rng)]);
      }
      pts.resize(opts.subsample_cap);
    }

    const auto m = static_cast<Eigen::Index>(pts.size());
    kde.points.resize(m, dim);
    for (Eigen::Index j = 0; j < m; ++j)
      kde.points.row(j) = bank.scaler.scale(pts[static_cast<std::size_t>(j)]);

    // Scott's rule per dimension: sigma_hat * m^(-1/(dim+4)); a collapsed
    // dimension falls back to bandwidth 1.
    const double factor =
        std::pow(static_cast<double>(m), -1.0 / (static_cast<double>(dim) + 4.0));
    kde.bandwidth.resize(dim);
    const Eigen::RowVectorXd mean = kde.points.colwise().mean();
    for (Eigen::Index d = 0; d < dim; ++d) {
      const double var = (kde.points.col(d).array() - mean(d)).square().mean();
      const double sigma = std::sqrt(var);
      kde.bandwidth(d) = sigma > 1e-12 ? sigma * factor : 1.0;
    }
    kde.empty = false;
  }
  return bank;
}

constexpr std::uint16_t kBankFormatVersion = 1;

inline void save_bank(const KdeBank& bank, const std::string& path) {
  BinaryWriter w(path);
  w.magic("PKDE");
  w.num<std::uint16_t>(kBankFormatVersion);
  w.num<std::uint64_t>(bank.vocab_hash_value);
  w.num<std::uint16_t>(static_cast<std::uint16_t>(bank.hour_mode));
  const int dim = bank.dim();
  w.num<std::uint16_t>(static_cast<std::uint16_t>(dim));
  w.num<double>(bank.origin.lat);
  w.num<double>(bank.origin.lon);
  w.num<double>(bank.floor_log_density);
  for (int d = 0; d < dim; ++d) w.num<double>(bank.scaler.mean(d));
  for (int d = 0; d < dim; ++d) w.num<double>(bank.scaler.stddev(d));
  for (int d = 0; d < dim; ++d)
    w.num<std::uint8_t>(bank.scaler.degenerate[static_cast<std::size_t>(d)]);
  w.num<std::uint32_t>(static_cast<std::uint32_t>(bank.kdes.size()));
  for (const auto& kde : bank.kdes) {
    w.num<std::uint32_t>(kde.id);
    w.num<std::uint8_t>(kde.empty ? 1 : 0);
    if (kde.empty) continue;
    w.num<std::uint64_t>(static_cast<std::uint64_t>(kde.points.rows()));
    for (int d = 0; d < dim; ++d) w.num<double>(kde.bandwidth(d));
    for (Eigen::Index j = 0; j < kde.points.rows(); ++j)
      for (int d = 0; d < dim; ++d) w.num<double>(kde.points(j, d));
  }
  w.close();
}

/// Loads a bank; when `expect_vocab` is given, its hash must match the one
/// stored at fit time.
inline KdeBank load_bank(const std::string& path, const CategoryVocab* expect_vocab = nullptr) {
  BinaryReader r(path);
  r.expect_magic("PKDE");
  const auto version = r.num<std::uint16_t>();
  if (version != kBankFormatVersion)
    throw Error(ErrorKind::version_mismatch,
                "density bank format version " + std::to_string(version) +
                    " unsupported (expected " + std::to_string(kBankFormatVersion) + ")");
  KdeBank bank;
  bank.vocab_hash_value = r.num<std::uint64_t>();
  if (expect_vocab != nullptr && vocab_hash(*expect_vocab) != bank.vocab_hash_value)
    throw Error(ErrorKind::vocab_mismatch,
                "density bank was fitted on a different category vocabulary");
  const auto mode = r.num<std::uint16_t>();
  if (mode > 1) throw Error(ErrorKind::corrupt, "unknown hour-feature mode in bank");
  bank.hour_mode = static_cast<HourFeature>(mode);
  const int dim = r.num<std::uint16_t>();
  if (dim != bank.dim()) throw Error(ErrorKind::corrupt, "feature dim mismatch in bank");
  bank.origin.lat = r.num<double>();
  bank.origin.lon = r.num<double>();
  bank.floor_log_density = r.num<double>();
  bank.scaler.mean.resize(dim);
  bank.scaler.stddev.resize(dim);
  bank.scaler.degenerate.assign(static_cast<std::size_t>(dim), 0);
  for (int d = 0; d < dim; ++d) bank.scaler.mean(d) = r.num<double>();
  for (int d = 0; d < dim; ++d) bank.scaler.stddev(d) = r.num<double>();
  for (int d = 0; d < dim; ++d)
    bank.scaler.degenerate[static_cast<std::size_t>(d)] = r.num<std::uint8_t>();
  const auto n = r.num<std::uint32_t>();
  bank.kdes.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    CategoryKde& kde = bank.kdes[i];
    kde.id = r.num<std::uint32_t>();
    kde.empty = r.num<std::uint8_t>() != 0;
    if (kde.empty) continue;
    const auto m = r.num<std::uint64_t>();
    if (m == 0 || m > (1ULL << 32))
      throw Error(ErrorKind::corrupt, "implausible point count in bank");
    kde.bandwidth.resize(dim);
    for (int d = 0; d < dim; ++d) kde.bandwidth(d) = r.num<double>();
    kde.points.resize(static_cast<Eigen::Index>(m), dim);
    for (Eigen::Index j = 0; j < kde.points.rows(); ++j)
      for (int d = 0; d < dim; ++d) kde.points(j, d) = r.num<double>();
  }
  return bank;
}

}  // namespace poiattrib
