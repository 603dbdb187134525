#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/geo.hpp"
#include "poiattrib/params.hpp"

namespace poiattrib {

/// Widths of the per-stay token slices. A token is the concatenation
/// [space | arrival time | departure time | categories] and has width
/// d_model = d_s + 2*d_t + d_c.
struct EncodingConfig {
  int d_s = 32;  ///< space embedding width
  int d_t = 16;  ///< each time embedding width
  int d_c = 32;  ///< category embedding width
  int space_scales = 8;            ///< geometric wavelength levels
  double lambda_min_m = 10.0;      ///< shortest spatial wavelength
  double lambda_max_m = 10000.0;   ///< longest spatial wavelength

  int d_model() const { return d_s + 2 * d_t + d_c; }

  void validate() const {
    if (d_t < 2) throw Error(ErrorKind::validation, "time embedding width must be >= 2");
    if (d_s < 2) throw Error(ErrorKind::validation, "space embedding width must be >= 2");
    if (d_c < 1) throw Error(ErrorKind::validation, "category embedding width must be >= 1");
    if (space_scales < 1) throw Error(ErrorKind::validation, "need at least one spatial scale");
    if (!(lambda_min_m > 0.0) || !(lambda_max_m >= lambda_min_m))
      throw Error(ErrorKind::validation, "wavelengths must satisfy 0 < min <= max");
  }
};

/// Learnable time features: out[0] = w0*t + p0 is a linear term, the rest are
/// out[i] = sin(w_i*t + p_i). Time enters in hours so that the learnable
/// frequencies live at O(1) magnitudes.
class Time2Vec {
 public:
  Time2Vec(ParamRegistry& reg, const std::string& prefix, int dim)
      : dim_(dim),
        omega_(reg.add(prefix + ".omega", 1, dim)),
        phi_(reg.add(prefix + ".phi", 1, dim)) {}

  int dim() const { return dim_; }

  /// Frequencies log-spaced over periods from 3 hours to two weeks; the
  /// linear slope starts small so the raw clock does not dominate early.
  void init(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> slope(-0.05, 0.05);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
    omega_.value(0, 0) = slope(rng);
    phi_.value(0, 0) = 0.0;
    const double log_lo = std::log(3.0), log_hi = std::log(336.0);
    for (int i = 1; i < dim_; ++i) {
      const double frac = dim_ > 2 ? static_cast<double>(i - 1) / (dim_ - 2) : 0.0;
      const double period_h = std::exp(log_lo + frac * (log_hi - log_lo));
      omega_.value(0, i) = 2.0 * kPi / period_h;
      phi_.value(0, i) = phase(rng);
    }
  }

  void forward(double t, RowRef out) const {
    out(0) = omega_.value(0, 0) * t + phi_.value(0, 0);
    for (int i = 1; i < dim_; ++i)
      out(i) = std::sin(omega_.value(0, i) * t + phi_.value(0, i));
  }

  void backward(double t, const ConstRowRef& dout) {
    omega_.grad(0, 0) += dout(0) * t;
    phi_.grad(0, 0) += dout(0);
    for (int i = 1; i < dim_; ++i) {
      const double c = std::cos(omega_.value(0, i) * t + phi_.value(0, i));
      omega_.grad(0, i) += dout(i) * c * t;
      phi_.grad(0, i) += dout(i) * c;
    }
  }

 private:
  int dim_;
  Tensor& omega_;
  Tensor& phi_;
};

/// Multi-scale grid encoding of a projected point: three fixed unit
/// directions at 0/120/240 degrees, S geometric wavelength levels, and for
/// each (level, direction) the pair sin/cos of 2*pi*(p . dir)/lambda, so a
/// translation by one wavelength along a direction is a no-op at that level.
/// A learnable linear map takes the 6*S raw features to d_s.
class Space2Vec {
 public:
  static constexpr int kDirections = 3;

  Space2Vec(ParamRegistry& reg, const std::string& prefix, const EncodingConfig& cfg)
      : scales_(cfg.space_scales),
        d_s_(cfg.d_s),
        lambda_min_(cfg.lambda_min_m),
        lambda_max_(cfg.lambda_max_m),
        proj_w_(reg.add(prefix + ".proj_w", 2 * kDirections * cfg.space_scales, cfg.d_s)),
        proj_b_(reg.add(prefix + ".proj_b", 1, cfg.d_s)) {}

  void init(std::mt19937_64& rng) {
    fill_xavier(proj_w_, rng);
    proj_b_.value.setZero();
  }

  int raw_dim() const { return 2 * kDirections * scales_; }

  double wavelength(int level) const {
    if (scales_ == 1) return lambda_min_;
    const double frac = static_cast<double>(level) / (scales_ - 1);
    return lambda_min_ * std::pow(lambda_max_ / lambda_min_, frac);
  }

  /// Features before the learnable projection: [sin, cos] per (level, dir).
  Eigen::RowVectorXd raw_features(const ProjectedPoint& p) const {
    Eigen::RowVectorXd raw(raw_dim());
    int k = 0;
    for (int s = 0; s < scales_; ++s) {
      const double lambda = wavelength(s);
      for (int d = 0; d < kDirections; ++d) {
        const double angle = 2.0 * kPi * (p.x * kDirX[d] + p.y * kDirY[d]) / lambda;
        raw(k++) = std::sin(angle);
        raw(k++) = std::cos(angle);
      }
    }
    return raw;
  }

  void forward(const ProjectedPoint& p, RowRef out) const {
    out = raw_features(p) * proj_w_.value + proj_b_.value;
  }

  void backward(const ProjectedPoint& p, const ConstRowRef& dout) {
    proj_w_.grad += raw_features(p).transpose() * dout;
    proj_b_.grad += dout;
  }

 private:
  // cos/sin of 0, 120, 240 degrees
  static constexpr double kDirX[3] = {1.0, -0.5, -0.5};
  static constexpr double kDirY[3] = {0.0, 0.8660254037844386, -0.8660254037844386};

  int scales_;
  int d_s_;
  double lambda_min_, lambda_max_;
  Tensor& proj_w_;
  Tensor& proj_b_;
};

/// Learnable (V+1) x d_c table; row V is the mask row used for the target
/// stay and for unlabeled context stays. Multi-category POIs pool by mean.
class CategoryEmbedding {
 public:
  CategoryEmbedding(ParamRegistry& reg, const std::string& prefix, std::size_t vocab_size,
                    int d_c)
      : vocab_size_(vocab_size),
        table_(reg.add(prefix + ".table", static_cast<Eigen::Index>(vocab_size) + 1, d_c)) {}

  void init(std::mt19937_64& rng) { fill_normal(table_, rng, 0.0, 0.1); }

  std::size_t vocab_size() const { return vocab_size_; }
  int dim() const { return static_cast<int>(table_.cols()); }

  void forward_mask(RowRef out) const {
    out = table_.value.row(static_cast<Eigen::Index>(vocab_size_));
  }

  void forward(const std::vector<CategoryId>& cats, RowRef out) const {
    const auto unique = deduped(cats);
    out.setZero();
    for (CategoryId c : unique) out += table_.value.row(static_cast<Eigen::Index>(c));
    out /= static_cast<double>(unique.size());
  }

  void backward_mask(const ConstRowRef& dout) {
    table_.grad.row(static_cast<Eigen::Index>(vocab_size_)) += dout;
  }

  void backward(const std::vector<CategoryId>& cats,
                const ConstRowRef& dout) {
    const auto unique = deduped(cats);
    const double scale = 1.0 / static_cast<double>(unique.size());
    for (CategoryId c : unique)
      table_.grad.row(static_cast<Eigen::Index>(c)) += dout * scale;
  }

 private:
  std::vector<CategoryId> deduped(const std::vector<CategoryId>& cats) const {
    if (cats.empty())
      throw Error(ErrorKind::validation, "category embedding needs a non-empty set");
    std::vector<CategoryId> unique(cats);
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    for (CategoryId c : unique)
      if (c >= vocab_size_)
        throw Error(ErrorKind::unknown_category,
                    "category id " + std::to_string(c) + " outside vocabulary");
    return unique;
  }

  std::size_t vocab_size_;
  Tensor& table_;
};

/// Fixed sinusoidal positional encoding, written into `out` (width d_model).
inline void positional_encoding(int pos, RowRef out) {
  const auto d = static_cast<int>(out.size());
  for (int i = 0; i < d; i += 2) {
    const double rate = std::pow(10000.0, -static_cast<double>(i) / d);
    out(i) = std::sin(pos * rate);
    if (i + 1 < d) out(i + 1) = std::cos(pos * rate);
  }
}

/// Builds the n x d_model input sequence for one trajectory window. The
/// target stay's category slice always uses the mask row, so tokens carry no
/// information about the target's label. Context stays embed their labeled
/// POI's categories; unlabeled context stays fall back to the mask row.
class TokenEncoder {
 public:
  TokenEncoder(ParamRegistry& reg, const EncodingConfig& cfg, std::size_t vocab_size)
      : cfg_(cfg),
        space_(reg, "enc.space", cfg),
        time_arrival_(reg, "enc.time_arrival", cfg.d_t),
        time_departure_(reg, "enc.time_departure", cfg.d_t),
        categories_(reg, "enc.categories", vocab_size, cfg.d_c) {
    cfg.validate();
  }

  void init(std::mt19937_64& rng) {
    space_.init(rng);
    time_arrival_.init(rng);
    time_departure_.init(rng);
    categories_.init(rng);
  }

  const EncodingConfig& config() const { return cfg_; }
  Space2Vec& space() { return space_; }
  Time2Vec& time_arrival() { return time_arrival_; }
  Time2Vec& time_departure() { return time_departure_; }
  CategoryEmbedding& categories() { return categories_; }

  /// tokens: n x d_model, already sized by the caller or resized here.
  void forward(const Trajectory& traj, std::size_t target_index, const PoiCatalog& catalog,
               Eigen::MatrixXd& tokens) const {
    const std::size_t n = traj.stays.size();
    if (target_index >= n)
      throw Error(ErrorKind::validation, "target index out of range");
    tokens.resize(static_cast<Eigen::Index>(n), cfg_.d_model());
    Eigen::RowVectorXd pos(cfg_.d_model());
    for (std::size_t i = 0; i < n; ++i) {
      const Stay& s = traj.stays[i];
      auto row = tokens.row(static_cast<Eigen::Index>(i));
      const ProjectedPoint xy = project(s.location, catalog.origin);
      space_.forward(xy, row.segment(0, cfg_.d_s));
      time_arrival_.forward(s.arrival_s / 3600.0, row.segment(cfg_.d_s, cfg_.d_t));
      time_departure_.forward(s.departure_s / 3600.0,
                              row.segment(cfg_.d_s + cfg_.d_t, cfg_.d_t));
      auto cat_slice = row.segment(cfg_.d_s + 2 * cfg_.d_t, cfg_.d_c);
      const Poi* poi = (i == target_index || s.true_poi.empty())
                           ? nullptr
                           : &catalog.require(s.true_poi);
      if (poi == nullptr)
        categories_.forward_mask(cat_slice);
      else
        categories_.forward(poi->categories, cat_slice);
      positional_encoding(static_cast<int>(i), pos);
      row += pos;
    }
  }

  /// Accumulates parameter gradients given d(loss)/d(tokens).
  void backward(const Trajectory& traj, std::size_t target_index, const PoiCatalog& catalog,
                const Eigen::MatrixXd& d_tokens) {
    const std::size_t n = traj.stays.size();
    if (target_index >= n)
      throw Error(ErrorKind::validation, "target index out of range");
    for (std::size_t i = 0; i < n; ++i) {
      const Stay& s = traj.stays[i];
      const auto row = d_tokens.row(static_cast<Eigen::Index>(i));
      const ProjectedPoint xy = project(s.location, catalog.origin);
      space_.backward(xy, row.segment(0, cfg_.d_s));
      time_arrival_.backward(s.arrival_s / 3600.0, row.segment(cfg_.d_s, cfg_.d_t));
      time_departure_.backward(s.departure_s / 3600.0,
                               row.segment(cfg_.d_s + cfg_.d_t, cfg_.d_t));
      const auto cat_slice = row.segment(cfg_.d_s + 2 * cfg_.d_t, cfg_.d_c);
      const Poi* poi = (i == target_index || s.true_poi.empty())
                           ? nullptr
                           : &catalog.require(s.true_poi);
      if (poi == nullptr)
        categories_.backward_mask(cat_slice);
      else
        categories_.backward(poi->categories, cat_slice);
    }
  }

 private:
  EncodingConfig cfg_;
  Space2Vec space_;
  Time2Vec time_arrival_;
  Time2Vec time_departure_;
  CategoryEmbedding categories_;
};

}  // namespace poiattrib
