#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace poiattrib {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Max-shifted log(sum(exp(v))). All -inf entries yield -inf.
inline double logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v(i) - mx);
  return mx + std::log(s);
}

inline double logsumexp(const std::vector<double>& v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace poiattrib
