#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poiattrib/error.hpp"

namespace poiattrib {

/// Writable / read-only views of a feature row; the dynamic inner stride lets
/// them bind directly to rows of Eigen's column-major matrices.
using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;
using ConstRowRef = Eigen::Ref<const Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;

/// One named learnable matrix with its accumulated gradient. Activations are
/// laid out rows=positions, cols=features, so a weight is (in x out) and a
/// bias is a (1 x out) row.
struct Tensor {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

/// Owns every parameter of a model in registration order. Modules keep
/// references to their tensors (addresses are stable), while the optimizer,
/// the finite-difference checker, and checkpoint IO walk the flat view.
class ParamRegistry {
 public:
  Tensor& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (by_name_.count(name))
      throw Error(ErrorKind::validation, "duplicate parameter tensor '" + name + "'");
    auto t = std::make_unique<Tensor>();
    t->name = name;
    t->value = Eigen::MatrixXd::Zero(rows, cols);
    t->grad = Eigen::MatrixXd::Zero(rows, cols);
    by_name_[name] = tensors_.size();
    offsets_.push_back(total_);
    total_ += t->size();
    tensors_.push_back(std::move(t));
    return *tensors_.back();
  }

  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end())
      throw Error(ErrorKind::validation, "unknown parameter tensor '" + name + "'");
    return *tensors_[it->second];
  }
  const Tensor& at(const std::string& name) const {
    return const_cast<ParamRegistry*>(this)->at(name);
  }

  std::size_t tensor_count() const { return tensors_.size(); }
  const Tensor& tensor(std::size_t i) const { return *tensors_[i]; }
  Tensor& tensor(std::size_t i) { return *tensors_[i]; }

  /// Total number of scalar parameters.
  std::size_t scalar_count() const { return total_; }

  void zero_grads() {
    for (auto& t : tensors_) t->grad.setZero();
  }

  /// Flat view in registration order; within a tensor, Eigen's native
  /// (column-major) order.
  struct Location {
    Tensor* tensor;
    std::size_t offset;  ///< scalar offset inside the tensor
  };

  Location locate(std::size_t flat) {
    if (flat >= total_) throw Error(ErrorKind::validation, "parameter index out of range");
    // offsets_ is sorted; find the last offset <= flat.
    std::size_t lo = 0, hi = tensors_.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi + 1) / 2;
      if (offsets_[mid] <= flat)
        lo = mid;
      else
        hi = mid - 1;
    }
    return {tensors_[lo].get(), flat - offsets_[lo]};
  }

  double get_value(std::size_t flat) {
    const Location loc = locate(flat);
    return loc.tensor->value.data()[loc.offset];
  }
  void set_value(std::size_t flat, double v) {
    const Location loc = locate(flat);
    loc.tensor->value.data()[loc.offset] = v;
  }
  double get_grad(std::size_t flat) {
    const Location loc = locate(flat);
    return loc.tensor->grad.data()[loc.offset];
  }

 private:
  std::vector<std::unique_ptr<Tensor>> tensors_;
  std::map<std::string, std::size_t> by_name_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

inline void fill_uniform(Tensor& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = dist(rng);
}

inline void fill_normal(Tensor& t, std::mt19937_64& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = dist(rng);
}

/// Glorot/Xavier uniform over fan_in + fan_out.
inline void fill_xavier(Tensor& t, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
  fill_uniform(t, rng, -limit, limit);
}

}  // namespace poiattrib
