#pragma once

#include <Eigen/Dense>

#include "poiattrib/error.hpp"
#include "poiattrib/numeric.hpp"
#include "poiattrib/params.hpp"

namespace poiattrib {

/// Linear map from the target stay's context vector to log-probabilities over
/// the category vocabulary: out = log_softmax(h*W + b).
class PriorHead {
 public:
  struct Cache {
    Eigen::RowVectorXd h;        // input context
    Eigen::RowVectorXd softmax;  // softmax of the logits
  };

  PriorHead(ParamRegistry& reg, int d_model, std::size_t vocab_size)
      : w_(reg.add("prior.w", d_model, static_cast<Eigen::Index>(vocab_size))),
        b_(reg.add("prior.b", 1, static_cast<Eigen::Index>(vocab_size))) {}

  void init(std::mt19937_64& rng) {
    fill_xavier(w_, rng);
    b_.value.setZero();
  }

  std::size_t vocab_size() const { return static_cast<std::size_t>(w_.cols()); }

  /// log Pr(c|H) for every category; exp of the result sums to 1.
  Eigen::RowVectorXd forward(const ConstRowRef& h, Cache& cache) const {
    if (h.size() != w_.rows())
      throw Error(ErrorKind::validation, "context width does not match prior head");
    const Eigen::RowVectorXd z = h * w_.value + b_.value.row(0);
    const double lse = logsumexp(z);
    cache.h = h;
    cache.softmax = (z.array() - lse).exp().matrix();
    return (z.array() - lse).matrix();
  }

  /// Accumulates dW, db and returns d(loss)/d(h).
  Eigen::RowVectorXd backward(const Cache& cache, const ConstRowRef& d_log_prior) const {
    // d z = d out - softmax * sum(d out)
    const double total = d_log_prior.sum();
    const Eigen::RowVectorXd d_z = d_log_prior - cache.softmax * total;
    w_.grad += cache.h.transpose() * d_z;
    b_.grad.row(0) += d_z;
    return d_z * w_.value.transpose();
  }

 private:
  Tensor& w_;
  Tensor& b_;
};

}  // namespace poiattrib
