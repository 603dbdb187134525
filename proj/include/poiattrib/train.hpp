#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "poiattrib/grid_index.hpp"
#include "poiattrib/model.hpp"
#include "poiattrib/scorer.hpp"

namespace poiattrib {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  double jitter_sigma_deg = 1e-4;  ///< per-example noise on the target stay
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0))
      throw Error(ErrorKind::validation, "learning rate must be >= 0");
    if (epochs < 0 || batch_size < 1)
      throw Error(ErrorKind::validation, "epochs must be >= 0 and batch size >= 1");
    if (jitter_sigma_deg < 0.0)
      throw Error(ErrorKind::validation, "jitter stddev must be >= 0");
  }
};

/// Adaptive moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(ParamRegistry& reg, double lr, double weight_decay)
      : reg_(reg), lr_(lr), wd_(weight_decay) {
    m_.reserve(reg.tensor_count());
    v_.reserve(reg.tensor_count());
    for (std::size_t i = 0; i < reg.tensor_count(); ++i) {
      const Tensor& t = reg.tensor(i);
      m_.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
      v_.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < reg_.tensor_count(); ++i) {
      Tensor& t = reg_.tensor(i);
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * t.grad;
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * t.grad.cwiseProduct(t.grad);
      const Eigen::MatrixXd m_hat = m_[i] / bc1;
      const Eigen::MatrixXd v_hat = v_[i] / bc2;
      t.value -=
          lr_ * (m_hat.array() / (v_hat.array().sqrt() + kEps)).matrix() +
          (lr_ * wd_) * t.value;
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  ParamRegistry& reg_;
  double lr_, wd_;
  int t_ = 0;
  std::vector<Eigen::MatrixXd> m_, v_;
};

/// One labeled stay with its fixed candidate set. Candidates come from the
/// clean (un-jittered) location; train-time jitter only perturbs the features.
struct TrainExample {
  const Trajectory* traj = nullptr;
  std::size_t stay_index = 0;
  CandidateSet candidates;
  int true_slot = -1;  ///< candidate position of the true POI, -1 if absent
};

inline std::vector<TrainExample> build_examples(const std::vector<Trajectory>& trajectories,
                                                const PoiCatalog& catalog,
                                                const SpatialGridIndex& index,
                                                double radius_m, int k) {
  std::vector<TrainExample> out;
  for (const auto& traj : trajectories)
    for (std::size_t i = 0; i < traj.stays.size(); ++i) {
      const Stay& s = traj.stays[i];
      if (s.true_poi.empty()) continue;
      TrainExample ex;
      ex.traj = &traj;
      ex.stay_index = i;
      ex.candidates = build_candidate_set(s, catalog, index, radius_m,
                                          static_cast<std::size_t>(k));
      for (std::size_t c = 0; c < ex.candidates.poi_ids.size(); ++c)
        if (ex.candidates.valid[c] && ex.candidates.poi_ids[c] == s.true_poi) {
          ex.true_slot = static_cast<int>(c);
          break;
        }
      out.push_back(std::move(ex));
    }
  return out;
}

struct LossResult {
  double loss = 0.0;     ///< cross-entropy over the candidate set
  double raw_nll = 0.0;  ///< -score(true candidate), the unnormalized variant
  bool skipped = false;  ///< truth absent from the candidate set
  bool top1_correct = false;
  Eigen::RowVectorXd d_log_prior;  ///< gradient w.r.t. the prior vector
};

/// Cross-entropy of the true candidate under a softmax over the candidate
/// logits. The KDE part of each logit is a constant in backprop; only the
/// prior part routes gradient to the model.
inline LossResult candidate_loss(const CandidateScores& scores, int true_slot,
                                 const PoiCatalog& catalog, const ScoreOptions& opts) {
  LossResult res;
  if (true_slot < 0) {
    res.skipped = true;
    return res;
  }
  Eigen::RowVectorXd z(static_cast<Eigen::Index>(scores.size()));
  for (std::size_t i = 0; i < scores.size(); ++i)
    z(static_cast<Eigen::Index>(i)) = scores.valid[i] ? scores.logit[i] : kNegInf;
  const double lse = logsumexp(z);
  res.loss = lse - z(true_slot);
  res.raw_nll = -z(true_slot);
  if (!std::isfinite(res.loss))
    throw Error(ErrorKind::non_finite, "non-finite training loss");

  const auto ranked = attribute_topk_indices(scores, 1);
  res.top1_correct =
      !ranked.empty() && ranked[0] == static_cast<std::size_t>(true_slot);

  res.d_log_prior =
      Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(catalog.vocab.size()));
  if (!opts.prior_term) return res;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!scores.valid[i]) continue;
    const double p = std::exp(z(static_cast<Eigen::Index>(i)) - lse);
    const double d_logit = p - (static_cast<int>(i) == true_slot ? 1.0 : 0.0);
    const Poi& poi = catalog.require(scores.poi_ids[i]);
    const double scale =
        opts.mean_categories ? 1.0 / static_cast<double>(poi.categories.size()) : 1.0;
    for (CategoryId c : poi.categories)
      res.d_log_prior(static_cast<Eigen::Index>(c)) += d_logit * scale;
  }
  return res;
}

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_top1 = 0.0;
  double mean_raw_nll = 0.0;
  std::size_t skipped = 0;
};

inline void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = nlohmann::json{{"epoch", m.epoch},
                     {"mean_loss", m.mean_loss},
                     {"train_top1", m.train_top1},
                     {"mean_raw_nll", m.mean_raw_nll},
                     {"skipped", m.skipped}};
}

/// Deterministic training loop: shuffled minibatches, per-example jitter on
/// the target stay (applied to both the token inputs and the density query),
/// adaptive-moment updates after each batch. Metrics optionally stream out as
/// one JSON line per epoch.
inline std::vector<EpochMetrics> train(AttributionModel& model, const KdeBank* bank,
                                       const std::vector<Trajectory>& train_set,
                                       const PoiCatalog& catalog,
                                       const SpatialGridIndex& index, const TrainConfig& cfg,
                                       std::ostream* metrics_log = nullptr) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  ScoreOptions opts{mc.kde_term, mc.prior_term, mc.mean_categories};
  opts.validate();

  auto examples = build_examples(train_set, catalog, index, mc.candidate_radius_m,
                                 mc.candidate_k);
  if (examples.empty())
    throw Error(ErrorKind::validation, "no labeled training examples");

  std::mt19937_64 rng(cfg.seed);
  AdamW optimizer(model.params(), cfg.learning_rate, cfg.weight_decay);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochMetrics> history;
  std::normal_distribution<double> jitter(0.0, 1.0);
  AttributionModel::Forward fwd;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t used = 0, correct = 0, in_batch = 0;
    model.params().zero_grads();

    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const TrainExample& ex = examples[order[oi]];
      auto [window, local] = model.window(*ex.traj, ex.stay_index);
      // Draw jitter unconditionally to keep the random stream aligned across
      // configurations.
      const double dlat = jitter(rng) * cfg.jitter_sigma_deg;
      const double dlon = jitter(rng) * cfg.jitter_sigma_deg;
      Stay& target = window.stays[local];
      target.location.lat += dlat;
      target.location.lon += dlon;

      model.forward_window(window, local, catalog, fwd, &rng);
      const CandidateScores scores =
          score_candidates(fwd.log_prior, bank, target, ex.candidates, catalog, opts);
      LossResult res;
      try {
        res = candidate_loss(scores, ex.true_slot, catalog, opts);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::non_finite)
          throw Error(ErrorKind::non_finite,
                      "non-finite loss at epoch " + std::to_string(epoch) + ", example " +
                          std::to_string(order[oi]) + " (user " + ex.traj->user_id + ")");
        throw;
      }
      if (res.skipped) {
        ++m.skipped;
        continue;
      }
      ++used;
      m.mean_loss += res.loss;
      m.mean_raw_nll += res.raw_nll;
      if (res.top1_correct) ++correct;

      if (opts.prior_term) model.backward(fwd, res.d_log_prior, catalog);
      if (++in_batch == static_cast<std::size_t>(cfg.batch_size)) {
        optimizer.step();
        model.params().zero_grads();
        in_batch = 0;
      }
    }
    if (in_batch > 0) {
      optimizer.step();
      model.params().zero_grads();
    }

    if (used > 0) {
      m.mean_loss /= static_cast<double>(used);
      m.mean_raw_nll /= static_cast<double>(used);
      m.train_top1 = static_cast<double>(correct) / static_cast<double>(used);
    }
    if (metrics_log != nullptr) {
      const nlohmann::json line = m;
      (*metrics_log) << line.dump() << "\n";
    }
    history.push_back(m);
  }
  return history;
}

struct GradCheckOptions {
  double step = 1e-3;
  double sample_fraction = 0.01;   ///< of all parameters, drawn uniformly
  std::size_t min_per_group = 20;  ///< floor for each named parameter group
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::size_t n_checked = 0;
  double max_rel_err = 0.0;
  std::string worst_tensor;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::map<std::string, double> group_max;  ///< group name -> max rel err
  double elapsed_s = 0.0;
};

namespace detail {

inline std::string grad_group(const std::string& tensor_name) {
  if (tensor_name.rfind("enc.time_", 0) == 0) return "time2vec";
  if (tensor_name.rfind("enc.space", 0) == 0) return "space2vec";
  if (tensor_name.rfind("prior.", 0) == 0) return "prior_head";
  if (tensor_name.find(".attn.") != std::string::npos) return "attention";
  if (tensor_name.rfind("enc.categories", 0) == 0) return "categories";
  return "encoder_other";
}

}  // namespace detail

/// Central-difference verification of the full backward pass on a small
/// labeled set. Samples a fraction of all parameters uniformly plus a floor
/// per named group, so every differentiation path gets probed.
inline GradCheckReport gradient_check(AttributionModel& model, const KdeBank* bank,
                                      const std::vector<Trajectory>& toy_set,
                                      const PoiCatalog& catalog,
                                      const SpatialGridIndex& index,
                                      const GradCheckOptions& opts = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  const ModelConfig& mc = model.config();
  ScoreOptions sopts{mc.kde_term, mc.prior_term, mc.mean_categories};
  auto examples =
      build_examples(toy_set, catalog, index, mc.candidate_radius_m, mc.candidate_k);

  AttributionModel::Forward fwd;
  // Deterministic total loss over the toy set: no jitter, no dropout.
  const auto total_loss = [&]() {
    double sum = 0.0;
    for (const auto& ex : examples) {
      if (ex.true_slot < 0) continue;
      model.forward(*ex.traj, ex.stay_index, catalog, fwd);
      const Stay& target = ex.traj->stays[ex.stay_index];
      const CandidateScores scores =
          score_candidates(fwd.log_prior, bank, target, ex.candidates, catalog, sopts);
      sum += candidate_loss(scores, ex.true_slot, catalog, sopts).loss;
    }
    return sum;
  };

  // Analytic gradients.
  ParamRegistry& reg = model.params();
  reg.zero_grads();
  for (const auto& ex : examples) {
    if (ex.true_slot < 0) continue;
    model.forward(*ex.traj, ex.stay_index, catalog, fwd);
    const Stay& target = ex.traj->stays[ex.stay_index];
    const CandidateScores scores =
        score_candidates(fwd.log_prior, bank, target, ex.candidates, catalog, sopts);
    const LossResult res = candidate_loss(scores, ex.true_slot, catalog, sopts);
    model.backward(fwd, res.d_log_prior, catalog);
  }

  // Stratified index sample.
  std::mt19937_64 rng(opts.seed);
  std::map<std::string, std::vector<std::size_t>> by_group;
  std::size_t offset = 0;
  for (std::size_t ti = 0; ti < reg.tensor_count(); ++ti) {
    const Tensor& t = reg.tensor(ti);
    auto& bucket = by_group[detail::grad_group(t.name)];
    for (std::size_t k = 0; k < t.size(); ++k) bucket.push_back(offset + k);
    offset += t.size();
  }
  std::vector<std::size_t> chosen;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& [group, indices] : by_group) {
    for (std::size_t idx : indices)
      if (unit(rng) < opts.sample_fraction) chosen.push_back(idx);
    if (indices.size() <= opts.min_per_group) {
      chosen.insert(chosen.end(), indices.begin(), indices.end());
    } else {
      for (std::size_t k = 0; k < opts.min_per_group; ++k) {
        std::uniform_int_distribution<std::size_t> pick(0, indices.size() - 1);
        chosen.push_back(indices[pick(rng)]);
      }
    }
  }
  std::sort(chosen.begin(), chosen.end());
  chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());

  GradCheckReport report;
  for (std::size_t flat : chosen) {
    const double saved = reg.get_value(flat);
    reg.set_value(flat, saved + opts.step);
    const double up = total_loss();
    reg.set_value(flat, saved - opts.step);
    const double down = total_loss();
    reg.set_value(flat, saved);
    const double numeric = (up - down) / (2.0 * opts.step);
    const double analytic = reg.get_grad(flat);
    const double rel = std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    ++report.n_checked;
    const std::string& name = reg.locate(flat).tensor->name;
    auto& gmax = report.group_max[detail::grad_group(name)];
    gmax = std::max(gmax, rel);
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_tensor = name;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  report.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                         .count();
  return report;
}

}  // namespace poiattrib
