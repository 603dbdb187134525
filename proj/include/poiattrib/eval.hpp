#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "poiattrib/baselines.hpp"
#include "poiattrib/dataset.hpp"
#include "poiattrib/model.hpp"
#include "poiattrib/scorer.hpp"
#include "poiattrib/train.hpp"

namespace poiattrib {

/// Fraction of stays whose truth appears in the first k predictions. Empty
/// prediction lists count as misses.
inline double top_k_accuracy(const std::vector<std::vector<std::string>>& predictions,
                             const std::vector<std::string>& truths, std::size_t k) {
  if (k < 1) throw Error(ErrorKind::validation, "k must be >= 1");
  if (predictions.size() != truths.size())
    throw Error(ErrorKind::validation, "predictions and truths differ in length");
  if (truths.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto& ranked = predictions[i];
    const std::size_t limit = std::min(k, ranked.size());
    for (std::size_t r = 0; r < limit; ++r)
      if (ranked[r] == truths[i]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(truths.size());
}

/// One stay's ranked attribution plus bookkeeping for the report tallies.
struct StayAttribution {
  std::string user_id;
  std::size_t stay_index = 0;  ///< position within the user's trajectory
  std::string truth;           ///< empty when unlabeled
  bool no_candidates = false;
  bool truth_in_candidates = false;
  std::vector<std::string> ranked;
  std::vector<double> ranked_logit;
  std::vector<double> ranked_ll;
  std::vector<double> ranked_prior;
};

struct AttributeOptions {
  std::size_t top_k = 5;
  int threads = 1;
};

namespace detail {

/// Static fan-out of `count` tasks over `threads` workers; results land in
/// preallocated slots so the output is independent of the thread count.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const int t = std::max(1, threads);
  if (t == 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const auto workers = static_cast<std::size_t>(t);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      const std::size_t lo = count * w / workers;
      const std::size_t hi = count * (w + 1) / workers;
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Scores every stay of every trajectory against the frozen model + bank.
inline std::vector<StayAttribution> attribute_with_model(
    const AttributionModel& model, const KdeBank* bank,
    const std::vector<Trajectory>& trajectories, const PoiCatalog& catalog,
    const SpatialGridIndex& index, const AttributeOptions& opts = {}) {
  const ModelConfig& mc = model.config();
  const ScoreOptions sopts{mc.kde_term, mc.prior_term, mc.mean_categories};
  sopts.validate();

  std::vector<std::pair<std::size_t, std::size_t>> tasks;
  for (std::size_t ti = 0; ti < trajectories.size(); ++ti)
    for (std::size_t si = 0; si < trajectories[ti].stays.size(); ++si)
      tasks.emplace_back(ti, si);

  std::vector<StayAttribution> out(tasks.size());
  detail::parallel_for(tasks.size(), opts.threads, [&](std::size_t i) {
    const auto [ti, si] = tasks[i];
    const Trajectory& traj = trajectories[ti];
    const Stay& stay = traj.stays[si];
    StayAttribution& res = out[i];
    res.user_id = traj.user_id;
    res.stay_index = si;
    res.truth = stay.true_poi;

    const CandidateSet candidates = build_candidate_set(
        stay, catalog, index, mc.candidate_radius_m,
        static_cast<std::size_t>(mc.candidate_k));
    if (candidates.empty()) {
      res.no_candidates = true;
      return;
    }
    res.truth_in_candidates = !res.truth.empty() && candidates.contains(res.truth);

    AttributionModel::Forward fwd;
    model.forward(traj, si, catalog, fwd);
    const CandidateScores scores =
        score_candidates(fwd.log_prior, bank, stay, candidates, catalog, sopts);
    for (std::size_t idx : attribute_topk_indices(scores, opts.top_k)) {
      res.ranked.push_back(scores.poi_ids[idx]);
      res.ranked_logit.push_back(scores.logit[idx]);
      res.ranked_ll.push_back(scores.log_likelihood_part[idx]);
      res.ranked_prior.push_back(scores.log_prior_part[idx]);
    }
  });
  return out;
}

/// Nearest-centroid attribution in the same output shape; the logit column
/// carries the negated distance so larger stays better.
inline std::vector<StayAttribution> attribute_with_baseline(
    const std::vector<Trajectory>& trajectories, const PoiCatalog& catalog,
    const SpatialGridIndex& index, double threshold_m, const AttributeOptions& opts = {}) {
  std::vector<std::pair<std::size_t, std::size_t>> tasks;
  for (std::size_t ti = 0; ti < trajectories.size(); ++ti)
    for (std::size_t si = 0; si < trajectories[ti].stays.size(); ++si)
      tasks.emplace_back(ti, si);

  std::vector<StayAttribution> out(tasks.size());
  detail::parallel_for(tasks.size(), opts.threads, [&](std::size_t i) {
    const auto [ti, si] = tasks[i];
    const Trajectory& traj = trajectories[ti];
    const Stay& stay = traj.stays[si];
    StayAttribution& res = out[i];
    res.user_id = traj.user_id;
    res.stay_index = si;
    res.truth = stay.true_poi;

    const ProjectedPoint q = project(stay.location, catalog.origin);
    const auto hits = index.radius_query(q, threshold_m);
    if (hits.empty()) {
      res.no_candidates = true;
      return;
    }
    const auto ranked = closest_centroid_topk(stay, catalog, index, opts.top_k, threshold_m);
    if (!res.truth.empty())
      for (const auto& [dist, idx] : hits)
        if (catalog.pois[idx].id == res.truth) {
          res.truth_in_candidates = true;
          break;
        }
    for (const auto& id : ranked) {
      const Poi& poi = catalog.require(id);
      const double d = distance_m(project(poi.location, catalog.origin), q);
      res.ranked.push_back(id);
      res.ranked_logit.push_back(-d);
      res.ranked_ll.push_back(0.0);
      res.ranked_prior.push_back(0.0);
    }
  });
  return out;
}

inline void write_attribution_csv(const std::vector<StayAttribution>& results,
                                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot open '" + path + "' for writing");
  out << kAttributionCsvHeader << "\n";
  for (const auto& res : results)
    for (std::size_t r = 0; r < res.ranked.size(); ++r)
      write_attribution_row(out, res.user_id, res.stay_index, r + 1, res.ranked[r],
                            res.ranked_logit[r], res.ranked_ll[r], res.ranked_prior[r]);
  if (!out) throw Error(ErrorKind::io, "error writing '" + path + "'");
}

/// One (method, noise condition) row of the report.
struct MethodResult {
  std::string method;
  std::string condition;
  std::vector<double> noise_sigmas;
  double top1 = 0.0, top3 = 0.0, top5 = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped_no_candidates = 0;
  std::size_t truth_outside_radius = 0;
};

inline void to_json(nlohmann::json& j, const MethodResult& r) {
  j = nlohmann::json{{"method", r.method},
                     {"condition", r.condition},
                     {"noise_sigmas", r.noise_sigmas},
                     {"top1", r.top1},
                     {"top3", r.top3},
                     {"top5", r.top5},
                     {"evaluated", r.evaluated},
                     {"skipped_no_candidates", r.skipped_no_candidates},
                     {"truth_outside_radius", r.truth_outside_radius}};
}

struct EvalReport {
  std::vector<MethodResult> rows;
  std::uint64_t seed = 0;
  nlohmann::json config_echo;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"rows", r.rows}, {"seed", r.seed}, {"config", r.config_echo}};
}

/// Metric triple + tallies over labeled stays.
inline MethodResult summarize_attributions(const std::vector<StayAttribution>& results,
                                           const std::string& method,
                                           const std::string& condition) {
  MethodResult row;
  row.method = method;
  row.condition = condition;
  std::vector<std::vector<std::string>> preds;
  std::vector<std::string> truths;
  for (const auto& res : results) {
    if (res.truth.empty()) continue;
    ++row.evaluated;
    if (res.no_candidates)
      ++row.skipped_no_candidates;
    else if (!res.truth_in_candidates)
      ++row.truth_outside_radius;
    preds.push_back(res.ranked);
    truths.push_back(res.truth);
  }
  row.top1 = top_k_accuracy(preds, truths, 1);
  row.top3 = top_k_accuracy(preds, truths, 3);
  row.top5 = top_k_accuracy(preds, truths, 5);
  return row;
}

inline std::string format_report_table(const EvalReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %-16s %8s %8s %8s %10s %8s %10s\n", "method",
                "condition", "top-1", "top-3", "top-5", "evaluated", "no-cand", "truth-out");
  out += line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof(line), "%-24s %-16s %8.4f %8.4f %8.4f %10zu %8zu %10zu\n",
                  r.method.c_str(), r.condition.c_str(), r.top1, r.top3, r.top5, r.evaluated,
                  r.skipped_no_candidates, r.truth_outside_radius);
    out += line;
  }
  return out;
}

/// A method to run in an experiment: a frozen model (+bank) or, with model
/// left null, the nearest-centroid baseline.
struct MethodSpec {
  std::string label;
  const AttributionModel* model = nullptr;
  const KdeBank* bank = nullptr;
  double baseline_threshold_m = 200.0;
};

/// A noise condition: per-stay jitter stddev drawn uniformly from the set.
/// An empty set (or all zeros) evaluates the clean data.
struct NoiseCondition {
  std::string label;
  std::vector<double> sigmas;
};

/// Runs every method under every noise condition on the test split and
/// aggregates the metric table. Deterministic given the seed; the same noisy
/// dataset is shared by all methods within a condition.
inline EvalReport run_experiment(const std::vector<MethodSpec>& methods,
                                 const std::vector<NoiseCondition>& conditions,
                                 const std::vector<Trajectory>& test_set,
                                 const PoiCatalog& catalog, const SpatialGridIndex& index,
                                 std::uint64_t seed, const AttributeOptions& opts = {},
                                 nlohmann::json config_echo = {}) {
  if (methods.empty())
    throw Error(ErrorKind::validation, "experiment needs at least one method");
  EvalReport report;
  report.seed = seed;
  report.config_echo = std::move(config_echo);
  for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
    const NoiseCondition& cond = conditions[ci];
    std::vector<Trajectory> data = test_set;
    bool any_noise = false;
    for (double s : cond.sigmas) any_noise = any_noise || s > 0.0;
    if (any_noise) {
      NoiseConfig nc;
      nc.sigma_choices = cond.sigmas;
      nc.rng_seed = seed ^ fnv1a64(cond.label.data(), cond.label.size());
      add_gaussian_noise(data, nc);
    }
    for (const auto& method : methods) {
      std::vector<StayAttribution> results;
      if (method.model != nullptr)
        results = attribute_with_model(*method.model, method.bank, data, catalog, index, opts);
      else
        results =
            attribute_with_baseline(data, catalog, index, method.baseline_threshold_m, opts);
      MethodResult row = summarize_attributions(results, method.label, cond.label);
      row.noise_sigmas = cond.sigmas;
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

}  // namespace poiattrib
