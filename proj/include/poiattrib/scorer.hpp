#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poiattrib/csv.hpp"
#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/grid_index.hpp"
#include "poiattrib/kde.hpp"
#include "poiattrib/numeric.hpp"

namespace poiattrib {

/// Which score terms participate; switching one off mirrors the ablations.
struct ScoreOptions {
  bool kde_term = true;
  bool prior_term = true;
  bool mean_categories = false;  ///< divide by |C(p)| instead of summing raw

  void validate() const {
    if (!kde_term && !prior_term)
      throw Error(ErrorKind::validation, "at least one score term must be enabled");
  }
};

/// Per-candidate logits aligned with the candidate set, with the score split
/// into its crowd-likelihood and contextual-prior parts. Padded slots are
/// invalid and carry -inf.
struct CandidateScores {
  std::vector<std::string> poi_ids;
  std::vector<double> logit;
  std::vector<double> log_likelihood_part;
  std::vector<double> log_prior_part;
  std::vector<std::uint8_t> valid;

  std::size_t size() const { return poi_ids.size(); }
};

/// score(p) = sum over p's categories of [log Pr(t,l|c) + log Pr(c|H)].
/// The KDE term is a constant w.r.t. model parameters; only the prior part
/// carries gradient.
inline CandidateScores score_candidates(const Eigen::RowVectorXd& log_prior,
                                        const KdeBank* bank, const Stay& stay,
                                        const CandidateSet& candidates,
                                        const PoiCatalog& catalog,
                                        const ScoreOptions& opts = {}) {
  opts.validate();
  if (opts.kde_term && bank == nullptr)
    throw Error(ErrorKind::validation, "likelihood term enabled but no density bank given");
  if (opts.prior_term &&
      static_cast<std::size_t>(log_prior.size()) != catalog.vocab.size())
    throw Error(ErrorKind::validation, "prior vector length does not match vocabulary");

  CandidateScores out;
  const std::size_t n = candidates.poi_ids.size();
  out.poi_ids = candidates.poi_ids;
  out.logit.assign(n, kNegInf);
  out.log_likelihood_part.assign(n, 0.0);
  out.log_prior_part.assign(n, 0.0);
  out.valid.assign(n, 0);

  for (std::size_t i = 0; i < n; ++i) {
    if (!candidates.valid[i]) continue;
    const Poi& poi = catalog.require(candidates.poi_ids[i]);
    double ll = 0.0, pr = 0.0;
    for (CategoryId c : poi.categories) {
      if (opts.kde_term) ll += log_density(*bank, c, stay);
      if (opts.prior_term) pr += log_prior(static_cast<Eigen::Index>(c));
    }
    if (opts.mean_categories) {
      const double k = static_cast<double>(poi.categories.size());
      ll /= k;
      pr /= k;
    }
    out.log_likelihood_part[i] = ll;
    out.log_prior_part[i] = pr;
    out.logit[i] = ll + pr;
    out.valid[i] = 1;
  }
  return out;
}

/// Positions of the top-k valid candidates, logit descending, ties broken by
/// poi id ascending.
inline std::vector<std::size_t> attribute_topk_indices(const CandidateScores& scores,
                                                       std::size_t k) {
  if (k < 1) throw Error(ErrorKind::validation, "k must be >= 1");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores.valid[i]) idx.push_back(i);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores.logit[a] != scores.logit[b]) return scores.logit[a] > scores.logit[b];
    return scores.poi_ids[a] < scores.poi_ids[b];
  });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

/// Ranked poi ids; empty when no valid candidate exists.
inline std::vector<std::string> attribute_topk(const CandidateScores& scores, std::size_t k) {
  std::vector<std::string> ids;
  for (std::size_t i : attribute_topk_indices(scores, k)) ids.push_back(scores.poi_ids[i]);
  return ids;
}

constexpr const char* kAttributionCsvHeader =
    "user_id,stay_index,rank,poi_id,logit,log_likelihood_part,log_prior_part";

inline void write_attribution_row(std::ostream& out, const std::string& user_id,
                                  std::size_t stay_index, std::size_t rank,
                                  const std::string& poi_id, double logit, double ll_part,
                                  double prior_part) {
  out << user_id << ',' << stay_index << ',' << rank << ',' << poi_id << ','
      << detail::fmt_double(logit) << ',' << detail::fmt_double(ll_part) << ','
      << detail::fmt_double(prior_part) << '\n';
}

}  // namespace poiattrib
