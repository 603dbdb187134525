#pragma once

#include <random>
#include <string>
#include <utility>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "poiattrib/domain.hpp"
#include "poiattrib/encoder.hpp"
#include "poiattrib/encoding.hpp"
#include "poiattrib/error.hpp"
#include "poiattrib/prior_head.hpp"
#include "poiattrib/serio.hpp"

namespace poiattrib {

/// Everything needed to rebuild the model and query it consistently with how
/// it was trained. Serialized as the checkpoint's config blob.
struct ModelConfig {
  EncodingConfig enc;
  int layers = 2;
  int heads = 4;
  int d_ff = 256;
  bool causal = false;
  double dropout = 0.1;
  int context_window = 16;  ///< stays fed to the encoder, target centered
  double candidate_radius_m = 200.0;
  int candidate_k = 64;
  bool kde_term = true;
  bool prior_term = true;
  bool mean_categories = false;
  double time_origin_epoch_s = 0.0;  ///< epoch the normalized clock starts at
  std::string bank_path;             ///< density bank the model was trained against

  EncoderConfig encoder_config() const {
    EncoderConfig c;
    c.layers = layers;
    c.heads = heads;
    c.d_model = enc.d_model();
    c.d_ff = d_ff;
    c.causal = causal;
    c.dropout = dropout;
    return c;
  }

  void validate() const {
    enc.validate();
    encoder_config().validate();
    if (context_window < 1)
      throw Error(ErrorKind::validation, "context window must be >= 1");
    if (!(candidate_radius_m > 0.0) || candidate_k < 1)
      throw Error(ErrorKind::validation, "candidate radius/k must be positive");
    if (!kde_term && !prior_term)
      throw Error(ErrorKind::validation, "at least one score term must be enabled");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_s", c.enc.d_s},
                     {"d_t", c.enc.d_t},
                     {"d_c", c.enc.d_c},
                     {"space_scales", c.enc.space_scales},
                     {"lambda_min_m", c.enc.lambda_min_m},
                     {"lambda_max_m", c.enc.lambda_max_m},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"d_ff", c.d_ff},
                     {"causal", c.causal},
                     {"dropout", c.dropout},
                     {"context_window", c.context_window},
                     {"candidate_radius_m", c.candidate_radius_m},
                     {"candidate_k", c.candidate_k},
                     {"kde_term", c.kde_term},
                     {"prior_term", c.prior_term},
                     {"mean_categories", c.mean_categories},
                     {"time_origin_epoch_s", c.time_origin_epoch_s},
                     {"bank_path", c.bank_path}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.enc.d_s = j.value("d_s", c.enc.d_s);
  c.enc.d_t = j.value("d_t", c.enc.d_t);
  c.enc.d_c = j.value("d_c", c.enc.d_c);
  c.enc.space_scales = j.value("space_scales", c.enc.space_scales);
  c.enc.lambda_min_m = j.value("lambda_min_m", c.enc.lambda_min_m);
  c.enc.lambda_max_m = j.value("lambda_max_m", c.enc.lambda_max_m);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.causal = j.value("causal", c.causal);
  c.dropout = j.value("dropout", c.dropout);
  c.context_window = j.value("context_window", c.context_window);
  c.candidate_radius_m = j.value("candidate_radius_m", c.candidate_radius_m);
  c.candidate_k = j.value("candidate_k", c.candidate_k);
  c.kde_term = j.value("kde_term", c.kde_term);
  c.prior_term = j.value("prior_term", c.prior_term);
  c.mean_categories = j.value("mean_categories", c.mean_categories);
  c.time_origin_epoch_s = j.value("time_origin_epoch_s", c.time_origin_epoch_s);
  c.bank_path = j.value("bank_path", c.bank_path);
}

/// Token encoders + transformer + prior head behind one parameter registry.
/// Forward state lives in a caller-owned ModelForward, so concurrent reads of
/// a frozen model are safe.
class AttributionModel {
 public:
  struct Forward {
    Trajectory window;
    std::size_t local_target = 0;
    Eigen::MatrixXd tokens;
    TransformerEncoder::Cache encoder;
    PriorHead::Cache prior;
    Eigen::RowVectorXd log_prior;
  };

  AttributionModel(const CategoryVocab& vocab, const ModelConfig& cfg)
      : cfg_(cfg),
        vocab_(vocab),
        tokens_(reg_, cfg.enc, vocab.size()),
        encoder_(reg_, cfg.encoder_config()),
        prior_(reg_, cfg.enc.d_model(), vocab.size()) {
    cfg.validate();
  }

  // Sub-modules hold references into the registry; moving keeps the heap
  // tensors in place, copying would alias the source's parameters.
  AttributionModel(const AttributionModel&) = delete;
  AttributionModel& operator=(const AttributionModel&) = delete;
  AttributionModel(AttributionModel&&) = default;
  AttributionModel& operator=(AttributionModel&&) = delete;

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    tokens_.init(rng);
    encoder_.init(rng);
    prior_.init(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  const CategoryVocab& vocab() const { return vocab_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }
  TokenEncoder& token_encoder() { return tokens_; }
  const TransformerEncoder& encoder() const { return encoder_; }

  /// The context window around a target stay: up to `context_window` stays
  /// with the target as close to the center as the trajectory allows.
  std::pair<Trajectory, std::size_t> window(const Trajectory& traj,
                                            std::size_t target_index) const {
    const std::size_t n = traj.stays.size();
    if (target_index >= n)
      throw Error(ErrorKind::validation, "target index out of range");
    const auto w = static_cast<std::size_t>(cfg_.context_window);
    std::size_t start = 0;
    if (n > w) {
      const std::size_t half = w / 2;
      start = target_index > half ? target_index - half : 0;
      start = std::min(start, n - w);
    }
    const std::size_t end = std::min(n, start + w);
    Trajectory win;
    win.user_id = traj.user_id;
    win.stays.assign(traj.stays.begin() + static_cast<std::ptrdiff_t>(start),
                     traj.stays.begin() + static_cast<std::ptrdiff_t>(end));
    return {std::move(win), target_index - start};
  }

  /// Runs tokens -> encoder -> prior head on a prepared window. Pass a rng to
  /// enable dropout (training); without one the pass is deterministic.
  void forward_window(const Trajectory& window, std::size_t local_target,
                      const PoiCatalog& catalog, Forward& fwd,
                      std::mt19937_64* dropout_rng = nullptr) const {
    fwd.window = window;
    fwd.local_target = local_target;
    tokens_.forward(fwd.window, local_target, catalog, fwd.tokens);
    if (dropout_rng != nullptr)
      encoder_.forward_train(fwd.tokens, fwd.encoder, *dropout_rng);
    else
      encoder_.forward(fwd.tokens, fwd.encoder);
    const Eigen::RowVectorXd h = extract_context(fwd.encoder.output(), local_target);
    fwd.log_prior = prior_.forward(h, fwd.prior);
  }

  /// Convenience: window extraction + forward.
  void forward(const Trajectory& traj, std::size_t target_index, const PoiCatalog& catalog,
               Forward& fwd, std::mt19937_64* dropout_rng = nullptr) const {
    auto [win, local] = window(traj, target_index);
    forward_window(win, local, catalog, fwd, dropout_rng);
  }

  /// Accumulates gradients for every parameter given d(loss)/d(log_prior).
  void backward(const Forward& fwd, const Eigen::RowVectorXd& d_log_prior,
                const PoiCatalog& catalog) {
    const Eigen::RowVectorXd d_h = prior_.backward(fwd.prior, d_log_prior);
    Eigen::MatrixXd d_hidden =
        Eigen::MatrixXd::Zero(fwd.tokens.rows(), fwd.tokens.cols());
    d_hidden.row(static_cast<Eigen::Index>(fwd.local_target)) = d_h;
    Eigen::MatrixXd d_tokens;
    encoder_.backward(fwd.encoder, d_hidden, d_tokens);
    tokens_.backward(fwd.window, fwd.local_target, catalog, d_tokens);
  }

  void save_checkpoint(const std::string& path) const {
    BinaryWriter w(path);
    w.magic("PFMR");
    w.num<std::uint16_t>(kCheckpointFormatVersion);
    w.num<std::uint64_t>(vocab_hash(vocab_));
    const nlohmann::json cfg_json = cfg_;
    w.str(cfg_json.dump());
    w.num<std::uint32_t>(static_cast<std::uint32_t>(reg_.tensor_count()));
    for (std::size_t i = 0; i < reg_.tensor_count(); ++i) {
      const Tensor& t = reg_.tensor(i);
      w.str(t.name);
      w.num<std::uint64_t>(static_cast<std::uint64_t>(t.rows()));
      w.num<std::uint64_t>(static_cast<std::uint64_t>(t.cols()));
      for (Eigen::Index k = 0; k < t.value.size(); ++k) w.num<double>(t.value.data()[k]);
    }
    w.close();
  }

  static AttributionModel load_checkpoint(const std::string& path,
                                          const CategoryVocab& vocab) {
    BinaryReader r(path);
    r.expect_magic("PFMR");
    const auto version = r.num<std::uint16_t>();
    if (version != kCheckpointFormatVersion)
      throw Error(ErrorKind::version_mismatch,
                  "checkpoint format version " + std::to_string(version) +
                      " unsupported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
    const auto hash = r.num<std::uint64_t>();
    if (hash != vocab_hash(vocab))
      throw Error(ErrorKind::vocab_mismatch,
                  "checkpoint was trained on a different category vocabulary");
    const ModelConfig cfg = nlohmann::json::parse(r.str()).get<ModelConfig>();
    AttributionModel model(vocab, cfg);
    const auto n = r.num<std::uint32_t>();
    if (n != model.reg_.tensor_count())
      throw Error(ErrorKind::corrupt, "checkpoint tensor count mismatch");
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::string name = r.str();
      if (!model.reg_.contains(name))
        throw Error(ErrorKind::corrupt, "checkpoint has unknown tensor '" + name + "'");
      Tensor& t = model.reg_.at(name);
      const auto rows = r.num<std::uint64_t>();
      const auto cols = r.num<std::uint64_t>();
      if (rows != static_cast<std::uint64_t>(t.rows()) ||
          cols != static_cast<std::uint64_t>(t.cols()))
        throw Error(ErrorKind::corrupt, "checkpoint tensor '" + name + "' has wrong shape");
      for (Eigen::Index k = 0; k < t.value.size(); ++k) t.value.data()[k] = r.num<double>();
    }
    return model;
  }

  static constexpr std::uint16_t kCheckpointFormatVersion = 1;

 private:
  ModelConfig cfg_;
  CategoryVocab vocab_;
  ParamRegistry reg_;
  TokenEncoder tokens_;
  TransformerEncoder encoder_;
  PriorHead prior_;
};

}  // namespace poiattrib
