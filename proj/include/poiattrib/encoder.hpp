#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poiattrib/error.hpp"
#include "poiattrib/params.hpp"

namespace poiattrib {

struct EncoderConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 96;
  int d_ff = 256;
  bool causal = false;   ///< default bidirectional; causal kept for ablation
  double dropout = 0.1;  ///< applied to sublayer outputs before the residual

  void validate() const {
    if (layers < 1) throw Error(ErrorKind::validation, "encoder needs at least one layer");
    if (heads < 1 || d_model % heads != 0)
      throw Error(ErrorKind::validation, "model dim must divide evenly into heads");
    if (d_ff < 1) throw Error(ErrorKind::validation, "feed-forward dim must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
      throw Error(ErrorKind::validation, "dropout must lie in [0, 1)");
  }
};

namespace detail {

constexpr double kLnEps = 1e-8;

inline double gelu(double x) {
  const double k = 0.7978845608028654;  // sqrt(2/pi)
  const double u = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * k * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace detail

/// Transformer encoder with explicit reverse-mode gradients. Post-norm
/// blocks: attention -> residual + layernorm -> feed-forward -> residual +
/// layernorm. All math in doubles; every intermediate needed by backward is
/// cached per forward call, so concurrent forwards just use separate caches.
class TransformerEncoder {
 public:
  struct LayerWeights {
    Tensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Tensor *ln1_g, *ln1_b;
    Tensor *w1, *b1, *w2, *b2;
    Tensor *ln2_g, *ln2_b;
  };

  struct LayerCache {
    Eigen::MatrixXd x_in;             // block input
    Eigen::MatrixXd q, k, v;          // projections, heads side by side
    std::vector<Eigen::MatrixXd> p;   // per-head attention rows (n x n)
    Eigen::MatrixXd ctx;              // concatenated head outputs
    Eigen::MatrixXd attn_drop;        // dropout mask (empty when inactive)
    Eigen::MatrixXd ln1_xhat, ln2_xhat;
    Eigen::VectorXd ln1_inv_std, ln2_inv_std;
    Eigen::MatrixXd x_mid;            // after first layernorm
    Eigen::MatrixXd ffn_pre;          // before activation
    Eigen::MatrixXd ffn_act;          // after activation
    Eigen::MatrixXd ffn_drop;         // dropout mask (empty when inactive)
    Eigen::MatrixXd x_out;            // block output
  };

  struct Cache {
    std::vector<LayerCache> layers;
    const Eigen::MatrixXd& output() const { return layers.back().x_out; }
  };

  TransformerEncoder(ParamRegistry& reg, const EncoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int d = cfg.d_model, f = cfg.d_ff;
    layers_.reserve(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "enc.block" + std::to_string(l) + ".";
      LayerWeights w;
      w.wq = &reg.add(p + "attn.wq", d, d);
      w.bq = &reg.add(p + "attn.bq", 1, d);
      w.wk = &reg.add(p + "attn.wk", d, d);
      w.bk = &reg.add(p + "attn.bk", 1, d);
      w.wv = &reg.add(p + "attn.wv", d, d);
      w.bv = &reg.add(p + "attn.bv", 1, d);
      w.wo = &reg.add(p + "attn.wo", d, d);
      w.bo = &reg.add(p + "attn.bo", 1, d);
      w.ln1_g = &reg.add(p + "ln1.gamma", 1, d);
      w.ln1_b = &reg.add(p + "ln1.beta", 1, d);
      w.w1 = &reg.add(p + "ffn.w1", d, f);
      w.b1 = &reg.add(p + "ffn.b1", 1, f);
      w.w2 = &reg.add(p + "ffn.w2", f, d);
      w.b2 = &reg.add(p + "ffn.b2", 1, d);
      w.ln2_g = &reg.add(p + "ln2.gamma", 1, d);
      w.ln2_b = &reg.add(p + "ln2.beta", 1, d);
      layers_.push_back(w);
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  void init(std::mt19937_64& rng) {
    for (auto& w : layers_) {
      fill_xavier(*w.wq, rng);
      fill_xavier(*w.wk, rng);
      fill_xavier(*w.wv, rng);
      fill_xavier(*w.wo, rng);
      fill_xavier(*w.w1, rng);
      fill_xavier(*w.w2, rng);
      w.ln1_g->value.setOnes();
      w.ln2_g->value.setOnes();
      // biases and layernorm shifts stay zero
    }
  }

  /// Deterministic forward (no dropout); used by inference and by the
  /// finite-difference checker.
  void forward(const Eigen::MatrixXd& tokens, Cache& cache) const {
    run_forward(tokens, cache, nullptr);
  }

  /// Training forward; dropout masks are drawn from `rng` and cached for
  /// backward.
  void forward_train(const Eigen::MatrixXd& tokens, Cache& cache, std::mt19937_64& rng) const {
    run_forward(tokens, cache, cfg_.dropout > 0.0 ? &rng : nullptr);
  }

  /// Accumulates parameter gradients and writes d(loss)/d(tokens).
  void backward(const Cache& cache, const Eigen::MatrixXd& d_output,
                Eigen::MatrixXd& d_tokens) const {
    Eigen::MatrixXd d = d_output;
    for (int l = cfg_.layers - 1; l >= 0; --l)
      d = backward_layer(layers_[static_cast<std::size_t>(l)],
                         cache.layers[static_cast<std::size_t>(l)], d);
    d_tokens = std::move(d);
  }

 private:
  static void layernorm_forward(const Eigen::MatrixXd& x, const Tensor& gamma,
                                const Tensor& beta, Eigen::MatrixXd& xhat,
                                Eigen::VectorXd& inv_std, Eigen::MatrixXd& y) {
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    inv_std.resize(n);
    y.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mean = x.row(i).mean();
      const double var = (x.row(i).array() - mean).square().sum() / static_cast<double>(d);
      const double is = 1.0 / std::sqrt(var + detail::kLnEps);
      inv_std(i) = is;
      xhat.row(i) = ((x.row(i).array() - mean) * is).matrix();
      y.row(i) = xhat.row(i).cwiseProduct(gamma.value.row(0)) + beta.value.row(0);
    }
  }

  static Eigen::MatrixXd layernorm_backward(const Eigen::MatrixXd& d_y,
                                            const Eigen::MatrixXd& xhat,
                                            const Eigen::VectorXd& inv_std, Tensor& gamma,
                                            Tensor& beta) {
    const auto n = d_y.rows();
    const auto d = d_y.cols();
    gamma.grad.row(0) += d_y.cwiseProduct(xhat).colwise().sum();
    beta.grad.row(0) += d_y.colwise().sum();
    Eigen::MatrixXd d_x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVectorXd d_xhat = d_y.row(i).cwiseProduct(gamma.value.row(0));
      const double m1 = d_xhat.mean();
      const double m2 = d_xhat.cwiseProduct(xhat.row(i)).mean();
      d_x.row(i) =
          ((d_xhat.array() - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
    }
    return d_x;
  }

  void apply_dropout(Eigen::MatrixXd& x, Eigen::MatrixXd& mask, std::mt19937_64* rng) const {
    if (rng == nullptr) {
      mask.resize(0, 0);
      return;
    }
    std::bernoulli_distribution keep(1.0 - cfg_.dropout);
    const double scale = 1.0 / (1.0 - cfg_.dropout);
    mask.resize(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        mask(i, j) = keep(*rng) ? scale : 0.0;
    x = x.cwiseProduct(mask);
  }

  void run_forward(const Eigen::MatrixXd& tokens, Cache& cache, std::mt19937_64* rng) const {
    if (tokens.rows() < 1) throw Error(ErrorKind::validation, "empty token sequence");
    if (tokens.cols() != cfg_.d_model)
      throw Error(ErrorKind::validation, "token width does not match model dim");
    cache.layers.assign(static_cast<std::size_t>(cfg_.layers), LayerCache{});
    const Eigen::MatrixXd* x = &tokens;
    for (int l = 0; l < cfg_.layers; ++l) {
      LayerCache& c = cache.layers[static_cast<std::size_t>(l)];
      forward_layer(layers_[static_cast<std::size_t>(l)], *x, c, rng);
      x = &c.x_out;
    }
  }

  void forward_layer(const LayerWeights& w, const Eigen::MatrixXd& x, LayerCache& c,
                     std::mt19937_64* rng) const {
    const auto n = x.rows();
    const int h = cfg_.heads;
    const int dh = cfg_.d_model / h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.x_in = x;
    c.q = (x * w.wq->value).rowwise() + w.bq->value.row(0);
    c.k = (x * w.wk->value).rowwise() + w.bk->value.row(0);
    c.v = (x * w.wv->value).rowwise() + w.bv->value.row(0);

    c.p.assign(static_cast<std::size_t>(h), Eigen::MatrixXd());
    c.ctx.resize(n, cfg_.d_model);
    for (int head = 0; head < h; ++head) {
      const auto qh = c.q.middleCols(head * dh, dh);
      const auto kh = c.k.middleCols(head * dh, dh);
      const auto vh = c.v.middleCols(head * dh, dh);
      Eigen::MatrixXd scores = qh * kh.transpose() * scale;
      Eigen::MatrixXd& p = c.p[static_cast<std::size_t>(head)];
      p.resize(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index limit = cfg_.causal ? i + 1 : n;
        const auto row = scores.row(i).head(limit);
        const double mx = row.maxCoeff();
        const Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
        p.row(i).setZero();
        p.row(i).head(limit) = e / e.sum();
      }
      c.ctx.middleCols(head * dh, dh) = p * vh;
    }

    Eigen::MatrixXd attn = (c.ctx * w.wo->value).rowwise() + w.bo->value.row(0);
    apply_dropout(attn, c.attn_drop, rng);
    layernorm_forward(x + attn, *w.ln1_g, *w.ln1_b, c.ln1_xhat, c.ln1_inv_std, c.x_mid);

    c.ffn_pre = (c.x_mid * w.w1->value).rowwise() + w.b1->value.row(0);
    c.ffn_act = c.ffn_pre.unaryExpr([](double v) { return detail::gelu(v); });
    Eigen::MatrixXd f = (c.ffn_act * w.w2->value).rowwise() + w.b2->value.row(0);
    apply_dropout(f, c.ffn_drop, rng);
    layernorm_forward(c.x_mid + f, *w.ln2_g, *w.ln2_b, c.ln2_xhat, c.ln2_inv_std, c.x_out);
  }

  Eigen::MatrixXd backward_layer(const LayerWeights& w, const LayerCache& c,
                                 const Eigen::MatrixXd& d_out) const {
    const auto n = c.x_in.rows();
    const int h = cfg_.heads;
    const int dh = cfg_.d_model / h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // second residual + layernorm
    Eigen::MatrixXd d_add2 =
        layernorm_backward(d_out, c.ln2_xhat, c.ln2_inv_std, *w.ln2_g, *w.ln2_b);
    Eigen::MatrixXd d_x_mid = d_add2;
    Eigen::MatrixXd d_f = c.ffn_drop.size() ? d_add2.cwiseProduct(c.ffn_drop).eval() : d_add2;

    // feed-forward
    w.w2->grad += c.ffn_act.transpose() * d_f;
    w.b2->grad.row(0) += d_f.colwise().sum();
    Eigen::MatrixXd d_act = d_f * w.w2->value.transpose();
    Eigen::MatrixXd d_pre =
        d_act.cwiseProduct(c.ffn_pre.unaryExpr([](double v) { return detail::gelu_grad(v); }));
    w.w1->grad += c.x_mid.transpose() * d_pre;
    w.b1->grad.row(0) += d_pre.colwise().sum();
    d_x_mid += d_pre * w.w1->value.transpose();

    // first residual + layernorm
    Eigen::MatrixXd d_add1 =
        layernorm_backward(d_x_mid, c.ln1_xhat, c.ln1_inv_std, *w.ln1_g, *w.ln1_b);
    Eigen::MatrixXd d_x = d_add1;
    Eigen::MatrixXd d_attn =
        c.attn_drop.size() ? d_add1.cwiseProduct(c.attn_drop).eval() : d_add1;

    // output projection
    w.wo->grad += c.ctx.transpose() * d_attn;
    w.bo->grad.row(0) += d_attn.colwise().sum();
    Eigen::MatrixXd d_ctx = d_attn * w.wo->value.transpose();

    // per-head attention
    Eigen::MatrixXd d_q(n, cfg_.d_model), d_k(n, cfg_.d_model), d_v(n, cfg_.d_model);
    for (int head = 0; head < h; ++head) {
      const auto qh = c.q.middleCols(head * dh, dh);
      const auto kh = c.k.middleCols(head * dh, dh);
      const auto vh = c.v.middleCols(head * dh, dh);
      const Eigen::MatrixXd& p = c.p[static_cast<std::size_t>(head)];
      const auto d_ctx_h = d_ctx.middleCols(head * dh, dh);

      Eigen::MatrixXd d_p = d_ctx_h * vh.transpose();
      d_v.middleCols(head * dh, dh) = p.transpose() * d_ctx_h;

      // softmax backward, row by row; masked entries have p = 0 so they
      // contribute nothing
      Eigen::MatrixXd d_s(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double dot = d_p.row(i).cwiseProduct(p.row(i)).sum();
        d_s.row(i) = (p.row(i).array() * (d_p.row(i).array() - dot)).matrix();
      }
      d_q.middleCols(head * dh, dh) = d_s * kh * scale;
      d_k.middleCols(head * dh, dh) = d_s.transpose() * qh * scale;
    }

    w.wq->grad += c.x_in.transpose() * d_q;
    w.bq->grad.row(0) += d_q.colwise().sum();
    w.wk->grad += c.x_in.transpose() * d_k;
    w.bk->grad.row(0) += d_k.colwise().sum();
    w.wv->grad += c.x_in.transpose() * d_v;
    w.bv->grad.row(0) += d_v.colwise().sum();

    d_x += d_q * w.wq->value.transpose();
    d_x += d_k * w.wk->value.transpose();
    d_x += d_v * w.wv->value.transpose();
    return d_x;
  }

  EncoderConfig cfg_;
  std::vector<LayerWeights> layers_;
};

/// Row i of the hidden states: the context-aware embedding of stay i.
inline Eigen::RowVectorXd extract_context(const Eigen::MatrixXd& hidden, std::size_t i) {
  if (i >= static_cast<std::size_t>(hidden.rows()))
    throw Error(ErrorKind::validation, "context index out of range");
  return hidden.row(static_cast<Eigen::Index>(i));
}

}  // namespace poiattrib
