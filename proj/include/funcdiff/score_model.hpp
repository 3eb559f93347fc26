#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/forward_process.hpp"
#include "funcdiff/function_space.hpp"
#include "funcdiff/score_fn.hpp"

namespace funcdiff {

struct NetArch {
  Eigen::Index dim = 0;
  std::vector<Eigen::Index> hidden{256, 256, 256};
  Eigen::Index n_freqs = 16;
  // Embedding frequencies are geometric in [freq_min, freq_max] and act on log t.
  double freq_min = 0.25;
  double freq_max = 8.0;

  Eigen::Index input_width() const { return dim + 2 * n_freqs; }

  std::vector<Eigen::Index> widths() const {
    std::vector<Eigen::Index> w{input_width()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(dim);
    return w;
  }

  void validate() const {
    if (dim < 1) throw std::invalid_argument("NetArch: dim must be positive");
    if (n_freqs < 0) throw std::invalid_argument("NetArch: n_freqs must be nonnegative");
    if (n_freqs > 0 && !(freq_min > 0.0 && freq_max >= freq_min))
      throw std::invalid_argument("NetArch: need 0 < freq_min <= freq_max");
    for (auto h : hidden)
      if (h < 1) throw std::invalid_argument("NetArch: hidden widths must be positive");
  }
};

inline nlohmann::json to_json(const NetArch& a) {
  return {{"dim", a.dim}, {"widths", a.widths()}, {"hidden", a.hidden},
          {"n_freqs", a.n_freqs}, {"freq_min", a.freq_min}, {"freq_max", a.freq_max}};
}

inline NetArch net_arch_from_json(const nlohmann::json& j) {
  NetArch a;
  a.dim = j.at("dim").get<Eigen::Index>();
  a.hidden = j.at("hidden").get<std::vector<Eigen::Index>>();
  a.n_freqs = j.at("n_freqs").get<Eigen::Index>();
  a.freq_min = j.at("freq_min").get<double>();
  a.freq_max = j.at("freq_max").get<double>();
  a.validate();
  return a;
}

/// MLP (x_t, embed(log t)) -> R^D with SiLU hidden layers. Parameters live
/// in one flat vector: per layer the weight (column-major, out x in) then
/// the bias.
class ScoreNet {
 public:
  struct Cache {
    std::vector<Matrix> pre;   // z_l for hidden layers
    std::vector<Matrix> post;  // a_0 = input, a_l = silu(z_l)
  };

  ScoreNet() = default;

  ScoreNet(NetArch arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    layout();
    params_.resize(n_params_);
    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    Rng rng = Rng::stream(seed, "net_init");
    const auto w = arch_.widths();
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(w[l]));
      const Eigen::Index n = w[l + 1] * w[l] + w[l + 1];
      for (Eigen::Index i = 0; i < n; ++i) params_[offsets_[l] + i] = bound * (2.0 * rng.uniform() - 1.0);
    }
  }

  ScoreNet(NetArch arch, Vector params) : arch_(std::move(arch)), params_(std::move(params)) {
    arch_.validate();
    layout();
    if (params_.size() != n_params_) throw DimensionError("ScoreNet: parameter count does not match architecture");
  }

  const NetArch& arch() const { return arch_; }
  const Vector& params() const { return params_; }
  Vector& params() { return params_; }
  Eigen::Index n_params() const { return n_params_; }
  Eigen::Index dim() const { return arch_.dim; }

  /// Sinusoidal features of log t, one column per entry of t.
  Matrix embed(const Vector& t) const {
    const Eigen::Index F = arch_.n_freqs;
    Matrix E(2 * F, t.size());
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      if (!(t[j] > 0.0)) throw std::invalid_argument("ScoreNet::embed: t must be positive");
      const double lt = std::log(t[j]);
      for (Eigen::Index f = 0; f < F; ++f) {
        const double om = F == 1 ? arch_.freq_min
                                 : arch_.freq_min * std::pow(arch_.freq_max / arch_.freq_min,
                                                             static_cast<double>(f) / static_cast<double>(F - 1));
        E(f, j) = std::sin(om * lt);
        E(F + f, j) = std::cos(om * lt);
      }
    }
    return E;
  }

  Matrix forward(const Vector& t, const Matrix& X, Cache* cache = nullptr) const {
    if (X.rows() != arch_.dim) throw DimensionError("ScoreNet::forward: row count does not match dim");
    if (t.size() != X.cols()) throw DimensionError("ScoreNet::forward: one time per column required");
    const auto w = arch_.widths();
    const std::size_t L = w.size() - 1;
    Matrix a(arch_.input_width(), X.cols());
    a.topRows(arch_.dim) = X;
    if (arch_.n_freqs > 0) a.bottomRows(2 * arch_.n_freqs) = embed(t);
    if (cache) {
      cache->pre.clear();
      cache->post.assign(1, a);
    }
    for (std::size_t l = 0; l < L; ++l) {
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      if (l + 1 == L) return z;
      a = silu(z);
      if (cache) {
        cache->pre.push_back(std::move(z));
        cache->post.push_back(a);
      }
    }
    return a;  // unreachable: at least one layer
  }

  Matrix forward(double t, const Matrix& X) const { return forward(Vector::Constant(X.cols(), t), X); }

  /// Parameter gradient of sum_ij dOut_ij * out_ij.
  Vector backward(const Cache& cache, const Matrix& dOut) const {
    const auto w = arch_.widths();
    const std::size_t L = w.size() - 1;
    Vector grad(n_params_);
    Matrix g = dOut;
    for (std::size_t l = L; l-- > 0;) {
      const Matrix& a = cache.post[l];
      Eigen::Map<Matrix>(grad.data() + offsets_[l], w[l + 1], w[l]) = g * a.transpose();
      grad.segment(offsets_[l] + w[l + 1] * w[l], w[l + 1]) = g.rowwise().sum();
      if (l == 0) break;
      Matrix back = weight(l).transpose() * g;
      g = back.cwiseProduct(silu_grad(cache.pre[l - 1]));
    }
    return grad;
  }

 private:
  static Matrix silu(const Matrix& z) {
    return z.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
  }
  static Matrix silu_grad(const Matrix& z) {
    return z.unaryExpr([](double v) {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    });
  }

  void layout() {
    const auto w = arch_.widths();
    offsets_.clear();
    Eigen::Index off = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      offsets_.push_back(off);
      off += w[l + 1] * w[l] + w[l + 1];
    }
    n_params_ = off;
  }

  Eigen::Map<const Matrix> weight(std::size_t l) const {
    const auto w = arch_.widths();
    return Eigen::Map<const Matrix>(params_.data() + offsets_[l], w[l + 1], w[l]);
  }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    const auto w = arch_.widths();
    return Eigen::Map<const Vector>(params_.data() + offsets_[l] + w[l + 1] * w[l], w[l + 1]);
  }

  NetArch arch_;
  Vector params_;
  std::vector<Eigen::Index> offsets_;
  Eigen::Index n_params_ = 0;
};

// ---------------------------------------------------------------------------
// Losses

/// Regression residual per column. The network predicts the negated noise;
/// the relative kind shifts the target by sqrt(1 - e^{-t}) x_t so that
/// net / sqrt(1 - e^{-t}) estimates s_nu = s + x.
inline Matrix dsm_residual(const Matrix& out, const Matrix& Xt, const Matrix& Xi, const Vector& t,
                           Parameterization kind) {
  if (out.rows() != Xi.rows() || out.cols() != Xi.cols() || Xt.rows() != Xi.rows() || Xt.cols() != Xi.cols() ||
      t.size() != Xi.cols())
    throw DimensionError("dsm_residual: shape mismatch");
  Matrix r = out + Xi;
  if (kind == Parameterization::relative)
    for (Eigen::Index j = 0; j < r.cols(); ++j) r.col(j) -= ou_noise_factor(t[j]) * Xt.col(j);
  return r;
}

/// Per-column squared norms (1/D) r^T W r.
inline Vector weighted_sq_norms(const Matrix& R, const Matrix& W) {
  const double w = 1.0 / static_cast<double>(R.rows());
  return w * (R.cwiseProduct(W * R)).colwise().sum().transpose();
}

inline double dsm_loss(const GridFunction& net_out, const NoisingPair& pair, Parameterization kind,
                       const InnerProductKind& norm) {
  require_same_grid(net_out.grid(), pair.xt.grid(), "dsm_loss");
  require_same_grid(net_out.grid(), pair.xi.grid(), "dsm_loss");
  if (norm.cov) require_same_grid(net_out.grid(), norm.cov->grid(), "dsm_loss");
  Matrix r = dsm_residual(net_out.values(), pair.xt.values(), pair.xi.values(), Vector::Constant(1, pair.t), kind);
  return weighted_sq_norms(r, norm.weight_matrix(net_out.grid()))[0];
}

/// A fixed batch of noised examples, one column each.
struct NoisedBatch {
  Vector t;
  Matrix X0, Xt, Xi;
};

/// Noises columns of X0 at times drawn uniformly from taus; column j uses
/// stream (seed, tag, j).
inline NoisedBatch make_noised_batch(const Matrix& X0, const std::vector<double>& taus, const CovOperator& C,
                                     std::uint64_t seed, std::string_view tag = "noised_batch") {
  if (taus.empty()) throw std::invalid_argument("make_noised_batch: empty time grid");
  if (X0.rows() != C.dim()) throw DimensionError("make_noised_batch: data dimension does not match C");
  NoisedBatch b;
  const Eigen::Index n = X0.cols();
  b.t.resize(n);
  b.X0 = X0;
  b.Xi.resize(X0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Rng r = Rng::stream(seed, tag, static_cast<std::uint64_t>(j));
    b.t[j] = taus[r.index(taus.size())];
    b.Xi.col(j) = C.synthesize(r.normal_vector(C.dim()));
  }
  b.Xt = b.X0;
  for (Eigen::Index j = 0; j < n; ++j)
    b.Xt.col(j) = ou_mean_factor(b.t[j]) * b.X0.col(j) + ou_noise_factor(b.t[j]) * b.Xi.col(j);
  return b;
}

/// Mean loss and its gradient w.r.t. the parameters on one batch.
inline double dsm_loss_and_grad(const ScoreNet& net, const NoisedBatch& b, Parameterization kind, const Matrix& W,
                                Vector* grad) {
  ScoreNet::Cache cache;
  Matrix out = net.forward(b.t, b.Xt, grad ? &cache : nullptr);
  Matrix r = dsm_residual(out, b.Xt, b.Xi, b.t, kind);
  const double B = static_cast<double>(r.cols());
  const double loss = weighted_sq_norms(r, W).sum() / B;
  if (grad) *grad = net.backward(cache, (2.0 / (static_cast<double>(r.rows()) * B)) * (W * r));
  return loss;
}

inline Vector dsm_losses(const ScoreNet& net, const NoisedBatch& b, Parameterization kind, const Matrix& W) {
  return weighted_sq_norms(dsm_residual(net.forward(b.t, b.Xt), b.Xt, b.Xi, b.t, kind), W);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  Parameterization loss_kind = Parameterization::absolute;
  std::optional<InnerProductKind> loss_norm;  // default: Cameron-Martin in the training C
  std::size_t n_epochs = 20;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double lr_final_factor = 1.0;  // lr decays geometrically to lr * lr_final_factor
  double rms_alpha = 0.99;
  double rms_eps = 1e-8;
  std::vector<double> taus;  // empty: uniform grid of n_taus points on [t_min, T]
  std::size_t n_taus = 200;
  double T = 10.0;
  double t_min = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  NetArch arch;  // dim is filled from the data

  std::vector<double> time_grid() const {
    if (!taus.empty()) return taus;
    std::vector<double> g(n_taus);
    for (std::size_t k = 0; k < n_taus; ++k)
      g[k] = n_taus == 1 ? T : t_min + (T - t_min) * static_cast<double>(k) / static_cast<double>(n_taus - 1);
    return g;
  }

  void validate() const {
    if (!(t_min > 0.0) || !(T > t_min)) throw ConfigError("TrainConfig: need T > t_min > 0");
    if (taus.empty() && n_taus < 1) throw ConfigError("TrainConfig: need at least one time-grid entry");
    for (double t : taus)
      if (!(t >= t_min && t <= T)) throw ConfigError("TrainConfig: time grid entries must lie in [t_min, T]");
    if (n_epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: n_epochs and batch_size must be positive");
    if (!(lr > 0.0) || !(lr_final_factor > 0.0)) throw ConfigError("TrainConfig: step sizes must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
      throw ConfigError("TrainConfig: holdout_fraction must lie in [0, 1)");
  }
};

struct LossReport {
  std::vector<double> epoch_loss;
  std::vector<double> heldout_loss;  // per epoch; empty without a held-out set
  double final_loss = 0.0;           // held-out estimate, or last training loss without one
  std::vector<double> taus;
  std::vector<double> per_tau_loss;
};

inline nlohmann::json to_json(const LossReport& r) {
  return {{"epoch_loss", r.epoch_loss}, {"heldout_loss", r.heldout_loss}, {"final_loss", r.final_loss},
          {"taus", r.taus}, {"per_tau_loss", r.per_tau_loss}};
}

struct TrainedModel {
  ScoreNet net;
  Parameterization parameterization = Parameterization::absolute;
  double t_min = 1e-3;
  LossReport report;
};

inline TrainedModel train(const Matrix& data, const CovOperator& C, const TrainConfig& cfg) {
  cfg.validate();
  if (data.rows() != C.dim()) throw DimensionError("train: data dimension does not match C");
  if (data.cols() < 100) throw std::invalid_argument("train: need at least 100 samples");
  if (!data.allFinite()) throw NumericalError("train: data contains non-finite values");
  const InnerProductKind norm = cfg.loss_norm ? *cfg.loss_norm : InnerProductKind::cameron_martin(C);
  if (norm.cov) require_same_grid(norm.cov->grid(), C.grid(), "train");
  const Matrix W = norm.weight_matrix(C.grid());
  const std::vector<double> taus = cfg.time_grid();

  // Deterministic train / held-out split.
  const auto N = static_cast<std::size_t>(data.cols());
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  {
    Rng r = Rng::stream(cfg.seed, "split");
    std::shuffle(order.begin(), order.end(), r.engine());
  }
  const auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(N)));
  Matrix train_x(data.rows(), static_cast<Eigen::Index>(N - n_hold)), hold_x(data.rows(), static_cast<Eigen::Index>(n_hold));
  for (std::size_t i = 0; i < N; ++i) {
    auto col = data.col(static_cast<Eigen::Index>(order[i]));
    if (i < n_hold)
      hold_x.col(static_cast<Eigen::Index>(i)) = col;
    else
      train_x.col(static_cast<Eigen::Index>(i - n_hold)) = col;
  }
  // Held-out loss uses fixed (tau, xi) draws so epochs are comparable.
  std::optional<NoisedBatch> hold;
  if (n_hold > 0) hold = make_noised_batch(hold_x, taus, C, cfg.seed, "heldout");

  NetArch arch = cfg.arch;
  arch.dim = C.dim();
  TrainedModel m;
  m.net = ScoreNet(arch, cfg.seed);
  m.parameterization = cfg.loss_kind;
  m.t_min = cfg.t_min;
  Vector v = Vector::Zero(m.net.n_params());
  Vector grad;

  const std::size_t n_train = N - n_hold;
  std::vector<std::size_t> perm(n_train);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t e = 0; e < cfg.n_epochs; ++e) {
    const double lr =
        cfg.lr * std::pow(cfg.lr_final_factor, static_cast<double>(e) / static_cast<double>(cfg.n_epochs));
    Rng shuffle = Rng::stream(cfg.seed, "epoch_order", e);
    std::shuffle(perm.begin(), perm.end(), shuffle.engine());
    double acc = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0, k = 0; b < n_train; b += cfg.batch_size, ++k) {
      const std::size_t n = std::min(cfg.batch_size, n_train - b);
      Matrix x0(data.rows(), static_cast<Eigen::Index>(n));
      for (std::size_t i = 0; i < n; ++i) x0.col(static_cast<Eigen::Index>(i)) = train_x.col(static_cast<Eigen::Index>(perm[b + i]));
      NoisedBatch batch = make_noised_batch(x0, taus, C, splitmix64(cfg.seed ^ splitmix64(e * 1000003ULL + k)), "train");
      const double loss = dsm_loss_and_grad(m.net, batch, cfg.loss_kind, W, &grad);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        std::ostringstream os;
        os << "train: non-finite loss at epoch " << e << ", batch " << k << " (loss=" << loss << ", lr=" << lr << ")";
        throw NumericalError(os.str());
      }
      v = cfg.rms_alpha * v + (1.0 - cfg.rms_alpha) * grad.cwiseAbs2();
      m.net.params().array() -= lr * grad.array() / (v.array().sqrt() + cfg.rms_eps);
      acc += loss * static_cast<double>(n);
      seen += n;
    }
    m.report.epoch_loss.push_back(acc / static_cast<double>(seen));
    if (hold) m.report.heldout_loss.push_back(dsm_losses(m.net, *hold, cfg.loss_kind, W).mean());
  }
  m.report.final_loss = hold ? m.report.heldout_loss.back() : m.report.epoch_loss.back();

  // Per-tau breakdown on the held-out set (training set without one).
  const Matrix& ref = n_hold > 0 ? hold_x : train_x;
  m.report.taus = taus;
  for (std::size_t k = 0; k < taus.size(); ++k) {
    NoisedBatch b = make_noised_batch(ref, {taus[k]}, C, splitmix64(cfg.seed ^ (k + 1)), "per_tau");
    m.report.per_tau_loss.push_back(dsm_losses(m.net, b, cfg.loss_kind, W).mean());
  }
  return m;
}

inline TrainedModel train(const std::vector<GridFunction>& data, const CovOperator& C, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: empty data set");
  return train(as_columns(data), C, cfg);
}

/// Shared counter of drift evaluations requested below t_min.
using ClampCounter = std::shared_ptr<std::atomic<std::size_t>>;

/// Drift from a trained network: the network output divided by
/// sqrt(1 - e^{-t}) is s (absolute training) or s_nu (relative training);
/// the result is converted to the requested parameterization.
inline ScoreFn as_score_fn(const TrainedModel& m, Parameterization p, ClampCounter clamps = nullptr) {
  auto net = std::make_shared<const ScoreNet>(m.net);
  const double t_min = m.t_min;
  ScoreFn raw(Grid(static_cast<std::size_t>(m.net.dim())), m.parameterization, Provenance::learned,
              [net, t_min, clamps](double t, const Matrix& X) -> Matrix {
                if (t < t_min) {
                  if (clamps) clamps->fetch_add(1, std::memory_order_relaxed);
                  t = t_min;
                }
                return net->forward(t, X) / ou_noise_factor(t);
              });
  return as_parameterization(raw, p);
}

inline nlohmann::json checkpoint_json(const TrainedModel& m, const CovOperator& C) {
  const Vector& p = m.net.params();
  return {{"arch", to_json(m.net.arch())},
          {"params", std::vector<double>(p.data(), p.data() + p.size())},
          {"parameterization", to_string(m.parameterization)},
          {"t_min", m.t_min},
          {"C_ref", {{"kind", C.kind()}, {"params", C.params()}, {"n_points", C.dim()}}},
          {"report", to_json(m.report)}};
}

inline TrainedModel model_from_checkpoint(const nlohmann::json& j) {
  TrainedModel m;
  NetArch a = net_arch_from_json(j.at("arch"));
  auto p = j.at("params").get<std::vector<double>>();
  m.net = ScoreNet(a, Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())));
  m.parameterization = parse_parameterization(j.at("parameterization").get<std::string>());
  m.t_min = j.at("t_min").get<double>();
  return m;
}

/// Paired comparison of two candidate noise predictors A and B on one batch:
/// loss(A) - loss(B) against E||eps* - A||^2 - E||eps* - B||^2 where
/// eps* = sqrt(1 - e^{-t}) s is the oracle noise prediction. The constant
/// term cancels, so only differences are reported.
struct LossDecomposition {
  double loss_diff = 0.0;
  double oracle_diff = 0.0;
  double stderr_ = 0.0;  // of the per-example discrepancy
  double discrepancy() const { return loss_diff - oracle_diff; }
};

inline LossDecomposition decompose_loss_difference(const Matrix& outA, const Matrix& outB, const NoisedBatch& b,
                                                   const Matrix& oracle_pred, Parameterization kind, const Matrix& W) {
  const Vector la = weighted_sq_norms(dsm_residual(outA, b.Xt, b.Xi, b.t, kind), W);
  const Vector lb = weighted_sq_norms(dsm_residual(outB, b.Xt, b.Xi, b.t, kind), W);
  const Vector ma = weighted_sq_norms(oracle_pred - outA, W);
  const Vector mb = weighted_sq_norms(oracle_pred - outB, W);
  const Vector d = (la - lb) - (ma - mb);
  const double n = static_cast<double>(d.size());
  LossDecomposition r;
  r.loss_diff = (la - lb).mean();
  r.oracle_diff = (ma - mb).mean();
  const double mu = d.mean();
  r.stderr_ = n > 1 ? std::sqrt((d.array() - mu).square().sum() / (n - 1.0) / n) : 0.0;
  return r;
}

}  // namespace funcdiff
