#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "qmri/bloch.hpp"
#include "qmri/forward.hpp"
#include "qmri/io.hpp"

namespace qmri {

// ---------------------------------------------------------------------------
// Network approximating (t1, t2) -> complex fingerprint
// ---------------------------------------------------------------------------

// Small feed-forward network with tanh hidden layers, optional residual skips
// on width-preserving layers, and a linear output layer of 2L reals holding L
// interleaved (re, im) fingerprint samples. Inputs are mapped affinely from
// the (t1, t2) normalization box onto [-1, 1]^2; evaluation soft-clamps
// arguments to that box.
struct SurrogateNet {
  std::vector<MatrixXd> W;  // W[l]: width_{l-1} -> width_l, W[0] from 2 inputs
  std::vector<VectorXd> b;
  bool residual = true;
  double t1_lo = 0, t1_hi = 1, t2_lo = 0, t2_hi = 1;

  int layers() const { return static_cast<int>(W.size()); }
  int frames() const { return W.empty() ? 0 : static_cast<int>(W.back().rows()) / 2; }

  void validate() const {
    if (W.empty() || W.size() != b.size()) throw ConfigError("SurrogateNet: empty or ragged");
    if (W.front().cols() != 2) throw ConfigError("SurrogateNet: input width must be 2");
    if (W.back().rows() % 2 != 0) throw ConfigError("SurrogateNet: output width must be even");
    for (std::size_t l = 0; l < W.size(); ++l) {
      if (b[l].size() != W[l].rows()) throw ConfigError("SurrogateNet: bias width mismatch");
      if (l > 0 && W[l].cols() != W[l - 1].rows())
        throw ConfigError("SurrogateNet: layer width mismatch");
      if (!W[l].allFinite() || !b[l].allFinite())
        throw ConfigError("SurrogateNet: non-finite parameters");
    }
    if (!(t1_hi > t1_lo) || !(t2_hi > t2_lo))
      throw ConfigError("SurrogateNet: normalization box must have positive widths");
  }

  // Fingerprint and its L x 2 derivative w.r.t. physical (t1, t2) in one
  // forward-mode pass; arguments outside the box are clamped (flag optional).
  void eval(double t1, double t2, VectorXcd& fp, Eigen::MatrixX2cd& S,
            bool* clamped = nullptr) const {
    const double t1c = std::min(std::max(t1, t1_lo), t1_hi);
    const double t2c = std::min(std::max(t2, t2_lo), t2_hi);
    if (clamped) *clamped = t1c != t1 || t2c != t2;
    VectorXd a(2);
    a << 2.0 * (t1c - t1_lo) / (t1_hi - t1_lo) - 1.0,
        2.0 * (t2c - t2_lo) / (t2_hi - t2_lo) - 1.0;
    MatrixXd Ja = MatrixXd::Zero(2, 2);
    Ja(0, 0) = 2.0 / (t1_hi - t1_lo);
    Ja(1, 1) = 2.0 / (t2_hi - t2_lo);
    const int H = layers() - 1;
    for (int l = 0; l < H; ++l) {
      const VectorXd z = W[static_cast<std::size_t>(l)] * a + b[static_cast<std::size_t>(l)];
      const VectorXd t = z.array().tanh();
      MatrixXd Jt = (1.0 - t.array().square()).matrix().asDiagonal() *
                    (W[static_cast<std::size_t>(l)] * Ja);
      const bool skip = residual && W[static_cast<std::size_t>(l)].rows() ==
                                        W[static_cast<std::size_t>(l)].cols();
      if (skip) {
        a = t + a;
        Ja = Jt + Ja;
      } else {
        a = t;
        Ja = std::move(Jt);
      }
    }
    const VectorXd out = W.back() * a + b.back();
    const MatrixXd Jout = W.back() * Ja;
    const int L = frames();
    fp.resize(L);
    S.resize(L, 2);
    for (int k = 0; k < L; ++k) {
      fp[k] = Cplx(out[2 * k], out[2 * k + 1]);
      S(k, 0) = Cplx(Jout(2 * k, 0), Jout(2 * k + 1, 0));
      S(k, 1) = Cplx(Jout(2 * k, 1), Jout(2 * k + 1, 1));
    }
  }
};

inline VectorXcd net_forward(const SurrogateNet& net, double t1, double t2,
                             bool* clamped = nullptr) {
  VectorXcd fp;
  Eigen::MatrixX2cd S;
  net.eval(t1, t2, fp, S, clamped);
  return fp;
}

inline Eigen::MatrixX2cd net_jacobian(const SurrogateNet& net, double t1, double t2,
                                      bool* clamped = nullptr) {
  VectorXcd fp;
  Eigen::MatrixX2cd S;
  net.eval(t1, t2, fp, S, clamped);
  return S;
}

// ---------------------------------------------------------------------------
// Training data from a fingerprint dictionary
// ---------------------------------------------------------------------------

struct TrainingSet {
  MatrixXd x;       // 2 x K inputs normalized to [-1, 1]^2
  MatrixXd target;  // 2L x K interleaved (re, im) fingerprints
  VectorXd t1, t2;  // raw relaxation values per sample, dictionary order
  double t1_lo = 0, t1_hi = 1, t2_lo = 0, t2_hi = 1;

  int size() const { return static_cast<int>(x.cols()); }
  int frames() const { return static_cast<int>(target.rows()) / 2; }
};

// One sample per dictionary entry, in dictionary order. The normalization box
// is the bounding box of the entries; a direction with zero extent gets unit
// half-width so the affine map stays bijective.
inline TrainingSet make_training_set(const FingerprintDictionary& dict) {
  if (dict.size() == 0) throw ConfigError("make_training_set: empty dictionary");
  const int K = dict.size();
  const int L = dict.frames();
  TrainingSet s;
  s.t1.resize(K);
  s.t2.resize(K);
  for (int j = 0; j < K; ++j) {
    s.t1[j] = dict.entries[static_cast<std::size_t>(j)].t1;
    s.t2[j] = dict.entries[static_cast<std::size_t>(j)].t2;
  }
  s.t1_lo = s.t1.minCoeff();
  s.t1_hi = s.t1.maxCoeff();
  s.t2_lo = s.t2.minCoeff();
  s.t2_hi = s.t2.maxCoeff();
  if (s.t1_hi == s.t1_lo) {
    s.t1_lo -= 0.5;
    s.t1_hi += 0.5;
  }
  if (s.t2_hi == s.t2_lo) {
    s.t2_lo -= 0.5;
    s.t2_hi += 0.5;
  }
  s.x.resize(2, K);
  s.target.resize(2 * L, K);
  for (int j = 0; j < K; ++j) {
    s.x(0, j) = 2.0 * (s.t1[j] - s.t1_lo) / (s.t1_hi - s.t1_lo) - 1.0;
    s.x(1, j) = 2.0 * (s.t2[j] - s.t2_lo) / (s.t2_hi - s.t2_lo) - 1.0;
    for (int k = 0; k < L; ++k) {
      s.target(2 * k, j) = dict.values(k, j).real();
      s.target(2 * k + 1, j) = dict.values(k, j).imag();
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::vector<int> hidden = {64, 64};
  bool residual = true;
  int epochs = 1500;
  int batch = 64;
  double lr = 1e-2;
  double lr_decay = 0.998;      // multiplicative per epoch
  double weight_penalty = 0.0;  // coefficient on ||parameters||^2
  std::uint64_t seed = 1;

  void validate() const {
    if (hidden.empty()) throw ConfigError("TrainConfig: need at least one hidden layer");
    for (int h : hidden)
      if (h <= 0) throw ConfigError("TrainConfig: hidden widths must be positive");
    if (epochs <= 0) throw ConfigError("TrainConfig: epochs must be positive");
    if (batch <= 0) throw ConfigError("TrainConfig: batch must be positive");
    if (!(lr > 0)) throw ConfigError("TrainConfig: lr must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1))
      throw ConfigError("TrainConfig: lr_decay must be in (0, 1]");
    if (!(weight_penalty >= 0)) throw ConfigError("TrainConfig: penalty must be non-negative");
  }
};

struct TrainResult {
  SurrogateNet net;
  std::vector<double> loss_trace;  // full-data loss (mse + penalty), one entry
                                   // before training plus one per epoch
  double final_mse = 0;            // per-entry mean squared mismatch
};

namespace detail {

// Batched forward pass keeping tanh outputs for backpropagation. acts[0] is
// the input batch; acts[l+1] the output of layer l; tanhs[l] the pre-skip
// activation of hidden layer l.
inline void net_batch_forward(const SurrogateNet& net, const MatrixXd& x,
                              std::vector<MatrixXd>& acts, std::vector<MatrixXd>& tanhs) {
  const int H = net.layers() - 1;
  acts.assign(static_cast<std::size_t>(net.layers() + 1), MatrixXd());
  tanhs.assign(static_cast<std::size_t>(H), MatrixXd());
  acts[0] = x;
  for (int l = 0; l < H; ++l) {
    const MatrixXd z = (net.W[static_cast<std::size_t>(l)] * acts[static_cast<std::size_t>(l)])
                           .colwise() +
                       net.b[static_cast<std::size_t>(l)];
    tanhs[static_cast<std::size_t>(l)] = z.array().tanh();
    const bool skip = net.residual && net.W[static_cast<std::size_t>(l)].rows() ==
                                          net.W[static_cast<std::size_t>(l)].cols();
    acts[static_cast<std::size_t>(l + 1)] =
        skip ? MatrixXd(tanhs[static_cast<std::size_t>(l)] + acts[static_cast<std::size_t>(l)])
             : tanhs[static_cast<std::size_t>(l)];
  }
  acts[static_cast<std::size_t>(H + 1)] =
      (net.W.back() * acts[static_cast<std::size_t>(H)]).colwise() + net.b.back();
}

inline double net_dataset_mse(const SurrogateNet& net, const TrainingSet& data) {
  std::vector<MatrixXd> acts, tanhs;
  net_batch_forward(net, data.x, acts, tanhs);
  return (acts.back() - data.target).squaredNorm() /
         (static_cast<double>(data.size()) * data.target.rows());
}

}  // namespace detail

// Mini-batch optimization of per-entry mean squared fingerprint mismatch plus
// weight_penalty * ||parameters||^2 (biases included, so the penalty-dominant
// limit drives the output itself to zero). Adam-style moments, deterministic
// shuffling and accumulation order given the seed. A non-finite loss aborts.
inline TrainResult train_surrogate(const TrainingSet& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("train_surrogate: empty training set");
  const int K = data.size();
  const int out_w = static_cast<int>(data.target.rows());
  const double r = cfg.weight_penalty;

  TrainResult res;
  SurrogateNet& net = res.net;
  net.residual = cfg.residual;
  net.t1_lo = data.t1_lo;
  net.t1_hi = data.t1_hi;
  net.t2_lo = data.t2_lo;
  net.t2_hi = data.t2_hi;
  std::vector<int> widths = {2};
  for (int h : cfg.hidden) widths.push_back(h);
  widths.push_back(out_w);
  Rng rng(cfg.seed, 0);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fin = widths[l], fout = widths[l + 1];
    const double scale = std::sqrt(6.0 / (fin + fout));
    MatrixXd w(fout, fin);
    for (int cc = 0; cc < fin; ++cc)
      for (int rr = 0; rr < fout; ++rr) w(rr, cc) = scale * rng.uniform(-1.0, 1.0);
    net.W.push_back(w);
    net.b.push_back(VectorXd::Zero(fout));
  }
  net.validate();

  const int nl = net.layers();
  std::vector<MatrixXd> mW(static_cast<std::size_t>(nl)), vW(static_cast<std::size_t>(nl));
  std::vector<VectorXd> mb(static_cast<std::size_t>(nl)), vb(static_cast<std::size_t>(nl));
  for (int l = 0; l < nl; ++l) {
    mW[static_cast<std::size_t>(l)] = MatrixXd::Zero(net.W[static_cast<std::size_t>(l)].rows(),
                                                     net.W[static_cast<std::size_t>(l)].cols());
    vW[static_cast<std::size_t>(l)] = mW[static_cast<std::size_t>(l)];
    mb[static_cast<std::size_t>(l)] = VectorXd::Zero(net.b[static_cast<std::size_t>(l)].size());
    vb[static_cast<std::size_t>(l)] = mb[static_cast<std::size_t>(l)];
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long t = 0;

  auto full_loss = [&]() {
    double pen = 0;
    for (int l = 0; l < nl; ++l)
      pen += net.W[static_cast<std::size_t>(l)].squaredNorm() +
             net.b[static_cast<std::size_t>(l)].squaredNorm();
    return detail::net_dataset_mse(net, data) + r * pen;
  };
  res.loss_trace.push_back(full_loss());

  std::vector<int> order(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j) order[static_cast<std::size_t>(j)] = j;
  const int H = nl - 1;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuf(cfg.seed, 1 + epoch);
    for (int j = K - 1; j > 0; --j)
      std::swap(order[static_cast<std::size_t>(j)], order[static_cast<std::size_t>(shuf.below(j + 1))]);
    const double lr = cfg.lr * std::pow(cfg.lr_decay, epoch);

    for (int start = 0; start < K; start += cfg.batch) {
      const int B = std::min(cfg.batch, K - start);
      MatrixXd xb(2, B), yb(out_w, B);
      for (int j = 0; j < B; ++j) {
        const int src = order[static_cast<std::size_t>(start + j)];
        xb.col(j) = data.x.col(src);
        yb.col(j) = data.target.col(src);
      }
      std::vector<MatrixXd> acts, tanhs;
      detail::net_batch_forward(net, xb, acts, tanhs);

      // Backward pass; gradient of the per-entry batch MSE plus penalty.
      MatrixXd d = 2.0 / (static_cast<double>(B) * out_w) * (acts.back() - yb);
      std::vector<MatrixXd> gW(static_cast<std::size_t>(nl));
      std::vector<VectorXd> gb(static_cast<std::size_t>(nl));
      gW[static_cast<std::size_t>(H)] =
          d * acts[static_cast<std::size_t>(H)].transpose() + 2.0 * r * net.W.back();
      gb[static_cast<std::size_t>(H)] = d.rowwise().sum() + 2.0 * r * net.b.back();
      MatrixXd da = net.W.back().transpose() * d;
      for (int l = H - 1; l >= 0; --l) {
        const bool skip = net.residual && net.W[static_cast<std::size_t>(l)].rows() ==
                                              net.W[static_cast<std::size_t>(l)].cols();
        const MatrixXd dz =
            da.array() * (1.0 - tanhs[static_cast<std::size_t>(l)].array().square());
        gW[static_cast<std::size_t>(l)] =
            dz * acts[static_cast<std::size_t>(l)].transpose() +
            2.0 * r * net.W[static_cast<std::size_t>(l)];
        gb[static_cast<std::size_t>(l)] =
            dz.rowwise().sum() + 2.0 * r * net.b[static_cast<std::size_t>(l)];
        MatrixXd prev = net.W[static_cast<std::size_t>(l)].transpose() * dz;
        if (skip) prev += da;
        da = std::move(prev);
      }

      ++t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (int l = 0; l < nl; ++l) {
        auto& w = net.W[static_cast<std::size_t>(l)];
        auto& bb = net.b[static_cast<std::size_t>(l)];
        auto& mw = mW[static_cast<std::size_t>(l)];
        auto& vw = vW[static_cast<std::size_t>(l)];
        mw = b1 * mw + (1 - b1) * gW[static_cast<std::size_t>(l)];
        vw = b2 * vw + (1 - b2) * gW[static_cast<std::size_t>(l)].array().square().matrix();
        w -= (lr * (mw / c1).array() / ((vw / c2).array().sqrt() + eps)).matrix();
        auto& mbb = mb[static_cast<std::size_t>(l)];
        auto& vbb = vb[static_cast<std::size_t>(l)];
        mbb = b1 * mbb + (1 - b1) * gb[static_cast<std::size_t>(l)];
        vbb = b2 * vbb + (1 - b2) * gb[static_cast<std::size_t>(l)].array().square().matrix();
        bb -= (lr * (mbb / c1).array() / ((vbb / c2).array().sqrt() + eps)).matrix();
      }
    }

    const double loss = full_loss();
    if (!std::isfinite(loss))
      throw NumericalError("train_surrogate: loss diverged at epoch " + std::to_string(epoch));
    res.loss_trace.push_back(loss);
  }
  res.final_mse = detail::net_dataset_mse(net, data);
  return res;
}

// ---------------------------------------------------------------------------
// Learning-informed reconstruction
// ---------------------------------------------------------------------------

namespace detail {

// Graph Laplacian of the grid's 4-neighbor structure applied channelwise:
// (Lq)_i = sum_{j ~ i} (q_i - q_j). Boundary handled by omission.
inline void grid_laplacian(const Grid& g, const VectorXd& q, VectorXd& out) {
  parallel_for(g.count(), [&](int i) {
    const auto [x, y] = g.to_xy(i);
    double acc = 0;
    if (x > 0) acc += q[i] - q[i - 1];
    if (x + 1 < g.nx) acc += q[i] - q[i + 1];
    if (y > 0) acc += q[i] - q[i - g.nx];
    if (y + 1 < g.ny) acc += q[i] - q[i + g.nx];
    out[i] = acc;
  });
}

}  // namespace detail

// Projected Gauss-Newton on
//   min 1/2 ||A(rho * model(t1, t2)) - y||^2 + alpha/2 ||grad q||^2  over the box,
// with the same voxelwise damped normal structure as the reduced refinement:
// the data curvature is majorized to per-voxel Re(J^H J), the smoothness term
// couples voxels through the five-point Laplacian (applied to all three
// channels), and the step solves
//   (blockdiag(Re J^H J) + alpha*Lap + lambda I) h = Re(J^H z) - alpha*Lap q
// by conjugate gradients. Model requirement: frames() and
// eval(t1, t2, VectorXcd&, MatrixX2cd&) giving the fingerprint and its
// (t1, t2) derivative. Stops when ||h|| < 1e-8 or after max_iters steps.
template <class Model>
inline ParamMap nn_reconstruct(const KSpaceData& y, const Model& model, const ParamMap& q0,
                               const AdmissibleBox& box, double alpha, int max_iters,
                               double lambda0 = -1.0, double decay = 0.7) {
  box.validate();
  y.check_shapes();
  if (!(alpha >= 0)) throw ConfigError("nn_reconstruct: alpha must be non-negative");
  if (max_iters < 0) throw ConfigError("nn_reconstruct: max_iters must be >= 0");
  if (lambda0 == 0 || std::isnan(lambda0))
    throw ConfigError("nn_reconstruct: lambda0 must be positive (or negative for auto)");
  if (!(decay > 0 && decay < 1)) throw ConfigError("nn_reconstruct: decay must be in (0, 1)");
  const int L = model.frames();
  if (y.frames() != L) throw ConfigError("nn_reconstruct: frame count mismatch");
  const Grid g = y.pattern.grid;
  const int n = g.count();
  ParamMap q = project_box(q0, box);

  double lambda = lambda0;
  for (int it = 0; it < max_iters; ++it) {
    // Model images, residual, and per-voxel linearization at the iterate.
    ImageSeries pi(g, L);
    std::vector<Eigen::Matrix3d> Hv(static_cast<std::size_t>(n));
    MatrixXcd J0(L, n), J1(L, n), J2(L, n);
    parallel_for(n, [&](int i) {
      VectorXcd fp;
      Eigen::MatrixX2cd S;
      model.eval(q.t1[i], q.t2[i], fp, S);
      pi.data.col(i) = q.rho[i] * fp;
      J0.col(i) = fp;
      J1.col(i) = q.rho[i] * S.col(0);
      J2.col(i) = q.rho[i] * S.col(1);
      Eigen::Matrix3cd jhj;
      jhj(0, 0) = fp.squaredNorm();
      jhj(0, 1) = fp.dot(J1.col(i));
      jhj(0, 2) = fp.dot(J2.col(i));
      jhj(1, 1) = J1.col(i).squaredNorm();
      jhj(1, 2) = J1.col(i).dot(J2.col(i));
      jhj(2, 2) = J2.col(i).squaredNorm();
      jhj(1, 0) = std::conj(jhj(0, 1));
      jhj(2, 0) = std::conj(jhj(0, 2));
      jhj(2, 1) = std::conj(jhj(1, 2));
      Hv[static_cast<std::size_t>(i)] = jhj.real();
    });
    const KSpaceData ay = apply_forward(pi, y.pattern);
    KSpaceData resid = ay;
    double r2 = 0;
    for (int f = 0; f < L; ++f) {
      resid.coeffs[static_cast<std::size_t>(f)] =
          y.coeffs[static_cast<std::size_t>(f)] - ay.coeffs[static_cast<std::size_t>(f)];
      r2 += resid.coeffs[static_cast<std::size_t>(f)].squaredNorm();
    }
    if (!std::isfinite(r2))
      throw NumericalError("nn_reconstruct: non-finite residual at iteration " +
                           std::to_string(it));
    const ImageSeries z = zero_fill(resid);

    if (lambda < 0) {
      // Same auto scale as the reduced refinement: 0.1 * median diagonal.
      std::vector<double> diag(static_cast<std::size_t>(3 * n));
      for (int i = 0; i < n; ++i) {
        diag[static_cast<std::size_t>(3 * i)] = Hv[static_cast<std::size_t>(i)](0, 0);
        diag[static_cast<std::size_t>(3 * i + 1)] = Hv[static_cast<std::size_t>(i)](1, 1);
        diag[static_cast<std::size_t>(3 * i + 2)] = Hv[static_cast<std::size_t>(i)](2, 2);
      }
      const std::size_t mid = diag.size() / 2;
      std::nth_element(diag.begin(), diag.begin() + static_cast<std::ptrdiff_t>(mid),
                       diag.end());
      lambda = 0.1 * diag[mid];
      if (!(lambda > 0)) lambda = 1e-3;
    }
    const double lam = lambda * std::pow(decay, it);

    // Right-hand side: majorized data term against the zero-filled residual
    // minus the smoothness gradient at the iterate.
    VectorXd rhs[3] = {VectorXd(n), VectorXd(n), VectorXd(n)};
    parallel_for(n, [&](int i) {
      rhs[0][i] = (J0.col(i).dot(z.data.col(i))).real();
      rhs[1][i] = (J1.col(i).dot(z.data.col(i))).real();
      rhs[2][i] = (J2.col(i).dot(z.data.col(i))).real();
    });
    if (alpha > 0) {
      VectorXd lap(n);
      const VectorXd* qc[3] = {&q.rho, &q.t1, &q.t2};
      for (int c = 0; c < 3; ++c) {
        detail::grid_laplacian(g, *qc[c], lap);
        rhs[c] -= alpha * lap;
      }
    }

    // Conjugate gradients on the coupled SPD system.
    auto matvec = [&](const VectorXd* v, VectorXd* out) {
      parallel_for(n, [&](int i) {
        const Eigen::Vector3d vi(v[0][i], v[1][i], v[2][i]);
        const Eigen::Vector3d hi = Hv[static_cast<std::size_t>(i)] * vi;
        out[0][i] = hi[0] + lam * v[0][i];
        out[1][i] = hi[1] + lam * v[1][i];
        out[2][i] = hi[2] + lam * v[2][i];
      });
      if (alpha > 0) {
        VectorXd lap(n);
        for (int c = 0; c < 3; ++c) {
          detail::grid_laplacian(g, v[c], lap);
          out[c] += alpha * lap;
        }
      }
    };
    VectorXd h[3] = {VectorXd::Zero(n), VectorXd::Zero(n), VectorXd::Zero(n)};
    VectorXd rr[3] = {rhs[0], rhs[1], rhs[2]};
    VectorXd p[3] = {rhs[0], rhs[1], rhs[2]};
    VectorXd mp[3] = {VectorXd(n), VectorXd(n), VectorXd(n)};
    double rho_old = rr[0].squaredNorm() + rr[1].squaredNorm() + rr[2].squaredNorm();
    const double rhs_norm = std::sqrt(rho_old);
    const double cg_tol = 1e-10 * std::max(rhs_norm, 1e-300);
    const int cg_cap = std::min(3 * n, 500);
    for (int cg = 0; cg < cg_cap && std::sqrt(rho_old) > cg_tol; ++cg) {
      matvec(p, mp);
      const double pmp = p[0].dot(mp[0]) + p[1].dot(mp[1]) + p[2].dot(mp[2]);
      if (!(pmp > 0) || !std::isfinite(pmp))
        throw NumericalError("nn_reconstruct: inner solve breakdown at iteration " +
                             std::to_string(it));
      const double a = rho_old / pmp;
      double rho_new = 0;
      for (int c = 0; c < 3; ++c) {
        h[c] += a * p[c];
        rr[c] -= a * mp[c];
        rho_new += rr[c].squaredNorm();
      }
      const double beta = rho_new / rho_old;
      for (int c = 0; c < 3; ++c) p[c] = rr[c] + beta * p[c];
      rho_old = rho_new;
    }

    const double step_norm =
        std::sqrt(h[0].squaredNorm() + h[1].squaredNorm() + h[2].squaredNorm());
    q.rho += h[0];
    q.t1 += h[1];
    q.t2 += h[2];
    q = project_box(q, box);
    if (step_norm < 1e-8) break;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Serialization: raw parameter array plus a JSON architecture descriptor
// ---------------------------------------------------------------------------

// Parameters at `path` (packed float64: for each layer W row-major then b)
// with the array sidecar, architecture at `path`.net.json.
inline void save_surrogate(const std::string& path, const SurrogateNet& net) {
  net.validate();
  std::vector<double> params;
  json widths = json::array();
  widths.push_back(2);
  for (int l = 0; l < net.layers(); ++l) {
    const auto& w = net.W[static_cast<std::size_t>(l)];
    widths.push_back(static_cast<int>(w.rows()));
    for (int rr = 0; rr < w.rows(); ++rr)
      for (int cc = 0; cc < w.cols(); ++cc) params.push_back(w(rr, cc));
    const auto& b = net.b[static_cast<std::size_t>(l)];
    for (int rr = 0; rr < b.size(); ++rr) params.push_back(b(rr));
  }
  save_real_array(path, params.data(), {static_cast<int>(params.size())});
  json arch;
  arch["widths"] = widths;
  arch["residual"] = net.residual;
  arch["box"] = {net.t1_lo, net.t1_hi, net.t2_lo, net.t2_hi};
  write_json_file(path + ".net.json", arch);
}

inline SurrogateNet load_surrogate(const std::string& path) {
  const json arch = read_json_file(path + ".net.json");
  SurrogateNet net;
  const std::vector<int> widths = arch.at("widths").get<std::vector<int>>();
  if (widths.size() < 2 || widths.front() != 2)
    throw ConfigError("load_surrogate: bad architecture descriptor");
  net.residual = arch.at("residual").get<bool>();
  const std::vector<double> bx = arch.at("box").get<std::vector<double>>();
  if (bx.size() != 4) throw ConfigError("load_surrogate: bad normalization box");
  net.t1_lo = bx[0];
  net.t1_hi = bx[1];
  net.t2_lo = bx[2];
  net.t2_hi = bx[3];
  const LoadedArray arr = load_array(path);
  if (arr.is_complex) throw ConfigError("load_surrogate: parameters must be real");
  std::size_t pos = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fin = widths[l], fout = widths[l + 1];
    if (pos + static_cast<std::size_t>(fout) * (fin + 1) > arr.real.size())
      throw ConfigError("load_surrogate: parameter array too short");
    MatrixXd w(fout, fin);
    for (int rr = 0; rr < fout; ++rr)
      for (int cc = 0; cc < fin; ++cc) w(rr, cc) = arr.real[pos++];
    VectorXd b(fout);
    for (int rr = 0; rr < fout; ++rr) b(rr) = arr.real[pos++];
    net.W.push_back(std::move(w));
    net.b.push_back(std::move(b));
  }
  if (pos != arr.real.size()) throw ConfigError("load_surrogate: trailing parameters");
  net.validate();
  return net;
}

}  // namespace qmri
