#pragma once

// Variational reconstruction: total variation and second-order total
// generalized variation with per-voxel weights, solved by a first-order
// primal-dual scheme, plus the two-step parameter pipeline built on top
// (frame-wise TV reconstruction, then voxel-wise nonlinear regression).

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "qmri/mrf.hpp"

namespace qmri {

// Per-voxel regularization weights. beta is only consulted by the TGV solver.
// Weights must stay bounded away from zero; a vanishing weight would make the
// dual ball degenerate.
struct WeightField {
  VectorXd alpha;
  VectorXd beta;

  static WeightField uniform(const Grid& g, double alpha_value, double beta_value = 0) {
    WeightField w;
    w.alpha = VectorXd::Constant(g.count(), alpha_value);
    if (beta_value != 0) w.beta = VectorXd::Constant(g.count(), beta_value);
    return w;
  }

  void validate(const Grid& g, bool need_beta) const {
    if (alpha.size() != g.count()) throw ConfigError("WeightField: alpha shape mismatch");
    if (alpha.minCoeff() < 1e-8) throw ConfigError("WeightField: alpha below 1e-8");
    if (need_beta) {
      if (beta.size() != g.count()) throw ConfigError("WeightField: beta shape mismatch");
      if (beta.minCoeff() < 1e-8) throw ConfigError("WeightField: beta below 1e-8");
    }
  }
};

// Forward differences with Neumann boundary (last difference along each axis
// is zero). Images are flat vectors in the Grid layout; gradients are N x 2
// with columns (d/dx, d/dy).
inline MatrixXcd grad(const Grid& g, const VectorXcd& u) {
  if (u.size() != g.count()) throw ConfigError("grad: shape mismatch");
  MatrixXcd p = MatrixXcd::Zero(g.count(), 2);
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const int i = g.index(x, y);
      if (x + 1 < g.nx) p(i, 0) = u[g.index(x + 1, y)] - u[i];
      if (y + 1 < g.ny) p(i, 1) = u[g.index(x, y + 1)] - u[i];
    }
  return p;
}

// Exact negative adjoint of grad: <grad u, p> = -<u, div p> to round-off.
inline VectorXcd div(const Grid& g, const MatrixXcd& p) {
  if (p.rows() != g.count() || p.cols() != 2) throw ConfigError("div: shape mismatch");
  VectorXcd u = VectorXcd::Zero(g.count());
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const int i = g.index(x, y);
      Cplx v = 0;
      if (x + 1 < g.nx) v += p(i, 0);
      if (x > 0) v -= p(g.index(x - 1, y), 0);
      if (y + 1 < g.ny) v += p(i, 1);
      if (y > 0) v -= p(g.index(x, y - 1), 1);
      u[i] = v;
    }
  return u;
}

// Symmetrized gradient of a 2-vector field, stored per voxel as the isometric
// 3-vector (e11, e22, sqrt(2) e12) so that the Euclidean norm and inner
// product coincide with the Frobenius ones of the symmetric 2x2 matrix.
// Staggered domains: w1 carries nx-1 valid x-slots (grad leaves the last
// one zero), so its x-difference stops one slot earlier again; likewise w2
// in y. Without this the field of an affine image would pay a spurious
// boundary penalty, and affine images must have zero cost here.
inline MatrixXcd sym_grad(const Grid& g, const MatrixXcd& w) {
  if (w.rows() != g.count() || w.cols() != 2) throw ConfigError("sym_grad: shape mismatch");
  const double r2 = std::sqrt(0.5);  // (dy w1 + dx w2) / 2 * sqrt(2)
  MatrixXcd s = MatrixXcd::Zero(g.count(), 3);
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const int i = g.index(x, y);
      Cplx dyw1 = 0, dxw2 = 0;
      if (x + 2 < g.nx) s(i, 0) = w(g.index(x + 1, y), 0) - w(i, 0);
      if (y + 2 < g.ny) s(i, 1) = w(g.index(x, y + 1), 1) - w(i, 1);
      if (x + 1 < g.nx) dxw2 = w(g.index(x + 1, y), 1) - w(i, 1);
      if (y + 1 < g.ny) dyw1 = w(g.index(x, y + 1), 0) - w(i, 0);
      s(i, 2) = r2 * (dyw1 + dxw2);
    }
  return s;
}

// Exact negative adjoint of sym_grad in the isometric storage:
// <sym_grad w, s> = -<w, sym_div s>.
inline MatrixXcd sym_div(const Grid& g, const MatrixXcd& s) {
  if (s.rows() != g.count() || s.cols() != 3) throw ConfigError("sym_div: shape mismatch");
  const double r2 = std::sqrt(0.5);
  MatrixXcd w = MatrixXcd::Zero(g.count(), 2);
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const int i = g.index(x, y);
      Cplx w1 = 0, w2 = 0;
      if (x + 2 < g.nx) w1 += s(i, 0);
      if (x > 0 && x + 1 < g.nx) w1 -= s(g.index(x - 1, y), 0);
      if (y + 1 < g.ny) w1 += r2 * s(i, 2);
      if (y > 0) w1 -= r2 * s(g.index(x, y - 1), 2);
      if (y + 2 < g.ny) w2 += s(i, 1);
      if (y > 0 && y + 1 < g.ny) w2 -= s(g.index(x, y - 1), 1);
      if (x + 1 < g.nx) w2 += r2 * s(i, 2);
      if (x > 0) w2 -= r2 * s(g.index(x - 1, y), 2);
      w(i, 0) = w1;
      w(i, 1) = w2;
    }
  return w;
}

// Quadratic data term 1/2 ||A u - y||^2 where A is either the identity on
// images (denoising) or one frame of the subsampled unitary Fourier operator.
// Both admit an exact proximal map: the identity case is an affine average,
// the Fourier case is diagonal in k-space because A^H A = F^H M F.
struct FidelityOp {
  enum class Kind { identity, fourier };

  Kind kind = Kind::identity;
  Grid grid;
  VectorXcd y;                     // image (identity) or embedded k-space (fourier)
  std::vector<std::uint8_t> mask;  // fourier only: 0/1 per k-space location

  static FidelityOp denoise(const Grid& g, const VectorXcd& data) {
    if (data.size() != g.count()) throw ConfigError("FidelityOp: data shape mismatch");
    FidelityOp f;
    f.kind = Kind::identity;
    f.grid = g;
    f.y = data;
    return f;
  }

  static FidelityOp fourier_frame(const KSpaceData& y, int frame) {
    y.check_shapes();
    if (frame < 0 || frame >= y.frames()) throw ConfigError("FidelityOp: frame out of range");
    FidelityOp f;
    f.kind = Kind::fourier;
    f.grid = y.pattern.grid;
    f.mask = y.pattern.mask[static_cast<std::size_t>(frame)];
    f.y = VectorXcd::Zero(f.grid.count());
    const auto& idx = y.pattern.sample_idx[static_cast<std::size_t>(frame)];
    const auto& c = y.coeffs[static_cast<std::size_t>(frame)];
    for (std::size_t k = 0; k < idx.size(); ++k) f.y[idx[k]] = c[static_cast<Eigen::Index>(k)];
    return f;
  }

  // Natural start: the data itself, or its zero-filled inverse transform.
  VectorXcd initial() const {
    return kind == Kind::identity ? y : ifft2_unitary(y, grid);
  }

  double energy(const VectorXcd& u) const {
    if (kind == Kind::identity) return 0.5 * (u - y).squaredNorm();
    const VectorXcd ku = fft2_unitary(u, grid);
    double e = 0;
    for (int i = 0; i < grid.count(); ++i)
      if (mask[static_cast<std::size_t>(i)]) e += std::norm(ku[i] - y[i]);
    return 0.5 * e;
  }

  // argmin_u 1/2 ||A u - y||^2 + 1/(2 tau) ||u - v||^2, exactly.
  VectorXcd prox(const VectorXcd& v, double tau) const {
    if (kind == Kind::identity) return (v + tau * y) / (1.0 + tau);
    VectorXcd kv = fft2_unitary(v, grid);
    for (int i = 0; i < grid.count(); ++i)
      if (mask[static_cast<std::size_t>(i)]) kv[i] = (kv[i] + tau * y[i]) / (1.0 + tau);
    return ifft2_unitary(kv, grid);
  }
};

// Solver state. The objective is recorded at the start and every 50
// iterations; it stands in for a duality gap, which is unbounded here
// whenever div p leaves the range of A^H.
struct PDState {
  VectorXcd u;
  MatrixXcd w;  // TGV auxiliary field, empty for TV
  MatrixXcd p;
  MatrixXcd q;  // TGV second dual, empty for TV
  double tau = 0;
  double sigma = 0;
  int iter = 0;
  std::vector<double> energy;
};

namespace detail {

// Largest singular value of the TV analysis operator (the gradient) by power
// iteration on -div grad. Fixed seed: the estimate is part of the step sizes
// and must not vary between runs.
inline double tv_op_norm(const Grid& g, int iters = 50) {
  Rng rng(0x7a0b1e5ULL, 31);
  VectorXcd u(g.count());
  for (int i = 0; i < g.count(); ++i) u[i] = Cplx(rng.normal(), rng.normal());
  double lam = 1;
  for (int it = 0; it < iters; ++it) {
    const double n = u.norm();
    if (n == 0) return 1;
    u /= n;
    u = -div(g, grad(g, u));
    lam = u.norm();
  }
  return std::sqrt(std::max(lam, 1e-12));
}

// Same for the joint TGV operator K(u, w) = (grad u - w, sym_grad w).
inline double tgv_op_norm(const Grid& g, int iters = 50) {
  Rng rng(0x7a0b1e5ULL, 37);
  VectorXcd u(g.count());
  MatrixXcd w(g.count(), 2);
  for (int i = 0; i < g.count(); ++i) {
    u[i] = Cplx(rng.normal(), rng.normal());
    w(i, 0) = Cplx(rng.normal(), rng.normal());
    w(i, 1) = Cplx(rng.normal(), rng.normal());
  }
  double lam = 1;
  for (int it = 0; it < iters; ++it) {
    const double n = std::sqrt(u.squaredNorm() + w.squaredNorm());
    if (n == 0) return 1;
    u /= n;
    w /= n;
    const MatrixXcd p = grad(g, u) - w;
    const MatrixXcd s = sym_grad(g, w);
    const VectorXcd nu = -div(g, p);
    const MatrixXcd nw = -p - sym_div(g, s);
    u = nu;
    w = nw;
    lam = std::sqrt(u.squaredNorm() + w.squaredNorm());
  }
  return std::sqrt(std::max(lam, 1e-12));
}

// Project each row onto the ball of per-voxel radius r.
inline void ball_project(MatrixXcd& p, const VectorXd& r) {
  for (int i = 0; i < p.rows(); ++i) {
    const double n = p.row(i).norm();
    if (n > r[i]) p.row(i) *= r[i] / n;
  }
}

inline double weighted_row_norms(const MatrixXcd& p, const VectorXd& r) {
  double s = 0;
  for (int i = 0; i < p.rows(); ++i) s += r[i] * p.row(i).norm();
  return s;
}

}  // namespace detail

inline double tv_energy(const FidelityOp& data, const WeightField& w, const VectorXcd& u) {
  return data.energy(u) + detail::weighted_row_norms(grad(data.grid, u), w.alpha);
}

inline double tgv_energy(const FidelityOp& data, const WeightField& wf, const VectorXcd& u,
                         const MatrixXcd& w) {
  return data.energy(u) + detail::weighted_row_norms(grad(data.grid, u) - w, wf.alpha) +
         detail::weighted_row_norms(sym_grad(data.grid, w), wf.beta);
}

// min_u 1/2 ||A u - y||^2 + sum_i alpha_i |(grad u)_i| by the primal-dual
// scheme with tau = sigma = 0.99 / ||grad||. Real and imaginary parts couple
// through the isotropic norm of the complex 2-vector gradient.
inline VectorXcd pdhg_tv(const FidelityOp& data, const WeightField& wf, int iters = 500,
                         PDState* out = nullptr) {
  const Grid g = data.grid;
  wf.validate(g, false);
  if (iters < 0) throw ConfigError("pdhg_tv: negative iteration count");
  const double knorm = detail::tv_op_norm(g);
  const double tau = 0.99 / knorm, sigma = 0.99 / knorm;

  VectorXcd u = data.initial();
  VectorXcd ubar = u;
  MatrixXcd p = MatrixXcd::Zero(g.count(), 2);
  std::vector<double> energy;
  auto record = [&]() {
    energy.push_back(tv_energy(data, wf, u));
    if (!std::isfinite(energy.back())) throw NumericalError("pdhg_tv: objective diverged");
  };
  record();
  for (int it = 0; it < iters; ++it) {
    p += sigma * grad(g, ubar);
    detail::ball_project(p, wf.alpha);
    const VectorXcd un = data.prox(u + tau * div(g, p), tau);
    ubar = 2.0 * un - u;
    u = un;
    if ((it + 1) % 50 == 0 || it + 1 == iters) record();
  }
  if (out) {
    out->u = u;
    out->w.resize(0, 0);
    out->p = p;
    out->q.resize(0, 0);
    out->tau = tau;
    out->sigma = sigma;
    out->iter = iters;
    out->energy = std::move(energy);
  }
  return u;
}

// Second-order TGV: min over (u, w) of the fidelity plus
// sum alpha |(grad u - w)_i| + sum beta |(sym_grad w)_i|.
inline VectorXcd pdhg_tgv(const FidelityOp& data, const WeightField& wf, int iters = 500,
                          PDState* out = nullptr) {
  const Grid g = data.grid;
  wf.validate(g, true);
  if (iters < 0) throw ConfigError("pdhg_tgv: negative iteration count");
  const double knorm = detail::tgv_op_norm(g);
  const double tau = 0.99 / knorm, sigma = 0.99 / knorm;

  VectorXcd u = data.initial();
  VectorXcd ubar = u;
  MatrixXcd w = MatrixXcd::Zero(g.count(), 2), wbar = w;
  MatrixXcd p = MatrixXcd::Zero(g.count(), 2);
  MatrixXcd q = MatrixXcd::Zero(g.count(), 3);
  std::vector<double> energy;
  auto record = [&]() {
    energy.push_back(tgv_energy(data, wf, u, w));
    if (!std::isfinite(energy.back())) throw NumericalError("pdhg_tgv: objective diverged");
  };
  record();
  for (int it = 0; it < iters; ++it) {
    p += sigma * (grad(g, ubar) - wbar);
    detail::ball_project(p, wf.alpha);
    q += sigma * sym_grad(g, wbar);
    detail::ball_project(q, wf.beta);
    const VectorXcd un = data.prox(u + tau * div(g, p), tau);
    const MatrixXcd wn = w + tau * (p + sym_div(g, q));
    ubar = 2.0 * un - u;
    wbar = 2.0 * wn - w;
    u = un;
    w = wn;
    if ((it + 1) % 50 == 0 || it + 1 == iters) record();
  }
  if (out) {
    out->u = u;
    out->w = w;
    out->p = p;
    out->q = q;
    out->tau = tau;
    out->sigma = sigma;
    out->iter = iters;
    out->energy = std::move(energy);
  }
  return u;
}

struct TwoStepTrace {
  ImageSeries stage1;      // frame-wise TV reconstructions
  int fallback_count = 0;  // voxels where refinement failed to improve the fit
};

// Two-step parameter mapping: frame-wise TV reconstruction, then an
// independent nonlinear regression per voxel, initialized by the dictionary
// match and refined by up to `gn_steps` projected Gauss-Newton steps on
// 1/2 ||rho B(t1, t2) - u_i||^2. A refinement that does not beat the match
// objective falls back to the match value. All-zero voxels take rho = 0 and
// midpoint relaxation times by convention.
inline ParamMap two_step_reconstruct(const KSpaceData& y, const SequenceSpec& seq,
                                     const FingerprintDictionary& dict, const WeightField& wf,
                                     const AdmissibleBox& box, int tv_iters = 500,
                                     int gn_steps = 20, TwoStepTrace* trace = nullptr) {
  y.check_shapes();
  seq.validate();
  box.validate();
  if (y.frames() != seq.frames()) throw ConfigError("two_step_reconstruct: frame count mismatch");
  if (dict.sequence_hash != seq.hash())
    throw ConfigError("two_step_reconstruct: dictionary built for a different sequence");
  const Grid g = y.pattern.grid;
  wf.validate(g, false);

  ImageSeries u(g, y.frames());
  parallel_for(y.frames(), [&](int f) {
    u.data.row(f) = pdhg_tv(FidelityOp::fourier_frame(y, f), wf, tv_iters).transpose();
  });

  ParamMap q(g);
  std::vector<std::uint8_t> fell_back(static_cast<std::size_t>(g.count()), 0);
  parallel_for(g.count(), [&](int i) {
    const VectorXcd ui = u.data.col(i);
    if (ui.norm() == 0) {
      q.rho[i] = 0;
      q.t1[i] = box.t1_mid();
      q.t2[i] = box.t2_mid();
      return;
    }
    const MatchResult m = mrf_match(ui, dict);
    const double rho0 = std::clamp(m.rho, box.rho_min, box.rho_max);
    const double t10 = std::clamp(m.t1, box.t1_min, box.t1_max);
    const double t20 = std::clamp(m.t2, box.t2_min, box.t2_max);
    double rho = rho0, t1 = t10, t2 = t20;
    auto objective = [&](double r, double a, double b2) {
      const Fingerprint fp = simulate_bloch(a, b2, seq);
      return 0.5 * (r * fp.values - ui).squaredNorm();
    };
    const double obj0 = objective(rho, t1, t2);
    double best = obj0, br = rho, b1 = t1, b2 = t2;
    MatrixXcd J(seq.frames(), 3);
    VectorXcd b(seq.frames());
    for (int s = 0; s < gn_steps; ++s) {
      detail::voxel_jacobian(rho, t1, t2, seq, J, b);
      const VectorXcd r = ui - rho * b;
      Eigen::Matrix3d H = (J.adjoint() * J).real();
      H.diagonal().array() += 1e-12;  // round-off guard; rho = 0 zeroes two columns
      const Eigen::Vector3d h = H.ldlt().solve((J.adjoint() * r).real());
      rho = std::clamp(rho + h[0], box.rho_min, box.rho_max);
      t1 = std::clamp(t1 + h[1], box.t1_min, box.t1_max);
      t2 = std::clamp(t2 + h[2], box.t2_min, box.t2_max);
      const double obj = objective(rho, t1, t2);
      if (obj < best) {
        best = obj;
        br = rho;
        b1 = t1;
        b2 = t2;
      }
      if (h.norm() < 1e-14) break;
    }
    // Keep the refinement only if it beats the match by more than round-off
    // scale; otherwise the match was already a numerically exact fit and its
    // grid values are the better answer.
    if (best < obj0 - 1e-12 * ui.squaredNorm()) {
      q.rho[i] = br;
      q.t1[i] = b1;
      q.t2[i] = b2;
    } else {
      q.rho[i] = rho0;
      q.t1[i] = t10;
      q.t2[i] = t20;
      fell_back[static_cast<std::size_t>(i)] = 1;
    }
  });
  if (trace) {
    trace->stage1 = std::move(u);
    trace->fallback_count = 0;
    for (auto v : fell_back) trace->fallback_count += v;
  }
  return q;
}

}  // namespace qmri
