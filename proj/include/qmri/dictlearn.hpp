#pragma once

#include <algorithm>
#include <string>

#include "qmri/integrated.hpp"
#include "qmri/varreg.hpp"

namespace qmri {

// ---------------------------------------------------------------------------
// Patch operator
// ---------------------------------------------------------------------------

// Stride-1 square patches with periodic wrap-around. Every pixel belongs to
// exactly p^2 patches, so R^T R = p^2 * I and the image subproblem of the
// blind-compressed-sensing alternation stays diagonal in k-space.
struct PatchOp {
  Grid grid;
  int p = 1;

  PatchOp(const Grid& g, int side) : grid(g), p(side) {
    if (p < 1 || p > std::min(g.nx, g.ny))
      throw ConfigError("PatchOp: side must be in [1, min(nx, ny)]");
  }

  int patch_size() const { return p * p; }
  int patch_count() const { return grid.count(); }

  // P x N matrix; column j is the patch with origin at voxel j, entries in
  // canonical order (dx fastest).
  MatrixXcd extract(const VectorXcd& u) const {
    if (u.size() != grid.count()) throw ConfigError("PatchOp: image size mismatch");
    MatrixXcd Q(patch_size(), patch_count());
    parallel_for(patch_count(), [&](int j) {
      const auto [x, y] = grid.to_xy(j);
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          Q(dy * p + dx, j) = u[grid.index((x + dx) % grid.nx, (y + dy) % grid.ny)];
    });
    return Q;
  }

  // Adjoint. Each output pixel gathers its own p^2 contributions, so parallel
  // workers never write the same slot and the result is thread-count
  // independent.
  VectorXcd adjoint(const MatrixXcd& Q) const {
    if (Q.rows() != patch_size() || Q.cols() != patch_count())
      throw ConfigError("PatchOp: patch matrix shape mismatch");
    VectorXcd out(grid.count());
    parallel_for(grid.count(), [&](int i) {
      const auto [x, y] = grid.to_xy(i);
      Cplx s(0, 0);
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx) {
          const int ox = (x - dx + grid.nx) % grid.nx;
          const int oy = (y - dy + grid.ny) % grid.ny;
          s += Q(dy * p + dx, grid.index(ox, oy));
        }
      out[i] = s;
    });
    return out;
  }
};

// ---------------------------------------------------------------------------
// Orthogonal patch transform
// ---------------------------------------------------------------------------

// Square complex matrix with orthonormal columns; the columns are the atoms a
// patch is encoded against.
struct Transform {
  MatrixXcd D;

  int size() const { return static_cast<int>(D.rows()); }

  double orthonormality_error() const {
    return (D.adjoint() * D - MatrixXcd::Identity(D.cols(), D.cols())).cwiseAbs().maxCoeff();
  }

  void validate() const {
    if (D.rows() < 1 || D.rows() != D.cols())
      throw ConfigError("Transform: matrix must be square and non-empty");
    if (orthonormality_error() > 1e-10)
      throw ConfigError("Transform: columns are not orthonormal");
  }

  static Transform identity(int n) { return Transform{MatrixXcd::Identity(n, n)}; }

  // Orthonormal separable cosine basis on p x p patches: the usual warm start
  // for transform learning. Real-valued, so it also serves the parameter-map
  // variant where patches are real.
  static Transform dct(int p) {
    if (p < 1) throw ConfigError("Transform::dct: p must be >= 1");
    MatrixXd T(p, p);
    for (int k = 0; k < p; ++k) {
      const double c = std::sqrt((k == 0 ? 1.0 : 2.0) / p);
      for (int n = 0; n < p; ++n) T(k, n) = c * std::cos(M_PI * (2 * n + 1) * k / (2.0 * p));
    }
    Transform t;
    t.D.resize(p * p, p * p);
    for (int ky = 0; ky < p; ++ky)
      for (int kx = 0; kx < p; ++kx)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            t.D(dy * p + dx, ky * p + kx) = T(kx, dx) * T(ky, dy);
    return t;
  }
};

namespace detail {

// Maximizer of Re tr(D^H M) over unitary D: the polar factor U V^H of
// M = U S V^H. With repeated or vanishing singular values the optimum is not
// unique; the SVD-derived representative is returned.
inline MatrixXcd polar_unitary(const MatrixXcd& M) {
  Eigen::JacobiSVD<MatrixXcd> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().adjoint();
}

// argmin_c 1/2 |c - v|^2 + t * [c != 0]. Zero wins ties.
inline Cplx hard_threshold(Cplx v, double t) {
  return 0.5 * std::norm(v) > t ? v : Cplx(0, 0);
}

// argmin_c 1/2 |c - v|^2 + t * |c|, the complex shrinkage.
inline Cplx soft_threshold(Cplx v, double t) {
  const double a = std::abs(v);
  return a <= t ? Cplx(0, 0) : v * ((a - t) / a);
}

}  // namespace detail

// Number of nonzeros (s = 0) or the l1 mass (s = 1) of the codes.
inline double code_sparsity(const MatrixXcd& C, int s) {
  if (s != 0 && s != 1) throw ConfigError("code_sparsity: s must be 0 or 1");
  double m = 0;
  for (Eigen::Index j = 0; j < C.cols(); ++j)
    for (Eigen::Index i = 0; i < C.rows(); ++i)
      m += s == 0 ? (C(i, j) != Cplx(0, 0) ? 1.0 : 0.0) : std::abs(C(i, j));
  return m;
}

// Fit-plus-sparsity diagnostic: 1/2 ||patches - D C||_F^2 + sparsity * |C|_s.
inline double patch_objective(const MatrixXcd& patches, const Transform& D, const MatrixXcd& C,
                              double sparsity, int s) {
  return 0.5 * (patches - D.D * C).squaredNorm() + sparsity * code_sparsity(C, s);
}

// ---------------------------------------------------------------------------
// The three exact block updates
// ---------------------------------------------------------------------------

// argmin_C 1/2 ||patches - D C||^2 + (prox_weight/2) ||C - C_prev||^2
//          + sparsity * |C|_s.
// With orthonormal D this is an entrywise threshold of
// v = (D^H patches + prox_weight * C_prev) / (1 + prox_weight) at the reduced
// level sparsity / (1 + prox_weight).
inline MatrixXcd sparse_code_update(const MatrixXcd& patches, const Transform& D,
                                    const MatrixXcd& C_prev, double sparsity,
                                    double prox_weight, int s) {
  D.validate();
  if (s != 0 && s != 1) throw ConfigError("sparse_code_update: s must be 0 or 1");
  if (sparsity < 0 || prox_weight < 0)
    throw ConfigError("sparse_code_update: weights must be >= 0");
  if (patches.rows() != D.size() || C_prev.rows() != D.size() || C_prev.cols() != patches.cols())
    throw ConfigError("sparse_code_update: shape mismatch");
  MatrixXcd C = (D.D.adjoint() * patches + prox_weight * C_prev) / (1.0 + prox_weight);
  const double t = sparsity / (1.0 + prox_weight);
  parallel_for(static_cast<int>(C.cols()), [&](int j) {
    for (Eigen::Index i = 0; i < C.rows(); ++i)
      C(i, j) = s == 0 ? detail::hard_threshold(C(i, j), t) : detail::soft_threshold(C(i, j), t);
  });
  return C;
}

// argmin over unitary D of 1/2 ||patches - D C||^2 + (prox_weight/2) ||D - D_prev||^2,
// which maximizes Re tr(D^H M) with M = patches C^H + prox_weight * D_prev.
inline Transform transform_update(const MatrixXcd& patches, const MatrixXcd& C,
                                  const Transform& D_prev, double prox_weight) {
  D_prev.validate();
  if (prox_weight < 0) throw ConfigError("transform_update: prox_weight must be >= 0");
  if (patches.rows() != D_prev.size() || C.rows() != D_prev.size() ||
      C.cols() != patches.cols())
    throw ConfigError("transform_update: shape mismatch");
  const MatrixXcd M = patches * C.adjoint() + prox_weight * D_prev.D;
  return Transform{detail::polar_unitary(M)};
}

// argmin_u mu/2 ||A u - y||^2 + 1/2 ||R u - D C||^2 + (prox_weight/2) ||u - u_prev||^2.
// The normal operator mu A^H A + R^T R + prox_weight I is diagonal in k-space
// (R^T R = P I, A^H A = F^H mask F), so the solve is one transform pair.
inline VectorXcd image_update(const FidelityOp& data, const PatchOp& R, const Transform& D,
                              const MatrixXcd& C, const VectorXcd& u_prev, double mu,
                              double prox_weight) {
  D.validate();
  if (mu < 0 || prox_weight < 0) throw ConfigError("image_update: weights must be >= 0");
  if (data.grid != R.grid || u_prev.size() != R.grid.count())
    throw ConfigError("image_update: grid mismatch");
  if (C.rows() != R.patch_size() || C.cols() != R.patch_count() || D.size() != R.patch_size())
    throw ConfigError("image_update: code shape mismatch");
  const double P = static_cast<double>(R.patch_size());
  const VectorXcd ah_y =
      data.kind == FidelityOp::Kind::identity ? data.y : ifft2_unitary(data.y, data.grid);
  const VectorXcd rhs = mu * ah_y + R.adjoint(D.D * C) + prox_weight * u_prev;
  if (data.kind == FidelityOp::Kind::identity) return rhs / (mu + P + prox_weight);
  VectorXcd k = fft2_unitary(rhs, data.grid);
  for (int i = 0; i < data.grid.count(); ++i)
    k[i] /= (data.mask[static_cast<std::size_t>(i)] ? mu : 0.0) + P + prox_weight;
  return ifft2_unitary(k, data.grid);
}

// ---------------------------------------------------------------------------
// Qualitative reconstruction driver
// ---------------------------------------------------------------------------

// The proximal weights must stay strictly positive: the alternation is only
// guaranteed to settle when they are bounded away from zero.
struct BCSConfig {
  int patch = 8;          // patch side
  double mu = 1.0;        // data-fidelity weight
  double sparsity = 0.1;  // weight of the code sparsity term
  int s = 0;              // 0: counting norm / hard threshold, 1: l1 / shrinkage
  int sweeps = 30;
  double prox_code = 1e-2;
  double prox_transform = 1e-2;
  double prox_image = 1e-2;

  void validate() const {
    if (patch < 1) throw ConfigError("BCSConfig: patch side must be >= 1");
    if (mu < 0 || sparsity < 0) throw ConfigError("BCSConfig: weights must be >= 0");
    if (s != 0 && s != 1) throw ConfigError("BCSConfig: s must be 0 or 1");
    if (sweeps < 0) throw ConfigError("BCSConfig: sweeps must be >= 0");
    if (!(prox_code > 0) || !(prox_transform > 0) || !(prox_image > 0))
      throw ConfigError("BCSConfig: proximal weights must be positive");
  }
};

struct BCSState {
  VectorXcd u;
  Transform D;
  MatrixXcd C;
  // Objective before the first sweep and after each full sweep.
  std::vector<double> objective;
};

inline double bcs_objective(const FidelityOp& data, const PatchOp& R, const Transform& D,
                            const MatrixXcd& C, const VectorXcd& u, double mu, double sparsity,
                            int s) {
  return mu * data.energy(u) + patch_objective(R.extract(u), D, C, sparsity, s);
}

// Cyclic exact minimization in (C, D, u) from the zero-filled start with a
// cosine-basis transform and all-zero codes. Every block update minimizes the
// objective plus its own proximal term, so the recorded trace must be
// non-increasing; any rise beyond round-off slack is a contract violation.
inline BCSState bcs_reconstruct(const FidelityOp& data, const BCSConfig& cfg) {
  cfg.validate();
  const PatchOp R(data.grid, cfg.patch);
  BCSState st;
  st.u = data.initial();
  st.D = Transform::dct(cfg.patch);
  st.C = MatrixXcd::Zero(R.patch_size(), R.patch_count());
  auto record = [&](double f, int sweep) {
    if (!std::isfinite(f))
      throw NumericalError("bcs_reconstruct: non-finite objective at sweep " +
                           std::to_string(sweep));
    st.objective.push_back(f);
  };
  record(bcs_objective(data, R, st.D, st.C, st.u, cfg.mu, cfg.sparsity, cfg.s), 0);
  for (int sweep = 0; sweep < cfg.sweeps; ++sweep) {
    const MatrixXcd Ru = R.extract(st.u);
    st.C = sparse_code_update(Ru, st.D, st.C, cfg.sparsity, cfg.prox_code, cfg.s);
    st.D = transform_update(Ru, st.C, st.D, cfg.prox_transform);
    st.u = image_update(data, R, st.D, st.C, st.u, cfg.mu, cfg.prox_image);
    const double prev = st.objective.back();
    const double f = bcs_objective(data, R, st.D, st.C, st.u, cfg.mu, cfg.sparsity, cfg.s);
    record(f, sweep + 1);
    if (f > prev + 1e-12 * std::max(1.0, std::abs(prev)))
      throw NumericalError("bcs_reconstruct: objective rose from " + std::to_string(prev) +
                           " to " + std::to_string(f) + " at sweep " + std::to_string(sweep + 1));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Parameter-map variant
// ---------------------------------------------------------------------------

namespace detail {

// Per-channel scales 1 / box width. Normalized channels share a comparable
// range, so a single transform serves all three.
inline Eigen::Vector3d channel_scales(const AdmissibleBox& box) {
  const double wr = box.rho_max - box.rho_min;
  const double w1 = box.t1_max - box.t1_min;
  const double w2 = box.t2_max - box.t2_min;
  if (!(wr > 0) || !(w1 > 0) || !(w2 > 0))
    throw ConfigError("channel_scales: box must have positive width in every channel");
  return {1.0 / wr, 1.0 / w1, 1.0 / w2};
}

// Patches of the normalized map, channel blocks side by side: P x 3N.
inline MatrixXcd map_patches(const PatchOp& R, const ParamMap& q, const Eigen::Vector3d& w) {
  const int n = R.patch_count();
  MatrixXcd out(R.patch_size(), 3 * n);
  out.middleCols(0, n) = R.extract((w[0] * q.rho).cast<Cplx>());
  out.middleCols(n, n) = R.extract((w[1] * q.t1).cast<Cplx>());
  out.middleCols(2 * n, n) = R.extract((w[2] * q.t2).cast<Cplx>());
  return out;
}

// Data-free start: relaxation midpoints everywhere, density from the
// least-squares fit of the midpoint fingerprint to the zero-filled series.
inline ParamMap midpoint_init(const KSpaceData& y, const SequenceSpec& seq,
                              const AdmissibleBox& box) {
  const Grid g = y.pattern.grid;
  const ImageSeries u = zero_fill(y);
  const Fingerprint fp = simulate_bloch(box.t1_mid(), box.t2_mid(), seq);
  const double b2 = fp.values.squaredNorm();
  ParamMap q(g);
  q.t1.setConstant(box.t1_mid());
  q.t2.setConstant(box.t2_mid());
  for (int i = 0; i < g.count(); ++i) {
    const double r = b2 > 0 ? fp.values.dot(u.data.col(i)).real() / b2 : 0.0;
    q.rho[i] = clamp(r, box.rho_min, box.rho_max);
  }
  return q;
}

}  // namespace detail

struct BCSQmriConfig {
  int patch = 4;
  double mu = 1.0;
  double sparsity = 0.05;
  int s = 0;
  int sweeps = 10;
  double prox_code = 1e-2;
  double prox_transform = 1e-2;
  // Damping of the linearized map update; doubled until the objective stops
  // increasing, halved (never below lambda_q_min) after an accepted step.
  double lambda_q0 = 1.0;
  double lambda_q_min = 1e-2;
  int max_doublings = 60;

  void validate() const {
    if (patch < 1) throw ConfigError("BCSQmriConfig: patch side must be >= 1");
    if (mu < 0 || sparsity < 0) throw ConfigError("BCSQmriConfig: weights must be >= 0");
    if (s != 0 && s != 1) throw ConfigError("BCSQmriConfig: s must be 0 or 1");
    if (sweeps < 0) throw ConfigError("BCSQmriConfig: sweeps must be >= 0");
    if (!(prox_code > 0) || !(prox_transform > 0))
      throw ConfigError("BCSQmriConfig: proximal weights must be positive");
    if (!(lambda_q0 > 0) || !(lambda_q_min > 0))
      throw ConfigError("BCSQmriConfig: damping parameters must be positive");
    if (max_doublings < 1) throw ConfigError("BCSQmriConfig: max_doublings must be >= 1");
  }
};

struct BCSQmriState {
  ParamMap q;
  Transform D;
  MatrixXcd C;  // P x 3N codes, channel blocks side by side
  std::vector<double> objective;
  std::vector<int> doublings;  // line-search doublings per sweep
};

inline double bcs_qmri_objective(const KSpaceData& y, const SequenceSpec& seq, const PatchOp& R,
                                 const Eigen::Vector3d& w, const Transform& D,
                                 const MatrixXcd& C, const ParamMap& q, double mu,
                                 double sparsity, int s) {
  const double r = residual_norm(q, y, seq);
  return mu * 0.5 * r * r + patch_objective(detail::map_patches(R, q, w), D, C, sparsity, s);
}

// Codes and transform are updated exactly as in the qualitative variant; the
// map update solves the linearization of the data term around the current map
// voxel by voxel. Replacing A^H A by its upper bound I decouples the voxels
// and leaves a majorizer, so the damped step direction is a descent direction
// of the linearized objective; the doubling search on the true objective then
// absorbs the signal-model nonlinearity.
inline BCSQmriState bcs_qmri_reconstruct(const KSpaceData& y, const SequenceSpec& seq,
                                         const AdmissibleBox& box, const BCSQmriConfig& cfg,
                                         const ParamMap* init = nullptr) {
  cfg.validate();
  box.validate();
  y.check_shapes();
  if (y.frames() != seq.frames())
    throw ConfigError("bcs_qmri_reconstruct: frame count does not match the sequence");
  const Grid g = y.pattern.grid;
  const int n = g.count();
  const PatchOp R(g, cfg.patch);
  const Eigen::Vector3d w = detail::channel_scales(box);
  const double P = static_cast<double>(R.patch_size());

  BCSQmriState st;
  if (init) {
    init->check_shapes();
    if (init->grid != g) throw ConfigError("bcs_qmri_reconstruct: init grid mismatch");
    st.q = project_box(*init, box);
  } else {
    st.q = detail::midpoint_init(y, seq, box);
  }
  st.D = Transform::dct(cfg.patch);
  st.C = MatrixXcd::Zero(R.patch_size(), 3 * n);

  auto objective = [&](const ParamMap& q) {
    return bcs_qmri_objective(y, seq, R, w, st.D, st.C, q, cfg.mu, cfg.sparsity, cfg.s);
  };
  auto record = [&](double f, int sweep) {
    if (!std::isfinite(f))
      throw NumericalError("bcs_qmri_reconstruct: non-finite objective at sweep " +
                           std::to_string(sweep));
    st.objective.push_back(f);
  };
  record(objective(st.q), 0);

  double lambda_q = cfg.lambda_q0;
  for (int sweep = 0; sweep < cfg.sweeps; ++sweep) {
    const MatrixXcd Rq = detail::map_patches(R, st.q, w);
    st.C = sparse_code_update(Rq, st.D, st.C, cfg.sparsity, cfg.prox_code, cfg.s);
    st.D = transform_update(Rq, st.C, st.D, cfg.prox_transform);

    // Linearization point, shared by every damping attempt of this sweep.
    const ImageSeries pi = bloch_map(st.q, seq);
    KSpaceData resid = apply_forward(pi, y.pattern);
    double r2 = 0;
    for (int f = 0; f < y.frames(); ++f) {
      resid.coeffs[static_cast<std::size_t>(f)] =
          y.coeffs[static_cast<std::size_t>(f)] - resid.coeffs[static_cast<std::size_t>(f)];
      r2 += resid.coeffs[static_cast<std::size_t>(f)].squaredNorm();
    }
    const ImageSeries z = zero_fill(resid);
    const MatrixXcd DC = st.D.D * st.C;
    VectorXd pull[3];
    for (int c = 0; c < 3; ++c) pull[c] = R.adjoint(DC.middleCols(c * n, n)).real();
    const double f_prev =
        cfg.mu * 0.5 * r2 + patch_objective(Rq, st.D, st.C, cfg.sparsity, cfg.s);

    std::vector<Eigen::Matrix3d> H(static_cast<std::size_t>(n));
    std::vector<Eigen::Vector3d> rhs(static_cast<std::size_t>(n));
    parallel_for(n, [&](int i) {
      MatrixXcd J(seq.frames(), 3);
      VectorXcd b(seq.frames());
      detail::voxel_jacobian(st.q.rho[i], st.q.t1[i], st.q.t2[i], seq, J, b);
      Eigen::Matrix3d Hi = cfg.mu * (J.adjoint() * J).real();
      Eigen::Vector3d gi = cfg.mu * (J.adjoint() * z.data.col(i)).real();
      const double qc[3] = {st.q.rho[i], st.q.t1[i], st.q.t2[i]};
      for (int c = 0; c < 3; ++c) {
        Hi(c, c) += P * w[c] * w[c];
        gi[c] -= P * w[c] * w[c] * qc[c] - w[c] * pull[c][i];
      }
      H[static_cast<std::size_t>(i)] = Hi;
      rhs[static_cast<std::size_t>(i)] = gi;
    });

    int doubles = 0;
    for (;;) {
      ParamMap q_try = st.q;
      parallel_for(n, [&](int i) {
        Eigen::Matrix3d Hi = H[static_cast<std::size_t>(i)];
        Hi.diagonal().array() += lambda_q;
        const Eigen::Vector3d h = Hi.ldlt().solve(rhs[static_cast<std::size_t>(i)]);
        q_try.rho[i] += h[0];
        q_try.t1[i] += h[1];
        q_try.t2[i] += h[2];
      });
      q_try = project_box(q_try, box);
      const double f_try = objective(q_try);
      if (std::isfinite(f_try) && f_try <= f_prev + 1e-12 * std::max(1.0, std::abs(f_prev))) {
        st.q = q_try;
        record(f_try, sweep + 1);
        st.doublings.push_back(doubles);
        lambda_q = std::max(0.5 * lambda_q, cfg.lambda_q_min);
        break;
      }
      if (++doubles > cfg.max_doublings)
        throw NumericalError("bcs_qmri_reconstruct: line search exceeded " +
                             std::to_string(cfg.max_doublings) + " doublings at sweep " +
                             std::to_string(sweep + 1));
      lambda_q *= 2.0;
    }
  }
  return st;
}

}  // namespace qmri
