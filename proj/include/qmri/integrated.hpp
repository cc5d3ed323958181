#pragma once

#include <algorithm>

#include "qmri/bloch.hpp"
#include "qmri/forward.hpp"
#include "qmri/mrf.hpp"

namespace qmri {

struct LMConfig {
  double lambda0 = -1.0;  // < 0: 0.1 * median of the normal-matrix diagonal at q0
  double decay = 0.7;     // lambda_n = lambda0 * decay^n
  int max_iters = 30;
  double tau = 1.5;       // discrepancy factor (artifact choice, see docs)
  double sigma = -1.0;    // < 0: estimated from data via estimate_sigma

  void validate() const {
    if (lambda0 == 0 || std::isnan(lambda0))
      throw ConfigError("LMConfig: lambda0 must be positive (or negative for auto)");
    if (!(decay > 0 && decay < 1)) throw ConfigError("LMConfig: decay must be in (0, 1)");
    if (max_iters < 0) throw ConfigError("LMConfig: max_iters must be >= 0");
    if (!(tau >= 1)) throw ConfigError("LMConfig: tau must be >= 1");
  }
};

struct LMTrace {
  std::vector<double> residual;   // ||A Pi(q_n) - y|| before each step
  std::vector<double> lambda;     // damping used at step n
  std::vector<double> step_norm;  // ||h_n|| before projection
  bool discrepancy_stop = false;
};

// ||A Pi(q) - y|| over the sampled locations.
inline double residual_norm(const ParamMap& q, const KSpaceData& y, const SequenceSpec& seq) {
  const KSpaceData ay = apply_forward(bloch_map(q, seq), y.pattern);
  double r2 = 0;
  for (int f = 0; f < y.frames(); ++f)
    r2 += (ay.coeffs[static_cast<std::size_t>(f)] - y.coeffs[static_cast<std::size_t>(f)])
              .squaredNorm();
  return std::sqrt(r2);
}

// Noise-level estimate: pool real and imaginary parts of the sampled
// coefficients in each frame's highest-frequency rows (cyclic distance from
// the DC row at ny/2 in the top quartile of that frame's sampled distances),
// then scale the median absolute value to a Gaussian std. Heuristic,
// overridable through LMConfig::sigma.
inline double estimate_sigma(const KSpaceData& y) {
  const Grid g = y.pattern.grid;
  const int c = g.ny / 2;
  std::vector<double> pool;
  for (int f = 0; f < y.frames(); ++f) {
    const auto& rows = y.pattern.rows[static_cast<std::size_t>(f)];
    if (rows.empty()) continue;
    int dmax = 0;
    for (int r : rows) dmax = std::max(dmax, std::abs(r - c));
    const int cut = (3 * dmax + 3) / 4;
    const auto& idx = y.pattern.sample_idx[static_cast<std::size_t>(f)];
    const auto& co = y.coeffs[static_cast<std::size_t>(f)];
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const int row = idx[k] / g.nx;
      if (std::abs(row - c) >= cut && dmax > 0) {
        pool.push_back(co[static_cast<Eigen::Index>(k)].real());
        pool.push_back(co[static_cast<Eigen::Index>(k)].imag());
      }
    }
  }
  if (pool.empty()) return 0.0;
  for (double& v : pool) v = std::abs(v);
  const std::size_t mid = pool.size() / 2;
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(mid), pool.end());
  return 1.4826 * pool[mid];
}

// Projected Levenberg-Marquardt on the reduced problem min ||A Pi(q) - y||^2
// over the box. Each iteration linearizes Pi voxelwise, forms the per-voxel
// 3x3 damped normal system against the zero-filled residual, steps, and
// projects. The voxel decoupling is exact because A^dagger = A^H under the
// unitary convention and Pi acts voxelwise.
inline ParamMap lm_reconstruct(const KSpaceData& y, const SequenceSpec& seq, const ParamMap& q0,
                               const AdmissibleBox& box, const LMConfig& cfg,
                               LMTrace* trace = nullptr) {
  cfg.validate();
  box.validate();
  y.check_shapes();
  if (y.frames() != seq.frames()) throw ConfigError("lm_reconstruct: frame count mismatch");
  const Grid g = y.pattern.grid;
  const int n = g.count();
  ParamMap q = project_box(q0, box);

  const double sigma = cfg.sigma >= 0 ? cfg.sigma : estimate_sigma(y);
  // Round-off floor so exact-data runs stop once the residual is numerically
  // zero instead of iterating on noise.
  const double threshold =
      std::max(cfg.tau * sigma * std::sqrt(static_cast<double>(y.total_samples())),
               1e-14 * y.norm());

  double lambda = cfg.lambda0;
  for (int it = 0; it <= cfg.max_iters; ++it) {
    const ImageSeries pi = bloch_map(q, seq);
    const KSpaceData ay = apply_forward(pi, y.pattern);
    KSpaceData resid = ay;
    double r2 = 0;
    for (int f = 0; f < y.frames(); ++f) {
      resid.coeffs[static_cast<std::size_t>(f)] =
          y.coeffs[static_cast<std::size_t>(f)] - ay.coeffs[static_cast<std::size_t>(f)];
      r2 += resid.coeffs[static_cast<std::size_t>(f)].squaredNorm();
    }
    const double rnorm = std::sqrt(r2);
    if (!std::isfinite(rnorm))
      throw NumericalError("lm_reconstruct: non-finite residual at iteration " +
                           std::to_string(it));
    if (trace) trace->residual.push_back(rnorm);
    if (rnorm <= threshold) {
      if (trace) trace->discrepancy_stop = true;
      return q;
    }
    if (it == cfg.max_iters) break;

    const ImageSeries z = zero_fill(resid);  // A^dagger applied to the residual

    if (lambda < 0) {
      // Auto scale: 0.1 * median diagonal of Re(J^H J) over voxels/channels.
      std::vector<double> diag(static_cast<std::size_t>(3 * n));
      parallel_for(n, [&](int i) {
        MatrixXcd J(seq.frames(), 3);
        VectorXcd b(seq.frames());
        detail::voxel_jacobian(q.rho[i], q.t1[i], q.t2[i], seq, J, b);
        for (int c = 0; c < 3; ++c)
          diag[static_cast<std::size_t>(3 * i + c)] = J.col(c).squaredNorm();
      });
      const std::size_t mid = diag.size() / 2;
      std::nth_element(diag.begin(), diag.begin() + static_cast<std::ptrdiff_t>(mid), diag.end());
      lambda = 0.1 * diag[mid];
      if (!(lambda > 0)) lambda = 1e-3;  // all-zero start: fall back to a fixed floor
    }
    const double lam = lambda * std::pow(cfg.decay, it);
    if (trace) trace->lambda.push_back(lam);

    VectorXd hr(n), h1(n), h2(n);
    parallel_for(n, [&](int i) {
      MatrixXcd J(seq.frames(), 3);
      VectorXcd b(seq.frames());
      detail::voxel_jacobian(q.rho[i], q.t1[i], q.t2[i], seq, J, b);
      Eigen::Matrix3d H = (J.adjoint() * J).real();
      H.diagonal().array() += lam;
      const Eigen::Vector3d rhs = (J.adjoint() * z.data.col(i)).real();
      const Eigen::Vector3d h = H.ldlt().solve(rhs);
      hr[i] = h[0];
      h1[i] = h[1];
      h2[i] = h[2];
    });
    if (trace)
      trace->step_norm.push_back(
          std::sqrt(hr.squaredNorm() + h1.squaredNorm() + h2.squaredNorm()));
    q.rho += hr;
    q.t1 += h1;
    q.t2 += h2;
    q = project_box(q, box);
  }
  return q;
}

// Convenience wrapper: MRF initialization then L-M refinement, the default
// integrated pipeline.
inline ParamMap lm_from_mrf(const KSpaceData& y, const SequenceSpec& seq,
                            const FingerprintDictionary& dict, const AdmissibleBox& box,
                            const LMConfig& cfg, LMTrace* trace = nullptr) {
  const ParamMap q0 = mrf_reconstruct(y, dict);
  return lm_reconstruct(y, seq, q0, box, cfg, trace);
}

}  // namespace qmri
