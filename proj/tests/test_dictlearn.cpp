#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "qmri/dictlearn.hpp"

using namespace qmri;

namespace {

VectorXcd random_image(const Grid& g, Rng& rng) {
  VectorXcd u(g.count());
  for (int i = 0; i < g.count(); ++i) u[i] = Cplx(rng.normal(), rng.normal());
  return u;
}

// Entries are k * 2^-20 with |k| <= 2^20, so sums of up to a few thousand
// entries stay exactly representable and gather order cannot matter.
VectorXcd dyadic_image(const Grid& g, Rng& rng) {
  VectorXcd u(g.count());
  for (int i = 0; i < g.count(); ++i) {
    const double re = (rng.below(2 * (1 << 20) + 1) - (1 << 20)) * 0x1.0p-20;
    const double im = (rng.below(2 * (1 << 20) + 1) - (1 << 20)) * 0x1.0p-20;
    u[i] = Cplx(re, im);
  }
  return u;
}

MatrixXcd random_codes(int rows, int cols, Rng& rng) {
  MatrixXcd c(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) c(i, j) = Cplx(rng.normal(), rng.normal());
  return c;
}

// Random unitary via QR; independent of the polar factorization under test.
MatrixXcd random_unitary(int n, Rng& rng) {
  const MatrixXcd m = random_codes(n, n, rng);
  Eigen::HouseholderQR<MatrixXcd> qr(m);
  return qr.householderQ() * MatrixXcd::Identity(n, n);
}

Cplx cdot(const MatrixXcd& a, const MatrixXcd& b) {
  return (a.conjugate().cwiseProduct(b)).sum();
}

// Piecewise-constant multi-level image: compressible under small cosine
// patches, values O(1).
VectorXcd blocky_image(const Grid& g) {
  VectorXcd u(g.count());
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const double fx = (x + 0.5) / g.nx - 0.5, fy = (y + 0.5) / g.ny - 0.5;
      double v = 0.15;
      if (std::abs(fx) < 0.35 && std::abs(fy) < 0.35) v = 0.55;
      if (fx * fx + fy * fy < 0.06) v = 1.0;
      if (fx > 0.05 && fy > 0.1 && fx < 0.3 && fy < 0.28) v = 0.75;
      u[g.index(x, y)] = Cplx(v, 0.2 * v);
    }
  return u;
}

double psnr(const VectorXcd& truth, const VectorXcd& est) {
  const double mse = (truth - est).squaredNorm() / truth.size();
  const double peak = truth.cwiseAbs().maxCoeff();
  return 10.0 * std::log10(peak * peak / mse);
}

// Three-tissue phantom over an in-box background (zero density, mid-range
// relaxation) so the map itself is box-feasible.
ParamMap disk_phantom(const Grid& g) {
  ParamMap q(g);
  q.t1.setConstant(1.0);
  q.t2.setConstant(0.1);
  const double tis[3][3] = {{0.9, 0.83, 0.077}, {0.7, 1.31, 0.112}, {1.0, 2.93, 1.41}};
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      const double fx = (x + 0.5) / g.nx - 0.5, fy = (y + 0.5) / g.ny - 0.5;
      int t = -1;
      if (fx * fx + fy * fy < 0.16) t = 0;
      if ((fx + 0.12) * (fx + 0.12) + fy * fy < 0.035) t = 1;
      if (fx > 0.1 && fx < 0.32 && fy > -0.1 && fy < 0.18) t = 2;
      if (t >= 0) {
        const int i = g.index(x, y);
        q.rho[i] = tis[t][0];
        q.t1[i] = tis[t][1];
        q.t2[i] = tis[t][2];
      }
    }
  return q;
}

double map_distance(const ParamMap& a, const ParamMap& b) {
  return std::sqrt((a.rho - b.rho).squaredNorm() + (a.t1 - b.t1).squaredNorm() +
                   (a.t2 - b.t2).squaredNorm());
}

}  // namespace

TEST_CASE("patch side one is the identity") {
  Grid g(6, 5);
  Rng rng(0xd1c7ULL, 1);
  const VectorXcd u = random_image(g, rng);
  const PatchOp R(g, 1);
  const MatrixXcd Q = R.extract(u);
  REQUIRE(Q.rows() == 1);
  REQUIRE(Q.cols() == g.count());
  REQUIRE((Q.transpose() - u).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((R.adjoint(Q) - u).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("wrap-around completeness: R^T R equals patch-size times identity") {
  Rng rng(0xd1c7ULL, 2);
  const std::pair<Grid, int> cases[] = {{Grid(8, 8), 4}, {Grid(7, 5), 3}, {Grid(6, 6), 6}};
  for (const auto& [g, p] : cases) {
    const PatchOp R(g, p);
    const VectorXcd u = dyadic_image(g, rng);
    const VectorXcd back = R.adjoint(R.extract(u));
    // Dyadic entries make every partial sum exact, so equality is bitwise.
    REQUIRE((back - static_cast<double>(R.patch_size()) * u).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("patch extraction and its adjoint satisfy the inner-product identity") {
  Rng rng(0xd1c7ULL, 3);
  for (int rep = 0; rep < 50; ++rep) {
    const Grid g(4 + rng.below(7), 4 + rng.below(7));
    const int p = 1 + rng.below(std::min(g.nx, g.ny));
    const PatchOp R(g, p);
    const VectorXcd u = random_image(g, rng);
    const MatrixXcd Q = random_codes(R.patch_size(), R.patch_count(), rng);
    const Cplx lhs = cdot(R.extract(u), Q);
    const Cplx rhs = cdot(u, R.adjoint(Q));
    REQUIRE(std::abs(lhs - rhs) <= 1e-12 * (std::abs(lhs) + 1.0));
  }
}

TEST_CASE("cosine transform is orthonormal") {
  for (int p : {1, 2, 4, 8}) {
    const Transform t = Transform::dct(p);
    REQUIRE(t.size() == p * p);
    REQUIRE(t.orthonormality_error() <= 1e-10);
    REQUIRE_NOTHROW(t.validate());
  }
  REQUIRE(Transform::identity(5).orthonormality_error() == 0.0);
}

TEST_CASE("sparse code update: no-threshold and huge-threshold limits") {
  Grid g(8, 6);
  Rng rng(0xc0deULL, 1);
  const PatchOp R(g, 3);
  const MatrixXcd patches = R.extract(random_image(g, rng));
  const Transform D = Transform::dct(3);
  const MatrixXcd C_prev = random_codes(R.patch_size(), R.patch_count(), rng);
  const double pw = 0.37;
  const MatrixXcd v = (D.D.adjoint() * patches + pw * C_prev) / (1.0 + pw);
  for (int s : {0, 1}) {
    const MatrixXcd c0 = sparse_code_update(patches, D, C_prev, 0.0, pw, s);
    REQUIRE((c0 - v).cwiseAbs().maxCoeff() <= 1e-14);
    const MatrixXcd chuge = sparse_code_update(patches, D, C_prev, 1e12, pw, s);
    REQUIRE(chuge.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("sparse code update matches 1D grid minimization in scalar cases") {
  const Transform D = Transform::identity(1);
  // (data w, previous code ck, sparsity, prox weight); all chosen away from
  // the hard-threshold tie so the grid argmin is unambiguous.
  const double cases[][4] = {{1.2, 0.3, 0.3, 0.5},
                             {0.5, -0.2, 0.4, 0.25},
                             {-1.5, 0.9, 0.6, 0.0},
                             {0.1, 0.0, 0.5, 0.1},
                             {-0.7, -0.4, 0.2, 1.0}};
  for (int s : {0, 1}) {
    for (const auto& cs : cases) {
      const double w = cs[0], ck = cs[1], sp = cs[2], pw = cs[3];
      MatrixXcd patches(1, 1), C_prev(1, 1);
      patches(0, 0) = w;
      C_prev(0, 0) = ck;
      const double c_num = sparse_code_update(patches, D, C_prev, sp, pw, s)(0, 0).real();
      auto obj = [&](double c) {
        const double pen = s == 0 ? (c != 0.0 ? 1.0 : 0.0) : std::abs(c);
        return 0.5 * (w - c) * (w - c) + 0.5 * pw * (c - ck) * (c - ck) + sp * pen;
      };
      // Symmetric grid through an exact zero, 1e-4 spacing.
      double best = 0.0, fbest = obj(0.0);
      for (int k = -30000; k <= 30000; ++k) {
        const double c = k * 1e-4;
        const double f = obj(c);
        if (f < fbest) {
          fbest = f;
          best = c;
        }
      }
      INFO("s=" << s << " w=" << w << " ck=" << ck << " sp=" << sp << " pw=" << pw);
      REQUIRE(std::abs(c_num - best) <= 1.5e-4);
      REQUIRE(obj(c_num) <= fbest + 1e-12);
    }
  }
}

TEST_CASE("thresholds commute with phase and the shrinkage prox is firm") {
  Rng rng(0xc0deULL, 2);
  int tested = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const Cplx v(rng.normal(), rng.normal());
    const double t = 0.5 * rng.uniform(0.0, 2.0);
    const double phi = rng.uniform(0.0, 2 * M_PI);
    const Cplx ph = std::polar(1.0, phi);
    if (std::abs(0.5 * std::norm(v) - t) > 1e-6) {
      REQUIRE(std::abs(detail::hard_threshold(ph * v, t) - ph * detail::hard_threshold(v, t)) <=
              1e-12);
      ++tested;
    }
    REQUIRE(std::abs(detail::soft_threshold(ph * v, t) - ph * detail::soft_threshold(v, t)) <=
            1e-12);
  }
  REQUIRE(tested > 900);  // the tie filter must not eat the hard-threshold check

  for (int rep = 0; rep < 1000; ++rep) {
    const Cplx v1(rng.normal(), rng.normal());
    const Cplx v2(rng.normal(), rng.normal());
    const double t = 0.5 * rng.uniform(0.0, 2.0);
    const Cplx d = detail::soft_threshold(v1, t) - detail::soft_threshold(v2, t);
    const double inner = (std::conj(d) * (v1 - v2)).real();
    REQUIRE(inner >= std::norm(d) - 1e-12);
  }
}

TEST_CASE("transform update returns the polar factor") {
  Rng rng(0x9017ULL, 1);

  // M = I: the prox pull of an identity previous transform with zero codes.
  const MatrixXcd zero_patches = MatrixXcd::Zero(4, 10);
  const MatrixXcd zero_codes = MatrixXcd::Zero(4, 10);
  const Transform d_id = transform_update(zero_patches, zero_codes, Transform::identity(4), 1.0);
  REQUIRE((d_id.D - MatrixXcd::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-12);

  // M unitary: the polar factor of a unitary matrix is itself.
  for (int rep = 0; rep < 5; ++rep) {
    const MatrixXcd Q = random_unitary(4, rng);
    REQUIRE((detail::polar_unitary(Q) - Q).cwiseAbs().maxCoeff() <= 1e-10);
  }

  // Recovery through the op: patches = Q C with full-rank C maximizes at Q.
  for (int rep = 0; rep < 5; ++rep) {
    const MatrixXcd Q = random_unitary(4, rng);
    const MatrixXcd C = random_codes(4, 8, rng);
    const Transform d = transform_update(Q * C, C, Transform::identity(4), 0.0);
    REQUIRE((d.D - Q).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("transform update beats random unitaries and stays orthonormal") {
  Rng rng(0x9017ULL, 2);
  for (int rep = 0; rep < 5; ++rep) {
    // patches (= M) against identity codes realizes an arbitrary target M.
    const MatrixXcd M = random_codes(4, 4, rng);
    const Transform d = transform_update(M, MatrixXcd::Identity(4, 4),
                                         Transform::identity(4), 0.0);
    REQUIRE(d.orthonormality_error() <= 1e-10);
    const double val = (d.D.adjoint() * M).trace().real();
    for (int k = 0; k < 1000; ++k) {
      const MatrixXcd Q = random_unitary(4, rng);
      REQUIRE(val >= (Q.adjoint() * M).trace().real() - 1e-10);
    }
  }
  // Rank-deficient codes: the optimum is non-unique but must stay unitary.
  MatrixXcd C = random_codes(9, 20, rng);
  C.row(3).setZero();
  C.row(7).setZero();
  Grid g(10, 10);
  const PatchOp R(g, 3);
  const MatrixXcd patches = R.extract(random_image(g, rng)).leftCols(20);
  const Transform d = transform_update(patches, C, Transform::dct(3), 1e-2);
  REQUIRE(d.orthonormality_error() <= 1e-10);
}

TEST_CASE("image update solves its first-order system") {
  Grid g(16, 12);
  Rng rng(0x1717ULL, 1);
  const PatchOp R(g, 3);
  const Transform D{random_unitary(R.patch_size(), rng)};
  const MatrixXcd C = random_codes(R.patch_size(), R.patch_count(), rng);
  const VectorXcd u_prev = random_image(g, rng);

  ImageSeries s(g, 1);
  s.data.row(0) = random_image(g, rng).transpose();
  const SamplingPattern pat = make_cartesian_masks(g, 2, 1, 5);
  const KSpaceData y = apply_forward(s, pat);
  const FidelityOp data = FidelityOp::fourier_frame(y, 0);

  SECTION("patch-average limit at zero weights") {
    const VectorXcd u = image_update(data, R, D, C, u_prev, 0.0, 0.0);
    const VectorXcd ref = R.adjoint(D.D * C) / static_cast<double>(R.patch_size());
    REQUIRE((u - ref).norm() <= 1e-12 * ref.norm());
  }

  SECTION("fidelity-dominant limit reproduces the adjoint image") {
    const SamplingPattern full = full_sampling(g, 1);
    const KSpaceData yf = apply_forward(s, full);
    const FidelityOp df = FidelityOp::fourier_frame(yf, 0);
    const VectorXcd u = image_update(df, R, D, C, u_prev, 1e9, 0.0);
    const VectorXcd ref = df.initial();
    REQUIRE((u - ref).norm() <= 1e-6 * ref.norm());
  }

  SECTION("residual of the normal equations vanishes") {
    const double mu = 2.3, pw = 0.7;
    const VectorXcd u = image_update(data, R, D, C, u_prev, mu, pw);
    // Apply the operators directly, no diagonal shortcut.
    VectorXcd k = fft2_unitary(u, g);
    for (int i = 0; i < g.count(); ++i)
      if (!data.mask[static_cast<std::size_t>(i)]) k[i] = Cplx(0, 0);
    const VectorXcd aha_u = ifft2_unitary(k, g);
    const VectorXcd lhs = mu * aha_u + R.adjoint(R.extract(u)) + pw * u;
    const VectorXcd rhs = mu * ifft2_unitary(data.y, g) + R.adjoint(D.D * C) + pw * u_prev;
    REQUIRE((lhs - rhs).norm() <= 1e-10 * rhs.norm());
  }

  SECTION("identity fidelity: residual of the normal equations vanishes") {
    const FidelityOp dn = FidelityOp::denoise(g, random_image(g, rng));
    const double mu = 1.9, pw = 0.4;
    const VectorXcd u = image_update(dn, R, D, C, u_prev, mu, pw);
    const VectorXcd lhs = mu * u + R.adjoint(R.extract(u)) + pw * u;
    const VectorXcd rhs = mu * dn.y + R.adjoint(D.D * C) + pw * u_prev;
    REQUIRE((lhs - rhs).norm() <= 1e-10 * rhs.norm());
  }
}

TEST_CASE("blind reconstruction limits") {
  SECTION("zero sweeps returns the zero-filled start") {
    Grid g(16, 16);
    ImageSeries s(g, 1);
    s.data.row(0) = blocky_image(g).transpose();
    const SamplingPattern p = make_cartesian_masks(g, 2, 1, 3);
    const KSpaceData y = apply_forward(s, p);
    const FidelityOp data = FidelityOp::fourier_frame(y, 0);
    BCSConfig cfg;
    cfg.patch = 4;
    cfg.sweeps = 0;
    const BCSState st = bcs_reconstruct(data, cfg);
    REQUIRE((st.u - data.initial()).cwiseAbs().maxCoeff() <= 1e-14);
    REQUIRE(st.objective.size() == 1);
  }

  SECTION("noiseless full sampling with dominant fidelity recovers the image") {
    Grid g(16, 16);
    const VectorXcd truth = blocky_image(g);
    ImageSeries s(g, 1);
    s.data.row(0) = truth.transpose();
    const KSpaceData y = apply_forward(s, full_sampling(g, 1));
    const FidelityOp data = FidelityOp::fourier_frame(y, 0);
    BCSConfig cfg;
    cfg.patch = 4;
    cfg.mu = 1e9;
    cfg.sparsity = 0.05;
    cfg.sweeps = 3;
    const BCSState st = bcs_reconstruct(data, cfg);
    REQUIRE((st.u - truth).norm() <= 1e-6 * truth.norm());
  }

  SECTION("config validation") {
    Grid g(16, 16);
    const FidelityOp data = FidelityOp::denoise(g, blocky_image(g));
    BCSConfig cfg;
    cfg.prox_image = 0.0;
    REQUIRE_THROWS_AS(bcs_reconstruct(data, cfg), ConfigError);
    cfg = BCSConfig{};
    cfg.s = 2;
    REQUIRE_THROWS_AS(bcs_reconstruct(data, cfg), ConfigError);
    cfg = BCSConfig{};
    cfg.patch = 17;
    REQUIRE_THROWS_AS(bcs_reconstruct(data, cfg), ConfigError);
    REQUIRE_THROWS_AS(PatchOp(g, 0), ConfigError);
  }
}

TEST_CASE("blind reconstruction improves on zero filling when undersampled") {
  Grid g(32, 32);
  const VectorXcd truth = blocky_image(g);
  ImageSeries s(g, 1);
  s.data.row(0) = truth.transpose();
  const SamplingPattern p = make_cartesian_masks(g, 2, 1, 42);
  const KSpaceData y = apply_forward(s, p);
  const FidelityOp data = FidelityOp::fourier_frame(y, 0);
  BCSConfig cfg;
  cfg.patch = 8;
  cfg.mu = 1000;
  cfg.sparsity = 0.05;
  cfg.sweeps = 30;
  const BCSState st = bcs_reconstruct(data, cfg);
  REQUIRE(psnr(truth, st.u) >= psnr(truth, data.initial()) + 1.0);
}

TEST_CASE("blind reconstruction objective is monotone and the iterates settle") {
  SECTION("monotone trace on a noisy undersampled instance") {
    Grid g(32, 32);
    ImageSeries s(g, 1);
    s.data.row(0) = blocky_image(g).transpose();
    const SamplingPattern p = make_cartesian_masks(g, 4, 1, 21);
    KSpaceData y = apply_forward(s, p);
    add_noise(y, 0.05, 9);
    const FidelityOp data = FidelityOp::fourier_frame(y, 0);
    BCSConfig cfg;
    cfg.patch = 8;
    cfg.mu = 100;
    cfg.sparsity = 0.05;
    cfg.sweeps = 30;
    const BCSState st = bcs_reconstruct(data, cfg);
    REQUIRE(st.objective.size() == 31);
    for (std::size_t k = 1; k < st.objective.size(); ++k)
      REQUIRE(st.objective[k] <=
              st.objective[k - 1] + 1e-12 * std::max(1.0, std::abs(st.objective[k - 1])));
  }

  SECTION("iterate movement falls below 1e-6") {
    Grid g(16, 16);
    ImageSeries s(g, 1);
    s.data.row(0) = blocky_image(g).transpose();
    const SamplingPattern p = make_cartesian_masks(g, 2, 1, 7);
    KSpaceData y = apply_forward(s, p);
    add_noise(y, 0.03, 11);
    const FidelityOp data = FidelityOp::fourier_frame(y, 0);
    BCSConfig cfg;
    cfg.patch = 4;
    cfg.mu = 50;
    cfg.sparsity = 0.05;
    cfg.sweeps = 60;
    const BCSState a = bcs_reconstruct(data, cfg);
    cfg.sweeps = 61;
    const BCSState b = bcs_reconstruct(data, cfg);
    // The alternation is deterministic, so the longer run shares the shorter
    // run's prefix and the difference is exactly one sweep's movement.
    REQUIRE((a.u - b.u).norm() <= 1e-6);
  }
}

TEST_CASE("map variant is stationary at the truth") {
  Grid g(8, 8);
  const SequenceSpec seq = default_sequence(12);
  const ParamMap truth = disk_phantom(g);
  const KSpaceData y = apply_forward(bloch_map(truth, seq), full_sampling(g, seq.frames()));
  AdmissibleBox box;
  BCSQmriConfig cfg;
  cfg.patch = 2;
  cfg.mu = 1.0;
  cfg.sparsity = 0.0;   // codes reproduce the patches exactly
  cfg.prox_code = 1e-12;
  cfg.prox_transform = 1e-12;
  cfg.sweeps = 2;
  const BCSQmriState st = bcs_qmri_reconstruct(y, seq, box, cfg, &truth);
  REQUIRE((st.q.rho - truth.rho).cwiseAbs().maxCoeff() <= 1e-10);
  REQUIRE((st.q.t1 - truth.t1).cwiseAbs().maxCoeff() <= 1e-10);
  REQUIRE((st.q.t2 - truth.t2).cwiseAbs().maxCoeff() <= 1e-10);
  REQUIRE(st.doublings == std::vector<int>{0, 0});
}

TEST_CASE("map variant reduces to the voxelwise damped refinement") {
  // Single voxel, trivial patches, no sparsity, vanishing proximal pull and a
  // box so large the patch curvature is negligible: the sweep is exactly one
  // damped normal step, so the trajectories must coincide.
  Grid g(1, 1);
  const SequenceSpec seq = default_sequence(30);
  ParamMap truth(g);
  truth.rho[0] = 1.0;
  truth.t1[0] = 0.9;
  truth.t2[0] = 0.15;
  KSpaceData y = apply_forward(bloch_map(truth, seq), full_sampling(g, seq.frames()));
  add_noise(y, 0.05, 3);
  AdmissibleBox box;
  box.rho_min = 0;
  box.rho_max = 1e6;
  box.t1_min = 1e-6;
  box.t1_max = 1e6;
  box.t2_min = 1e-6;
  box.t2_max = 1e6;
  ParamMap q0(g);
  q0.rho[0] = 0.8;
  q0.t1[0] = 1.2;
  q0.t2[0] = 0.2;
  for (int k = 1; k <= 5; ++k) {
    LMConfig lc;
    lc.lambda0 = 1.0;
    lc.decay = 0.5;
    lc.max_iters = k;
    lc.tau = 1.0;
    lc.sigma = 0.0;  // discrepancy threshold collapses to the round-off floor
    const ParamMap lm = lm_reconstruct(y, seq, q0, box, lc);
    BCSQmriConfig bc;
    bc.patch = 1;
    bc.mu = 1.0;
    bc.sparsity = 0.0;
    bc.sweeps = k;
    bc.prox_code = 1e-300;
    bc.prox_transform = 1e-300;
    bc.lambda_q0 = 1.0;
    bc.lambda_q_min = 1e-12;
    const BCSQmriState st = bcs_qmri_reconstruct(y, seq, box, bc, &q0);
    INFO("k=" << k);
    REQUIRE(std::abs(st.q.rho[0] - lm.rho[0]) <= 1e-8);
    REQUIRE(std::abs(st.q.t1[0] - lm.t1[0]) <= 1e-8);
    REQUIRE(std::abs(st.q.t2[0] - lm.t2[0]) <= 1e-8);
  }
}

TEST_CASE("map variant rejects non-finite data") {
  Grid g(4, 4);
  const SequenceSpec seq = default_sequence(3);
  ParamMap truth(g);
  truth.rho.setConstant(1.0);
  truth.t1.setConstant(1.0);
  truth.t2.setConstant(0.1);
  KSpaceData y = apply_forward(bloch_map(truth, seq), full_sampling(g, seq.frames()));
  y.coeffs[1][0] = Cplx(std::nan(""), 0.0);
  AdmissibleBox box;
  BCSQmriConfig cfg;
  cfg.patch = 2;
  cfg.sweeps = 3;
  REQUIRE_THROWS_AS(bcs_qmri_reconstruct(y, seq, box, cfg), NumericalError);
}

TEST_CASE("map variant iterates settle on a small instance") {
  Grid g(8, 8);
  const SequenceSpec seq = default_sequence(16);
  ParamMap truth(g);
  truth.t1.setConstant(1.0);
  truth.t2.setConstant(0.1);
  for (int i = 0; i < g.count(); ++i) {
    if (i % 3 == 0) continue;
    truth.rho[i] = 0.8 + 0.02 * (i % 5);
    truth.t1[i] = 0.9 + 0.05 * (i % 4);
    truth.t2[i] = 0.1 + 0.01 * (i % 3);
  }
  KSpaceData y = apply_forward(bloch_map(truth, seq), make_cartesian_masks(g, 2, seq.frames(), 13));
  add_noise(y, 0.02, 17);
  AdmissibleBox box;
  BCSQmriConfig cfg;
  cfg.patch = 2;
  cfg.mu = 30;
  cfg.sparsity = 0.02;
  cfg.sweeps = 400;
  const BCSQmriState a = bcs_qmri_reconstruct(y, seq, box, cfg);
  cfg.sweeps = 401;
  const BCSQmriState b = bcs_qmri_reconstruct(y, seq, box, cfg);
  REQUIRE(map_distance(a.q, b.q) <= 1e-6);
}

TEST_CASE("learned patch model beats the unregularized refinement when heavily undersampled") {
  Grid g(32, 32);
  const SequenceSpec seq = default_sequence(200);
  const ParamMap truth = disk_phantom(g);
  const SamplingPattern p = make_cartesian_masks(g, 16, seq.frames(), 99);
  KSpaceData y = apply_forward(bloch_map(truth, seq), p);
  add_noise(y, 0.01, 5);
  AdmissibleBox box;
  const FingerprintDictionary dict = default_dictionary(seq);
  const ParamMap q0 = mrf_reconstruct(y, dict);  // shared start for both arms

  std::vector<std::uint8_t> fg(static_cast<std::size_t>(g.count()));
  for (int i = 0; i < g.count(); ++i) fg[static_cast<std::size_t>(i)] = truth.rho[i] > 0;

  LMConfig lc;
  lc.max_iters = 25;
  lc.tau = 1.0;
  lc.sigma = 0.0;  // never stop early: spend the whole matched budget
  const ParamMap lm = lm_reconstruct(y, seq, q0, box, lc);
  const RelErrorReport el = rel_error_map(lm, truth, fg);

  BCSQmriConfig bc;
  bc.patch = 4;
  bc.mu = 30;
  bc.sparsity = 0.02;
  bc.sweeps = 25;
  const BCSQmriState st = bcs_qmri_reconstruct(y, seq, box, bc, &q0);
  for (std::size_t k = 1; k < st.objective.size(); ++k)
    REQUIRE(st.objective[k] <=
            st.objective[k - 1] + 1e-12 * std::max(1.0, std::abs(st.objective[k - 1])));
  const RelErrorReport eb = rel_error_map(st.q, truth, fg);
  REQUIRE(eb.t1_mean <= el.t1_mean);
  REQUIRE(eb.t2_mean <= el.t2_mean);
  REQUIRE(eb.rho_mean <= el.rho_mean);
}
