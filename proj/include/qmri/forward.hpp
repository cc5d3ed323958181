#pragma once

#include <algorithm>
#include <numeric>

#include "qmri/core.hpp"
#include "qmri/fft.hpp"

namespace qmri {

// Per-frame Cartesian row subsampling. Each frame keeps ceil(ny/factor) full
// rows; the center row ny/2 (which carries DC under the centered k-space
// layout) is always kept, the rest are drawn without replacement. With
// complementary=true each frame uses its own RNG stream so the row sets
// differ across frames; with false every frame reuses the frame-0 draw.
inline SamplingPattern make_cartesian_masks(const Grid& g, int factor, int frames,
                                            std::uint64_t seed, bool complementary = true) {
  if (factor < 1 || factor > g.ny)
    throw ConfigError("make_cartesian_masks: factor must be in [1, ny]");
  if (frames < 1) throw ConfigError("make_cartesian_masks: frames must be >= 1");
  const int keep = (g.ny + factor - 1) / factor;
  const int center = g.ny / 2;
  SamplingPattern p;
  p.grid = g;
  p.mask.assign(static_cast<std::size_t>(frames), std::vector<std::uint8_t>(g.count(), 0));
  p.rows.assign(static_cast<std::size_t>(frames), {});
  for (int f = 0; f < frames; ++f) {
    Rng rng(seed, complementary ? static_cast<std::uint64_t>(f) : 0);
    std::vector<int> pool;
    pool.reserve(static_cast<std::size_t>(g.ny) - 1);
    for (int y = 0; y < g.ny; ++y)
      if (y != center) pool.push_back(y);
    std::vector<int> rows{center};
    for (int k = 0; k < keep - 1; ++k) {
      const int j = k + rng.below(static_cast<int>(pool.size()) - k);
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
      rows.push_back(pool[static_cast<std::size_t>(k)]);
    }
    std::sort(rows.begin(), rows.end());
    p.rows[static_cast<std::size_t>(f)] = rows;
    for (int y : rows)
      for (int x = 0; x < g.nx; ++x) p.mask[static_cast<std::size_t>(f)][g.index(x, y)] = 1;
  }
  p.rebuild_indices();
  return p;
}

inline SamplingPattern full_sampling(const Grid& g, int frames) {
  return make_cartesian_masks(g, 1, frames, 0, false);
}

// A: image series -> sampled unitary-FFT coefficients, frame by frame.
inline KSpaceData apply_forward(const ImageSeries& u, const SamplingPattern& p) {
  if (u.grid != p.grid) throw ConfigError("apply_forward: grid mismatch");
  if (u.frames() != p.frames()) throw ConfigError("apply_forward: frame count mismatch");
  KSpaceData y;
  y.pattern = p;
  y.coeffs.resize(static_cast<std::size_t>(p.frames()));
  parallel_for(p.frames(), [&](int f) {
    const VectorXcd img = u.data.row(f).transpose();
    const VectorXcd ksp = fft2_unitary(img, u.grid);
    const auto& idx = p.sample_idx[static_cast<std::size_t>(f)];
    VectorXcd c(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) c[static_cast<Eigen::Index>(k)] = ksp[idx[k]];
    y.coeffs[static_cast<std::size_t>(f)] = std::move(c);
  });
  return y;
}

// A^H: scatter the sampled coefficients onto the full grid (zeros elsewhere)
// and inverse-transform. Under the unitary FFT this adjoint is also the
// pseudoinverse on the data range: A A^H = I.
inline ImageSeries zero_fill(const KSpaceData& y) {
  y.check_shapes();
  const Grid g = y.pattern.grid;
  ImageSeries u(g, y.frames());
  parallel_for(y.frames(), [&](int f) {
    VectorXcd ksp = VectorXcd::Zero(g.count());
    const auto& idx = y.pattern.sample_idx[static_cast<std::size_t>(f)];
    const auto& c = y.coeffs[static_cast<std::size_t>(f)];
    for (std::size_t k = 0; k < idx.size(); ++k) ksp[idx[k]] = c[static_cast<Eigen::Index>(k)];
    u.data.row(f) = ifft2_unitary(ksp, g).transpose();
  });
  return u;
}

inline ImageSeries apply_adjoint(const KSpaceData& y) { return zero_fill(y); }

// Additive complex Gaussian noise, sigma per real component. The draw for a
// sample depends only on (seed, frame, flat location), so the result does not
// depend on iteration order or thread count.
inline void add_noise(KSpaceData& y, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw ConfigError("add_noise: sigma must be >= 0");
  if (sigma == 0) return;
  y.check_shapes();
  parallel_for(y.frames(), [&](int f) {
    const auto& idx = y.pattern.sample_idx[static_cast<std::size_t>(f)];
    auto& c = y.coeffs[static_cast<std::size_t>(f)];
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto [z0, z1] = Rng::normal_pair_at(seed, static_cast<std::uint64_t>(f),
                                                2 * static_cast<std::uint64_t>(idx[k]));
      c[static_cast<Eigen::Index>(k)] += sigma * Cplx(z0, z1);
    }
  });
}

// Power iteration estimate of ||A|| = sqrt(lambda_max(A^H A)). Deterministic
// start from a fixed RNG stream.
inline double op_norm_estimate(const SamplingPattern& p, int iters = 50,
                               std::uint64_t seed = 0xa11ce) {
  const Grid g = p.grid;
  ImageSeries u(g, p.frames());
  Rng rng(seed, 17);
  for (int f = 0; f < p.frames(); ++f)
    for (int i = 0; i < g.count(); ++i) {
      const auto [a, b] = rng.normal_pair();
      u.data(f, i) = Cplx(a, b);
    }
  double lam = 0;
  for (int it = 0; it < iters; ++it) {
    const double n = u.norm();
    if (n == 0) throw NumericalError("op_norm_estimate: zero iterate");
    u.data /= n;
    u = zero_fill(apply_forward(u, p));
    lam = u.norm();  // Rayleigh quotient of A^H A at the normalized iterate
  }
  return std::sqrt(lam);
}

}  // namespace qmri
