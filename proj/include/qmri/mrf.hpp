#pragma once

#include "qmri/bloch.hpp"
#include "qmri/forward.hpp"

namespace qmri {

struct MatchResult {
  double t1 = 0;
  double t2 = 0;
  double rho = 0;
  double correlation = 0;  // Re<u(i), Bhat(q)>
  int dict_index = -1;
};

// Nearest-fingerprint match of one voxel time series. Minimizing
// 1/2||Bhat(q) - u(i)||^2 over unit-norm entries equals maximizing
// Re<u(i), Bhat(q)>; ties break to the smallest index. rho is the norm
// quotient ||u(i)|| / ||B(q)||, set to 0 when the best correlation is
// negative (anti-correlated series carry no physical scale).
inline MatchResult mrf_match(const VectorXcd& series, const FingerprintDictionary& dict) {
  if (dict.size() == 0) throw ConfigError("mrf_match: empty dictionary");
  if (series.size() != dict.frames()) throw ConfigError("mrf_match: frame count mismatch");
  const VectorXcd scores = dict.normalized.adjoint() * series;
  int best = 0;
  double best_c = scores[0].real();
  for (int k = 1; k < dict.size(); ++k) {
    const double c = scores[k].real();
    if (c > best_c) {
      best_c = c;
      best = k;
    }
  }
  MatchResult r;
  r.dict_index = best;
  r.t1 = dict.entries[static_cast<std::size_t>(best)].t1;
  r.t2 = dict.entries[static_cast<std::size_t>(best)].t2;
  r.correlation = best_c;
  r.rho = best_c < 0 ? 0.0 : series.norm() / dict.norms[best];
  return r;
}

// Matches every voxel of a series; writes the matched map and, when
// projected != nullptr, the projected series rho * B(q) voxelwise.
inline ParamMap match_series(const ImageSeries& u, const FingerprintDictionary& dict,
                             ImageSeries* projected = nullptr) {
  if (u.frames() != dict.frames())
    throw ConfigError("match_series: series frames do not match dictionary");
  const int n = u.grid.count();
  ParamMap q(u.grid);
  if (projected) *projected = ImageSeries(u.grid, u.frames());
  parallel_for(n, [&](int i) {
    const MatchResult m = mrf_match(u.data.col(i), dict);
    q.rho[i] = m.rho;
    q.t1[i] = m.t1;
    q.t2[i] = m.t2;
    if (projected) projected->data.col(i) = m.rho * dict.values.col(m.dict_index);
  });
  return q;
}

// Algorithm: zero-fill each frame, then match voxelwise.
inline ParamMap mrf_reconstruct(const KSpaceData& y, const FingerprintDictionary& dict) {
  if (y.frames() != dict.frames())
    throw ConfigError("mrf_reconstruct: data frames do not match dictionary");
  const ImageSeries u = zero_fill(y);
  return match_series(u, dict);
}

struct BlipResult {
  ParamMap map;
  ImageSeries series;            // final projected series rho * B(q)
  std::vector<double> residual;  // ||A u^k - y|| after each projection
};

// Projected Landweber: v = u^k - mu * A^H (A u^k - y), then project v onto the
// fingerprint cone voxel by voxel via mrf_match. steps = 0 reduces to the
// plain MRF reconstruction (projection of the zero-filled series).
inline BlipResult blip_reconstruct(const KSpaceData& y, const FingerprintDictionary& dict,
                                   int steps, double mu = 1.0) {
  if (!(mu > 0 && mu < 2)) throw ConfigError("blip_reconstruct: mu must be in (0, 2)");
  if (steps < 0) throw ConfigError("blip_reconstruct: steps must be >= 0");
  BlipResult out;
  ImageSeries u = zero_fill(y);
  out.map = match_series(u, dict, &out.series);
  auto residual_of = [&](const ImageSeries& s) {
    const KSpaceData as = apply_forward(s, y.pattern);
    double r2 = 0;
    for (int f = 0; f < y.frames(); ++f)
      r2 += (as.coeffs[static_cast<std::size_t>(f)] - y.coeffs[static_cast<std::size_t>(f)])
                .squaredNorm();
    return std::sqrt(r2);
  };
  out.residual.push_back(residual_of(out.series));
  for (int k = 0; k < steps; ++k) {
    const KSpaceData au = apply_forward(out.series, y.pattern);
    KSpaceData diff = au;
    for (int f = 0; f < y.frames(); ++f)
      diff.coeffs[static_cast<std::size_t>(f)] -= y.coeffs[static_cast<std::size_t>(f)];
    const ImageSeries grad = zero_fill(diff);
    ImageSeries v = out.series;
    v.data -= mu * grad.data;
    out.map = match_series(v, dict, &out.series);
    out.residual.push_back(residual_of(out.series));
    if (!out.series.data.allFinite())
      throw NumericalError("blip_reconstruct: non-finite iterate");
  }
  return out;
}

}  // namespace qmri
