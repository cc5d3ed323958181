#pragma once

#include <json.hpp>

#include "qmri/core.hpp"
#include "qmri/io.hpp"

namespace qmri {

// ---------------------------------------------------------------------------
// Sequence description
// ---------------------------------------------------------------------------

struct SequenceSpec {
  VectorXd flip;      // radians, one per frame
  VectorXd tr;        // seconds, one per frame
  double te = 0.0;    // seconds; used by the FLASH/ESTATICS variants
  bool inversion = true;
  double m_eq = 1.0;
  bool alternating = false;  // sign flip of a_l on even one-based l

  int frames() const { return static_cast<int>(flip.size()); }

  void validate() const {
    if (frames() < 1) throw ConfigError("SequenceSpec: need at least one frame");
    if (tr.size() != flip.size()) throw ConfigError("SequenceSpec: tr/flip length mismatch");
    for (int l = 0; l < frames(); ++l) {
      if (!(flip[l] >= 0.0 && flip[l] <= M_PI))
        throw ConfigError("SequenceSpec: flip angles must lie in [0, pi]");
      if (!(tr[l] > 0.0)) throw ConfigError("SequenceSpec: tr must be positive");
    }
    if (te < 0) throw ConfigError("SequenceSpec: te must be >= 0");
  }

  // Effective excitation angle at one-based frame l.
  double angle_at(int l0) const {
    const double a = flip[l0];
    return (alternating && ((l0 + 1) % 2 == 0)) ? -a : a;
  }

  json to_json() const {
    json j;
    j["frames"] = frames();
    std::vector<double> fa(flip.data(), flip.data() + flip.size());
    std::vector<double> trs(tr.data(), tr.data() + tr.size());
    j["flip_angles"] = fa;
    j["tr"] = trs;
    j["te"] = te;
    j["inversion"] = inversion;
    j["m_eq"] = m_eq;
    j["alternating"] = alternating;
    return j;
  }

  static SequenceSpec from_json(const json& j) {
    SequenceSpec s;
    const auto fa = j.at("flip_angles").get<std::vector<double>>();
    const auto trs = j.at("tr").get<std::vector<double>>();
    s.flip = Eigen::Map<const VectorXd>(fa.data(), static_cast<Eigen::Index>(fa.size()));
    s.tr = Eigen::Map<const VectorXd>(trs.data(), static_cast<Eigen::Index>(trs.size()));
    s.te = j.value("te", 0.0);
    s.inversion = j.value("inversion", true);
    s.m_eq = j.value("m_eq", 1.0);
    s.alternating = j.value("alternating", false);
    s.validate();
    return s;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

// Deterministic pseudo-random excitation train: flips in [10, 60] degrees,
// repetition times jittered in [11, 19] ms with a 250 ms recovery gap after
// every tenth readout. Both the flips and the timings must vary: with a
// constant tr the transient of a long-T1 tissue is nearly proportional (up to
// a complex scale) to that of a much shorter T1, so dictionary matching
// cannot separate them; the jitter plus periodic recovery breaks that
// collinearity and extends the window over which T1 is observed.
inline SequenceSpec default_sequence(int frames, std::uint64_t seed = 0x5eb10c4ULL) {
  SequenceSpec s;
  s.flip = VectorXd(frames);
  s.tr = VectorXd(frames);
  Rng rng(seed, 0);
  const double lo = 10.0 * M_PI / 180.0, hi = 60.0 * M_PI / 180.0;
  for (int l = 0; l < frames; ++l) s.flip[l] = rng.uniform(lo, hi);
  Rng rt(seed, 1);
  for (int l = 0; l < frames; ++l) {
    s.tr[l] = rt.uniform(0.011, 0.019);
    if (l % 10 == 9) s.tr[l] += 0.25;
  }
  s.inversion = true;
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Discrete dynamics
// ---------------------------------------------------------------------------

struct Fingerprint {
  VectorXcd values;
  double norm = 0;
};

// One recursion step shared by value and Jacobian code. State m = (mx,my,mz):
// rotate about x by a, read out mx + i*my, then relax for tr.
inline Fingerprint simulate_bloch(double t1, double t2, const SequenceSpec& seq) {
  if (!(t1 > 0) || !(t2 > 0))
    throw ConfigError("simulate_bloch: relaxation times must be positive");
  seq.validate();
  const int L = seq.frames();
  Fingerprint fp;
  fp.values = VectorXcd(L);
  double mx = 0, my = 0, mz = seq.inversion ? -seq.m_eq : seq.m_eq;
  for (int l = 0; l < L; ++l) {
    const double a = seq.angle_at(l);
    const double ca = std::cos(a), sa = std::sin(a);
    const double ry = my * ca - mz * sa;
    const double rz = my * sa + mz * ca;
    fp.values[l] = Cplx(mx, ry);
    const double e2 = std::exp(-seq.tr[l] / t2);
    const double e1 = std::exp(-seq.tr[l] / t1);
    mx *= e2;
    my = ry * e2;
    mz = seq.m_eq + e1 * (rz - seq.m_eq);
  }
  fp.norm = fp.values.norm();
  return fp;
}

// L x 2 sensitivities (dB/dT1, dB/dT2), forward-mode through the recursion.
// Rotation is linear so tangents rotate with the state; relaxation factors are
// differentiated analytically: d/dT e^{-tr/T} = (tr/T^2) e^{-tr/T}.
inline Eigen::MatrixX2cd bloch_jacobian(double t1, double t2, const SequenceSpec& seq) {
  if (!(t1 > 0) || !(t2 > 0))
    throw ConfigError("bloch_jacobian: relaxation times must be positive");
  seq.validate();
  const int L = seq.frames();
  Eigen::MatrixX2cd J(L, 2);
  double mx = 0, my = 0, mz = seq.inversion ? -seq.m_eq : seq.m_eq;
  // Tangents w.r.t. t1 and t2.
  double dx1 = 0, dy1 = 0, dz1 = 0;
  double dx2 = 0, dy2 = 0, dz2 = 0;
  for (int l = 0; l < L; ++l) {
    const double a = seq.angle_at(l);
    const double ca = std::cos(a), sa = std::sin(a);
    const double ry = my * ca - mz * sa;
    const double rz = my * sa + mz * ca;
    const double ry1 = dy1 * ca - dz1 * sa, rz1 = dy1 * sa + dz1 * ca;
    const double ry2 = dy2 * ca - dz2 * sa, rz2 = dy2 * sa + dz2 * ca;
    J(l, 0) = Cplx(dx1, ry1);
    J(l, 1) = Cplx(dx2, ry2);
    const double e2 = std::exp(-seq.tr[l] / t2);
    const double e1 = std::exp(-seq.tr[l] / t1);
    const double de2 = (seq.tr[l] / (t2 * t2)) * e2;
    const double de1 = (seq.tr[l] / (t1 * t1)) * e1;
    dx1 = dx1 * e2;
    dy1 = ry1 * e2;
    dz1 = rz1 * e1 + de1 * (rz - seq.m_eq);
    dx2 = dx2 * e2 + de2 * mx;
    dy2 = ry2 * e2 + de2 * ry;
    dz2 = rz2 * e1;
    mx *= e2;
    my = ry * e2;
    mz = seq.m_eq + e1 * (rz - seq.m_eq);
  }
  return J;
}

namespace detail {

// Per-voxel L x 3 Jacobian of q -> rho * B(t1, t2) in channel order
// (rho, t1, t2), evaluated with the shared Bloch recursion. b returns B.
inline void voxel_jacobian(double rho, double t1, double t2, const SequenceSpec& seq,
                           MatrixXcd& J, VectorXcd& b) {
  const Fingerprint fp = simulate_bloch(t1, t2, seq);
  const Eigen::MatrixX2cd S = bloch_jacobian(t1, t2, seq);
  b = fp.values;
  J.col(0) = fp.values;
  J.col(1) = rho * S.col(0);
  J.col(2) = rho * S.col(1);
}

}  // namespace detail

// Voxelwise u = rho * B(t1, t2). rho = 0 short-circuits to zero.
inline ImageSeries bloch_map(const ParamMap& q, const SequenceSpec& seq) {
  q.check_shapes();
  seq.validate();
  const int n = q.grid.count();
  ImageSeries u(q.grid, seq.frames());
  parallel_for(n, [&](int i) {
    if (q.rho[i] == 0.0) {
      u.data.col(i).setZero();
      return;
    }
    const Fingerprint fp = simulate_bloch(q.t1[i], q.t2[i], seq);
    u.data.col(i) = q.rho[i] * fp.values;
  });
  return u;
}

// ---------------------------------------------------------------------------
// Closed-form steady-state models
// ---------------------------------------------------------------------------

// FLASH steady state: C sin(a) (1 - E) / (1 - cos(a) E) * exp(-r2star te),
// E = exp(-r1 tr).
inline double ernst_signal(double C, double a, double tr, double te, double r1,
                           double r2star) {
  if (!(tr > 0)) throw ConfigError("ernst_signal: tr must be positive");
  if (te < 0) throw ConfigError("ernst_signal: te must be >= 0");
  const double E = std::exp(-r1 * tr);
  const double denom = 1.0 - std::cos(a) * E;
  if (denom <= 0) throw ConfigError("ernst_signal: degenerate denominator (a=0, r1*tr=0)");
  return C * std::sin(a) * (1.0 - E) / denom * std::exp(-r2star * te);
}

inline double estatics_signal(double u_w, double r2star, double te) {
  if (te < 0) throw ConfigError("estatics_signal: te must be >= 0");
  return u_w * std::exp(-r2star * te);
}

// ---------------------------------------------------------------------------
// Fingerprint dictionary
// ---------------------------------------------------------------------------

struct FingerprintDictionary {
  VectorXd t1_grid;
  VectorXd t2_grid;
  struct Entry {
    double t1, t2;
    int i1, i2;  // grid positions
  };
  std::vector<Entry> entries;  // i1-major, then i2; only pairs with t2 <= t1
  MatrixXcd values;            // L x K
  VectorXd norms;              // K
  MatrixXcd normalized;        // L x K, columns unit norm
  std::uint64_t sequence_hash = 0;

  int size() const { return static_cast<int>(entries.size()); }
  int frames() const { return static_cast<int>(values.rows()); }
};

inline void check_strictly_increasing(const VectorXd& g, const char* name) {
  if (g.size() < 1) throw ConfigError(std::string(name) + ": empty grid");
  for (int i = 0; i < g.size(); ++i)
    if (!(g[i] > 0)) throw ConfigError(std::string(name) + ": grid values must be positive");
  for (int i = 1; i < g.size(); ++i)
    if (!(g[i] > g[i - 1]))
      throw ConfigError(std::string(name) + ": grid must be strictly increasing");
}

inline FingerprintDictionary build_dictionary(const VectorXd& t1_grid, const VectorXd& t2_grid,
                                              const SequenceSpec& seq) {
  check_strictly_increasing(t1_grid, "t1_grid");
  check_strictly_increasing(t2_grid, "t2_grid");
  seq.validate();
  FingerprintDictionary d;
  d.t1_grid = t1_grid;
  d.t2_grid = t2_grid;
  d.sequence_hash = seq.hash();
  for (int i = 0; i < t1_grid.size(); ++i)
    for (int j = 0; j < t2_grid.size(); ++j)
      if (t2_grid[j] <= t1_grid[i])
        d.entries.push_back({t1_grid[i], t2_grid[j], i, j});
  if (d.entries.empty())
    throw ConfigError("build_dictionary: no admissible (t1, t2) pairs (t2 <= t1)");
  const int K = d.size();
  const int L = seq.frames();
  d.values = MatrixXcd(L, K);
  d.norms = VectorXd(K);
  d.normalized = MatrixXcd(L, K);
  parallel_for(K, [&](int k) {
    const Fingerprint fp = simulate_bloch(d.entries[k].t1, d.entries[k].t2, seq);
    d.values.col(k) = fp.values;
    d.norms[k] = fp.norm;
  });
  for (int k = 0; k < K; ++k) {
    if (!(d.norms[k] > 0))
      throw NumericalError("build_dictionary: zero-norm fingerprint (degenerate sequence)");
    d.normalized.col(k) = d.values.col(k) / d.norms[k];
  }
  return d;
}

// Serialized as the raw value matrix plus a JSON header carrying the grids and
// the sequence hash, so a reconstruction can verify dictionary/sequence
// consistency before matching.
inline void save_dictionary(const std::string& path, const FingerprintDictionary& d) {
  std::vector<Cplx> buf;
  buf.reserve(static_cast<std::size_t>(d.size()) * d.frames());
  for (int k = 0; k < d.size(); ++k)
    for (int l = 0; l < d.frames(); ++l) buf.push_back(d.values(l, k));
  save_complex_array(path, buf.data(), {d.size(), d.frames()});
  json j = read_json_file(sidecar_path(path));
  j["kind"] = "fingerprint_dictionary";
  j["t1_grid"] = std::vector<double>(d.t1_grid.data(), d.t1_grid.data() + d.t1_grid.size());
  j["t2_grid"] = std::vector<double>(d.t2_grid.data(), d.t2_grid.data() + d.t2_grid.size());
  j["sequence_hash"] = hex64(d.sequence_hash);
  write_json_file(sidecar_path(path), j);
}

inline FingerprintDictionary load_dictionary(const std::string& path) {
  const json j = read_json_file(sidecar_path(path));
  const LoadedArray a = load_array(path);
  if (!a.is_complex || a.shape.size() != 2)
    throw ConfigError(path + ": expected complex [entries, frames] dictionary");
  FingerprintDictionary d;
  const auto g1 = j.at("t1_grid").get<std::vector<double>>();
  const auto g2 = j.at("t2_grid").get<std::vector<double>>();
  d.t1_grid = Eigen::Map<const VectorXd>(g1.data(), static_cast<Eigen::Index>(g1.size()));
  d.t2_grid = Eigen::Map<const VectorXd>(g2.data(), static_cast<Eigen::Index>(g2.size()));
  d.sequence_hash = std::stoull(j.at("sequence_hash").get<std::string>(), nullptr, 16);
  for (int i = 0; i < d.t1_grid.size(); ++i)
    for (int jj = 0; jj < d.t2_grid.size(); ++jj)
      if (d.t2_grid[jj] <= d.t1_grid[i]) d.entries.push_back({d.t1_grid[i], d.t2_grid[jj], i, jj});
  if (static_cast<int>(d.entries.size()) != a.shape[0])
    throw ConfigError(path + ": entry count does not match grids");
  const int K = a.shape[0], L = a.shape[1];
  d.values = MatrixXcd(L, K);
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < L; ++l)
      d.values(l, k) = a.cplx[static_cast<std::size_t>(k) * L + l];
  d.norms = VectorXd(K);
  d.normalized = MatrixXcd(L, K);
  for (int k = 0; k < K; ++k) {
    d.norms[k] = d.values.col(k).norm();
    if (!(d.norms[k] > 0)) throw ConfigError(path + ": zero-norm dictionary entry");
    d.normalized.col(k) = d.values.col(k) / d.norms[k];
  }
  return d;
}

// Default dictionary grids: log-spaced, spanning the admissible box interior.
inline VectorXd log_spaced(double lo, double hi, int n) {
  if (!(lo > 0) || !(hi > lo) || n < 1) throw ConfigError("log_spaced: bad range");
  VectorXd g(n);
  if (n == 1) {
    g[0] = lo;
    return g;
  }
  const double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < n; ++i) g[i] = std::exp(a + (b - a) * i / (n - 1));
  return g;
}

inline FingerprintDictionary default_dictionary(const SequenceSpec& seq, int n1 = 40,
                                                int n2 = 40) {
  return build_dictionary(log_spaced(0.1, 4.0, n1), log_spaced(0.02, 2.0, n2), seq);
}

}  // namespace qmri
