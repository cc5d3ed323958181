#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace qmri {

using Cplx = std::complex<double>;
using Eigen::ArrayXd;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;

// Thrown for invalid configuration / input files. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when an iteration diverges or produces non-finite values. Exit code 3.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Grid and canonical voxel order
// ---------------------------------------------------------------------------

// Rectangular voxel grid. Canonical linearization is row-major with x fastest:
// index(x, y) = y * nx + x. Every flattened map in the library uses this order.
struct Grid {
  int nx = 0;
  int ny = 0;

  Grid() = default;
  Grid(int nx_, int ny_) : nx(nx_), ny(ny_) {
    if (nx <= 0 || ny <= 0) throw ConfigError("Grid: dimensions must be positive");
  }

  int count() const { return nx * ny; }
  int index(int x, int y) const { return y * nx + x; }
  std::pair<int, int> to_xy(int i) const { return {i % nx, i / nx}; }
  bool operator==(const Grid& o) const { return nx == o.nx && ny == o.ny; }
  bool operator!=(const Grid& o) const { return !(*this == o); }
};

// ---------------------------------------------------------------------------
// Parameter maps and admissible set
// ---------------------------------------------------------------------------

// Voxelwise (rho, t1, t2) in canonical order. Times are in seconds, rho is a
// dimensionless scale.
struct ParamMap {
  Grid grid;
  VectorXd rho;
  VectorXd t1;
  VectorXd t2;

  ParamMap() = default;
  explicit ParamMap(Grid g)
      : grid(g),
        rho(VectorXd::Zero(g.count())),
        t1(VectorXd::Zero(g.count())),
        t2(VectorXd::Zero(g.count())) {}

  void check_shapes() const {
    const int n = grid.count();
    if (rho.size() != n || t1.size() != n || t2.size() != n)
      throw ConfigError("ParamMap: channel size does not match grid");
  }
};

// Box constraints for (rho, t1, t2). Relaxation bounds must be positive.
struct AdmissibleBox {
  double rho_min = 0.0, rho_max = 10.0;
  double t1_min = 0.05, t1_max = 5.0;
  double t2_min = 0.01, t2_max = 3.0;

  void validate() const {
    if (!(rho_min <= rho_max) || !(t1_min <= t1_max) || !(t2_min <= t2_max))
      throw ConfigError("AdmissibleBox: empty box");
    if (t1_min <= 0 || t2_min <= 0)
      throw ConfigError("AdmissibleBox: relaxation times must be positive");
    if (rho_min < 0) throw ConfigError("AdmissibleBox: rho must be non-negative");
  }

  bool contains(double rho, double t1, double t2) const {
    return rho >= rho_min && rho <= rho_max && t1 >= t1_min && t1 <= t1_max &&
           t2 >= t2_min && t2 <= t2_max;
  }

  double t1_mid() const { return 0.5 * (t1_min + t1_max); }
  double t2_mid() const { return 0.5 * (t2_min + t2_max); }
};

inline double clamp(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

// Euclidean projection onto the box, channel by channel.
inline ParamMap project_box(const ParamMap& q, const AdmissibleBox& box) {
  box.validate();
  q.check_shapes();
  ParamMap out = q;
  for (int i = 0; i < q.grid.count(); ++i) {
    out.rho[i] = clamp(q.rho[i], box.rho_min, box.rho_max);
    out.t1[i] = clamp(q.t1[i], box.t1_min, box.t1_max);
    out.t2[i] = clamp(q.t2[i], box.t2_min, box.t2_max);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image series and k-space data
// ---------------------------------------------------------------------------

// Complex image per excitation frame. data is L x N; column i holds the time
// series of voxel i, so data.col(i) is contiguous.
struct ImageSeries {
  Grid grid;
  MatrixXcd data;  // frames x voxels

  ImageSeries() = default;
  ImageSeries(Grid g, int frames) : grid(g), data(MatrixXcd::Zero(frames, g.count())) {}

  int frames() const { return static_cast<int>(data.rows()); }

  double norm() const { return data.norm(); }
};

// Per-frame Cartesian sampling pattern: full rows of k-space. Stored both as a
// byte mask over the full grid and as the sorted list of sampled flat indices.
struct SamplingPattern {
  Grid grid;
  std::vector<std::vector<std::uint8_t>> mask;  // [frame][voxel] in {0,1}
  std::vector<std::vector<int>> sample_idx;     // sorted flat indices per frame
  std::vector<std::vector<int>> rows;           // sampled row numbers per frame

  int frames() const { return static_cast<int>(mask.size()); }

  void rebuild_indices() {
    sample_idx.assign(mask.size(), {});
    for (std::size_t f = 0; f < mask.size(); ++f) {
      if (static_cast<int>(mask[f].size()) != grid.count())
        throw ConfigError("SamplingPattern: mask size mismatch");
      for (int i = 0; i < grid.count(); ++i)
        if (mask[f][i]) sample_idx[f].push_back(i);
    }
  }
};

// Sampled k-space coefficients. coeffs[f] holds one complex value per sampled
// location of frame f, in ascending flat-index order; its length always equals
// the mask popcount of that frame.
struct KSpaceData {
  SamplingPattern pattern;
  std::vector<VectorXcd> coeffs;

  int frames() const { return static_cast<int>(coeffs.size()); }

  void check_shapes() const {
    if (coeffs.size() != pattern.sample_idx.size())
      throw ConfigError("KSpaceData: frame count mismatch");
    for (std::size_t f = 0; f < coeffs.size(); ++f)
      if (coeffs[f].size() != static_cast<Eigen::Index>(pattern.sample_idx[f].size()))
        throw ConfigError("KSpaceData: stored coefficients do not match mask popcount");
  }

  double norm() const {
    double s = 0;
    for (const auto& c : coeffs) s += c.squaredNorm();
    return std::sqrt(s);
  }

  int total_samples() const {
    int n = 0;
    for (const auto& c : coeffs) n += static_cast<int>(c.size());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Deterministic counter-based RNG
// ---------------------------------------------------------------------------

// Stateless mixing of (seed, stream, counter) -> u64. Draw k is a pure
// function of the triple, so parallel consumers that own disjoint counter
// ranges reproduce bit-identically at any thread count.
inline std::uint64_t split_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash3(std::uint64_t seed, std::uint64_t stream, std::uint64_t ctr) {
  std::uint64_t h = split_mix(seed + 0x9e3779b97f4a7c15ULL * (stream + 1));
  h = split_mix(h ^ (ctr + 0x632be59bd9b4e019ULL));
  return split_mix(h + 0x9e3779b97f4a7c15ULL * ctr);
}

inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;  // [0, 1)
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), ctr_(0) {}

  std::uint64_t next_u64() { return hash3(seed_, stream_, ctr_++); }

  double uniform() { return u64_to_unit(next_u64()); }  // [0, 1)

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller pair from two consecutive counters; no cached state.
  std::pair<double, double> normal_pair() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double th = 2.0 * M_PI * u2;
    return {r * std::cos(th), r * std::sin(th)};
  }

  double normal() { return normal_pair().first; }

  // Uniform integer in [0, n) without modulo bias worth caring about here.
  int below(int n) {
    if (n <= 0) throw ConfigError("Rng::below: n must be positive");
    return static_cast<int>(uniform() * n) % n;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // Pure draw at an explicit counter, for order-independent parallel use.
  static std::pair<double, double> normal_pair_at(std::uint64_t seed, std::uint64_t stream,
                                                  std::uint64_t ctr) {
    const double u1 = u64_to_unit(hash3(seed, stream, ctr));
    const double u2 = u64_to_unit(hash3(seed, stream, ctr + 1));
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double th = 2.0 * M_PI * u2;
    return {r * std::cos(th), r * std::sin(th)};
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t ctr_;
};

// ---------------------------------------------------------------------------
// Thread pool-free deterministic parallel loop
// ---------------------------------------------------------------------------

inline std::atomic<int>& thread_override() {
  static std::atomic<int> v{0};
  return v;
}

inline void set_thread_count(int n) { thread_override().store(n); }

inline int thread_count() {
  const int forced = thread_override().load();
  if (forced > 0) return forced;
  if (const char* env = std::getenv("QMRI_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Workers own disjoint contiguous chunks and must
// only write slots they own; with that discipline the result is independent of
// the thread count.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  if (n <= 0) return;
  const int nt = std::min(thread_count(), n);
  if (nt <= 1 || n < 32) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int chunk = (n + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(nt);
  std::vector<std::exception_ptr> errors(nt);
  for (int t = 0; t < nt; ++t) {
    const int lo = t * chunk;
    const int hi = std::min(n, lo + chunk);
    workers.emplace_back([&, lo, hi, t] {
      try {
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

struct RelErrorReport {
  ArrayXd rho;  // per-voxel relative error maps
  ArrayXd t1;
  ArrayXd t2;
  double rho_mean = 0;  // means over the evaluation mask
  double t1_mean = 0;
  double t2_mean = 0;
  int mask_count = 0;
};

// Entrywise |est - ref| / max(|ref|, eps) plus means over mask. An empty mask
// selects every voxel.
inline RelErrorReport rel_error_map(const ParamMap& est, const ParamMap& ref,
                                    const std::vector<std::uint8_t>& mask = {}) {
  est.check_shapes();
  ref.check_shapes();
  if (est.grid != ref.grid) throw ConfigError("rel_error_map: grid mismatch");
  const int n = est.grid.count();
  if (!mask.empty() && static_cast<int>(mask.size()) != n)
    throw ConfigError("rel_error_map: mask size mismatch");
  constexpr double eps = 1e-12;
  RelErrorReport rep;
  rep.rho = ArrayXd::Zero(n);
  rep.t1 = ArrayXd::Zero(n);
  rep.t2 = ArrayXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    rep.rho[i] = std::abs(est.rho[i] - ref.rho[i]) / std::max(std::abs(ref.rho[i]), eps);
    rep.t1[i] = std::abs(est.t1[i] - ref.t1[i]) / std::max(std::abs(ref.t1[i]), eps);
    rep.t2[i] = std::abs(est.t2[i] - ref.t2[i]) / std::max(std::abs(ref.t2[i]), eps);
  }
  double sr = 0, s1 = 0, s2 = 0;
  int m = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    sr += rep.rho[i];
    s1 += rep.t1[i];
    s2 += rep.t2[i];
    ++m;
  }
  rep.mask_count = m;
  if (m > 0) {
    rep.rho_mean = sr / m;
    rep.t1_mean = s1 / m;
    rep.t2_mean = s2 / m;
  }
  return rep;
}

inline bool all_finite(const VectorXd& v) { return v.allFinite(); }
inline bool all_finite(const VectorXcd& v) { return v.allFinite(); }

}  // namespace qmri
