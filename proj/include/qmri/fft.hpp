#pragma once

#include <map>
#include <vector>

#include "qmri/core.hpp"

namespace qmri {
namespace detail {

// Roots exp(-2*pi*i*j/n). Cached per thread; values are a pure function of n,
// so every thread computes identical tables.
inline const std::vector<Cplx>& fft_roots(int n) {
  thread_local std::map<int, std::vector<Cplx>> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    std::vector<Cplx> r(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j)
      r[static_cast<std::size_t>(j)] = std::polar(1.0, -2.0 * M_PI * j / n);
    it = cache.emplace(n, std::move(r)).first;
  }
  return it->second;
}

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 transform, unnormalized. inverse=true conjugates
// the twiddles (still unnormalized).
inline void fft_pow2(Cplx* a, int n, bool inverse) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& roots = fft_roots(n);
  for (int len = 2; len <= n; len <<= 1) {
    const int stride = n / len;
    for (int i = 0; i < n; i += len) {
      for (int j = 0; j < len / 2; ++j) {
        Cplx w = roots[static_cast<std::size_t>(j) * stride];
        if (inverse) w = std::conj(w);
        const Cplx u = a[i + j];
        const Cplx v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
}

// Bluestein chirp e^{-i*pi*m^2/n}; m^2 is reduced mod 2n before the trig call.
inline const std::vector<Cplx>& chirp_table(int n) {
  thread_local std::map<int, std::vector<Cplx>> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    std::vector<Cplx> c(static_cast<std::size_t>(n));
    for (int m = 0; m < n; ++m) {
      const long long m2 = (static_cast<long long>(m) * m) % (2LL * n);
      c[static_cast<std::size_t>(m)] = std::polar(1.0, -M_PI * static_cast<double>(m2) / n);
    }
    it = cache.emplace(n, std::move(c)).first;
  }
  return it->second;
}

inline void fft_bluestein(Cplx* a, int n, bool inverse) {
  const auto& chirp = chirp_table(n);
  int m = 1;
  while (m < 2 * n - 1) m <<= 1;
  std::vector<Cplx> f(static_cast<std::size_t>(m), Cplx(0, 0));
  std::vector<Cplx> g(static_cast<std::size_t>(m), Cplx(0, 0));
  for (int k = 0; k < n; ++k) {
    const Cplx c = inverse ? std::conj(chirp[k]) : chirp[k];
    f[static_cast<std::size_t>(k)] = a[k] * c;
    const Cplx gc = inverse ? chirp[k] : std::conj(chirp[k]);
    g[static_cast<std::size_t>(k)] = gc;
    if (k > 0) g[static_cast<std::size_t>(m - k)] = gc;
  }
  fft_pow2(f.data(), m, false);
  fft_pow2(g.data(), m, false);
  for (int k = 0; k < m; ++k) f[static_cast<std::size_t>(k)] *= g[static_cast<std::size_t>(k)];
  // Unnormalized inverse pow2 transform, then /m.
  fft_pow2(f.data(), m, true);
  for (int k = 0; k < n; ++k) {
    const Cplx c = inverse ? std::conj(chirp[k]) : chirp[k];
    a[k] = f[static_cast<std::size_t>(k)] * c / static_cast<double>(m);
  }
}

inline void fft_any(Cplx* a, int n, bool inverse) {
  if (n == 1) return;
  if (is_pow2(n))
    fft_pow2(a, n, inverse);
  else
    fft_bluestein(a, n, inverse);
}

// Separable 2D transform in canonical layout (x fastest), unnormalized,
// frequencies unshifted.
inline void dft2_inplace(VectorXcd& v, const Grid& g, bool inverse) {
  std::vector<Cplx> buf(static_cast<std::size_t>(std::max(g.nx, g.ny)));
  for (int y = 0; y < g.ny; ++y) {
    Cplx* row = v.data() + static_cast<std::ptrdiff_t>(y) * g.nx;
    fft_any(row, g.nx, inverse);
  }
  for (int x = 0; x < g.nx; ++x) {
    for (int y = 0; y < g.ny; ++y) buf[static_cast<std::size_t>(y)] = v[g.index(x, y)];
    fft_any(buf.data(), g.ny, inverse);
    for (int y = 0; y < g.ny; ++y) v[g.index(x, y)] = buf[static_cast<std::size_t>(y)];
  }
}

}  // namespace detail

// Unitary 2D FFT. Output is stored centered: the DC coefficient sits at
// (nx/2, ny/2), so "row" r of k-space holds vertical frequency r - ny/2.
// Both directions carry 1/sqrt(nx*ny), hence fft2 is an isometry and
// ifft2_unitary(fft2_unitary(u)) == u to rounding.
inline VectorXcd fft2_unitary(const VectorXcd& img, const Grid& g) {
  if (img.size() != g.count()) throw ConfigError("fft2_unitary: size mismatch");
  VectorXcd tmp = img;
  detail::dft2_inplace(tmp, g, false);
  const double s = 1.0 / std::sqrt(static_cast<double>(g.count()));
  VectorXcd out(g.count());
  const int cx = g.nx / 2, cy = g.ny / 2;
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x)
      out[g.index((x + cx) % g.nx, (y + cy) % g.ny)] = tmp[g.index(x, y)] * s;
  return out;
}

inline VectorXcd ifft2_unitary(const VectorXcd& ksp, const Grid& g) {
  if (ksp.size() != g.count()) throw ConfigError("ifft2_unitary: size mismatch");
  VectorXcd tmp(g.count());
  const int cx = g.nx / 2, cy = g.ny / 2;
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x)
      tmp[g.index(x, y)] = ksp[g.index((x + cx) % g.nx, (y + cy) % g.ny)];
  detail::dft2_inplace(tmp, g, true);
  return tmp / std::sqrt(static_cast<double>(g.count()));
}

}  // namespace qmri
