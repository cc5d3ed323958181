#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qmri/core.hpp"

namespace qmri {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw array files are little-endian; big-endian hosts unsupported");

// ---------------------------------------------------------------------------
// Raw arrays: <name> holds packed little-endian scalars, <name>.json describes
// them: {"dtype": "float64"|"float32", "shape": [...], "order": "row-major",
// "complex": bool}. Complex data is interleaved (re, im); "shape" counts
// logical elements, so the payload holds 2x that many scalars.
// ---------------------------------------------------------------------------

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void write_file_bytes(const std::string& path, const void* data, std::size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw ConfigError("write failed: " + path);
}

inline std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw ConfigError("cannot open: " + path);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(size));
  f.read(buf.data(), size);
  if (!f) throw ConfigError("read failed: " + path);
  return buf;
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open: " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
}

inline json array_sidecar(const std::vector<int>& shape, bool is_complex, bool single) {
  json j;
  j["dtype"] = single ? "float32" : "float64";
  j["shape"] = shape;
  j["order"] = "row-major";
  j["complex"] = is_complex;
  return j;
}

inline std::size_t shape_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ConfigError("array shape has non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline void save_real_array(const std::string& path, const double* data,
                            const std::vector<int>& shape, bool single_precision = false) {
  const std::size_t n = shape_count(shape);
  if (single_precision) {
    std::vector<float> tmp(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = static_cast<float>(data[i]);
    write_file_bytes(path, tmp.data(), n * sizeof(float));
  } else {
    write_file_bytes(path, data, n * sizeof(double));
  }
  write_json_file(sidecar_path(path), array_sidecar(shape, false, single_precision));
}

inline void save_complex_array(const std::string& path, const Cplx* data,
                               const std::vector<int>& shape) {
  const std::size_t n = shape_count(shape);
  write_file_bytes(path, data, n * sizeof(Cplx));  // interleaved (re, im) doubles
  write_json_file(sidecar_path(path), array_sidecar(shape, true, false));
}

struct LoadedArray {
  std::vector<int> shape;
  bool is_complex = false;
  std::vector<double> real;  // filled when !is_complex
  std::vector<Cplx> cplx;    // filled when is_complex
};

inline LoadedArray load_array(const std::string& path) {
  const json j = read_json_file(sidecar_path(path));
  LoadedArray out;
  for (const auto& d : j.at("shape")) out.shape.push_back(d.get<int>());
  out.is_complex = j.at("complex").get<bool>();
  const std::string dtype = j.at("dtype").get<std::string>();
  if (j.value("order", "row-major") != std::string("row-major"))
    throw ConfigError(path + ": only row-major arrays supported");
  if (dtype != "float64" && dtype != "float32")
    throw ConfigError(path + ": unsupported dtype " + dtype);
  const bool single = dtype == "float32";
  const std::size_t n = shape_count(out.shape);
  const std::size_t scalars = n * (out.is_complex ? 2 : 1);
  const auto bytes = read_file_bytes(path);
  const std::size_t want = scalars * (single ? sizeof(float) : sizeof(double));
  if (bytes.size() != want)
    throw ConfigError(path + ": payload size does not match sidecar shape");
  std::vector<double> scratch(scalars);
  if (single) {
    const float* p = reinterpret_cast<const float*>(bytes.data());
    for (std::size_t i = 0; i < scalars; ++i) scratch[i] = static_cast<double>(p[i]);
  } else {
    const double* p = reinterpret_cast<const double*>(bytes.data());
    for (std::size_t i = 0; i < scalars; ++i) scratch[i] = p[i];
  }
  if (out.is_complex) {
    out.cplx.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.cplx[i] = Cplx(scratch[2 * i], scratch[2 * i + 1]);
  } else {
    out.real = std::move(scratch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Typed containers on top of raw arrays
// ---------------------------------------------------------------------------

// ParamMap <-> one [3, ny, nx] array, channel order (rho, t1, t2).
inline void save_param_map(const std::string& path, const ParamMap& q) {
  q.check_shapes();
  const int n = q.grid.count();
  std::vector<double> buf(3 * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) buf[i] = q.rho[i];
  for (int i = 0; i < n; ++i) buf[n + i] = q.t1[i];
  for (int i = 0; i < n; ++i) buf[2 * n + i] = q.t2[i];
  save_real_array(path, buf.data(), {3, q.grid.ny, q.grid.nx});
}

inline ParamMap load_param_map(const std::string& path) {
  const LoadedArray a = load_array(path);
  if (a.is_complex || a.shape.size() != 3 || a.shape[0] != 3)
    throw ConfigError(path + ": expected real [3, ny, nx] parameter array");
  ParamMap q(Grid(a.shape[2], a.shape[1]));
  const int n = q.grid.count();
  for (int i = 0; i < n; ++i) q.rho[i] = a.real[i];
  for (int i = 0; i < n; ++i) q.t1[i] = a.real[n + i];
  for (int i = 0; i < n; ++i) q.t2[i] = a.real[2 * n + i];
  return q;
}

// ImageSeries <-> complex [L, ny, nx] array.
inline void save_image_series(const std::string& path, const ImageSeries& u) {
  const int L = u.frames();
  const int n = u.grid.count();
  std::vector<Cplx> buf(static_cast<std::size_t>(L) * n);
  for (int f = 0; f < L; ++f)
    for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(f) * n + i] = u.data(f, i);
  save_complex_array(path, buf.data(), {L, u.grid.ny, u.grid.nx});
}

inline ImageSeries load_image_series(const std::string& path) {
  const LoadedArray a = load_array(path);
  if (!a.is_complex || a.shape.size() != 3)
    throw ConfigError(path + ": expected complex [frames, ny, nx] array");
  ImageSeries u(Grid(a.shape[2], a.shape[1]), a.shape[0]);
  const int n = u.grid.count();
  for (int f = 0; f < a.shape[0]; ++f)
    for (int i = 0; i < n; ++i) u.data(f, i) = a.cplx[static_cast<std::size_t>(f) * n + i];
  return u;
}

// ---------------------------------------------------------------------------
// Sampling masks: packed bitmap (LSB-first within each byte, canonical voxel
// order, one ceil(N/8)-byte block per frame) plus a JSON header.
// ---------------------------------------------------------------------------

inline void save_sampling_pattern(const std::string& path, const SamplingPattern& p) {
  const int n = p.grid.count();
  const int stride = (n + 7) / 8;
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(stride) * p.frames(), 0);
  for (int f = 0; f < p.frames(); ++f)
    for (int i = 0; i < n; ++i)
      if (p.mask[f][i]) bits[static_cast<std::size_t>(f) * stride + i / 8] |= (1u << (i % 8));
  write_file_bytes(path, bits.data(), bits.size());
  json j;
  j["nx"] = p.grid.nx;
  j["ny"] = p.grid.ny;
  j["frames"] = p.frames();
  j["packing"] = "lsb-first";
  write_json_file(sidecar_path(path), j);
}

inline SamplingPattern load_sampling_pattern(const std::string& path) {
  const json j = read_json_file(sidecar_path(path));
  SamplingPattern p;
  p.grid = Grid(j.at("nx").get<int>(), j.at("ny").get<int>());
  const int frames = j.at("frames").get<int>();
  const int n = p.grid.count();
  const int stride = (n + 7) / 8;
  const auto bytes = read_file_bytes(path);
  if (bytes.size() != static_cast<std::size_t>(stride) * frames)
    throw ConfigError(path + ": bitmap size does not match header");
  p.mask.assign(frames, std::vector<std::uint8_t>(n, 0));
  for (int f = 0; f < frames; ++f)
    for (int i = 0; i < n; ++i)
      p.mask[f][i] =
          (static_cast<std::uint8_t>(bytes[static_cast<std::size_t>(f) * stride + i / 8]) >>
           (i % 8)) &
          1u;
  p.rebuild_indices();
  // Row lists are reconstructed from the mask.
  p.rows.assign(frames, {});
  for (int f = 0; f < frames; ++f)
    for (int y = 0; y < p.grid.ny; ++y)
      if (p.mask[f][p.grid.index(0, y)]) p.rows[f].push_back(y);
  return p;
}

// KSpaceData: packed complex payload (frames concatenated, ascending flat
// index within each frame) + mask bitmap next to it.
inline void save_kspace(const std::string& path, const KSpaceData& y) {
  y.check_shapes();
  std::vector<Cplx> buf;
  buf.reserve(static_cast<std::size_t>(y.total_samples()));
  for (const auto& c : y.coeffs)
    for (Eigen::Index k = 0; k < c.size(); ++k) buf.push_back(c[k]);
  save_complex_array(path, buf.data(), {static_cast<int>(buf.size())});
  save_sampling_pattern(path + ".mask", y.pattern);
  json j = read_json_file(sidecar_path(path));
  j["kind"] = "kspace";
  j["mask_file"] = std::filesystem::path(path + ".mask").filename().string();
  std::vector<int> counts;
  for (const auto& c : y.coeffs) counts.push_back(static_cast<int>(c.size()));
  j["counts"] = counts;
  write_json_file(sidecar_path(path), j);
}

inline KSpaceData load_kspace(const std::string& path) {
  const LoadedArray a = load_array(path);
  if (!a.is_complex) throw ConfigError(path + ": k-space payload must be complex");
  KSpaceData y;
  y.pattern = load_sampling_pattern(path + ".mask");
  y.coeffs.resize(y.pattern.frames());
  std::size_t off = 0;
  for (int f = 0; f < y.pattern.frames(); ++f) {
    const std::size_t m = y.pattern.sample_idx[f].size();
    if (off + m > a.cplx.size()) throw ConfigError(path + ": payload shorter than mask popcount");
    y.coeffs[f] = VectorXcd(m);
    for (std::size_t k = 0; k < m; ++k) y.coeffs[f][k] = a.cplx[off + k];
    off += m;
  }
  if (off != a.cplx.size()) throw ConfigError(path + ": payload longer than mask popcount");
  y.check_shapes();
  return y;
}

// ---------------------------------------------------------------------------
// PGM export (binary P5, maxval 255). Values are windowed to [lo, hi] and
// rounded half-up.
// ---------------------------------------------------------------------------

inline void export_pgm(const std::string& path, const ArrayXd& values, const Grid& grid,
                       double lo, double hi) {
  if (values.size() != grid.count()) throw ConfigError("export_pgm: size mismatch");
  if (hi < lo) throw ConfigError("export_pgm: window must satisfy hi >= lo");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << "P5\n" << grid.nx << " " << grid.ny << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(grid.nx));
  const bool degenerate = hi == lo;  // documented: uniform mid-gray
  for (int y = 0; y < grid.ny; ++y) {
    for (int x = 0; x < grid.nx; ++x) {
      double t = degenerate ? 0.5 : (values[grid.index(x, y)] - lo) / (hi - lo);
      t = clamp(t, 0.0, 1.0);
      row[static_cast<std::size_t>(x)] =
          static_cast<std::uint8_t>(std::floor(t * 255.0 + 0.5));  // round half up
    }
    f.write(reinterpret_cast<const char*>(row.data()), grid.nx);
  }
  if (!f) throw ConfigError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Misc: FNV-1a for config hashing, fixed-format float printing for artifacts.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// Shortest round-trip decimal. Used everywhere a double lands in a text
// artifact so that reruns are byte-identical.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    for (int prec = 1; prec <= 16; ++prec) {
      char b2[32];
      std::snprintf(b2, sizeof(b2), "%.*g", prec, v);
      std::sscanf(b2, "%lf", &back);
      if (back == v) return std::string(b2);
    }
  }
  return std::string(buf);
}

}  // namespace qmri
