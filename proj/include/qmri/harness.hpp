#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "qmri/aws.hpp"
#include "qmri/dictlearn.hpp"
#include "qmri/integrated.hpp"
#include "qmri/io.hpp"
#include "qmri/mrf.hpp"
#include "qmri/surrogate.hpp"
#include "qmri/varreg.hpp"

namespace qmri {

// ---------------------------------------------------------------------------
// Piecewise-constant ellipse phantom
// ---------------------------------------------------------------------------

struct TissueSpec {
  double rho = 0, t1 = 1.0, t2 = 0.1;
};

struct EllipseSpec {
  double cx = 0, cy = 0, rx = 1, ry = 1, angle = 0;
  int label = 1;
};

// Ellipses are painted in listed order; the last ellipse containing a voxel
// wins. Label 0 is the background tissue and needs no ellipse.
struct PhantomSpec {
  int nx = 64, ny = 64;
  std::vector<TissueSpec> tissues = {TissueSpec{}};  // index == label
  std::vector<EllipseSpec> ellipses;

  void validate(const AdmissibleBox& box = AdmissibleBox{}) const {
    if (nx <= 0 || ny <= 0) throw ConfigError("PhantomSpec: grid must be positive");
    if (tissues.empty()) throw ConfigError("PhantomSpec: need at least the background tissue");
    box.validate();
    for (const TissueSpec& t : tissues) {
      if (t.rho < box.rho_min || t.rho > box.rho_max || t.t1 < box.t1_min ||
          t.t1 > box.t1_max || t.t2 < box.t2_min || t.t2 > box.t2_max)
        throw ConfigError("PhantomSpec: tissue values outside the admissible box");
    }
    for (const EllipseSpec& e : ellipses) {
      if (e.label < 1 || e.label >= static_cast<int>(tissues.size()))
        throw ConfigError("PhantomSpec: ellipse label has no tissue entry");
      if (!(e.rx > 0) || !(e.ry > 0)) throw ConfigError("PhantomSpec: ellipse radii must be > 0");
    }
  }
};

struct Phantom {
  ParamMap q;
  std::vector<int> labels;  // per voxel, index into tissues
};

// Membership test at integer voxel coordinates (x, y).
inline bool ellipse_contains(const EllipseSpec& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double u = (dx * c + dy * s) / e.rx;
  const double v = (-dx * s + dy * c) / e.ry;
  return u * u + v * v <= 1.0;
}

inline Phantom make_phantom(const PhantomSpec& spec, const AdmissibleBox& box = AdmissibleBox{}) {
  spec.validate(box);
  const Grid g(spec.nx, spec.ny);
  Phantom ph;
  ph.q = ParamMap(g);
  ph.labels.assign(static_cast<std::size_t>(g.count()), 0);
  for (int y = 0; y < g.ny; ++y)
    for (int x = 0; x < g.nx; ++x) {
      int label = 0;
      for (const EllipseSpec& e : spec.ellipses)
        if (ellipse_contains(e, x, y)) label = e.label;
      const int i = g.index(x, y);
      ph.labels[static_cast<std::size_t>(i)] = label;
      const TissueSpec& t = spec.tissues[static_cast<std::size_t>(label)];
      ph.q.rho[i] = t.rho;
      ph.q.t1[i] = t.t1;
      ph.q.t2[i] = t.t2;
    }
  return ph;
}

// Desk-scale default: head outline, cortex ring, deep tissue, a ventricle,
// and two small lesions. Values are artifact choices inside the box.
inline PhantomSpec default_phantom_spec() {
  PhantomSpec s;
  s.nx = 64;
  s.ny = 64;
  s.tissues = {
      TissueSpec{0.0, 1.0, 0.1},    // 0: background (empty)
      TissueSpec{1.0, 2.2, 0.8},    // 1: fluid-like
      TissueSpec{0.85, 1.35, 0.11},  // 2: gray-like
      TissueSpec{0.75, 0.8, 0.07},  // 3: white-like
      TissueSpec{0.9, 1.8, 0.25},   // 4: lesion
      TissueSpec{0.95, 0.6, 0.15},  // 5: lesion
  };
  s.ellipses = {
      EllipseSpec{31.5, 31.5, 27.0, 30.0, 0.0, 1},
      EllipseSpec{31.5, 31.5, 23.0, 26.0, 0.0, 2},
      EllipseSpec{31.5, 33.0, 17.0, 20.0, 0.0, 3},
      EllipseSpec{31.5, 29.0, 4.5, 7.0, 0.0, 1},
      EllipseSpec{22.0, 22.0, 3.5, 5.0, 0.5, 4},
      EllipseSpec{41.0, 40.0, 4.0, 2.5, -0.4, 5},
  };
  return s;
}

// ---------------------------------------------------------------------------
// JSON forms (strict: unknown keys are configuration errors)
// ---------------------------------------------------------------------------

namespace detail {

inline void expect_keys(const json& j, const std::vector<std::string>& allowed,
                        const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items())
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + key + "'");
  }
}

}  // namespace detail

inline json phantom_to_json(const PhantomSpec& s) {
  json j;
  j["nx"] = s.nx;
  j["ny"] = s.ny;
  j["tissues"] = json::array();
  for (const TissueSpec& t : s.tissues)
    j["tissues"].push_back({{"rho", t.rho}, {"t1", t.t1}, {"t2", t.t2}});
  j["ellipses"] = json::array();
  for (const EllipseSpec& e : s.ellipses)
    j["ellipses"].push_back({{"cx", e.cx},
                             {"cy", e.cy},
                             {"rx", e.rx},
                             {"ry", e.ry},
                             {"angle", e.angle},
                             {"label", e.label}});
  return j;
}

inline PhantomSpec phantom_from_json(const json& j) {
  detail::expect_keys(j, {"nx", "ny", "tissues", "ellipses"}, "phantom");
  PhantomSpec s;
  s.nx = detail::get_or(j, "nx", 64);
  s.ny = detail::get_or(j, "ny", 64);
  if (j.contains("tissues")) {
    s.tissues.clear();
    for (const json& t : j.at("tissues")) {
      detail::expect_keys(t, {"rho", "t1", "t2"}, "phantom.tissues");
      s.tissues.push_back(TissueSpec{detail::get_or(t, "rho", 0.0),
                                     detail::get_or(t, "t1", 1.0),
                                     detail::get_or(t, "t2", 0.1)});
    }
  }
  if (j.contains("ellipses")) {
    for (const json& e : j.at("ellipses")) {
      detail::expect_keys(e, {"cx", "cy", "rx", "ry", "angle", "label"}, "phantom.ellipses");
      s.ellipses.push_back(EllipseSpec{
          detail::get_or(e, "cx", 0.0), detail::get_or(e, "cy", 0.0),
          detail::get_or(e, "rx", 1.0), detail::get_or(e, "ry", 1.0),
          detail::get_or(e, "angle", 0.0), detail::get_or(e, "label", 1)});
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  PhantomSpec phantom = default_phantom_spec();
  std::string phantom_file;  // optional raw parameter-map override
  int frames = 40;
  int factor = 8;
  double sigma = 0.02;  // noise level: artifact choice, exposed here
  std::uint64_t seed = 1;
  int dict_n1 = 40, dict_n2 = 40;
  std::string method = "mrf";
  json method_params = json::object();

  void validate() const {
    if (frames < 1) throw ConfigError("ExperimentConfig: frames must be >= 1");
    if (factor < 1) throw ConfigError("ExperimentConfig: factor must be >= 1");
    if (!(sigma >= 0)) throw ConfigError("ExperimentConfig: sigma must be >= 0");
    if (dict_n1 < 1 || dict_n2 < 1) throw ConfigError("ExperimentConfig: dictionary grid");
    static const std::vector<std::string> methods = {"mrf",      "blip", "lm", "twostep",
                                                     "bcs-qmri", "bcs",  "nn"};
    if (std::find(methods.begin(), methods.end(), method) == methods.end())
      throw ConfigError("ExperimentConfig: unknown method '" + method + "'");
    if (!method_params.is_object()) throw ConfigError("ExperimentConfig: method_params");
    if (phantom_file.empty()) phantom.validate();
  }

  // Canonical form: every field explicit, so semantically equal configs hash
  // equally regardless of which keys were spelled out.
  json to_json() const {
    json j;
    j["phantom"] = phantom_to_json(phantom);
    j["phantom_file"] = phantom_file;
    j["frames"] = frames;
    j["factor"] = factor;
    j["sigma"] = sigma;
    j["seed"] = seed;
    j["dict_n1"] = dict_n1;
    j["dict_n2"] = dict_n2;
    j["method"] = method;
    j["method_params"] = method_params;
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    detail::expect_keys(j,
                        {"phantom", "phantom_file", "frames", "factor", "sigma", "seed",
                         "dict_n1", "dict_n2", "method", "method_params"},
                        "config");
    ExperimentConfig c;
    if (j.contains("phantom")) c.phantom = phantom_from_json(j.at("phantom"));
    c.phantom_file = detail::get_or<std::string>(j, "phantom_file", "");
    c.frames = detail::get_or(j, "frames", c.frames);
    c.factor = detail::get_or(j, "factor", c.factor);
    c.sigma = detail::get_or(j, "sigma", c.sigma);
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
    c.dict_n1 = detail::get_or(j, "dict_n1", c.dict_n1);
    c.dict_n2 = detail::get_or(j, "dict_n2", c.dict_n2);
    c.method = detail::get_or<std::string>(j, "method", c.method);
    if (j.contains("method_params")) c.method_params = j.at("method_params");
    return c;
  }

  std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Experiment pipeline
// ---------------------------------------------------------------------------

struct ExperimentResult {
  std::uint64_t config_hash = 0;
  ParamMap truth;
  std::vector<int> labels;             // empty when the phantom came from a file
  std::vector<std::uint8_t> foreground;
  ParamMap est;                        // map methods
  RelErrorReport err;                  // map methods, over the foreground
  VectorXcd image;                     // single-frame method ("bcs")
  VectorXcd image_truth;
  double psnr = 0;                     // single-frame method
  std::vector<double> trace;           // objective / residual history
};

namespace detail {

inline double image_psnr(const VectorXcd& est, const VectorXcd& ref) {
  const double peak = ref.cwiseAbs().maxCoeff();
  const double mse = (est - ref).squaredNorm() / static_cast<double>(ref.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

// The experiment knows the noise level it injected, so the discrepancy stop
// defaults to that instead of the blind k-space estimate (which picks up
// signal on small grids and stops the iteration too early).
inline LMConfig lm_config_from(const json& p, double experiment_sigma) {
  expect_keys(p, {"max_iters", "lambda0", "decay", "tau", "sigma"}, "method_params(lm)");
  LMConfig c;
  c.max_iters = get_or(p, "max_iters", c.max_iters);
  c.lambda0 = get_or(p, "lambda0", c.lambda0);
  c.decay = get_or(p, "decay", c.decay);
  c.tau = get_or(p, "tau", c.tau);
  c.sigma = get_or(p, "sigma", experiment_sigma);
  return c;
}

}  // namespace detail

// Full pipeline: phantom -> fingerprint images -> sampled data + noise ->
// method -> foreground error metrics. Artifact writing is separate.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.config_hash = cfg.hash();

  if (cfg.phantom_file.empty()) {
    Phantom ph = make_phantom(cfg.phantom);
    res.truth = std::move(ph.q);
    res.labels = std::move(ph.labels);
    res.foreground.resize(res.labels.size());
    for (std::size_t i = 0; i < res.labels.size(); ++i)
      res.foreground[i] = res.labels[i] > 0 ? 1 : 0;
  } else {
    res.truth = load_param_map(cfg.phantom_file);
    res.foreground.resize(static_cast<std::size_t>(res.truth.grid.count()));
    for (int i = 0; i < res.truth.grid.count(); ++i)
      res.foreground[static_cast<std::size_t>(i)] = res.truth.rho[i] > 0 ? 1 : 0;
  }
  const Grid g = res.truth.grid;
  const SequenceSpec seq = default_sequence(cfg.frames);
  const SamplingPattern pattern = make_cartesian_masks(g, cfg.factor, cfg.frames, cfg.seed);
  KSpaceData y = apply_forward(bloch_map(res.truth, seq), pattern);
  if (cfg.sigma > 0) add_noise(y, cfg.sigma, cfg.seed);
  const AdmissibleBox box;
  const json& p = cfg.method_params;

  if (cfg.method == "mrf") {
    detail::expect_keys(p, {}, "method_params(mrf)");
    res.est = mrf_reconstruct(y, default_dictionary(seq, cfg.dict_n1, cfg.dict_n2));
  } else if (cfg.method == "blip") {
    detail::expect_keys(p, {"steps", "mu"}, "method_params(blip)");
    const BlipResult r =
        blip_reconstruct(y, default_dictionary(seq, cfg.dict_n1, cfg.dict_n2),
                         detail::get_or(p, "steps", 60), detail::get_or(p, "mu", 1.0));
    res.est = r.map;
    res.trace = r.residual;
  } else if (cfg.method == "lm") {
    LMTrace tr;
    res.est = lm_from_mrf(y, seq, default_dictionary(seq, cfg.dict_n1, cfg.dict_n2), box,
                          detail::lm_config_from(p, cfg.sigma), &tr);
    res.trace = tr.residual;
  } else if (cfg.method == "twostep") {
    detail::expect_keys(p, {"alpha", "tv_iters", "gn_steps"}, "method_params(twostep)");
    res.est = two_step_reconstruct(y, seq, default_dictionary(seq, cfg.dict_n1, cfg.dict_n2),
                                   WeightField::uniform(g, detail::get_or(p, "alpha", 0.05)),
                                   box, detail::get_or(p, "tv_iters", 300),
                                   detail::get_or(p, "gn_steps", 15));
  } else if (cfg.method == "bcs-qmri") {
    detail::expect_keys(p, {"patch", "mu", "sparsity", "s", "sweeps"},
                        "method_params(bcs-qmri)");
    BCSQmriConfig bc;
    bc.patch = detail::get_or(p, "patch", bc.patch);
    bc.mu = detail::get_or(p, "mu", bc.mu);
    bc.sparsity = detail::get_or(p, "sparsity", bc.sparsity);
    bc.s = detail::get_or(p, "s", bc.s);
    bc.sweeps = detail::get_or(p, "sweeps", bc.sweeps);
    BCSQmriState st = bcs_qmri_reconstruct(y, seq, box, bc);
    res.est = std::move(st.q);
    res.trace = std::move(st.objective);
  } else if (cfg.method == "bcs") {
    // Single-frame image reconstruction; maps are out of scope for it.
    detail::expect_keys(p, {"frame", "patch", "mu", "sparsity", "s", "sweeps"},
                        "method_params(bcs)");
    const int frame = detail::get_or(p, "frame", 0);
    if (frame < 0 || frame >= y.frames())
      throw ConfigError("method_params(bcs): frame out of range");
    BCSConfig bc;
    bc.patch = detail::get_or(p, "patch", bc.patch);
    bc.mu = detail::get_or(p, "mu", bc.mu);
    bc.sparsity = detail::get_or(p, "sparsity", bc.sparsity);
    bc.s = detail::get_or(p, "s", bc.s);
    bc.sweeps = detail::get_or(p, "sweeps", bc.sweeps);
    BCSState st = bcs_reconstruct(FidelityOp::fourier_frame(y, frame), bc);
    res.image = std::move(st.u);
    res.image_truth = bloch_map(res.truth, seq).data.row(frame).transpose();
    res.psnr = detail::image_psnr(res.image, res.image_truth);
    res.trace = std::move(st.objective);
    return res;
  } else {  // "nn"
    detail::expect_keys(p, {"net", "alpha", "max_iters", "lambda0", "decay", "epochs",
                            "train_seed"},
                        "method_params(nn)");
    const FingerprintDictionary dict = default_dictionary(seq, cfg.dict_n1, cfg.dict_n2);
    SurrogateNet net;
    if (p.contains("net")) {
      net = load_surrogate(p.at("net").get<std::string>());
      if (net.frames() != cfg.frames)
        throw ConfigError("method_params(nn): network frame count mismatch");
    } else {
      TrainConfig tc;
      tc.epochs = detail::get_or(p, "epochs", tc.epochs);
      tc.seed = detail::get_or<std::uint64_t>(p, "train_seed", 1);
      net = train_surrogate(make_training_set(dict), tc).net;
    }
    const ParamMap q0 = mrf_reconstruct(y, dict);
    res.est = nn_reconstruct(y, net, q0, box, detail::get_or(p, "alpha", 0.0),
                             detail::get_or(p, "max_iters", 25),
                             detail::get_or(p, "lambda0", -1.0),
                             detail::get_or(p, "decay", 0.7));
  }
  res.err = rel_error_map(res.est, res.truth, res.foreground);
  return res;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

namespace detail {

// Every artifact carries the config hash: arrays in their JSON sidecar,
// text artifacts in a leading comment.
inline void tag_sidecar(const std::string& path, std::uint64_t hash) {
  json j = read_json_file(sidecar_path(path));
  j["cfg"] = hex64(hash);
  write_json_file(sidecar_path(path), j);
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw ConfigError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace detail

inline std::string metrics_csv(const ExperimentResult& res, const std::string& method) {
  std::string out = "# cfg " + hex64(res.config_hash) + "\nmetric,value\n";
  if (method == "bcs") {
    out += "psnr," + fmt_double(res.psnr) + "\n";
  } else {
    out += "rho_mean_rel_error," + fmt_double(res.err.rho_mean) + "\n";
    out += "t1_mean_rel_error," + fmt_double(res.err.t1_mean) + "\n";
    out += "t2_mean_rel_error," + fmt_double(res.err.t2_mean) + "\n";
  }
  return out;
}

inline std::string trace_csv(const std::vector<double>& trace, std::uint64_t hash) {
  std::string out = "# cfg " + hex64(hash) + "\niter,value\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    out += std::to_string(i) + "," + fmt_double(trace[i]) + "\n";
  return out;
}

// P5 with the config hash in a comment line; same windowing and round-half-up
// quantization as the plain exporter.
inline void write_pgm_tagged(const std::string& path, const ArrayXd& values, const Grid& grid,
                             double lo, double hi, std::uint64_t hash) {
  if (values.size() != grid.count()) throw ConfigError("write_pgm_tagged: size mismatch");
  if (hi < lo) throw ConfigError("write_pgm_tagged: window must satisfy hi >= lo");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << "P5\n# cfg " << hex64(hash) << "\n" << grid.nx << " " << grid.ny << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(grid.nx));
  const bool degenerate = hi == lo;
  for (int y = 0; y < grid.ny; ++y) {
    for (int x = 0; x < grid.nx; ++x) {
      double t = degenerate ? 0.5 : (values[grid.index(x, y)] - lo) / (hi - lo);
      t = clamp(t, 0.0, 1.0);
      row[static_cast<std::size_t>(x)] =
          static_cast<std::uint8_t>(std::floor(t * 255.0 + 0.5));
    }
    f.write(reinterpret_cast<const char*>(row.data()), grid.nx);
  }
  if (!f) throw ConfigError("write failed: " + path);
}

// Writes the full artifact set and the manifest binding it to the config.
inline void write_experiment(const ExperimentResult& res, const ExperimentConfig& cfg,
                             const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::uint64_t h = res.config_hash;
  json manifest;
  manifest["config"] = cfg.to_json();
  manifest["hash"] = hex64(h);
  json artifacts = json::array();
  const auto add = [&](const std::string& name) { artifacts.push_back(name); };

  const auto put_map = [&](const std::string& name, const ParamMap& q) {
    save_param_map(dir + "/" + name, q);
    detail::tag_sidecar(dir + "/" + name, h);
    add(name);
  };
  put_map("truth.arr", res.truth);
  if (cfg.method == "bcs") {
    save_complex_array(dir + "/u.arr", res.image.data(),
                       {res.truth.grid.ny, res.truth.grid.nx});
    detail::tag_sidecar(dir + "/u.arr", h);
    add("u.arr");
    save_complex_array(dir + "/truth_frame.arr", res.image_truth.data(),
                       {res.truth.grid.ny, res.truth.grid.nx});
    detail::tag_sidecar(dir + "/truth_frame.arr", h);
    add("truth_frame.arr");
    const ArrayXd mag = res.image.cwiseAbs().array();
    write_pgm_tagged(dir + "/u_abs.pgm", mag, res.truth.grid, 0.0, mag.maxCoeff(), h);
    add("u_abs.pgm");
  } else {
    put_map("est.arr", res.est);
    ParamMap errmap(res.truth.grid);
    errmap.rho = res.err.rho.matrix();
    errmap.t1 = res.err.t1.matrix();
    errmap.t2 = res.err.t2.matrix();
    put_map("err.arr", errmap);
    const struct {
      const char* name;
      const VectorXd* truth;
      const VectorXd* est;
    } channels[] = {{"rho", &res.truth.rho, &res.est.rho},
                    {"t1", &res.truth.t1, &res.est.t1},
                    {"t2", &res.truth.t2, &res.est.t2}};
    for (const auto& ch : channels) {
      const double hi = ch.truth->maxCoeff();
      write_pgm_tagged(dir + "/truth_" + ch.name + ".pgm", ch.truth->array(), res.truth.grid,
                       0.0, hi, h);
      add(std::string("truth_") + ch.name + ".pgm");
      write_pgm_tagged(dir + "/est_" + ch.name + ".pgm", ch.est->array(), res.truth.grid, 0.0,
                       hi, h);
      add(std::string("est_") + ch.name + ".pgm");
    }
  }
  if (!res.labels.empty()) {
    std::vector<double> lab(res.labels.begin(), res.labels.end());
    save_real_array(dir + "/labels.arr", lab.data(), {res.truth.grid.ny, res.truth.grid.nx});
    detail::tag_sidecar(dir + "/labels.arr", h);
    add("labels.arr");
  }
  detail::write_text_file(dir + "/metrics.csv", metrics_csv(res, cfg.method));
  add("metrics.csv");
  if (!res.trace.empty()) {
    detail::write_text_file(dir + "/trace.csv", trace_csv(res.trace, h));
    add("trace.csv");
  }
  manifest["artifacts"] = artifacts;
  write_json_file(dir + "/manifest.json", manifest);
}

inline ExperimentResult run_and_write(const ExperimentConfig& cfg, const std::string& dir) {
  ExperimentResult res = run_experiment(cfg);
  write_experiment(res, cfg, dir);
  return res;
}

// Phantom generation alone: the ground-truth maps and labels, no data.
inline void write_phantom(const ExperimentConfig& cfg, const std::string& dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::uint64_t h = cfg.hash();
  Phantom ph = cfg.phantom_file.empty() ? make_phantom(cfg.phantom) : Phantom{};
  if (!cfg.phantom_file.empty()) ph.q = load_param_map(cfg.phantom_file);
  json artifacts = json::array();
  save_param_map(dir + "/truth.arr", ph.q);
  detail::tag_sidecar(dir + "/truth.arr", h);
  artifacts.push_back("truth.arr");
  if (!ph.labels.empty()) {
    std::vector<double> lab(ph.labels.begin(), ph.labels.end());
    save_real_array(dir + "/labels.arr", lab.data(), {ph.q.grid.ny, ph.q.grid.nx});
    detail::tag_sidecar(dir + "/labels.arr", h);
    artifacts.push_back("labels.arr");
  }
  const struct {
    const char* name;
    const VectorXd* v;
  } chans[] = {{"rho", &ph.q.rho}, {"t1", &ph.q.t1}, {"t2", &ph.q.t2}};
  for (const auto& ch : chans) {
    write_pgm_tagged(dir + "/truth_" + ch.name + ".pgm", ch.v->array(), ph.q.grid, 0.0,
                     ch.v->maxCoeff(), h);
    artifacts.push_back(std::string("truth_") + ch.name + ".pgm");
  }
  json manifest;
  manifest["config"] = cfg.to_json();
  manifest["hash"] = hex64(h);
  manifest["artifacts"] = artifacts;
  write_json_file(dir + "/manifest.json", manifest);
}

// Phantom plus simulated sampled data, no reconstruction.
inline void write_simulation(const ExperimentConfig& cfg, const std::string& dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::uint64_t h = cfg.hash();
  ParamMap truth;
  std::vector<int> labels;
  if (cfg.phantom_file.empty()) {
    Phantom ph = make_phantom(cfg.phantom);
    truth = std::move(ph.q);
    labels = std::move(ph.labels);
  } else {
    truth = load_param_map(cfg.phantom_file);
  }
  const SequenceSpec seq = default_sequence(cfg.frames);
  const SamplingPattern pattern =
      make_cartesian_masks(truth.grid, cfg.factor, cfg.frames, cfg.seed);
  KSpaceData y = apply_forward(bloch_map(truth, seq), pattern);
  if (cfg.sigma > 0) add_noise(y, cfg.sigma, cfg.seed);
  json artifacts = json::array();
  save_param_map(dir + "/truth.arr", truth);
  detail::tag_sidecar(dir + "/truth.arr", h);
  artifacts.push_back("truth.arr");
  if (!labels.empty()) {
    std::vector<double> lab(labels.begin(), labels.end());
    save_real_array(dir + "/labels.arr", lab.data(), {truth.grid.ny, truth.grid.nx});
    detail::tag_sidecar(dir + "/labels.arr", h);
    artifacts.push_back("labels.arr");
  }
  save_kspace(dir + "/kspace.arr", y);
  detail::tag_sidecar(dir + "/kspace.arr", h);
  artifacts.push_back("kspace.arr");
  json manifest;
  manifest["config"] = cfg.to_json();
  manifest["hash"] = hex64(h);
  manifest["artifacts"] = artifacts;
  write_json_file(dir + "/manifest.json", manifest);
}

// ---------------------------------------------------------------------------
// Artifact consumers: manifest verification, metric recomputation, export
// ---------------------------------------------------------------------------

// Loads the manifest and rejects any hash mismatch: a tampered config, or
// artifacts whose recorded hash disagrees with it.
inline ExperimentConfig verify_out_dir(const std::string& dir) {
  const json manifest = read_json_file(dir + "/manifest.json");
  if (!manifest.contains("config") || !manifest.contains("hash"))
    throw ConfigError("manifest: missing config or hash");
  const ExperimentConfig cfg = ExperimentConfig::from_json(manifest.at("config"));
  const std::string recorded = manifest.at("hash").get<std::string>();
  if (recorded != hex64(cfg.hash()))
    throw ConfigError("manifest: config hash mismatch — artifacts belong to another config");
  if (manifest.contains("artifacts"))
    for (const json& a : manifest.at("artifacts")) {
      const std::string name = a.get<std::string>();
      if (name.size() > 4 && name.substr(name.size() - 4) == ".arr") {
        const json side = read_json_file(sidecar_path(dir + "/" + name));
        if (!side.contains("cfg") || side.at("cfg").get<std::string>() != recorded)
          throw ConfigError("artifact '" + name + "': config hash mismatch");
      }
    }
  return cfg;
}

// Recomputes the metrics file from the stored maps; a stored metrics file
// that disagrees byte-for-byte is a corruption error.
inline std::string recompute_metrics(const std::string& dir) {
  const ExperimentConfig cfg = verify_out_dir(dir);
  ExperimentResult res;
  res.config_hash = cfg.hash();
  res.truth = load_param_map(dir + "/truth.arr");
  if (cfg.method == "bcs") {
    const LoadedArray u = load_array(dir + "/u.arr");
    const LoadedArray ut = load_array(dir + "/truth_frame.arr");
    if (!u.is_complex || !ut.is_complex) throw ConfigError("recompute_metrics: bad image file");
    res.image = Eigen::Map<const VectorXcd>(u.cplx.data(), static_cast<Eigen::Index>(u.cplx.size()));
    res.image_truth =
        Eigen::Map<const VectorXcd>(ut.cplx.data(), static_cast<Eigen::Index>(ut.cplx.size()));
    res.psnr = detail::image_psnr(res.image, res.image_truth);
  } else {
    res.est = load_param_map(dir + "/est.arr");
    res.foreground.resize(static_cast<std::size_t>(res.truth.grid.count()));
    if (std::filesystem::exists(dir + "/labels.arr")) {
      const LoadedArray lab = load_array(dir + "/labels.arr");
      for (std::size_t i = 0; i < res.foreground.size(); ++i)
        res.foreground[i] = lab.real[i] > 0 ? 1 : 0;
    } else {
      for (int i = 0; i < res.truth.grid.count(); ++i)
        res.foreground[static_cast<std::size_t>(i)] = res.truth.rho[i] > 0 ? 1 : 0;
    }
    res.err = rel_error_map(res.est, res.truth, res.foreground);
  }
  const std::string fresh = metrics_csv(res, cfg.method);
  const std::string stored = detail::read_text_file(dir + "/metrics.csv");
  if (fresh != stored)
    throw ConfigError("metrics.csv does not match the stored maps");
  return fresh;
}

// Re-exports one channel of the stored estimate with a caller-chosen window.
inline void export_channel(const std::string& dir, const std::string& channel, double lo,
                           double hi, const std::string& out_path) {
  const ExperimentConfig cfg = verify_out_dir(dir);
  if (cfg.method == "bcs") {
    if (channel != "abs") throw ConfigError("export: bcs runs expose only channel 'abs'");
    const LoadedArray u = load_array(dir + "/u.arr");
    const Grid g(u.shape.at(1), u.shape.at(0));
    ArrayXd mag(g.count());
    for (int i = 0; i < g.count(); ++i) mag[i] = std::abs(u.cplx[static_cast<std::size_t>(i)]);
    write_pgm_tagged(out_path, mag, g, lo, hi, cfg.hash());
    return;
  }
  const ParamMap est = load_param_map(dir + "/est.arr");
  const VectorXd* v = nullptr;
  if (channel == "rho") v = &est.rho;
  else if (channel == "t1") v = &est.t1;
  else if (channel == "t2") v = &est.t2;
  else throw ConfigError("export: channel must be rho, t1, or t2");
  write_pgm_tagged(out_path, v->array(), est.grid, lo, hi, cfg.hash());
}

// ---------------------------------------------------------------------------
// Echo-set files for the relaxometry smoother
// ---------------------------------------------------------------------------

inline void save_echo_set(const std::string& prefix, const EchoSet& e) {
  e.validate();
  const int n = e.grid.count();
  const auto stack = [&](const std::vector<VectorXd>& imgs, const std::string& path) {
    std::vector<double> buf;
    buf.reserve(imgs.size() * static_cast<std::size_t>(n));
    for (const VectorXd& u : imgs) buf.insert(buf.end(), u.data(), u.data() + n);
    save_real_array(path, buf.data(), {static_cast<int>(imgs.size()), e.grid.ny, e.grid.nx});
  };
  stack(e.t1w, prefix + ".t1w");
  stack(e.pdw, prefix + ".pdw");
  json meta;
  meta["te_t1w"] = e.te_t1w;
  meta["te_pdw"] = e.te_pdw;
  meta["a_t1"] = e.a_t1;
  meta["a_pd"] = e.a_pd;
  meta["tr"] = e.tr;
  meta["sigma"] = e.sigma;
  write_json_file(prefix + ".echo.json", meta);
}

inline EchoSet load_echo_set(const std::string& prefix) {
  const json meta = read_json_file(prefix + ".echo.json");
  const LoadedArray t1w = load_array(prefix + ".t1w");
  const LoadedArray pdw = load_array(prefix + ".pdw");
  if (t1w.is_complex || pdw.is_complex || t1w.shape.size() != 3 || pdw.shape.size() != 3)
    throw ConfigError("load_echo_set: expected real [echoes, ny, nx] arrays");
  if (t1w.shape[1] != pdw.shape[1] || t1w.shape[2] != pdw.shape[2])
    throw ConfigError("load_echo_set: grid mismatch between weightings");
  EchoSet e;
  e.grid = Grid(t1w.shape[2], t1w.shape[1]);
  const int n = e.grid.count();
  const auto split = [&](const LoadedArray& a, std::vector<VectorXd>& out) {
    for (int k = 0; k < a.shape[0]; ++k)
      out.push_back(Eigen::Map<const VectorXd>(a.real.data() + static_cast<std::size_t>(k) * n, n));
  };
  split(t1w, e.t1w);
  split(pdw, e.pdw);
  e.te_t1w = meta.at("te_t1w").get<std::vector<double>>();
  e.te_pdw = meta.at("te_pdw").get<std::vector<double>>();
  e.a_t1 = meta.at("a_t1").get<double>();
  e.a_pd = meta.at("a_pd").get<double>();
  e.tr = meta.at("tr").get<double>();
  e.sigma = detail::get_or(meta, "sigma", 0.0);
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Dictionary description files for surrogate training
// ---------------------------------------------------------------------------

// A dictionary file is a small JSON descriptor of the deterministic default
// family: frame count and grid resolutions (dictionaries rebuild exactly).
inline FingerprintDictionary dictionary_from_spec_file(const std::string& path) {
  const json j = read_json_file(path);
  detail::expect_keys(j, {"frames", "n1", "n2"}, "dictionary spec");
  const int frames = detail::get_or(j, "frames", 40);
  const int n1 = detail::get_or(j, "n1", 40);
  const int n2 = detail::get_or(j, "n2", 40);
  if (frames < 1 || n1 < 1 || n2 < 1) throw ConfigError("dictionary spec: positive sizes");
  return default_dictionary(default_sequence(frames), n1, n2);
}

}  // namespace qmri
