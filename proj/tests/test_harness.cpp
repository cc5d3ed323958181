#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "qmri/harness.hpp"
#include "qmri/integrated.hpp"

using namespace qmri;
namespace fs = std::filesystem;

static std::string tmpdir() {
  static std::string d = [] {
    auto p = fs::temp_directory_path() / "qmri_harness_test";
    fs::create_directories(p);
    return p.string();
  }();
  return d;
}

static std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

static void spit(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  REQUIRE(f);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

// Small fully-specified phantom: two tissues, two overlapping ellipses.
static PhantomSpec small_spec(int nx = 24, int ny = 24) {
  PhantomSpec s;
  s.nx = nx;
  s.ny = ny;
  s.tissues = {TissueSpec{0.0, 1.0, 0.1}, TissueSpec{1.0, 1.2, 0.15},
               TissueSpec{0.8, 0.5, 0.06}};
  s.ellipses = {EllipseSpec{nx / 2.0, ny / 2.0, nx / 2.5, ny / 3.0, 0.3, 1},
                EllipseSpec{nx / 2.0 + 2, ny / 2.0 - 1, nx / 6.0, ny / 5.0, -0.7, 2}};
  return s;
}

static ExperimentConfig small_config(const std::string& method) {
  ExperimentConfig cfg;
  cfg.phantom = small_spec();
  cfg.frames = 16;
  cfg.factor = 4;
  cfg.sigma = 0.02;
  cfg.seed = 7;
  cfg.dict_n1 = 20;
  cfg.dict_n2 = 20;
  cfg.method = method;
  return cfg;
}

TEST_CASE("phantom labels match an independent membership oracle") {
  const PhantomSpec s = small_spec(30, 26);
  const Phantom ph = make_phantom(s);
  // Independent oracle: rotate the point into the ellipse frame explicitly.
  int counts[3] = {0, 0, 0}, want[3] = {0, 0, 0};
  for (int y = 0; y < s.ny; ++y)
    for (int x = 0; x < s.nx; ++x) {
      int label = 0;
      for (const EllipseSpec& e : s.ellipses) {
        const Eigen::Rotation2Dd rot(-e.angle);
        const Eigen::Vector2d p = rot * Eigen::Vector2d(x - e.cx, y - e.cy);
        if (std::pow(p.x() / e.rx, 2) + std::pow(p.y() / e.ry, 2) <= 1.0) label = e.label;
      }
      ++want[label];
      ++counts[ph.labels[static_cast<std::size_t>(y * s.nx + x)]];
      const TissueSpec& t = s.tissues[static_cast<std::size_t>(label)];
      const int i = ph.q.grid.index(x, y);
      REQUIRE(ph.labels[static_cast<std::size_t>(i)] == label);
      REQUIRE(ph.q.rho[i] == t.rho);
      REQUIRE(ph.q.t1[i] == t.t1);
      REQUIRE(ph.q.t2[i] == t.t2);
    }
  for (int l = 0; l < 3; ++l) REQUIRE(counts[l] == want[l]);
  // Both labels must actually occur, and the overlap (later ellipse wins)
  // must be non-trivial for the oracle to mean anything.
  REQUIRE(want[1] > 0);
  REQUIRE(want[2] > 0);
}

TEST_CASE("empty spec gives a background-only phantom with zero density") {
  const Phantom ph = make_phantom(PhantomSpec{});
  REQUIRE(ph.q.grid == Grid(64, 64));
  REQUIRE(ph.q.rho.cwiseAbs().maxCoeff() == 0.0);
  for (int lab : ph.labels) REQUIRE(lab == 0);
}

TEST_CASE("one covering ellipse gives a constant map") {
  PhantomSpec s;
  s.nx = 12;
  s.ny = 10;
  s.tissues = {TissueSpec{0.0, 1.0, 0.1}, TissueSpec{0.9, 1.7, 0.3}};
  s.ellipses = {EllipseSpec{5.5, 4.5, 100.0, 100.0, 0.1, 1}};
  const Phantom ph = make_phantom(s);
  for (int i = 0; i < ph.q.grid.count(); ++i) {
    REQUIRE(ph.labels[static_cast<std::size_t>(i)] == 1);
    REQUIRE(ph.q.rho[i] == 0.9);
    REQUIRE(ph.q.t1[i] == 1.7);
    REQUIRE(ph.q.t2[i] == 0.3);
  }
}

TEST_CASE("phantom spec validation") {
  PhantomSpec s = small_spec();
  s.ellipses[0].label = 7;  // no such tissue
  REQUIRE_THROWS_AS(make_phantom(s), ConfigError);
  s = small_spec();
  s.ellipses[1].rx = 0.0;
  REQUIRE_THROWS_AS(make_phantom(s), ConfigError);
  s = small_spec();
  s.tissues[1].t2 = 100.0;  // outside the admissible box
  REQUIRE_THROWS_AS(make_phantom(s), ConfigError);
  s = small_spec();
  s.tissues.clear();
  REQUIRE_THROWS_AS(make_phantom(s), ConfigError);
  s = small_spec();
  s.nx = 0;
  REQUIRE_THROWS_AS(make_phantom(s), ConfigError);
}

TEST_CASE("config JSON round trip, strict keys, canonical hash") {
  ExperimentConfig cfg = small_config("blip");
  cfg.method_params = {{"steps", 6}};
  const json j = cfg.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  REQUIRE(back.to_json().dump() == j.dump());
  REQUIRE(back.hash() == cfg.hash());

  // Defaults left implicit hash identically to defaults spelled out.
  REQUIRE(ExperimentConfig::from_json(json::object()).hash() == ExperimentConfig{}.hash());

  // Any semantic change moves the hash.
  ExperimentConfig c2 = cfg;
  c2.seed = 8;
  REQUIRE(c2.hash() != cfg.hash());
  c2 = cfg;
  c2.sigma = 0.03;
  REQUIRE(c2.hash() != cfg.hash());
  c2 = cfg;
  c2.phantom.tissues[1].t1 += 1e-9;
  REQUIRE(c2.hash() != cfg.hash());

  // Unknown keys anywhere are configuration errors.
  json bad = j;
  bad["extra"] = 1;
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  bad = j;
  bad["phantom"]["blobs"] = 2;
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  bad = j;
  bad["phantom"]["tissues"][0]["rho2"] = 0.5;
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  bad = j;
  bad["phantom"]["ellipses"][0]["radius"] = 3;
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  bad = j;
  bad["frames"] = "many";
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);

  ExperimentConfig v = cfg;
  v.method = "unknown";
  REQUIRE_THROWS_AS(v.validate(), ConfigError);
  v = cfg;
  v.factor = 0;
  REQUIRE_THROWS_AS(v.validate(), ConfigError);
  v = cfg;
  v.sigma = -1;
  REQUIRE_THROWS_AS(v.validate(), ConfigError);
}

TEST_CASE("noiseless fully sampled on-grid phantom is recovered exactly") {
  // Tissue relaxation values sit exactly on dictionary atoms (t2 <= t1 so the
  // pairs exist), so matching has an exact optimum.
  const int n1 = 12, n2 = 12;
  const VectorXd t1g = log_spaced(0.1, 4.0, n1);
  const VectorXd t2g = log_spaced(0.02, 2.0, n2);
  ExperimentConfig cfg;
  cfg.phantom.nx = 16;
  cfg.phantom.ny = 16;
  cfg.phantom.tissues = {TissueSpec{0.0, 1.0, 0.1}, TissueSpec{1.0, t1g[8], t2g[4]},
                         TissueSpec{0.7, t1g[5], t2g[2]}};
  cfg.phantom.ellipses = {EllipseSpec{8.0, 8.0, 6.5, 7.0, 0.0, 1},
                          EllipseSpec{8.0, 9.0, 3.0, 2.5, 0.2, 2}};
  cfg.frames = 12;
  cfg.factor = 1;
  cfg.sigma = 0.0;
  cfg.dict_n1 = n1;
  cfg.dict_n2 = n2;
  cfg.method = "mrf";
  const ExperimentResult res = run_experiment(cfg);
  REQUIRE(res.err.t1_mean == 0.0);
  REQUIRE(res.err.t2_mean == 0.0);
  REQUIRE(res.err.rho_mean <= 1e-10);

  // The experiment-level zero must also land in the stored metrics file.
  const std::string dir = tmpdir() + "/exact";
  fs::remove_all(dir);
  write_experiment(res, cfg, dir);
  const std::string csv = slurp(dir + "/metrics.csv");
  REQUIRE(csv.find("t1_mean_rel_error,0\n") != std::string::npos);
  REQUIRE(csv.find("t2_mean_rel_error,0\n") != std::string::npos);
}

TEST_CASE("identical configs give byte-identical artifacts at any thread count") {
  const ExperimentConfig cfg = small_config("mrf");
  const std::string d1 = tmpdir() + "/det1", d2 = tmpdir() + "/det2", d3 = tmpdir() + "/det3";
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
  run_and_write(cfg, d1);
  run_and_write(cfg, d2);
  set_thread_count(4);
  run_and_write(cfg, d3);
  set_thread_count(1);
  const ExperimentResult r4 = run_experiment(cfg);
  set_thread_count(0);
  for (const char* f : {"metrics.csv", "est.arr", "truth.arr", "est_t1.pgm", "manifest.json"}) {
    REQUIRE(slurp(d1 + "/" + f) == slurp(d2 + "/" + f));
    REQUIRE(slurp(d1 + "/" + f) == slurp(d3 + "/" + f));
  }
  const ExperimentResult r1 = run_experiment(cfg);
  REQUIRE(r1.err.t1_mean == r4.err.t1_mean);
  REQUIRE((r1.est.t1 - r4.est.t1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("experiment metrics equal direct module invocation") {
  // The orchestrator must add nothing: rebuild the pipeline by hand and
  // compare bitwise.
  const ExperimentConfig base = small_config("mrf");
  const Phantom ph = make_phantom(base.phantom);
  const SequenceSpec seq = default_sequence(base.frames);
  const FingerprintDictionary dict = default_dictionary(seq, base.dict_n1, base.dict_n2);
  const SamplingPattern pat =
      make_cartesian_masks(ph.q.grid, base.factor, base.frames, base.seed);
  KSpaceData y = apply_forward(bloch_map(ph.q, seq), pat);
  add_noise(y, base.sigma, base.seed);
  std::vector<std::uint8_t> fg(ph.labels.size());
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = ph.labels[i] > 0;

  SECTION("mrf") {
    const RelErrorReport want = rel_error_map(mrf_reconstruct(y, dict), ph.q, fg);
    const ExperimentResult res = run_experiment(base);
    REQUIRE(res.err.t1_mean == want.t1_mean);
    REQUIRE(res.err.t2_mean == want.t2_mean);
    REQUIRE(res.err.rho_mean == want.rho_mean);
  }
  SECTION("blip") {
    ExperimentConfig cfg = base;
    cfg.method = "blip";
    cfg.method_params = {{"steps", 5}, {"mu", 0.9}};
    const BlipResult br = blip_reconstruct(y, dict, 5, 0.9);
    const RelErrorReport want = rel_error_map(br.map, ph.q, fg);
    const ExperimentResult res = run_experiment(cfg);
    REQUIRE(res.err.t1_mean == want.t1_mean);
    REQUIRE(res.err.rho_mean == want.rho_mean);
    REQUIRE(res.trace == br.residual);
  }
  SECTION("lm") {
    ExperimentConfig cfg = base;
    cfg.method = "lm";
    cfg.method_params = {{"max_iters", 8}};
    LMConfig lc;
    lc.max_iters = 8;
    const ParamMap lm = lm_from_mrf(y, seq, dict, AdmissibleBox{}, lc);
    const RelErrorReport want = rel_error_map(lm, ph.q, fg);
    const ExperimentResult res = run_experiment(cfg);
    REQUIRE(res.err.t1_mean == want.t1_mean);
    REQUIRE(res.err.t2_mean == want.t2_mean);
    REQUIRE(res.err.rho_mean == want.rho_mean);
  }
}

TEST_CASE("tampered artifacts are rejected") {
  const ExperimentConfig cfg = small_config("mrf");
  const std::string dir = tmpdir() + "/tamper";
  fs::remove_all(dir);
  run_and_write(cfg, dir);
  REQUIRE_NOTHROW(verify_out_dir(dir));
  const std::string fresh = recompute_metrics(dir);
  REQUIRE(fresh == slurp(dir + "/metrics.csv"));

  SECTION("manifest config edited after the fact") {
    json manifest = read_json_file(dir + "/manifest.json");
    manifest["config"]["sigma"] = 0.5;
    write_json_file(dir + "/manifest.json", manifest);
    REQUIRE_THROWS_AS(verify_out_dir(dir), ConfigError);
  }
  SECTION("array re-used from a different run") {
    json side = read_json_file(dir + "/est.arr.json");
    side["cfg"] = "0000000000000000";
    write_json_file(dir + "/est.arr.json", side);
    REQUIRE_THROWS_AS(verify_out_dir(dir), ConfigError);
  }
  SECTION("metrics file out of sync with the maps") {
    std::string csv = slurp(dir + "/metrics.csv");
    csv.back() = csv.back() == '1' ? '2' : '1';
    spit(dir + "/metrics.csv", csv);
    REQUIRE_THROWS_AS(recompute_metrics(dir), ConfigError);
  }
}

TEST_CASE("PGM artifacts carry the config hash and the documented quantization") {
  const ExperimentConfig cfg = small_config("mrf");
  const std::string dir = tmpdir() + "/pgm";
  fs::remove_all(dir);
  const ExperimentResult res = run_and_write(cfg, dir);
  const std::string pgm = slurp(dir + "/est_t1.pgm");
  const std::string header = "P5\n# cfg " + hex64(cfg.hash()) + "\n24 24\n255\n";
  REQUIRE(pgm.substr(0, header.size()) == header);
  REQUIRE(pgm.size() == header.size() + 24 * 24);
  // Window is [0, max truth t1]; round half up.
  const double hi = res.truth.t1.maxCoeff();
  for (int i = 0; i < res.truth.grid.count(); ++i) {
    const double t = clamp(res.est.t1[i] / hi, 0.0, 1.0);
    const auto want = static_cast<unsigned char>(std::floor(t * 255.0 + 0.5));
    REQUIRE(static_cast<unsigned char>(pgm[header.size() + static_cast<std::size_t>(i)]) ==
            want);
  }
}

TEST_CASE("phantom-file override replaces the generated phantom") {
  ParamMap q(Grid(10, 8));
  for (int i = 0; i < q.grid.count(); ++i) {
    q.rho[i] = i % 3 == 0 ? 0.0 : 0.8;
    q.t1[i] = 1.1;
    q.t2[i] = 0.2;
  }
  const std::string file = tmpdir() + "/override.arr";
  save_param_map(file, q);
  ExperimentConfig cfg;
  cfg.phantom_file = file;
  cfg.frames = 8;
  cfg.factor = 1;
  cfg.sigma = 0.0;
  cfg.dict_n1 = 10;
  cfg.dict_n2 = 10;
  cfg.method = "mrf";
  const ExperimentResult res = run_experiment(cfg);
  REQUIRE(res.labels.empty());
  REQUIRE((res.truth.rho - q.rho).cwiseAbs().maxCoeff() == 0.0);
  // Foreground derives from positive density.
  int fg = 0;
  for (auto b : res.foreground) fg += b;
  int want = 0;
  for (int i = 0; i < q.grid.count(); ++i) want += q.rho[i] > 0;
  REQUIRE(fg == want);

  const std::string dir = tmpdir() + "/override_out";
  fs::remove_all(dir);
  write_experiment(res, cfg, dir);
  REQUIRE_FALSE(fs::exists(dir + "/labels.arr"));
  REQUIRE_NOTHROW(verify_out_dir(dir));
}

TEST_CASE("simulation artifacts round-trip and verify") {
  ExperimentConfig cfg = small_config("mrf");
  const std::string dir = tmpdir() + "/sim";
  fs::remove_all(dir);
  write_simulation(cfg, dir);
  REQUIRE_NOTHROW(verify_out_dir(dir));
  const KSpaceData y = load_kspace(dir + "/kspace.arr");
  REQUIRE(y.frames() == cfg.frames);
  // The stored data must equal a fresh simulation of the same config.
  const Phantom ph = make_phantom(cfg.phantom);
  KSpaceData want =
      apply_forward(bloch_map(ph.q, default_sequence(cfg.frames)),
                    make_cartesian_masks(ph.q.grid, cfg.factor, cfg.frames, cfg.seed));
  add_noise(want, cfg.sigma, cfg.seed);
  for (int f = 0; f < y.frames(); ++f)
    REQUIRE((y.coeffs[static_cast<std::size_t>(f)] - want.coeffs[static_cast<std::size_t>(f)])
                .cwiseAbs()
                .maxCoeff() == 0.0);

  const std::string phdir = tmpdir() + "/ph";
  fs::remove_all(phdir);
  write_phantom(cfg, phdir);
  REQUIRE_NOTHROW(verify_out_dir(phdir));
  const ParamMap truth = load_param_map(phdir + "/truth.arr");
  REQUIRE((truth.t1 - ph.q.t1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("image-space sparse-coding method writes image artifacts") {
  ExperimentConfig cfg;
  cfg.phantom = small_spec(16, 16);
  cfg.frames = 6;
  cfg.factor = 2;
  cfg.sigma = 0.01;
  cfg.seed = 3;
  cfg.dict_n1 = 8;
  cfg.dict_n2 = 8;
  cfg.method = "bcs";
  cfg.method_params = {{"frame", 1}, {"patch", 4}, {"sweeps", 3}};
  const std::string dir = tmpdir() + "/bcs";
  fs::remove_all(dir);
  const ExperimentResult res = run_and_write(cfg, dir);
  REQUIRE(std::isfinite(res.psnr));
  REQUIRE(res.image.size() == 16 * 16);
  REQUIRE_FALSE(res.trace.empty());
  REQUIRE(fs::exists(dir + "/u.arr"));
  REQUIRE(fs::exists(dir + "/u_abs.pgm"));
  REQUIRE(fs::exists(dir + "/trace.csv"));
  REQUIRE_FALSE(fs::exists(dir + "/est.arr"));
  const std::string csv = slurp(dir + "/metrics.csv");
  REQUIRE(csv.find("psnr,") != std::string::npos);
  REQUIRE(recompute_metrics(dir) == csv);
  // Only the magnitude channel exists for image runs.
  REQUIRE_NOTHROW(export_channel(dir, "abs", 0.0, 1.0, dir + "/abs.pgm"));
  REQUIRE_THROWS_AS(export_channel(dir, "rho", 0.0, 1.0, dir + "/x.pgm"), ConfigError);
  REQUIRE_THROWS_AS(
      [&] {
        ExperimentConfig c = cfg;
        c.method_params["frame"] = 99;
        run_experiment(c);
      }(),
      ConfigError);
}

TEST_CASE("method parameter objects are strict") {
  ExperimentConfig cfg = small_config("mrf");
  cfg.method_params = {{"steps", 3}};  // mrf takes no parameters
  REQUIRE_THROWS_AS(run_experiment(cfg), ConfigError);
  cfg = small_config("lm");
  cfg.method_params = {{"iters", 3}};  // misspelled key
  REQUIRE_THROWS_AS(run_experiment(cfg), ConfigError);
}

TEST_CASE("echo-set files round-trip bitwise") {
  EchoSet e;
  e.grid = Grid(6, 5);
  Rng rng(11, 0);
  const auto img = [&] {
    VectorXd v(e.grid.count());
    for (int i = 0; i < v.size(); ++i) v[i] = rng.normal_pair().first;
    return v;
  };
  e.t1w = {img(), img(), img()};
  e.te_t1w = {0.002, 0.005, 0.009};
  e.pdw = {img(), img()};
  e.te_pdw = {0.003, 0.008};
  e.a_t1 = 0.35;
  e.a_pd = 0.1;
  e.tr = 0.025;
  e.sigma = 0.04;
  const std::string prefix = tmpdir() + "/echoes";
  save_echo_set(prefix, e);
  const EchoSet back = load_echo_set(prefix);
  REQUIRE(back.grid == e.grid);
  REQUIRE(back.te_t1w == e.te_t1w);
  REQUIRE(back.te_pdw == e.te_pdw);
  REQUIRE(back.a_t1 == e.a_t1);
  REQUIRE(back.tr == e.tr);
  REQUIRE(back.sigma == e.sigma);
  for (std::size_t k = 0; k < e.t1w.size(); ++k)
    REQUIRE((back.t1w[k] - e.t1w[k]).cwiseAbs().maxCoeff() == 0.0);
  for (std::size_t k = 0; k < e.pdw.size(); ++k)
    REQUIRE((back.pdw[k] - e.pdw[k]).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_THROWS_AS(load_echo_set(tmpdir() + "/no_such_prefix"), ConfigError);
}

TEST_CASE("dictionary descriptor files rebuild the default family") {
  const std::string path = tmpdir() + "/dict.json";
  spit(path, R"({"frames": 9, "n1": 7, "n2": 6})");
  const FingerprintDictionary d = dictionary_from_spec_file(path);
  const FingerprintDictionary want = default_dictionary(default_sequence(9), 7, 6);
  REQUIRE(d.size() == want.size());
  REQUIRE((d.values - want.values).cwiseAbs().maxCoeff() == 0.0);
  spit(path, R"({"frames": 9, "n1": 7, "bogus": 1})");
  REQUIRE_THROWS_AS(dictionary_from_spec_file(path), ConfigError);
  spit(path, R"({"frames": 0})");
  REQUIRE_THROWS_AS(dictionary_from_spec_file(path), ConfigError);
}
