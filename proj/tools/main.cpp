// Command-line front end: phantom generation, data simulation, reconstruction,
// surrogate training, adaptive smoothing, and artifact inspection. All
// subcommands share one JSON config; exit codes are 0 (success),
// 2 (configuration error), 3 (numerical failure).
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "qmri/harness.hpp"

namespace {

struct GlobalOpts {
  std::string out = "out";
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
};

qmri::ExperimentConfig load_config(const GlobalOpts& g, const std::string& method = "") {
  qmri::ExperimentConfig cfg;
  if (!g.config.empty()) cfg = qmri::ExperimentConfig::from_json(qmri::read_json_file(g.config));
  if (g.seed_given) cfg.seed = g.seed;
  if (!method.empty()) cfg.method = method;
  cfg.validate();
  return cfg;
}

void print_metrics(const qmri::ExperimentResult& res, const std::string& method) {
  if (method == "bcs") {
    std::printf("psnr %s\n", qmri::fmt_double(res.psnr).c_str());
    return;
  }
  std::printf("rho_mean_rel_error %s\n", qmri::fmt_double(res.err.rho_mean).c_str());
  std::printf("t1_mean_rel_error %s\n", qmri::fmt_double(res.err.t1_mean).c_str());
  std::printf("t2_mean_rel_error %s\n", qmri::fmt_double(res.err.t2_mean).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantitative map reconstruction on synthetic phantoms"};
  app.require_subcommand(1);
  GlobalOpts g;
  app.add_option("--out", g.out, "Artifact directory")->capture_default_str();
  app.add_option("--config", g.config, "JSON experiment config");
  auto* seed_opt = app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--threads", g.threads, "Worker threads (0 = hardware default)");

  CLI::App* c_phantom = app.add_subcommand("phantom", "Generate the ground-truth phantom");
  CLI::App* c_simulate = app.add_subcommand("simulate", "Simulate sampled noisy data");

  CLI::App* c_recon = app.add_subcommand("recon", "Reconstruct parameter maps");
  c_recon->require_subcommand(1);
  const char* methods[] = {"mrf", "blip", "lm", "twostep", "bcs", "bcs-qmri", "nn"};
  for (const char* m : methods) c_recon->add_subcommand(m);

  CLI::App* c_train = app.add_subcommand("train-surrogate", "Fit the fingerprint surrogate");
  std::string dict_file;
  std::string net_name = "surrogate";
  int epochs = -1;
  c_train->add_option("--dict", dict_file, "Dictionary descriptor JSON")->required();
  c_train->add_option("--epochs", epochs, "Training epochs (default from config)");
  c_train->add_option("--name", net_name, "Output file name")->capture_default_str();

  CLI::App* c_smooth = app.add_subcommand("smooth", "Adaptive smoothing of fitted maps");
  c_smooth->require_subcommand(1);
  CLI::App* c_aws = c_smooth->add_subcommand("aws", "Structural adaptive weights");
  std::string data_prefix;
  double lambda = 40.0, hmax = 4.0;
  int patch_radius = 0;
  c_aws->add_option("--data", data_prefix, "Echo-set file prefix")->required();
  c_aws->add_option("--lambda", lambda, "Adaptation bandwidth")->capture_default_str();
  c_aws->add_option("--hmax", hmax, "Largest location bandwidth")->capture_default_str();
  c_aws->add_option("--patch-radius", patch_radius, "Patch radius (0 = pointwise)")
      ->capture_default_str();

  CLI::App* c_metrics = app.add_subcommand("metrics", "Recompute and print stored metrics");
  CLI::App* c_export = app.add_subcommand("export", "Export a stored channel as PGM");
  std::string channel = "rho";
  std::string out_file;
  double win_lo = 0.0, win_hi = 0.0;
  bool hi_given = false;
  c_export->add_option("--channel", channel, "rho, t1, t2 (or abs for image runs)")
      ->capture_default_str();
  c_export->add_option("--lo", win_lo, "Window lower bound")->capture_default_str();
  auto* hi_opt = c_export->add_option("--hi", win_hi, "Window upper bound (default: data max)");
  c_export->add_option("--file", out_file, "Output path (default <out>/<channel>_export.pgm)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  g.seed_given = seed_opt->count() > 0;
  hi_given = hi_opt->count() > 0;

  try {
    if (g.threads > 0) qmri::set_thread_count(g.threads);

    if (c_phantom->parsed()) {
      qmri::write_phantom(load_config(g), g.out);
      std::printf("phantom written to %s\n", g.out.c_str());
    } else if (c_simulate->parsed()) {
      qmri::write_simulation(load_config(g), g.out);
      std::printf("simulation written to %s\n", g.out.c_str());
    } else if (c_recon->parsed()) {
      const std::string method = c_recon->get_subcommands().at(0)->get_name();
      const qmri::ExperimentConfig cfg = load_config(g, method);
      const qmri::ExperimentResult res = qmri::run_and_write(cfg, g.out);
      print_metrics(res, cfg.method);
    } else if (c_train->parsed()) {
      const qmri::FingerprintDictionary dict = qmri::dictionary_from_spec_file(dict_file);
      qmri::TrainConfig tc;
      if (epochs >= 0) tc.epochs = epochs;
      if (g.seed_given) tc.seed = g.seed;
      const qmri::TrainResult tr = qmri::train_surrogate(qmri::make_training_set(dict), tc);
      std::filesystem::create_directories(g.out);
      qmri::save_surrogate(g.out + "/" + net_name, tr.net);
      std::printf("final_mse %s\n", qmri::fmt_double(tr.final_mse).c_str());
    } else if (c_aws->parsed()) {
      const qmri::EchoSet echoes = qmri::load_echo_set(data_prefix);
      const qmri::EstaticsFit fit = qmri::estatics_fit(echoes);
      qmri::AWSConfig cfg;
      cfg.bandwidths = qmri::default_bandwidths(hmax);
      cfg.lambda = lambda;
      cfg.patch_radius = patch_radius;
      const qmri::SmoothedQMaps sm = qmri::smooth_qmaps(fit, cfg);
      std::filesystem::create_directories(g.out);
      qmri::json run;
      run["data"] = data_prefix;
      run["lambda"] = lambda;
      run["hmax"] = hmax;
      run["patch_radius"] = patch_radius;
      const std::uint64_t h = qmri::fnv1a(run.dump());
      const qmri::Grid grid = fit.grid;
      const struct {
        const char* name;
        const qmri::VectorXd* v;
      } maps[] = {{"u_t1", &sm.fit.u_t1},
                  {"u_pd", &sm.fit.u_pd},
                  {"r2star", &sm.fit.r2star},
                  {"r1", &sm.derived.r1},
                  {"amplitude", &sm.derived.a}};
      for (const auto& m : maps) {
        qmri::save_real_array(g.out + "/" + m.name + ".arr", m.v->data(), {grid.ny, grid.nx});
        qmri::detail::tag_sidecar(g.out + "/" + m.name + ".arr", h);
      }
      run["hash"] = qmri::hex64(h);
      qmri::write_json_file(g.out + "/manifest.json", run);
      std::printf("smoothed maps written to %s\n", g.out.c_str());
    } else if (c_metrics->parsed()) {
      std::fputs(qmri::recompute_metrics(g.out).c_str(), stdout);
    } else if (c_export->parsed()) {
      if (!hi_given) {
        const qmri::ExperimentConfig cfg = qmri::verify_out_dir(g.out);
        if (cfg.method == "bcs") {
          const qmri::LoadedArray u = qmri::load_array(g.out + "/u.arr");
          double m = 0;
          for (const qmri::Cplx& z : u.cplx) m = std::max(m, std::abs(z));
          win_hi = m;
        } else {
          const qmri::ParamMap est = qmri::load_param_map(g.out + "/est.arr");
          win_hi = channel == "rho" ? est.rho.maxCoeff()
                   : channel == "t1" ? est.t1.maxCoeff()
                                     : est.t2.maxCoeff();
        }
      }
      if (out_file.empty()) out_file = g.out + "/" + channel + "_export.pgm";
      qmri::export_channel(g.out, channel, win_lo, win_hi, out_file);
      std::printf("exported %s\n", out_file.c_str());
    }
    return 0;
  } catch (const qmri::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const qmri::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
