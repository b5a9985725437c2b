// Command-line front end: one subcommand per pipeline stage plus `demo`.
//
// Stage outputs land in --out; later stages read them back from --data
// (defaults to --out), so a pipeline can be run one step at a time:
//
//   xkey phantom --out run
//   xkey synth --out run
//   xkey saliency --out run
//   xkey train --out run
//   xkey register --out run --us moved.rawv --us-fov moved_fov.rawv
//
// Errors are reported as a single line `error kind=<kind> message=<text>`.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xkey/xkey.hpp"

namespace fs = std::filesystem;
using namespace xkey;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string preset;
  std::string out = "out";
  std::string data;
  std::optional<int> threads;
  bool quiet = false;
};

RunConfig resolve(const Globals& g) {
  ConfigFile f;
  if (!g.config.empty()) f = read_config_file(g.config);
  const Preset p = parse_preset(!g.preset.empty() ? g.preset : !f.preset.empty() ? f.preset : "desk");
  RunConfig c = resolve_config(f, p);
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  finalize_config(c);
  return c;
}

fs::path data_dir(const Globals& g) { return g.data.empty() ? fs::path(g.out) : fs::path(g.data); }

fs::path input(const Globals& g, const std::string& override_path, const std::string& default_name) {
  const fs::path p = override_path.empty() ? data_dir(g) / default_name : fs::path(override_path);
  require(fs::exists(p), ErrorKind::io, "missing input: " + p.string());
  return p;
}

FovMask load_mask(const fs::path& p) { return volume_to_mask(load_volume(p)); }

SaliencyMap load_map(const fs::path& p, SaliencyTag tag) { return {load_volume(p), tag}; }

void note(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cerr << s << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal MR/US keypoint pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "run config file (key = value, [paper]/[desk] sections)");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--preset", g.preset, "paper | desk (default: the config file's preset, else desk)")->check(CLI::IsMember({"paper", "desk"}));
  app.add_option("--out", g.out, "output directory");
  app.add_option("--data", g.data, "directory holding inputs from earlier stages (default: --out)");
  app.add_option("--threads", g.threads, "worker threads (1 = determinism reference)")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "no progress output");

  std::string in_path, mr_path, us_path, fov_path, us_fov_path, weights_path, p_res_path, manifest_path, gt_path;
  std::string descriptor = "encoder";
  std::size_t n_points = 0;
  double step_mm = 0.0;

  auto* phantom = app.add_subcommand("phantom", "generate the phantom MR volume and its sequence variants");
  auto* synth = app.add_subcommand("synth", "synthesize the pseudo-US dataset and the held-out test volume");
  synth->add_option("--mr", mr_path, "phantom volume (default: <data>/mr.rawv)");
  auto* detect = app.add_subcommand("detect", "difference-of-Gaussians keypoints of one volume");
  detect->add_option("--input", in_path, "volume to analyse")->required();
  auto* saliency = app.add_subcommand("saliency", "build P_US, P_MR, P_comb, M_w, P_res");
  saliency->add_option("--manifest", manifest_path, "dataset manifest (default: <data>/manifest.txt)");
  saliency->add_option("--mr", mr_path, "MR volume (default: <data>/mr.rawv)");
  auto* sample = app.add_subcommand("sample", "draw training keypoints from P_res");
  sample->add_option("--p-res", p_res_path, "residual saliency (default: <data>/p_res.rawv)");
  sample->add_option("--fov", fov_path, "FoV mask (default: <data>/fov.rawv)");
  sample->add_option("-n,--count", n_points, "number of keypoints (default: train.keypoints_per_epoch)");
  sample->add_option("--grid", step_mm, "emit a uniform lattice with this step (mm) instead");
  auto* train = app.add_subcommand("train", "train the patch encoder");
  train->add_option("--manifest", manifest_path, "dataset manifest (default: <data>/manifest.txt)");
  train->add_option("--mr", mr_path, "MR volume (default: <data>/mr.rawv)");
  train->add_option("--p-res", p_res_path, "residual saliency (default: <data>/p_res.rawv)");
  auto* match = app.add_subcommand("match", "match MR keypoints to a US lattice");
  auto* reg = app.add_subcommand("register", "iterative rigid registration of a moving US volume");
  auto* eval = app.add_subcommand("eval", "matching metrics over repeated keypoint draws");
  auto* sweep_rot = app.add_subcommand("sweep-rot", "precision versus rotation of the US volume");
  auto* sweep_fov = app.add_subcommand("sweep-fov", "match consistency across three FoVs");
  for (auto* sc : {match, reg, eval, sweep_rot, sweep_fov}) {
    sc->add_option("--mr", mr_path, "MR volume (default: <data>/mr.rawv)");
    sc->add_option("--us", us_path, "US volume (default: <data>/test_us.rawv)");
    sc->add_option("--fov", fov_path, "training FoV mask (default: <data>/fov.rawv)");
    sc->add_option("--p-res", p_res_path, "residual saliency (default: <data>/p_res.rawv)");
    sc->add_option("--weights", weights_path, "encoder weights directory (default: <data>/weights)");
  }
  for (auto* sc : {match, reg, eval, sweep_rot})
    sc->add_option("--us-fov", us_fov_path, "FoV mask of the US volume (default: training FoV)");
  for (auto* sc : {match, eval, sweep_rot, sweep_fov})
    sc->add_option("--descriptor", descriptor, "encoder | selfsim")->check(CLI::IsMember({"encoder", "selfsim"}));
  for (auto* sc : {match, eval}) sc->add_option("--gt", gt_path, "ground truth MR->US transform (.rt, default identity)");
  auto* demo = app.add_subcommand("demo", "phantom -> synth -> saliency -> train -> register -> eval");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::cout.flush();
    std::fprintf(stderr, "error kind=usage message=%s\n", msg.c_str());
    return 2;
  }

  try {
    const RunConfig cfg = resolve(g);
    const fs::path out(g.out);
    write_run_lock(cfg, out);
    auto progress = [&](const std::string& s) { note(g, s); };

    auto load_side = [&](Volume& mr, FovMask& fov, SaliencyMap& p_res) {
      mr = load_volume(input(g, mr_path, "mr.rawv"));
      fov = load_mask(input(g, fov_path, "fov.rawv"));
      p_res = load_map(input(g, p_res_path, "p_res.rawv"), SaliencyTag::res);
    };
    auto describer = [&](const EncoderWeights<float>* w) {
      return descriptor == "selfsim" ? selfsim_describer() : encoder_describer(*w, cfg.threads);
    };

    if (*phantom) {
      PhantomSpec ps = cfg.phantom;
      ps.seed = mix_seed(cfg.seed, ps.seed);
      const Volume mr = make_phantom(ps);
      save_volume(mr, out / "mr.rawv");
      const auto variants = make_sequence_variants(mr, cfg.n_sequences, mix_seed(cfg.seed, 0x5E9));
      for (std::size_t k = 0; k < variants.size(); ++k)
        save_volume(variants[k], out / ("variant_" + std::to_string(k) + ".rawv"));
      note(g, "wrote " + (out / "mr.rawv").string());
    } else if (*synth) {
      const Volume mr = load_volume(input(g, mr_path, "mr.rawv"));
      const auto variants = make_sequence_variants(mr, cfg.n_sequences, mix_seed(cfg.seed, 0x5E9));
      const SynthDataset ds = build_synth_dataset(variants, cfg.gammas, cfg.us, mix_seed(cfg.seed, 0xDA7A));
      const auto manifest = save_synth_dataset(ds, out);
      save_volume(synthesize_test_us(variants, cfg, ds.fov), out / "test_us.rawv");
      note(g, "wrote " + std::to_string(ds.size()) + " volumes, manifest " + manifest.string());
    } else if (*detect) {
      const Volume v = load_volume(in_path);
      const auto kps = detect_keypoints(v, cfg.heatmap.detector);
      save_keypoints_csv(kps, out / "keypoints.csv");
      note(g, std::to_string(kps.size()) + " keypoints");
    } else if (*saliency) {
      const SynthDataset ds = load_synth_dataset(input(g, manifest_path, "manifest.txt"));
      const Volume mr = load_volume(input(g, mr_path, "mr.rawv"));
      const SaliencyStack s = build_saliency(mr, ds, cfg.heatmap, cfg.prior_sigma_mm);
      for (const SaliencyMap* m : {&s.p_us, &s.p_mr, &s.p_comb, &s.m_w, &s.p_res})
        save_volume(m->map, out / (std::string(to_string(m->tag)) + ".rawv"));
      if (fs::absolute(out) != fs::absolute(data_dir(g))) save_volume(mask_to_volume(ds.fov), out / "fov.rawv");
    } else if (*sample) {
      const FovMask fov = load_mask(input(g, fov_path, "fov.rawv"));
      std::vector<Keypoint> kps;
      if (step_mm > 0.0) {
        kps = grid_keypoints(fov, step_mm, cfg.train.sampler);
      } else {
        const SaliencyMap p = load_map(input(g, p_res_path, "p_res.rawv"), SaliencyTag::res);
        const std::size_t n = n_points ? n_points : static_cast<std::size_t>(cfg.train.keypoints_per_epoch);
        kps = sample_keypoints(p, fov, n, cfg.train.sampler, cfg.seed);
      }
      save_keypoints_csv(kps, out / "keypoints.csv");
    } else if (*train) {
      const auto manifest = input(g, manifest_path, "manifest.txt");
      const SynthDataset ds = load_synth_dataset(manifest);
      const Volume mr = load_volume(input(g, mr_path, "mr.rawv"));
      const SaliencyMap p_res = load_map(input(g, p_res_path, "p_res.rawv"), SaliencyTag::res);
      const TrainResult r = train_encoder(mr, ds, p_res, ds.fov, cfg.train, [&](const EpochRecord& e) {
        if (e.epoch == 1 || e.epoch % 10 == 0) note(g, "epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.mean_loss));
      });
      save_weights(r.weights, out / "weights");
      save_loss_history(r.history, out / "loss.csv");
    } else if (*match || *eval || *sweep_rot || *reg) {
      Volume mr;
      FovMask fov;
      SaliencyMap p_res;
      load_side(mr, fov, p_res);
      const Volume us = load_volume(input(g, us_path, "test_us.rawv"));
      const FovMask us_fov = us_fov_path.empty() ? fov : load_mask(input(g, us_fov_path, ""));
      std::optional<EncoderWeights<float>> w;
      if (*reg || descriptor == "encoder") w = load_weights(input(g, weights_path, "weights"));
      const MrSide side{&mr, &p_res, &fov};
      const RigidTransform gt = gt_path.empty() ? RigidTransform::identity() : load_transform(gt_path);
      if (*match) {
        const MatchOutcome o = evaluate_matching(side, us, us_fov, gt, describer(w ? &*w : nullptr), cfg.eval, cfg.seed);
        save_matches_csv(o.matches, o.mr_kps, o.us_kps, out / "matches.csv");
        save_metrics_csv({{descriptor, o.metrics}}, out / "metrics.csv");
      } else if (*eval) {
        const DescribeFn d = describer(w ? &*w : nullptr);
        const RepeatSummary s = repeat_eval(cfg.repeats, cfg.seed, [&](std::uint64_t seed) {
          return evaluate_matching(side, us, us_fov, gt, d, cfg.eval, seed).metrics;
        });
        std::vector<std::pair<std::string, MatchMetrics>> rows;
        for (std::size_t k = 0; k < s.runs.size(); ++k) rows.emplace_back("repeat_" + std::to_string(k), s.runs[k]);
        save_metrics_csv(rows, out / "metrics.csv");
        std::ofstream sum(out / "metrics_summary.csv", std::ios::trunc);
        sum << "metric,mean,std\n" << std::setprecision(9) << "precision," << s.precision.mean << ',' << s.precision.std
            << "\nmatching_score," << s.matching_score.mean << ',' << s.matching_score.std << "\nmatched_points,"
            << s.matched_points.mean << ',' << s.matched_points.std << '\n';
      } else if (*sweep_rot) {
        const RotationSweep s = rotation_sweep(side, us, us_fov, describer(w ? &*w : nullptr), cfg.eval, cfg.seed);
        save_sweep_csv(s, out / "sweep_rot.csv", out / "sweep_rot_plot.dat");
      } else {
        const RegisterResult r = iterative_register(mr, us, *w, p_res, fov, us_fov, cfg.reg);
        save_transform(r.transform, out / "transform.rt");
        save_register_log(r, out / "register_log.csv");
        if (r.status == RegisterStatus::warning) note(g, "warning: " + r.message);
      }
    } else if (*sweep_fov) {
      Volume mr;
      FovMask fov;
      SaliencyMap p_res;
      load_side(mr, fov, p_res);
      std::optional<EncoderWeights<float>> w;
      if (descriptor == "encoder") w = load_weights(input(g, weights_path, "weights"));
      const auto variants = make_sequence_variants(mr, cfg.n_sequences, mix_seed(cfg.seed, 0x5E9));
      std::vector<Volume> us;
      std::vector<FovMask> fovs;
      for (const FovSpec& f : fov_variants(cfg.us.fov)) {
        fovs.push_back(make_fov_mask(mr.grid(), f));
        us.push_back(synthesize_test_us(variants, cfg, fovs.back()));
      }
      const FovSweepReport rep = fov_sweep({&mr, &p_res, &fov}, us, fovs, RigidTransform::identity(),
                                           describer(w ? &*w : nullptr), cfg.eval, cfg.seed, cfg.repeats);
      std::ofstream o(out / "sweep_fov.csv", std::ios::trunc);
      o << "fov,reference_correct,reproduced,fraction\n" << std::setprecision(9);
      for (std::size_t k = 0; k < rep.fraction.size(); ++k)
        o << k + 2 << ',' << rep.reference_correct << ',' << rep.reproduced[k] << ',' << rep.fraction[k] << '\n';
    } else if (*demo) {
      const DemoReport r = run_demo(cfg, out, progress);
      note(g, "summary " + r.summary.string());
    }
    return 0;
  } catch (const Error& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::fprintf(stderr, "error kind=%s message=%s\n", std::string(to_string(e.kind())).c_str(), msg.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error kind=internal message=%s\n", e.what());
    return 1;
  }
}
