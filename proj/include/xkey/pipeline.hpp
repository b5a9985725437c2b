#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include "xkey/config.hpp"
#include "xkey/eval.hpp"
#include "xkey/register.hpp"
#include "xkey/saliency.hpp"
#include "xkey/synth.hpp"
#include "xkey/train.hpp"

namespace xkey {

/// Everything derived from the phantom before training.
struct Scenario {
  Volume mr;
  std::vector<Volume> variants;
  SynthDataset dataset;
  FovMask fov;
  Volume test_us;  ///< held-out pseudo-US: all variants fused, unseen remap and speckle
  SaliencyStack saliency;

  MrSide mr_side() const { return {&mr, &saliency.p_res, &fov}; }
};

inline Volume synthesize_test_us(const std::vector<Volume>& variants, const RunConfig& cfg, const FovMask& fov,
                                 std::uint64_t tag = 0) {
  SynthUsParams p = cfg.us;
  p.gamma = cfg.test_gamma;
  const std::uint64_t s = mix_seed(cfg.seed, 0x7E57 + tag);
  p.intensity_map_seed = mix_seed(s, 1);
  p.speckle_seed = mix_seed(s, 2);
  const unsigned all = (1u << variants.size()) - 1u;
  return synthesize_us(fuse_variants(variants, all), p, fov);
}

using ProgressFn = std::function<void(const std::string&)>;

inline Scenario build_scenario(const RunConfig& cfg, const ProgressFn& progress = {}) {
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  Scenario sc;
  PhantomSpec ps = cfg.phantom;
  ps.seed = mix_seed(cfg.seed, ps.seed);
  sc.mr = make_phantom(ps);
  sc.variants = make_sequence_variants(sc.mr, cfg.n_sequences, mix_seed(cfg.seed, 0x5E9));
  say("phantom and " + std::to_string(sc.variants.size()) + " sequence variants ready");
  sc.dataset = build_synth_dataset(sc.variants, cfg.gammas, cfg.us, mix_seed(cfg.seed, 0xDA7A));
  sc.fov = sc.dataset.fov;
  say("synthetic dataset: " + std::to_string(sc.dataset.size()) + " volumes");
  sc.test_us = synthesize_test_us(sc.variants, cfg, sc.fov);
  sc.saliency = build_saliency(sc.mr, sc.dataset, cfg.heatmap, cfg.prior_sigma_mm);
  say("saliency maps ready");
  return sc;
}

/// Three overlapping sector FoVs: the configured one and two with the apex
/// shifted sideways and the axis tilted towards the grid centre.
inline std::vector<FovSpec> fov_variants(const FovSpec& base, double shift_mm = 10.0, double tilt_deg = 8.0) {
  std::vector<FovSpec> out{base};
  const Vec3 a = base.axis.normalized();
  Vec3 u = a.unitOrthogonal();
  const Vec3 v = a.cross(u);
  for (const Vec3& dir : {u, v}) {
    FovSpec f = base;
    f.apex = base.apex + shift_mm * dir;
    f.axis = axis_angle(a.cross(dir).normalized(), tilt_deg) * a;
    out.push_back(f);
  }
  return out;
}

/// Landmarks for TRE: a coarse lattice inside the FoV.
inline std::vector<Vec3> fov_landmarks(const FovMask& fov, double step_mm = 12.0) {
  std::vector<Vec3> out;
  const Grid& g = fov.grid();
  for (const Vec3& p : lattice_candidates(fov, step_mm)) {
    const Index3 c = g.nearest_voxel(p);
    if (g.contains(c[0], c[1], c[2]) && fov(c[0], c[1], c[2])) out.push_back(p);
  }
  require(!out.empty(), ErrorKind::degenerate, "no landmark inside the FoV");
  return out;
}

struct RegistrationTrial {
  RigidTransform perturbation;  ///< applied to the aligned US (MR -> moving coordinates)
  RegisterResult result;
  double tre_mm = 0.0;
  double initial_tre_mm = 0.0;
};

/// Displaces the aligned test US by `t0`, registers it back and scores the
/// cumulative transform against landmarks.
inline RegistrationTrial registration_trial(const Scenario& sc, const EncoderWeights<float>& w, const RunConfig& cfg,
                                            const RigidTransform& t0, std::uint64_t seed) {
  RegistrationTrial tr;
  tr.perturbation = t0;
  const Volume moving = resample_rigid(sc.test_us, t0, sc.mr.grid());
  const FovMask moving_fov = resample_mask(sc.fov, t0, sc.mr.grid());
  RegisterParams rp = cfg.reg;
  rp.seed = seed;
  tr.result = iterative_register(sc.mr, moving, w, sc.saliency.p_res, sc.fov, moving_fov, rp);
  const auto fixed = fov_landmarks(sc.fov);
  std::vector<Vec3> moved;
  for (const Vec3& p : fixed) moved.push_back(t0(p));
  tr.tre_mm = tre(moved, fixed, tr.result.transform);
  tr.initial_tre_mm = tre(moved, fixed, RigidTransform::identity());
  return tr;
}

inline RigidTransform random_perturbation(const Scenario& sc, const RunConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x9E27));
  return random_rigid(rng, cfg.perturb_max_deg, cfg.perturb_max_mm, fov_centroid(sc.fov));
}

struct DemoReport {
  std::filesystem::path summary;
};

/// phantom -> synth -> saliency -> train -> register -> eval, all artifacts in `out`.
inline DemoReport run_demo(const RunConfig& cfg, const std::filesystem::path& out, const ProgressFn& progress = {}) {
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  std::filesystem::create_directories(out);
  write_run_lock(cfg, out);
  const Scenario sc = build_scenario(cfg, progress);
  save_volume(sc.mr, out / "phantom.rawv");
  save_volume(sc.test_us, out / "test_us.rawv");
  save_volume(sc.saliency.p_res.map, out / "p_res.rawv");

  const TrainResult tr = train_encoder(sc.mr, sc.dataset, sc.saliency.p_res, sc.fov, cfg.train, [&](const EpochRecord& r) {
    if (r.epoch == 1 || r.epoch % 10 == 0)
      say("epoch " + std::to_string(r.epoch) + " loss " + std::to_string(r.mean_loss));
  });
  save_weights(tr.weights, out / "weights");
  save_loss_history(tr.history, out / "loss.csv");

  const MatchOutcome mo = evaluate_matching(sc.mr_side(), sc.test_us, sc.fov, RigidTransform::identity(),
                                            encoder_describer(tr.weights, cfg.threads), cfg.eval, cfg.seed);
  save_matches_csv(mo.matches, mo.mr_kps, mo.us_kps, out / "matches.csv");
  save_metrics_csv({{"trained", mo.metrics}}, out / "metrics.csv");

  const RigidTransform t0 = random_perturbation(sc, cfg, cfg.seed);
  const RegistrationTrial rt = registration_trial(sc, tr.weights, cfg, t0, cfg.seed);
  save_transform(rt.result.transform, out / "transform.rt");
  save_transform(t0, out / "perturbation.rt");
  save_register_log(rt.result, out / "register_log.csv");

  DemoReport rep{out / "summary.txt"};
  std::ofstream s(rep.summary, std::ios::trunc);
  require(static_cast<bool>(s), ErrorKind::io, "cannot write summary: " + rep.summary.string());
  s << std::setprecision(9);
  s << "seed " << cfg.seed << '\n';
  s << "dataset_volumes " << sc.dataset.size() << '\n';
  s << "final_loss " << (tr.history.empty() ? 0.0 : tr.history.back().mean_loss) << '\n';
  s << "matches " << mo.metrics.n_matches << '\n';
  s << "precision_pct " << mo.metrics.precision << '\n';
  s << "matching_score_pct " << mo.metrics.matching_score << '\n';
  s << "matched_points " << mo.metrics.matched_points << '\n';
  s << "register_status " << (rt.result.status == RegisterStatus::ok ? "ok" : "warning") << '\n';
  s << "initial_tre_mm " << rt.initial_tre_mm << '\n';
  s << "final_tre_mm " << rt.tre_mm << '\n';
  return rep;
}

}  // namespace xkey
