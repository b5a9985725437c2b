#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xkey/nn.hpp"
#include "xkey/patch.hpp"
#include "xkey/random.hpp"
#include "xkey/sampler.hpp"
#include "xkey/saliency.hpp"
#include "xkey/synth.hpp"

namespace xkey {

/// Which negative-selection rule to apply.
/// `narrative`: feature term is anchor-to-candidate distance, highest score wins.
/// `literal`: feature term is anchor-to-own-positive distance, lowest score wins.
/// `semi_hard`: narrative, restricted to candidates farther from the anchor than
/// its own positive (all candidates if none is).
enum class MiningRule { narrative, literal, semi_hard };

inline std::string_view to_string(MiningRule r) {
  switch (r) {
    case MiningRule::narrative: return "narrative";
    case MiningRule::literal: return "literal";
    case MiningRule::semi_hard: return "semi_hard";
  }
  return "narrative";
}

inline MiningRule parse_mining_rule(const std::string& s) {
  if (s == "narrative") return MiningRule::narrative;
  if (s == "literal") return MiningRule::literal;
  if (s == "semi_hard") return MiningRule::semi_hard;
  throw Error(ErrorKind::format, "unknown mining rule: " + s);
}

struct TrainConfig {
  int epochs = 200;
  int keypoints_per_epoch = 512;
  int batch = 32;
  double margin = 0.2;
  int warmup_epochs = 20;
  double d_max_mm = 24.0;
  int rotation_ramp_epochs = 100;
  double theta_cap_deg = 30.0;
  double lr_initial = 1e-3;
  double lr_final = 1e-6;
  double weight_decay = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  MiningRule mining = MiningRule::narrative;
  /// Each US positive loses a uniform fraction in [0, this] of its voxels
  /// behind a random plane, as a FoV edge would cut it. 0 disables.
  double positive_mask_max = 0.0;
  std::uint64_t seed = 0;
  int threads = 1;
  int chunk = 8;  ///< patches per forward/backward work item; fixes the reduction order
  EncoderConfig encoder;
  SamplerParams sampler;

  void validate() const {
    require(epochs >= 0, ErrorKind::invalid_argument, "epochs must be >= 0");
    require(keypoints_per_epoch >= 2 && batch >= 2, ErrorKind::invalid_argument,
            "keypoints_per_epoch and batch must be >= 2");
    require(keypoints_per_epoch % batch == 0, ErrorKind::invalid_argument,
            "batch must divide keypoints_per_epoch");
    require(margin >= 0.0, ErrorKind::invalid_argument, "margin must be >= 0");
    require(positive_mask_max >= 0.0 && positive_mask_max < 1.0, ErrorKind::invalid_argument,
            "positive_mask_max must be in [0, 1)");
    require(warmup_epochs > 0 && rotation_ramp_epochs > 0, ErrorKind::invalid_argument,
            "schedule lengths must be > 0");
    require(d_max_mm > 0.0 && theta_cap_deg >= 0.0, ErrorKind::invalid_argument, "D_max must be > 0, theta_cap >= 0");
    require(lr_initial > 0.0 && lr_final > 0.0 && lr_final <= lr_initial, ErrorKind::invalid_argument,
            "learning rates must satisfy 0 < final <= initial");
    require(weight_decay >= 0.0, ErrorKind::invalid_argument, "weight_decay must be >= 0");
    require(chunk >= 1 && threads >= 1, ErrorKind::invalid_argument, "chunk and threads must be >= 1");
    require(encoder.patch_size == sampler.patch_size, ErrorKind::invalid_argument,
            "encoder and sampler patch sizes differ");
    encoder.validate();
  }
};

/// max(0, |a-p|^2 - |a-n|^2 + m)
template <typename Va, typename Vp, typename Vn>
double triplet_loss(const Va& a, const Vp& p, const Vn& n, double margin) {
  const double dp = (a - p).template cast<double>().squaredNorm();
  const double dn = (a - n).template cast<double>().squaredNorm();
  return std::max(0.0, dp - dn + margin);
}

inline double lambda_schedule(double t, double warmup) {
  require(warmup > 0.0, ErrorKind::invalid_argument, "warmup T must be > 0");
  require(t >= 0.0, ErrorKind::invalid_argument, "epoch must be >= 0");
  return std::min(t / warmup, 1.0);
}

inline double rotation_schedule(double epoch, double ramp_epochs, double theta_cap_deg) {
  if (ramp_epochs <= 0.0) return theta_cap_deg;
  return theta_cap_deg * std::clamp(epoch / ramp_epochs, 0.0, 1.0);
}

/// (1 - lambda) * min(|pi - pj| / D_max, 1) - lambda * feature_distance
inline double selection_score(double lambda, const Vec3& pi, const Vec3& pj, double feature_distance,
                              double d_max_mm) {
  return (1.0 - lambda) * std::min((pi - pj).norm() / d_max_mm, 1.0) - lambda * feature_distance;
}

template <typename Va, typename Vc>
double selection_score(double lambda, const Vec3& pi, const Vec3& pj, const Va& anchor_desc, const Vc& cand_desc,
                       double d_max_mm) {
  return selection_score(lambda, pi, pj, (anchor_desc - cand_desc).template cast<double>().norm(), d_max_mm);
}

/// One negative per anchor from the batch's positive descriptors (columns).
/// Ties resolve to the smallest index.
template <typename MatA, typename MatP>
std::size_t mine_negative(std::size_t i, std::span<const Vec3> positions, const MatA& anchors, const MatP& positives,
                          double lambda, double d_max_mm, MiningRule rule = MiningRule::narrative) {
  const std::size_t n = positions.size();
  require(n >= 2, ErrorKind::invalid_argument, "negative mining needs a batch of at least 2");
  require(i < n, ErrorKind::out_of_bounds, "anchor index outside batch");
  const auto a = anchors.col(static_cast<Eigen::Index>(i));
  const double own = (a - positives.col(static_cast<Eigen::Index>(i))).template cast<double>().norm();
  auto scan = [&](bool restrict) {
    std::size_t best = n;
    double best_score = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto c = positives.col(static_cast<Eigen::Index>(j));
      if (restrict && !((a - c).template cast<double>().norm() > own)) continue;
      const double s = rule == MiningRule::literal
                           ? selection_score(lambda, positions[i], positions[j], own, d_max_mm)
                           : selection_score(lambda, positions[i], positions[j], a, c, d_max_mm);
      const bool better = rule == MiningRule::literal ? s < best_score : s > best_score;
      if (best == n || better) {
        best = j;
        best_score = s;
      }
    }
    return best;
  };
  if (rule == MiningRule::semi_hard) {
    const std::size_t j = scan(true);
    if (j != n) return j;
  }
  return scan(false);
}

inline double cosine_lr(int epoch, int epochs, double lr0, double lr1) {
  if (epochs <= 1) return lr0;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr1 + 0.5 * (lr0 - lr1) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adaptive moments with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(const EncoderWeights<T>& w, double beta1, double beta2, double eps, double weight_decay)
      : m_(zero_gradients(w)), v_(zero_gradients(w)), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(EncoderWeights<T>& w, const Gradients<T>& g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < w.params.size(); ++k) {
      auto& p = w.params[k].value;
      m_[k] = T(b1_) * m_[k] + T(1.0 - b1_) * g[k];
      v_[k] = (T(b2_) * v_[k].array() + T(1.0 - b2_) * g[k].array().square()).matrix();
      p *= T(1.0 - lr * wd_);
      const auto mhat = m_[k].array() / T(c1);
      const auto vhat = v_[k].array() / T(c2);
      p.array() -= T(lr) * mhat / (vhat.sqrt() + T(eps_));
    }
  }

  long steps() const { return t_; }

 private:
  Gradients<T> m_, v_;
  double b1_, b2_, eps_, wd_;
  long t_ = 0;
};

/// One training batch: anchor (MR) and positive (US) patches per keypoint.
struct TripletBatch {
  std::vector<Patch> anchors;
  std::vector<Patch> positives;
  std::vector<Vec3> positions;
};

template <typename T>
struct BatchResult {
  double loss = 0.0;
  std::vector<std::size_t> negatives;
  Gradients<T> grads;
  MatrixR<T> anchor_desc, positive_desc;
};

namespace detail {

template <typename T>
struct ChunkPass {
  std::size_t lo = 0, hi = 0;
  bool anchors = true;
  nn::Tape<T> tape;
  MatrixR<T> desc;
};

/// Chunk list covering anchors then positives with fixed boundaries.
template <typename T>
std::vector<ChunkPass<T>> make_chunks(std::size_t n, std::size_t chunk) {
  std::vector<ChunkPass<T>> out;
  for (int side = 0; side < 2; ++side)
    for (std::size_t lo = 0; lo < n; lo += chunk) {
      ChunkPass<T> c;
      c.lo = lo;
      c.hi = std::min(n, lo + chunk);
      c.anchors = side == 0;
      out.push_back(std::move(c));
    }
  return out;
}

}  // namespace detail

/// Mean triplet loss over the batch and its parameter gradient. Negatives are
/// mined with the given lambda unless `fixed_negatives` is supplied.
template <typename T>
BatchResult<T> batch_loss_and_grad(const EncoderWeights<T>& w, const TripletBatch& batch, double margin,
                                   double lambda, double d_max_mm, MiningRule rule, int threads, std::size_t chunk,
                                   const std::vector<std::size_t>* fixed_negatives = nullptr,
                                   bool want_grad = true) {
  const std::size_t n = batch.anchors.size();
  require(n >= 2 && batch.positives.size() == n && batch.positions.size() == n, ErrorKind::invalid_argument,
          "triplet batch needs >= 2 aligned anchors/positives/positions");
  const int s = w.config.patch_size;
  auto chunks = detail::make_chunks<T>(n, chunk);
  parallel_for(chunks.size(), threads, [&](std::size_t c) {
    auto& ch = chunks[c];
    const auto& src = ch.anchors ? batch.anchors : batch.positives;
    const MatrixR<T> in = stack_patches<T>(std::span<const Patch>(src).subspan(ch.lo, ch.hi - ch.lo), s);
    ch.desc = encoder_forward(w, in, static_cast<int>(ch.hi - ch.lo), want_grad ? &ch.tape : nullptr);
  });

  BatchResult<T> r;
  const int d = w.config.descriptor_dim;
  r.anchor_desc.resize(d, static_cast<Eigen::Index>(n));
  r.positive_desc.resize(d, static_cast<Eigen::Index>(n));
  for (const auto& ch : chunks)
    (ch.anchors ? r.anchor_desc : r.positive_desc)
        .middleCols(static_cast<Eigen::Index>(ch.lo), static_cast<Eigen::Index>(ch.hi - ch.lo)) = ch.desc;

  MatrixR<T> ga = MatrixR<T>::Zero(d, static_cast<Eigen::Index>(n));
  MatrixR<T> gp = MatrixR<T>::Zero(d, static_cast<Eigen::Index>(n));
  r.negatives.resize(n);
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = fixed_negatives ? (*fixed_negatives)[i]
                                          : mine_negative(i, std::span<const Vec3>(batch.positions), r.anchor_desc,
                                                          r.positive_desc, lambda, d_max_mm, rule);
    require(j != i && j < n, ErrorKind::invalid_argument, "negative index must differ from anchor and lie in batch");
    r.negatives[i] = j;
    const auto a = r.anchor_desc.col(static_cast<Eigen::Index>(i));
    const auto p = r.positive_desc.col(static_cast<Eigen::Index>(i));
    const auto ng = r.positive_desc.col(static_cast<Eigen::Index>(j));
    const double l = triplet_loss(a, p, ng, margin);
    r.loss += l;
    if (l > 0.0) {
      ga.col(static_cast<Eigen::Index>(i)) += T(2) * inv_n * (ng - p);
      gp.col(static_cast<Eigen::Index>(i)) -= T(2) * inv_n * (a - p);
      gp.col(static_cast<Eigen::Index>(j)) += T(2) * inv_n * (a - ng);
    }
  }
  r.loss /= static_cast<double>(n);
  if (!want_grad) return r;

  std::vector<Gradients<T>> partial(chunks.size());
  parallel_for(chunks.size(), threads, [&](std::size_t c) {
    const auto& ch = chunks[c];
    partial[c] = zero_gradients(w);
    const MatrixR<T>& g = ch.anchors ? ga : gp;
    const MatrixR<T> gslice = g.middleCols(static_cast<Eigen::Index>(ch.lo), static_cast<Eigen::Index>(ch.hi - ch.lo));
    encoder_backward(w, ch.tape, gslice, partial[c]);
  });
  r.grads = zero_gradients(w);
  for (const auto& pg : partial)
    for (std::size_t k = 0; k < pg.size(); ++k) r.grads[k] += pg[k];
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double lambda = 0.0;
  double theta_max_deg = 0.0;
};

struct TrainResult {
  EncoderWeights<float> weights;
  std::vector<EpochRecord> history;
};

inline void save_loss_history(const std::vector<EpochRecord>& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write loss history: " + path.string());
  out << "epoch,mean_loss,lambda,theta_max\n" << std::setprecision(9);
  for (const auto& r : h) out << r.epoch << ',' << r.mean_loss << ',' << r.lambda << ',' << r.theta_max_deg << '\n';
}

/// Zeroes the voxels of `p` that lie beyond a plane with normal `n` through the
/// patch, keeping all but round(fraction * s^3) voxels. Ties break by index.
inline void mask_behind_plane(Patch& p, const Vec3& n, double fraction) {
  const int s = p.size;
  const std::size_t total = p.values.size();
  const auto drop = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
  if (drop == 0) return;
  std::vector<std::pair<double, std::size_t>> proj(total);
  const double c = 0.5 * (s - 1);
  std::size_t i = 0;
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x, ++i) proj[i] = {n.dot(Vec3(x - c, y - c, z - c)), i};
  std::nth_element(proj.begin(), proj.begin() + static_cast<std::ptrdiff_t>(total - drop), proj.end());
  for (std::size_t k = total - drop; k < total; ++k) p.values[proj[k].second] = 0.0f;
}

/// Builds the anchor/positive patches for a set of keypoints. Anchors are MR
/// patches rotated about a random axis by a uniform angle in [0, theta_max].
/// Positives are optionally cut by a random plane (see mask_behind_plane).
inline TripletBatch make_triplet_batch(const Volume& mr, const Volume& us, std::span<const Keypoint> kps, int s,
                                       double theta_max_deg, Rng& rng, double positive_mask_max = 0.0) {
  TripletBatch b;
  for (const Keypoint& k : kps) {
    Mat3 r = Mat3::Identity();
    if (theta_max_deg > 0.0) {
      const Vec3 axis = random_unit_vector(rng);
      r = axis_angle(axis, uniform(rng, 0.0, theta_max_deg));
    }
    b.anchors.push_back(extract_patch(mr, k, s, r, Modality::mr));
    b.positives.push_back(extract_patch(us, k, s, Mat3::Identity(), Modality::us));
    if (positive_mask_max > 0.0) {
      const Vec3 n = random_unit_vector(rng);
      mask_behind_plane(b.positives.back(), n, uniform(rng, 0.0, positive_mask_max));
    }
    b.positions.push_back(k.position_mm);
  }
  return b;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// The weights training starts from (the untrained baseline for a config).
inline EncoderWeights<float> initial_weights(const TrainConfig& cfg) {
  return init_encoder<float>(cfg.encoder, mix_seed(cfg.seed, 0x7701));
}

inline TrainResult train_encoder(const Volume& mr, const SynthDataset& ds, const SaliencyMap& p_res,
                                 const FovMask& fov, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(!ds.items.empty(), ErrorKind::invalid_argument, "training needs a nonempty synthetic dataset");
  require_congruent(mr.grid(), p_res.grid(), "train");
  TrainResult res;
  res.weights = initial_weights(cfg);
  AdamW<float> opt(res.weights, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  const int iters = cfg.keypoints_per_epoch / cfg.batch;

  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng(mix_seed(cfg.seed, 0x100000 + static_cast<std::uint64_t>(e)));
    const std::size_t item = std::uniform_int_distribution<std::size_t>(0, ds.items.size() - 1)(rng);
    const Volume& us = ds.items[item].volume;
    const auto kps = sample_keypoints(p_res, fov, static_cast<std::size_t>(cfg.keypoints_per_epoch), cfg.sampler,
                                      mix_seed(cfg.seed, 0x200000 + static_cast<std::uint64_t>(e)));
    const double lambda = lambda_schedule(e, cfg.warmup_epochs);
    const double theta = rotation_schedule(e, cfg.rotation_ramp_epochs, cfg.theta_cap_deg);
    const double lr = cosine_lr(e, cfg.epochs, cfg.lr_initial, cfg.lr_final);
    double loss_sum = 0.0;
    for (int it = 0; it < iters; ++it) {
      const auto part = std::span<const Keypoint>(kps).subspan(static_cast<std::size_t>(it * cfg.batch),
                                                              static_cast<std::size_t>(cfg.batch));
      const TripletBatch batch =
          make_triplet_batch(mr, us, part, cfg.encoder.patch_size, theta, rng, cfg.positive_mask_max);
      const auto r = batch_loss_and_grad(res.weights, batch, cfg.margin, lambda, cfg.d_max_mm, cfg.mining,
                                         cfg.threads, static_cast<std::size_t>(cfg.chunk));
      if (!std::isfinite(r.loss))
        throw Error(ErrorKind::numeric, "non-finite training loss at epoch " + std::to_string(e + 1) +
                                            ", iteration " + std::to_string(it + 1) + ", lr " + std::to_string(lr));
      loss_sum += r.loss;
      opt.step(res.weights, r.grads, lr);
    }
    EpochRecord rec{e + 1, loss_sum / iters, lambda, theta};
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Compares analytic parameter gradients of the mean batch triplet loss with
/// fourth-order central finite differences, step h = 1e-4 * max(1, |theta|). Negatives are
/// held fixed so the loss is a smooth function of the weights away from hinges.
/// Gradients below `abs_floor` in magnitude are compared absolutely.
inline GradcheckReport gradcheck(const EncoderWeights<double>& w0, const TripletBatch& batch,
                                 const std::vector<std::size_t>& negatives, double margin, int samples_per_tensor,
                                 std::uint64_t seed, double abs_floor = 1e-7) {
  EncoderWeights<double> w = w0;
  const auto base = batch_loss_and_grad(w, batch, margin, 0.0, 1.0, MiningRule::narrative, 1, 8, &negatives);
  Rng rng(mix_seed(seed, 0x6C));
  GradcheckReport rep;
  for (std::size_t k = 0; k < w.params.size(); ++k) {
    auto& p = w.params[k].value;
    const auto size = static_cast<std::size_t>(p.size());
    std::vector<std::size_t> idx;
    if (size <= static_cast<std::size_t>(samples_per_tensor)) {
      for (std::size_t i = 0; i < size; ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, size - 1);
      for (int s = 0; s < samples_per_tensor; ++s) idx.push_back(pick(rng));
    }
    for (std::size_t i : idx) {
      const double orig = p.data()[i];
      // Normalizing short pre-descriptors makes the loss sharply curved; keep h small.
      const double h = 1e-4 * std::max(1.0, std::abs(orig));
      auto loss_at = [&](double v) {
        p.data()[i] = v;
        return batch_loss_and_grad(w, batch, margin, 0.0, 1.0, MiningRule::narrative, 1, 8, &negatives, false).loss;
      };
      const double numeric =
          (-loss_at(orig + 2 * h) + 8 * loss_at(orig + h) - 8 * loss_at(orig - h) + loss_at(orig - 2 * h)) / (12.0 * h);
      p.data()[i] = orig;
      const double analytic = base.grads[k].data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), abs_floor});
      const double rel = std::abs(numeric - analytic) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = w.params[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace xkey
