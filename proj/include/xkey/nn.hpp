#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xkey/error.hpp"
#include "xkey/parallel.hpp"
#include "xkey/patch.hpp"
#include "xkey/random.hpp"

namespace xkey {

template <typename T>
using MatrixR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class EncoderArch { residual, linear };

/// Shape of the shared patch encoder.
///
/// `residual`: strided 3x3x3 stem, then one stage per entry of `widths`
/// (a strided transition conv for every stage after the first, followed by
/// `blocks_per_stage` two-conv residual blocks), global average pooling,
/// a linear projection to `descriptor_dim` and L2 normalisation. SiLU is the
/// nonlinearity throughout.
///
/// `linear`: flatten -> linear -> L2 normalisation (used for gradient checks).
struct EncoderConfig {
  EncoderArch arch = EncoderArch::residual;
  int patch_size = 16;
  int descriptor_dim = 64;
  std::vector<int> widths{16, 32, 64};
  int blocks_per_stage = 1;

  void validate() const {
    require(patch_size >= 4, ErrorKind::invalid_argument, "encoder patch_size must be >= 4");
    require(descriptor_dim >= 1, ErrorKind::invalid_argument, "descriptor_dim must be >= 1");
    if (arch == EncoderArch::residual) {
      require(!widths.empty(), ErrorKind::invalid_argument, "residual encoder needs at least one stage");
      require(blocks_per_stage >= 0, ErrorKind::invalid_argument, "blocks_per_stage must be >= 0");
      int side = patch_size;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        require(widths[i] >= 1, ErrorKind::invalid_argument, "stage widths must be >= 1");
        side = (side + 1) / 2;
      }
      require(side >= 1, ErrorKind::invalid_argument, "patch too small for the number of stages");
    }
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline std::string_view to_string(EncoderArch a) { return a == EncoderArch::residual ? "residual" : "linear"; }

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  MatrixR<T> value;
};

template <typename T>
struct EncoderWeights {
  static constexpr const char* version_tag = "xkey-encoder-v1";
  EncoderConfig config;
  std::vector<Param<T>> params;

  template <typename U>
  EncoderWeights<U> cast() const {
    EncoderWeights<U> out;
    out.config = config;
    for (const auto& p : params) out.params.push_back({p.name, p.shape, p.value.template cast<U>()});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.value.size());
    return n;
  }
};

template <typename T>
using Gradients = std::vector<MatrixR<T>>;

template <typename T>
Gradients<T> zero_gradients(const EncoderWeights<T>& w) {
  Gradients<T> g;
  for (const auto& p : w.params) g.push_back(MatrixR<T>::Zero(p.value.rows(), p.value.cols()));
  return g;
}

namespace nn {

inline int conv_out_side(int side, int stride) { return (side - 1) / stride + 1; }

/// Valid output range [lo, hi) along one axis for kernel tap k (padding 1).
inline std::pair<int, int> tap_range(int side_in, int so, int stride, int k) {
  int lo = 0;
  while (lo < so && lo * stride + k - 1 < 0) ++lo;
  int hi = so;
  while (hi > lo && (hi - 1) * stride + k - 1 >= side_in) --hi;
  return {lo, hi};
}

/// For stride 1 a tap is a flat shift of the input plus a validity mask.
template <typename T>
struct ShiftTap {
  std::ptrdiff_t offset = 0;
  std::vector<T> mask;
};

template <typename T>
std::vector<ShiftTap<T>> shift_taps(int side) {
  std::vector<ShiftTap<T>> taps(27);
  const std::size_t v = static_cast<std::size_t>(side) * side * side;
  for (int kz = 0; kz < 3; ++kz)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        ShiftTap<T>& t = taps[kz * 9 + ky * 3 + kx];
        t.offset = (static_cast<std::ptrdiff_t>(kz - 1) * side + (ky - 1)) * side + (kx - 1);
        t.mask.assign(v, T(0));
        for (int z = 0; z < side; ++z)
          for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
              const int iz = z + kz - 1, iy = y + ky - 1, ix = x + kx - 1;
              if (iz >= 0 && iz < side && iy >= 0 && iy < side && ix >= 0 && ix < side)
                t.mask[(static_cast<std::size_t>(z) * side + y) * side + x] = T(1);
            }
      }
  return taps;
}

/// Rows (c, kz, ky, kx) x columns (n, oz, oy, ox) for a 3x3x3 kernel with padding 1.
template <typename T>
void im2col(const MatrixR<T>& in, int channels, int n, int side_in, int stride, MatrixR<T>& col) {
  const int so = conv_out_side(side_in, stride);
  const std::size_t vin = static_cast<std::size_t>(side_in) * side_in * side_in;
  const std::size_t vout = static_cast<std::size_t>(so) * so * so;
  col.resize(channels * 27, static_cast<Eigen::Index>(n * vout));
  if (stride == 1) {
    const auto taps = shift_taps<T>(side_in);
    const auto v = static_cast<std::ptrdiff_t>(vin);
    for (int c = 0; c < channels; ++c)
      for (int k = 0; k < 27; ++k) {
        const ShiftTap<T>& t = taps[k];
        const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, -t.offset), j1 = std::min(v, v - t.offset);
        const T* m = t.mask.data();
        for (int b = 0; b < n; ++b) {
          const T* src = in.row(c).data() + b * v + t.offset;
          T* out = col.row(c * 27 + k).data() + b * v;
          std::fill(out, out + j0, T(0));
          for (std::ptrdiff_t j = j0; j < j1; ++j) out[j] = src[j] * m[j];
          std::fill(out + j1, out + v, T(0));
        }
      }
    return;
  }
  for (int c = 0; c < channels; ++c) {
    const T* src_c = in.row(c).data();
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = col.row(c * 27 + kz * 9 + ky * 3 + kx).data();
          const auto [xlo, xhi] = tap_range(side_in, so, stride, kx);
          for (int b = 0; b < n; ++b) {
            const T* src = src_c + b * vin;
            for (int oz = 0; oz < so; ++oz) {
              const int iz = oz * stride + kz - 1;
              for (int oy = 0; oy < so; ++oy) {
                const int iy = oy * stride + ky - 1;
                T* out = dst + ((static_cast<std::size_t>(b) * so + oz) * so + oy) * so;
                if (iz < 0 || iz >= side_in || iy < 0 || iy >= side_in) {
                  std::fill(out, out + so, T(0));
                  continue;
                }
                const T* row = src + (static_cast<std::size_t>(iz) * side_in + iy) * side_in + (kx - 1);
                std::fill(out, out + xlo, T(0));
                if (stride == 1) {
                  std::copy(row + xlo, row + xhi, out + xlo);
                } else {
                  for (int ox = xlo; ox < xhi; ++ox) out[ox] = row[ox * stride];
                }
                std::fill(out + xhi, out + so, T(0));
              }
            }
          }
        }
  }
}

template <typename T>
void col2im(const MatrixR<T>& col, int channels, int n, int side_in, int stride, MatrixR<T>& grad_in) {
  const int so = conv_out_side(side_in, stride);
  const std::size_t vin = static_cast<std::size_t>(side_in) * side_in * side_in;
  grad_in.setZero(channels, static_cast<Eigen::Index>(n * vin));
  if (stride == 1) {
    const auto taps = shift_taps<T>(side_in);
    const auto v = static_cast<std::ptrdiff_t>(vin);
    for (int c = 0; c < channels; ++c)
      for (int k = 0; k < 27; ++k) {
        const ShiftTap<T>& t = taps[k];
        const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, -t.offset), j1 = std::min(v, v - t.offset);
        const T* m = t.mask.data();
        for (int b = 0; b < n; ++b) {
          const T* g = col.row(c * 27 + k).data() + b * v;
          T* dst = grad_in.row(c).data() + b * v + t.offset;
          for (std::ptrdiff_t j = j0; j < j1; ++j) dst[j] += g[j] * m[j];
        }
      }
    return;
  }
  for (int c = 0; c < channels; ++c) {
    T* dst_c = grad_in.row(c).data();
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = col.row(c * 27 + kz * 9 + ky * 3 + kx).data();
          const auto [xlo, xhi] = tap_range(side_in, so, stride, kx);
          for (int b = 0; b < n; ++b) {
            T* dst = dst_c + b * vin;
            for (int oz = 0; oz < so; ++oz) {
              const int iz = oz * stride + kz - 1;
              if (iz < 0 || iz >= side_in) continue;
              for (int oy = 0; oy < so; ++oy) {
                const int iy = oy * stride + ky - 1;
                if (iy < 0 || iy >= side_in) continue;
                const T* g = src + ((static_cast<std::size_t>(b) * so + oz) * so + oy) * so;
                T* row = dst + (static_cast<std::size_t>(iz) * side_in + iy) * side_in + (kx - 1);
                for (int ox = xlo; ox < xhi; ++ox) row[ox * stride] += g[ox];
              }
            }
          }
        }
  }
}

template <typename T>
MatrixR<T> silu(const MatrixR<T>& x) {
  return (x.array() / (T(1) + (-x.array()).exp())).matrix();
}

/// grad * d silu(x) / dx
template <typename T>
MatrixR<T> silu_backward(const MatrixR<T>& x, const MatrixR<T>& grad) {
  const auto sig = (T(1) / (T(1) + (-x.array()).exp())).eval();
  return (grad.array() * sig * (T(1) + x.array() * (T(1) - sig))).matrix();
}

struct ConvRef {
  int w = 0, b = 0;  // parameter indices
  int cin = 0, cout = 0, stride = 1;
};

struct BlockRef {
  ConvRef conv1, conv2;
};

struct StageRef {
  bool has_transition = false;
  ConvRef transition;
  std::vector<BlockRef> blocks;
};

/// Index map from layers to parameter slots, derived from the config.
struct Layout {
  ConvRef stem;
  std::vector<StageRef> stages;
  int head_w = 0, head_b = 0;
};

inline Layout make_layout(const EncoderConfig& cfg) {
  Layout l;
  int next = 0;
  auto conv = [&](int cin, int cout, int stride) {
    ConvRef c{next, next + 1, cin, cout, stride};
    next += 2;
    return c;
  };
  if (cfg.arch == EncoderArch::linear) {
    l.head_w = 0;
    l.head_b = 1;
    return l;
  }
  l.stem = conv(1, cfg.widths[0], 2);
  for (std::size_t s = 0; s < cfg.widths.size(); ++s) {
    StageRef st;
    if (s > 0) {
      st.has_transition = true;
      st.transition = conv(cfg.widths[s - 1], cfg.widths[s], 2);
    }
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      BlockRef blk;
      blk.conv1 = conv(cfg.widths[s], cfg.widths[s], 1);
      blk.conv2 = conv(cfg.widths[s], cfg.widths[s], 1);
      st.blocks.push_back(blk);
    }
    l.stages.push_back(st);
  }
  l.head_w = next;
  l.head_b = next + 1;
  return l;
}

template <typename T>
struct ConvTape {
  MatrixR<T> input;  ///< layer input (needed for the weight gradient)
  int side_in = 0;
  MatrixR<T> pre;    ///< pre-activation output
};

template <typename T>
struct BlockTape {
  ConvTape<T> c1, c2;
  MatrixR<T> sum;    ///< conv2 output + skip, before the nonlinearity
};

template <typename T>
struct StageTape {
  ConvTape<T> transition;
  std::vector<BlockTape<T>> blocks;
};

template <typename T>
struct Tape {
  int n = 0;
  ConvTape<T> stem;
  std::vector<StageTape<T>> stages;
  int final_side = 0;
  MatrixR<T> pooled;     ///< channels x n (or flattened input for the linear arch)
  MatrixR<T> projected;  ///< descriptor_dim x n, before normalisation
};

template <typename T>
MatrixR<T> conv_forward(const EncoderWeights<T>& w, const ConvRef& c, const MatrixR<T>& in, int n, int side_in,
                        MatrixR<T>& scratch) {
  im2col(in, c.cin, n, side_in, c.stride, scratch);
  MatrixR<T> out = w.params[c.w].value * scratch;
  out.colwise() += w.params[c.b].value.col(0);
  return out;
}

/// Accumulates weight/bias gradients; returns the input gradient if requested.
template <typename T>
void conv_backward(const EncoderWeights<T>& w, const ConvRef& c, const ConvTape<T>& tape, int n,
                   const MatrixR<T>& grad_out, Gradients<T>& grads, MatrixR<T>* grad_in, MatrixR<T>& scratch) {
  im2col(tape.input, c.cin, n, tape.side_in, c.stride, scratch);
  grads[c.w].noalias() += grad_out * scratch.transpose();
  grads[c.b].col(0) += grad_out.rowwise().sum().transpose();
  if (grad_in) {
    const MatrixR<T> gcol = w.params[c.w].value.transpose() * grad_out;
    col2im(gcol, c.cin, n, tape.side_in, c.stride, *grad_in);
  }
}

}  // namespace nn

/// Fan-in scaled uniform convolution weights, zero biases, small uniform head.
template <typename T>
EncoderWeights<T> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  EncoderWeights<T> w;
  w.config = cfg;
  Rng rng(mix_seed(seed, 0x1417));
  auto uniform_matrix = [&](int rows, int cols, double bound) {
    MatrixR<T> m(rows, cols);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
    return m;
  };
  auto add_conv = [&](const std::string& name, int cin, int cout) {
    const int fan_in = cin * 27;
    w.params.push_back({name + ".w", {cout, cin, 3, 3, 3}, uniform_matrix(cout, fan_in, std::sqrt(6.0 / fan_in))});
    w.params.push_back({name + ".b", {cout}, MatrixR<T>::Zero(cout, 1)});
  };
  if (cfg.arch == EncoderArch::linear) {
    const int in = cfg.patch_size * cfg.patch_size * cfg.patch_size;
    w.params.push_back({"linear.w", {cfg.descriptor_dim, in}, uniform_matrix(cfg.descriptor_dim, in, std::sqrt(1.0 / in))});
    w.params.push_back({"linear.b", {cfg.descriptor_dim}, MatrixR<T>::Zero(cfg.descriptor_dim, 1)});
    return w;
  }
  add_conv("stem", 1, cfg.widths[0]);
  for (std::size_t s = 0; s < cfg.widths.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    if (s > 0) add_conv(stage + ".down", cfg.widths[s - 1], cfg.widths[s]);
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string blk = stage + ".block" + std::to_string(b + 1);
      add_conv(blk + ".conv1", cfg.widths[s], cfg.widths[s]);
      add_conv(blk + ".conv2", cfg.widths[s], cfg.widths[s]);
    }
  }
  const int c = cfg.widths.back();
  w.params.push_back({"head.w", {cfg.descriptor_dim, c}, uniform_matrix(cfg.descriptor_dim, c, std::sqrt(1.0 / c))});
  w.params.push_back({"head.b", {cfg.descriptor_dim}, MatrixR<T>::Zero(cfg.descriptor_dim, 1)});
  return w;
}

template <typename T>
void check_weights(const EncoderWeights<T>& w) {
  w.config.validate();
  const EncoderWeights<T> ref = init_encoder<T>(w.config, 0);
  require(ref.params.size() == w.params.size(), ErrorKind::format, "encoder tensor count does not match config");
  for (std::size_t i = 0; i < ref.params.size(); ++i) {
    require(ref.params[i].name == w.params[i].name && ref.params[i].shape == w.params[i].shape &&
                ref.params[i].value.rows() == w.params[i].value.rows() &&
                ref.params[i].value.cols() == w.params[i].value.cols(),
            ErrorKind::format, "encoder tensor mismatch at " + ref.params[i].name);
    require(w.params[i].value.allFinite(), ErrorKind::numeric, "non-finite encoder weight in " + w.params[i].name);
  }
}

/// Stacks patches into the encoder input layout (1 x n*s^3), each scaled to
/// unit RMS so descriptors do not depend on global intensity gain. All-zero
/// patches stay zero.
template <typename T>
MatrixR<T> stack_patches(std::span<const Patch> patches, int patch_size) {
  const std::size_t vox = static_cast<std::size_t>(patch_size) * patch_size * patch_size;
  MatrixR<T> in(1, static_cast<Eigen::Index>(patches.size() * vox));
  for (std::size_t i = 0; i < patches.size(); ++i) {
    require(patches[i].size == patch_size, ErrorKind::invalid_argument,
            "patch size " + std::to_string(patches[i].size) + " does not match encoder patch size " +
                std::to_string(patch_size));
    double ss = 0.0;
    for (float v : patches[i].values) ss += static_cast<double>(v) * v;
    const double rms = std::sqrt(ss / static_cast<double>(vox));
    const double scale = rms > 0.0 ? 1.0 / rms : 1.0;
    for (std::size_t k = 0; k < vox; ++k)
      in(0, static_cast<Eigen::Index>(i * vox + k)) = static_cast<T>(scale * patches[i].values[k]);
  }
  return in;
}

/// Forward pass over n stacked patches; returns unit-norm descriptors (d x n).
template <typename T>
MatrixR<T> encoder_forward(const EncoderWeights<T>& w, const MatrixR<T>& input, int n, nn::Tape<T>* tape = nullptr) {
  const EncoderConfig& cfg = w.config;
  const nn::Layout layout = nn::make_layout(cfg);
  MatrixR<T> scratch;
  MatrixR<T> pooled;

  if (cfg.arch == EncoderArch::linear) {
    const int vox = cfg.patch_size * cfg.patch_size * cfg.patch_size;
    pooled = Eigen::Map<const MatrixR<T>>(input.data(), n, vox).transpose();
  } else {
    int side = cfg.patch_size;
    nn::ConvTape<T> stem{tape ? input : MatrixR<T>(), side, {}};
    MatrixR<T> z = nn::conv_forward(w, layout.stem, input, n, side, scratch);
    side = nn::conv_out_side(side, layout.stem.stride);
    MatrixR<T> act = nn::silu(z);
    if (tape) {
      tape->n = n;
      stem.pre = std::move(z);
      tape->stem = std::move(stem);
      tape->stages.clear();
    }
    for (const nn::StageRef& st : layout.stages) {
      nn::StageTape<T> stt;
      if (st.has_transition) {
        MatrixR<T> zt = nn::conv_forward(w, st.transition, act, n, side, scratch);
        if (tape) stt.transition = {act, side, zt};
        side = nn::conv_out_side(side, st.transition.stride);
        act = nn::silu(zt);
      }
      for (const nn::BlockRef& blk : st.blocks) {
        MatrixR<T> z1 = nn::conv_forward(w, blk.conv1, act, n, side, scratch);
        MatrixR<T> a1 = nn::silu(z1);
        MatrixR<T> sum = nn::conv_forward(w, blk.conv2, a1, n, side, scratch);
        if (tape) {
          nn::BlockTape<T> bt;
          bt.c1 = {act, side, z1};
          bt.c2 = {a1, side, sum};
          sum += act;
          bt.sum = sum;
          stt.blocks.push_back(std::move(bt));
        } else {
          sum += act;
        }
        act = nn::silu(sum);
      }
      if (tape) tape->stages.push_back(std::move(stt));
    }
    const int vox = side * side * side;
    pooled.resize(act.rows(), n);
    for (int b = 0; b < n; ++b) pooled.col(b) = act.middleCols(static_cast<Eigen::Index>(b) * vox, vox).rowwise().mean();
    if (tape) tape->final_side = side;
  }

  MatrixR<T> y = w.params[layout.head_w].value * pooled;
  y.colwise() += w.params[layout.head_b].value.col(0);
  MatrixR<T> out(y.rows(), y.cols());
  for (int b = 0; b < n; ++b) out.col(b) = y.col(b) / std::sqrt(y.col(b).squaredNorm() + T(1e-12));
  if (tape) {
    tape->n = n;
    tape->pooled = std::move(pooled);
    tape->projected = std::move(y);
  }
  return out;
}

/// Backward pass: accumulates d loss / d params given d loss / d descriptors.
template <typename T>
void encoder_backward(const EncoderWeights<T>& w, const nn::Tape<T>& tape, const MatrixR<T>& grad_desc,
                      Gradients<T>& grads) {
  const EncoderConfig& cfg = w.config;
  const nn::Layout layout = nn::make_layout(cfg);
  const int n = tape.n;

  // L2 normalisation: dx = (g - y (y.g)) / ||x||
  MatrixR<T> gy(grad_desc.rows(), n);
  for (int b = 0; b < n; ++b) {
    const auto x = tape.projected.col(b);
    const T norm = std::sqrt(x.squaredNorm() + T(1e-12));
    const auto y = (x / norm).eval();
    gy.col(b) = (grad_desc.col(b) - y * y.dot(grad_desc.col(b))) / norm;
  }
  grads[layout.head_w].noalias() += gy * tape.pooled.transpose();
  grads[layout.head_b].col(0) += gy.rowwise().sum().transpose();
  if (cfg.arch == EncoderArch::linear) return;

  const MatrixR<T> gpooled = w.params[layout.head_w].value.transpose() * gy;
  int side = tape.final_side;
  const int vox = side * side * side;
  MatrixR<T> g(gpooled.rows(), static_cast<Eigen::Index>(n) * vox);
  for (int b = 0; b < n; ++b)
    g.middleCols(static_cast<Eigen::Index>(b) * vox, vox) = (gpooled.col(b) / T(vox)).replicate(1, vox);

  MatrixR<T> scratch, gin;
  for (int s = static_cast<int>(layout.stages.size()) - 1; s >= 0; --s) {
    const nn::StageRef& st = layout.stages[s];
    const nn::StageTape<T>& stt = tape.stages[s];
    for (int bi = static_cast<int>(st.blocks.size()) - 1; bi >= 0; --bi) {
      const nn::BlockRef& blk = st.blocks[bi];
      const nn::BlockTape<T>& bt = stt.blocks[bi];
      const MatrixR<T> gsum = nn::silu_backward(bt.sum, g);
      nn::conv_backward(w, blk.conv2, bt.c2, n, gsum, grads, &gin, scratch);
      const MatrixR<T> gz1 = nn::silu_backward(bt.c1.pre, gin);
      nn::conv_backward(w, blk.conv1, bt.c1, n, gz1, grads, &gin, scratch);
      g = gin + gsum;
    }
    if (st.has_transition) {
      const MatrixR<T> gz = nn::silu_backward(stt.transition.pre, g);
      nn::conv_backward(w, st.transition, stt.transition, n, gz, grads, &gin, scratch);
      g = std::move(gin);
    }
  }
  const MatrixR<T> gz = nn::silu_backward(tape.stem.pre, g);
  nn::conv_backward(w, layout.stem, tape.stem, n, gz, grads, static_cast<MatrixR<T>*>(nullptr), scratch);
}

/// Inference over any number of patches. Each patch runs through its own
/// forward pass so a descriptor never depends on its batch neighbours or
/// position (batched GEMM would change float summation order).
template <typename T>
MatrixR<T> encode_patches(const EncoderWeights<T>& w, std::span<const Patch> patches, int threads = 1) {
  const std::size_t n = patches.size();
  MatrixR<T> out(w.config.descriptor_dim, static_cast<Eigen::Index>(n));
  parallel_for(n, threads, [&](std::size_t i) {
    const MatrixR<T> in = stack_patches<T>(patches.subspan(i, 1), w.config.patch_size);
    out.col(static_cast<Eigen::Index>(i)) = encoder_forward(w, in, 1).col(0);
  });
  return out;
}

inline DescriptorSet encode(const EncoderWeights<float>& w, std::span<const Patch> patches, int threads = 1) {
  return encode_patches(w, patches, threads);
}

inline Eigen::VectorXf encode(const EncoderWeights<float>& w, const Patch& p) {
  return encode_patches(w, std::span<const Patch>(&p, 1)).col(0);
}

// ---------------------------------------------------------------------------
// Weights archive: <dir>/manifest.txt + <dir>/<tensor>.f32 (little-endian).

inline void save_weights(const EncoderWeights<float>& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt", std::ios::trunc);
  require(static_cast<bool>(man), ErrorKind::io, "cannot write weights manifest in " + dir.string());
  const EncoderConfig& c = w.config;
  man << EncoderWeights<float>::version_tag << '\n';
  man << "arch " << to_string(c.arch) << '\n';
  man << "patch_size " << c.patch_size << '\n';
  man << "descriptor_dim " << c.descriptor_dim << '\n';
  man << "widths";
  for (int x : c.widths) man << ' ' << x;
  man << '\n' << "blocks_per_stage " << c.blocks_per_stage << '\n';
  man << "tensors " << w.params.size() << '\n';
  for (const auto& p : w.params) {
    man << p.name;
    for (int d : p.shape) man << ' ' << d;
    man << '\n';
    std::vector<std::uint32_t> words(static_cast<std::size_t>(p.value.size()));
    for (std::size_t i = 0; i < words.size(); ++i)
      words[i] = detail::to_little_endian(std::bit_cast<std::uint32_t>(p.value.data()[i]));
    std::ofstream out(dir / (p.name + ".f32"), std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write tensor " + p.name);
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  }
  require(static_cast<bool>(man), ErrorKind::io, "weights manifest write failed");
}

inline EncoderWeights<float> load_weights(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  require(static_cast<bool>(man), ErrorKind::io, "missing weights manifest: " + (dir / "manifest.txt").string());
  std::string tag;
  std::getline(man, tag);
  require(tag == EncoderWeights<float>::version_tag, ErrorKind::format, "unsupported weights version: " + tag);
  EncoderConfig cfg;
  cfg.widths.clear();
  std::size_t n_tensors = 0;
  std::string line;
  while (std::getline(man, line)) {
    std::istringstream row(line);
    std::string key;
    row >> key;
    if (key == "arch") {
      std::string a;
      row >> a;
      require(a == "residual" || a == "linear", ErrorKind::format, "unknown encoder arch: " + a);
      cfg.arch = a == "residual" ? EncoderArch::residual : EncoderArch::linear;
    } else if (key == "patch_size") {
      row >> cfg.patch_size;
    } else if (key == "descriptor_dim") {
      row >> cfg.descriptor_dim;
    } else if (key == "widths") {
      for (int x; row >> x;) cfg.widths.push_back(x);
    } else if (key == "blocks_per_stage") {
      row >> cfg.blocks_per_stage;
    } else if (key == "tensors") {
      row >> n_tensors;
      break;
    } else {
      throw Error(ErrorKind::format, "unknown weights manifest key: " + key);
    }
  }
  EncoderWeights<float> w = init_encoder<float>(cfg, 0);
  require(w.params.size() == n_tensors, ErrorKind::format, "tensor count does not match encoder config");
  for (auto& p : w.params) {
    require(static_cast<bool>(std::getline(man, line)), ErrorKind::format, "truncated weights manifest");
    std::istringstream row(line);
    std::string name;
    row >> name;
    std::vector<int> shape;
    for (int d; row >> d;) shape.push_back(d);
    require(name == p.name && shape == p.shape, ErrorKind::format, "unexpected tensor entry: " + line);
    const auto path = dir / (p.name + ".f32");
    require(std::filesystem::exists(path), ErrorKind::io, "missing tensor file: " + path.string());
    require(std::filesystem::file_size(path) == static_cast<std::uintmax_t>(p.value.size()) * 4, ErrorKind::format,
            "tensor payload size mismatch: " + path.string());
    std::vector<std::uint32_t> words(static_cast<std::size_t>(p.value.size()));
    std::ifstream in(path, std::ios::binary);
    in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    require(static_cast<bool>(in), ErrorKind::io, "short read: " + path.string());
    for (std::size_t i = 0; i < words.size(); ++i)
      p.value.data()[i] = std::bit_cast<float>(detail::to_little_endian(words[i]));
  }
  check_weights(w);
  return w;
}

}  // namespace xkey
