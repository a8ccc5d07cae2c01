#include "mpg/qfcn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <list>
#include <mutex>
#include <numbers>
#include <ostream>

namespace mpg {

const char* to_string(Interp interp) { return interp == Interp::bilinear ? "bilinear" : "nearest"; }

void ArchConfig::validate() const {
  int down = 1;
  for (int st : strides) {
    require(st == 1 || st == 2, "arch: encoder strides must be 1 or 2");
    down *= st;
  }
  require(resolution >= down && resolution % down == 0, "arch: resolution must be a multiple of the encoder downsampling");
  for (int c : enc_channels) require(c > 0, "arch: encoder channels must be positive");
  require(head_hidden > 0, "arch: head width must be positive");
}

namespace {

double to_float(double x) { return static_cast<double>(static_cast<float>(x)); }

Tensor make_tensor(std::string name, std::vector<int> shape, bool trainable = true) {
  Tensor t;
  t.name = std::move(name);
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  t.shape = std::move(shape);
  t.value.assign(n, 0.0);
  t.m.assign(n, 0.0);
  t.v.assign(n, 0.0);
  t.trainable = trainable;
  return t;
}

void fill_uniform(Tensor& t, double bound, std::uint64_t seed) {
  Rng rng(seed);
  for (double& x : t.value) x = to_float(uniform(rng, -bound, bound));
}

const char* kBranchNames[3] = {"move", "grasp", "push"};

}  // namespace

NetParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  NetParams p;
  p.arch = arch;
  const auto& ch = arch.enc_channels;
  auto add_encoder = [&](const std::string& prefix, int in_ch) {
    int cin = in_ch;
    for (int l = 0; l < 3; ++l) {
      p.tensors.push_back(make_tensor(prefix + ".conv" + std::to_string(l + 1) + ".w", {ch[l], cin, 3, 3}));
      p.tensors.push_back(make_tensor(prefix + ".conv" + std::to_string(l + 1) + ".b", {ch[l]}));
      cin = ch[l];
    }
  };
  add_encoder("goal", 1);
  const int feat = 3 * ch[2];
  for (int b = 0; b < 3; ++b) {
    const std::string name = kBranchNames[b];
    add_encoder(name + ".color", 3);
    add_encoder(name + ".depth", 1);
    p.tensors.push_back(make_tensor(name + ".head1.w", {arch.head_hidden, feat}));
    p.tensors.push_back(make_tensor(name + ".head1.b", {arch.head_hidden}));
    p.tensors.push_back(make_tensor(name + ".bn.gamma", {arch.head_hidden}));
    p.tensors.push_back(make_tensor(name + ".bn.beta", {arch.head_hidden}));
    p.tensors.push_back(make_tensor(name + ".bn.running_mean", {arch.head_hidden}, false));
    p.tensors.push_back(make_tensor(name + ".bn.running_var", {arch.head_hidden}, false));
    p.tensors.push_back(make_tensor(name + ".head2.w", {1, arch.head_hidden}));
    p.tensors.push_back(make_tensor(name + ".head2.b", {1}));
  }
  require(static_cast<int>(p.tensors.size()) == NetParams::kGoalTensors + 3 * NetParams::kBranchTensors,
          "init_params: layout mismatch");

  // He-uniform for layers feeding a ReLU, plain fan-in scaling for the output.
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    Tensor& t = p.tensors[i];
    const std::uint64_t s = split_seed(seed, i);
    const std::string& n = t.name;
    if (n.ends_with(".w")) {
      int fan_in = 1;
      for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= t.shape[d];
      const bool last = n.ends_with("head2.w");
      fill_uniform(t, last ? 1.0 / std::sqrt(fan_in) : std::sqrt(6.0 / fan_in), s);
    } else if (n.ends_with("gamma") || n.ends_with("running_var")) {
      std::fill(t.value.begin(), t.value.end(), 1.0);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Resampling

namespace {
// Cell containing a continuous coordinate. Points within 1e-9 of a cell
// boundary go to the upper cell, so rounding noise in the rotation does not
// decide ties.
int nearest_index(double s) { return static_cast<int>(std::floor(s + 1e-9)); }
}  // namespace

std::vector<double> rotate_image(const std::vector<double>& src, int channels, int side, double angle,
                                 Interp interp) {
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  require(src.size() == plane * channels, "rotate_image: size mismatch");
  std::vector<double> dst(src.size(), 0.0);
  const double cs = std::cos(angle), sn = std::sin(angle);
  const double c = 0.5 * side;
  for (int r = 0; r < side; ++r) {
    for (int col = 0; col < side; ++col) {
      const double dx = col + 0.5 - c, dy = r + 0.5 - c;
      const double sx = c + cs * dx + sn * dy;
      const double sy = c - sn * dx + cs * dy;
      const std::size_t o = static_cast<std::size_t>(r) * side + col;
      if (interp == Interp::nearest) {
        const int ix = nearest_index(sx), iy = nearest_index(sy);
        if (ix < 0 || iy < 0 || ix >= side || iy >= side) continue;
        const std::size_t s = static_cast<std::size_t>(iy) * side + ix;
        for (int ch = 0; ch < channels; ++ch) dst[ch * plane + o] = src[ch * plane + s];
        continue;
      }
      const double u = sx - 0.5, v = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
      const double fx = u - x0, fy = v - y0;
      const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int k = 0; k < 4; ++k) {
        if (w[k] == 0.0 || xs[k] < 0 || ys[k] < 0 || xs[k] >= side || ys[k] >= side) continue;
        const std::size_t s = static_cast<std::size_t>(ys[k]) * side + xs[k];
        for (int ch = 0; ch < channels; ++ch) dst[ch * plane + o] += w[k] * src[ch * plane + s];
      }
    }
  }
  return dst;
}

namespace {

// Sparse linear map from coarse feature cells to one output map: for each
// output pixel a list of (coarse index, weight). Covers the x8 bilinear
// upsample followed by the back-rotation, so forward and backward share it.
struct Resampler {
  std::vector<std::vector<std::pair<int, double>>> taps;  // per output pixel
};

Resampler make_resampler(int side, int coarse, double angle, Interp interp) {
  // Upsample weights (half-pixel centers, edge clamped) per fine coordinate.
  const int scale = side / coarse;
  auto up_taps = [&](int i) {
    double s = (i + 0.5) / scale - 0.5;
    s = std::max(0.0, s);
    int i0 = static_cast<int>(std::floor(s));
    double f = s - i0;
    if (i0 >= coarse - 1) {
      i0 = coarse - 1;
      f = 0.0;
    }
    return std::array<std::pair<int, double>, 2>{{{i0, 1.0 - f}, {std::min(i0 + 1, coarse - 1), f}}};
  };
  // Dense fine-to-coarse rows, then compose with the rotation sampling.
  const std::size_t fine = static_cast<std::size_t>(side) * side;
  std::vector<std::vector<std::pair<int, double>>> up(fine);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      auto& row = up[static_cast<std::size_t>(r) * side + c];
      for (auto [yr, wy] : up_taps(r))
        for (auto [xc, wx] : up_taps(c))
          if (wy * wx != 0.0) row.push_back({yr * coarse + xc, wy * wx});
    }

  Resampler rs;
  rs.taps.resize(fine);
  const double cs = std::cos(angle), sn = std::sin(angle);
  const double ctr = 0.5 * side;
  std::vector<double> acc(static_cast<std::size_t>(coarse) * coarse);
  for (int r = 0; r < side; ++r) {
    for (int col = 0; col < side; ++col) {
      // Back-rotation by +angle: sample the upsampled map at c + R(-angle)(p - c).
      const double dx = col + 0.5 - ctr, dy = r + 0.5 - ctr;
      const double sx = ctr + cs * dx + sn * dy;
      const double sy = ctr - sn * dx + cs * dy;
      std::fill(acc.begin(), acc.end(), 0.0);
      auto add_fine = [&](int fy, int fx, double w) {
        if (w == 0.0 || fx < 0 || fy < 0 || fx >= side || fy >= side) return;
        for (auto [ci, cw] : up[static_cast<std::size_t>(fy) * side + fx]) acc[ci] += w * cw;
      };
      if (interp == Interp::nearest) {
        add_fine(nearest_index(sy), nearest_index(sx), 1.0);
      } else {
        const double u = sx - 0.5, v = sy - 0.5;
        const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
        const double fx = u - x0, fy = v - y0;
        add_fine(y0, x0, (1 - fx) * (1 - fy));
        add_fine(y0, x0 + 1, fx * (1 - fy));
        add_fine(y0 + 1, x0, (1 - fx) * fy);
        add_fine(y0 + 1, x0 + 1, fx * fy);
      }
      auto& out = rs.taps[static_cast<std::size_t>(r) * side + col];
      for (int i = 0; i < static_cast<int>(acc.size()); ++i)
        if (acc[i] != 0.0) out.push_back({i, acc[i]});
    }
  }
  return rs;
}

// The resamplers depend only on the geometry, so they are built once per
// (side, interp) and shared. Construction is guarded for concurrent readers.
const std::vector<Resampler>& resamplers(int side, int coarse, Interp interp) {
  struct Entry {
    int side;
    int coarse;
    Interp interp;
    std::vector<Resampler> rs;
  };
  static std::list<Entry> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  for (const Entry& e : cache)
    if (e.side == side && e.coarse == coarse && e.interp == interp) return e.rs;
  Entry e{side, coarse, interp, {}};
  for (int k = 0; k < kRotations; ++k)
    e.rs.push_back(make_resampler(side, coarse, rot_index_to_angle(k), interp));
  cache.push_back(std::move(e));
  return cache.back().rs;
}

// ---------------------------------------------------------------------------
// Layers. Activations are [N][C][H][W] in flat vectors.

struct Act {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> d;
  Act() = default;
  Act(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), d(static_cast<std::size_t>(n_) * c_ * h_ * w_) {}
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  double* at(int i, int ch) { return d.data() + (static_cast<std::size_t>(i) * c + ch) * plane(); }
  const double* at(int i, int ch) const { return d.data() + (static_cast<std::size_t>(i) * c + ch) * plane(); }
};

// 3x3 conv, stride 1 or 2, padding 1, followed by ReLU.
Act conv_relu(const Act& in, const Tensor& w, const Tensor& b, int stride) {
  const int cout = w.shape[0];
  Act out(in.n, cout, in.h / stride, in.w / stride);
  for (int i = 0; i < in.n; ++i) {
    for (int co = 0; co < cout; ++co) {
      double* o = out.at(i, co);
      std::fill(o, o + out.plane(), b.value[co]);
      for (int ci = 0; ci < in.c; ++ci) {
        const double* x = in.at(i, ci);
        const double* k = &w.value[(static_cast<std::size_t>(co) * in.c + ci) * 9];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double wk = k[ky * 3 + kx];
            for (int oy = 0; oy < out.h; ++oy) {
              const int iy = stride * oy + ky - 1;
              if (iy < 0 || iy >= in.h) continue;
              const double* xr = x + static_cast<std::size_t>(iy) * in.w;
              double* orow = o + static_cast<std::size_t>(oy) * out.w;
              const int ox0 = kx == 0 ? 1 : 0;
              for (int ox = ox0; ox < out.w; ++ox) {
                const int ix = stride * ox + kx - 1;
                if (ix >= in.w) break;
                orow[ox] += wk * xr[ix];
              }
            }
          }
      }
      for (std::size_t j = 0; j < out.plane(); ++j) o[j] = std::max(0.0, o[j]);
    }
  }
  return out;
}

// Backward of conv_relu. dout is with respect to the post-ReLU output and is
// masked in place. din is skipped when null.
void conv_relu_backward(const Act& in, const Act& out, Act& dout, const Tensor& w, int stride,
                        std::vector<double>& dw, std::vector<double>& db, Act* din) {
  const int cout = w.shape[0];
  for (std::size_t j = 0; j < dout.d.size(); ++j)
    if (out.d[j] <= 0.0) dout.d[j] = 0.0;
  if (din) *din = Act(in.n, in.c, in.h, in.w);
  for (int i = 0; i < in.n; ++i) {
    for (int co = 0; co < cout; ++co) {
      const double* g = dout.at(i, co);
      double bsum = 0.0;
      for (std::size_t j = 0; j < out.plane(); ++j) bsum += g[j];
      db[co] += bsum;
      if (bsum == 0.0) {
        bool any = false;
        for (std::size_t j = 0; j < out.plane() && !any; ++j) any = g[j] != 0.0;
        if (!any) continue;
      }
      for (int ci = 0; ci < in.c; ++ci) {
        const double* x = in.at(i, ci);
        double* dx = din ? din->at(i, ci) : nullptr;
        const std::size_t kbase = (static_cast<std::size_t>(co) * in.c + ci) * 9;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double wk = w.value[kbase + ky * 3 + kx];
            double acc = 0.0;
            for (int oy = 0; oy < out.h; ++oy) {
              const int iy = stride * oy + ky - 1;
              if (iy < 0 || iy >= in.h) continue;
              const double* grow = g + static_cast<std::size_t>(oy) * out.w;
              const std::size_t irow = static_cast<std::size_t>(iy) * in.w;
              const int ox0 = kx == 0 ? 1 : 0;
              for (int ox = ox0; ox < out.w; ++ox) {
                const int ix = stride * ox + kx - 1;
                if (ix >= in.w) break;
                acc += grow[ox] * x[irow + ix];
                if (dx) dx[irow + ix] += wk * grow[ox];
              }
            }
            dw[kbase + ky * 3 + kx] += acc;
          }
      }
    }
  }
}

struct Encoder {
  Act input;
  std::array<Act, 3> out;
};

Encoder run_encoder(Act input, const NetParams& p, int first_tensor) {
  Encoder e;
  e.input = std::move(input);
  const Act* x = &e.input;
  for (int l = 0; l < 3; ++l) {
    e.out[l] = conv_relu(*x, p.tensors[first_tensor + 2 * l], p.tensors[first_tensor + 2 * l + 1], p.arch.strides[l]);
    x = &e.out[l];
  }
  return e;
}

void encoder_backward(Encoder& e, Act dtop, const NetParams& p, int first_tensor, Gradients& g) {
  Act grad = std::move(dtop);
  for (int l = 2; l >= 0; --l) {
    const Act& in = l == 0 ? e.input : e.out[l - 1];
    const int wi = first_tensor + 2 * l;
    Act din;
    conv_relu_backward(in, e.out[l], grad, p.tensors[wi], p.arch.strides[l], g.per_tensor[wi], g.per_tensor[wi + 1],
                       l > 0 ? &din : nullptr);
    grad = std::move(din);
  }
}

// Rotated input stacks, 16 rotations each.
struct Inputs {
  Act color, depth, goal;
};

Inputs make_inputs(const NetInput& ni, const ArchConfig& arch) {
  const int s = arch.resolution;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  require(ni.side == s && ni.color.size() == 3 * plane && ni.depth.size() == plane && ni.goal.size() == plane,
          "forward: input size does not match the network");
  const auto& color = ni.color;
  const auto& depth = ni.depth;
  const auto& goal = ni.goal;
  Inputs in{Act(kRotations, 3, s, s), Act(kRotations, 1, s, s), Act(kRotations, 1, s, s)};
  for (int k = 0; k < kRotations; ++k) {
    const double a = -rot_index_to_angle(k);
    auto rc = rotate_image(color, 3, s, a, arch.interp);
    auto rd = rotate_image(depth, 1, s, a, arch.interp);
    auto rg = rotate_image(goal, 1, s, a, arch.interp);
    std::copy(rc.begin(), rc.end(), in.color.at(k, 0));
    std::copy(rd.begin(), rd.end(), in.depth.at(k, 0));
    std::copy(rg.begin(), rg.end(), in.goal.at(k, 0));
  }
  return in;
}

}  // namespace

NetInput make_net_input(const Observation& obs) {
  const int s = obs.depth.rows;
  require(obs.depth.cols == s && obs.color.rows == s && obs.color.cols == s && obs.goal_mask.rows == s &&
              obs.goal_mask.cols == s,
          "observation grids must be square and equal in size");
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  NetInput ni{s, std::vector<double>(3 * plane), std::vector<double>(plane), std::vector<double>(plane)};
  for (std::size_t i = 0; i < plane; ++i) {
    for (int ch = 0; ch < 3; ++ch) ni.color[ch * plane + i] = obs.color.data[i][ch] / 255.0;
    ni.depth[i] = obs.depth.data[i] * kDepthInputScale;
    ni.goal[i] = obs.goal_mask.data[i] ? 1.0 : 0.0;
  }
  return ni;
}

namespace {

struct HeadCache {
  Act feat;   // concatenated encoder outputs
  Act a1;     // ReLU(conv1)
  Act xhat;   // normalized (training mode)
  Act y;      // BN output
  std::vector<double> mean, var;
  Act coarse;  // [N][1][h][w]
};

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw Error(ErrorKind::numerical_divergence, std::string("non-finite value in ") + what);
}

// Head plus output resampling for one branch. Returns the 16 maps.
RotationMaps run_head(const NetParams& p, int branch, const Act& fc, const Act& fd, const Act& fg, bool training,
                      HeadCache& hc) {
  const int n = fc.n, h = fc.h, w = fc.w;
  const int c3 = fc.c;
  const std::size_t plane = fc.plane();
  hc.feat = Act(n, 3 * c3, h, w);
  for (int i = 0; i < n; ++i) {
    std::copy(fc.at(i, 0), fc.at(i, 0) + c3 * plane, hc.feat.at(i, 0));
    std::copy(fd.at(i, 0), fd.at(i, 0) + c3 * plane, hc.feat.at(i, c3));
    std::copy(fg.at(i, 0), fg.at(i, 0) + c3 * plane, hc.feat.at(i, 2 * c3));
  }
  const Tensor& w1 = p.tensors[NetParams::head1(branch)];
  const Tensor& b1 = p.tensors[NetParams::head1(branch) + 1];
  const Tensor& gamma = p.tensors[NetParams::bn(branch)];
  const Tensor& beta = p.tensors[NetParams::bn(branch) + 1];
  const Tensor& rmean = p.tensors[NetParams::bn(branch) + 2];
  const Tensor& rvar = p.tensors[NetParams::bn(branch) + 3];
  const Tensor& w2 = p.tensors[NetParams::head2(branch)];
  const Tensor& b2 = p.tensors[NetParams::head2(branch) + 1];
  const int hid = w1.shape[0], fin = w1.shape[1];

  hc.a1 = Act(n, hid, h, w);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < hid; ++c) {
      double* o = hc.a1.at(i, c);
      std::fill(o, o + plane, b1.value[c]);
      for (int f = 0; f < fin; ++f) {
        const double wf = w1.value[static_cast<std::size_t>(c) * fin + f];
        const double* x = hc.feat.at(i, f);
        for (std::size_t j = 0; j < plane; ++j) o[j] += wf * x[j];
      }
      for (std::size_t j = 0; j < plane; ++j) o[j] = std::max(0.0, o[j]);
    }

  hc.mean.assign(hid, 0.0);
  hc.var.assign(hid, 0.0);
  const double count = static_cast<double>(n) * plane;
  if (training) {
    for (int c = 0; c < hid; ++c) {
      double s = 0.0;
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < plane; ++j) s += hc.a1.at(i, c)[j];
      const double mu = s / count;
      double ss = 0.0;
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < plane; ++j) ss += (hc.a1.at(i, c)[j] - mu) * (hc.a1.at(i, c)[j] - mu);
      hc.mean[c] = mu;
      hc.var[c] = ss / count;
    }
  } else {
    hc.mean = rmean.value;
    hc.var = rvar.value;
  }
  hc.xhat = Act(n, hid, h, w);
  hc.y = Act(n, hid, h, w);
  for (int c = 0; c < hid; ++c) {
    const double inv = 1.0 / std::sqrt(hc.var[c] + kBnEps);
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < plane; ++j) {
        const double xh = (hc.a1.at(i, c)[j] - hc.mean[c]) * inv;
        hc.xhat.at(i, c)[j] = xh;
        hc.y.at(i, c)[j] = gamma.value[c] * xh + beta.value[c];
      }
  }

  hc.coarse = Act(n, 1, h, w);
  for (int i = 0; i < n; ++i) {
    double* o = hc.coarse.at(i, 0);
    std::fill(o, o + plane, b2.value[0]);
    for (int c = 0; c < hid; ++c) {
      const double* y = hc.y.at(i, c);
      for (std::size_t j = 0; j < plane; ++j) o[j] += w2.value[c] * y[j];
    }
  }
  check_finite(hc.coarse.d, "Q head output");

  const int side = p.arch.resolution;
  const auto& rs = resamplers(side, p.arch.feature_side(), p.arch.interp);
  RotationMaps maps(n, Grid<double>(side, side, 0.0));
  for (int k = 0; k < n; ++k) {
    const double* cm = hc.coarse.at(k, 0);
    auto& m = maps[k];
    for (std::size_t px = 0; px < m.data.size(); ++px) {
      double v = 0.0;
      for (auto [ci, cw] : rs[k].taps[px]) v += cw * cm[ci];
      m.data[px] = v;
    }
  }
  return maps;
}

struct BranchForward {
  Encoder color, depth;
  HeadCache head;
  RotationMaps maps;
};

}  // namespace

QMaps forward(const NetParams& params, const Observation& obs, const std::vector<ActionKind>& branches) {
  return forward(params, make_net_input(obs), branches);
}

QMaps forward(const NetParams& params, const NetInput& input, const std::vector<ActionKind>& branches) {
  const Inputs in = make_inputs(input, params.arch);
  const Encoder goal = run_encoder(in.goal, params, NetParams::goal_conv(0));
  QMaps q;
  for (ActionKind kind : branches) {
    const int b = branch_index(kind);
    if (!q.maps[b].empty()) continue;
    const Encoder ec = run_encoder(in.color, params, NetParams::color_conv(b, 0));
    const Encoder ed = run_encoder(in.depth, params, NetParams::depth_conv(b, 0));
    HeadCache hc;
    q.maps[b] = run_head(params, b, ec.out[2], ed.out[2], goal.out[2], false, hc);
  }
  return q;
}

namespace {

struct TrainingPass {
  Encoder goal;
  BranchForward br;
};

TrainingPass training_forward(const NetParams& params, const Observation& obs, int b) {
  Inputs in = make_inputs(make_net_input(obs), params.arch);
  TrainingPass tp;
  tp.goal = run_encoder(std::move(in.goal), params, NetParams::goal_conv(0));
  tp.br.color = run_encoder(std::move(in.color), params, NetParams::color_conv(b, 0));
  tp.br.depth = run_encoder(std::move(in.depth), params, NetParams::depth_conv(b, 0));
  tp.br.maps = run_head(params, b, tp.br.color.out[2], tp.br.depth.out[2], tp.goal.out[2], true, tp.br.head);
  return tp;
}

void check_action(const NetParams& params, const Action& a) {
  require(a.rot_idx >= 0 && a.rot_idx < kRotations, "train: rotation index out of range");
  require(a.pixel.row >= 0 && a.pixel.col >= 0 && a.pixel.row < params.arch.resolution &&
              a.pixel.col < params.arch.resolution,
          "train: pixel out of range");
}

LossEval eval_loss(const RotationMaps& maps, const Action& a, double target) {
  LossEval le;
  le.q = maps[a.rot_idx](a.pixel.row, a.pixel.col);
  le.delta = std::abs(le.q - target);
  le.loss = huber(le.delta);
  return le;
}

}  // namespace

RotationMaps forward_training(const NetParams& params, const Observation& obs, ActionKind branch) {
  return training_forward(params, obs, branch_index(branch)).br.maps;
}

double huber(double delta) {
  require(delta >= 0.0, "huber: negative input");
  return delta < 1.0 ? 0.5 * delta * delta : delta - 0.5;
}

double huber_grad(double diff) {
  if (std::abs(diff) < 1.0) return diff;
  return diff > 0.0 ? 1.0 : -1.0;
}

double td_target(double reward, double next_max_q, bool terminal, double gamma) {
  require(gamma >= 0.0 && gamma < 1.0, "td_target: gamma must lie in [0, 1)");
  if (terminal) return reward;
  require(std::isfinite(next_max_q), "td_target: non-finite next Q");
  return reward + gamma * next_max_q;
}

LossEval training_loss(const NetParams& params, const Observation& obs, const Action& action, double target) {
  check_action(params, action);
  const TrainingPass tp = training_forward(params, obs, branch_index(action.kind));
  return eval_loss(tp.br.maps, action, target);
}

LossEval loss_and_gradients(const NetParams& params, const Observation& obs, const Action& action, double target,
                            Gradients& grads) {
  check_action(params, action);
  const int b = branch_index(action.kind);
  TrainingPass tp = training_forward(params, obs, b);
  const LossEval le = eval_loss(tp.br.maps, action, target);

  grads.per_tensor.assign(params.tensors.size(), {});
  const bool train_goal = action.kind == ActionKind::grasp;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const bool owned = NetParams::in_branch(static_cast<int>(i), b) || (train_goal && i < NetParams::kGoalTensors);
    if (owned && params.tensors[i].trainable) grads.per_tensor[i].assign(params.tensors[i].size(), 0.0);
  }

  const double dq = huber_grad(le.q - target);
  HeadCache& hc = tp.br.head;
  const int n = hc.a1.n, h = hc.a1.h, w = hc.a1.w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int side = params.arch.resolution;

  // Output resampling adjoint: only the executed rotation and pixel carry loss.
  Act dcoarse(n, 1, h, w);
  const auto& rs = resamplers(side, params.arch.feature_side(), params.arch.interp);
  for (auto [ci, cw] : rs[action.rot_idx].taps[static_cast<std::size_t>(action.pixel.row) * side + action.pixel.col])
    dcoarse.at(action.rot_idx, 0)[ci] += cw * dq;

  // Second 1x1 conv.
  const Tensor& w2 = params.tensors[NetParams::head2(b)];
  const int hid = w2.shape[1];
  auto& gw2 = grads.per_tensor[NetParams::head2(b)];
  auto& gb2 = grads.per_tensor[NetParams::head2(b) + 1];
  Act dy(n, hid, h, w);
  for (int i = 0; i < n; ++i) {
    const double* g = dcoarse.at(i, 0);
    for (std::size_t j = 0; j < plane; ++j) gb2[0] += g[j];
    for (int c = 0; c < hid; ++c) {
      const double* y = hc.y.at(i, c);
      double* d = dy.at(i, c);
      double acc = 0.0;
      for (std::size_t j = 0; j < plane; ++j) {
        acc += g[j] * y[j];
        d[j] = w2.value[c] * g[j];
      }
      gw2[c] += acc;
    }
  }

  // Batch norm in training mode; the 16 rotations share statistics.
  const Tensor& gamma = params.tensors[NetParams::bn(b)];
  auto& ggamma = grads.per_tensor[NetParams::bn(b)];
  auto& gbeta = grads.per_tensor[NetParams::bn(b) + 1];
  const double count = static_cast<double>(n) * plane;
  Act dz1(n, hid, h, w);
  for (int c = 0; c < hid; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < plane; ++j) {
        sum_dy += dy.at(i, c)[j];
        sum_dy_xh += dy.at(i, c)[j] * hc.xhat.at(i, c)[j];
      }
    ggamma[c] += sum_dy_xh;
    gbeta[c] += sum_dy;
    const double inv = 1.0 / std::sqrt(hc.var[c] + kBnEps);
    const double k = gamma.value[c] * inv / count;
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < plane; ++j) {
        const double dx = k * (count * dy.at(i, c)[j] - sum_dy - hc.xhat.at(i, c)[j] * sum_dy_xh);
        dz1.at(i, c)[j] = hc.a1.at(i, c)[j] > 0.0 ? dx : 0.0;
      }
  }

  // First 1x1 conv.
  const Tensor& w1 = params.tensors[NetParams::head1(b)];
  const int fin = w1.shape[1];
  auto& gw1 = grads.per_tensor[NetParams::head1(b)];
  auto& gb1 = grads.per_tensor[NetParams::head1(b) + 1];
  Act dfeat(n, fin, h, w);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < hid; ++c) {
      const double* g = dz1.at(i, c);
      for (std::size_t j = 0; j < plane; ++j) gb1[c] += g[j];
      for (int f = 0; f < fin; ++f) {
        const double* x = hc.feat.at(i, f);
        double* dfx = dfeat.at(i, f);
        const double wf = w1.value[static_cast<std::size_t>(c) * fin + f];
        double acc = 0.0;
        for (std::size_t j = 0; j < plane; ++j) {
          acc += g[j] * x[j];
          dfx[j] += wf * g[j];
        }
        gw1[static_cast<std::size_t>(c) * fin + f] += acc;
      }
    }

  // Split the feature gradient per stream.
  const int c3 = fin / 3;
  auto slice = [&](int stream) {
    Act a(n, c3, h, w);
    for (int i = 0; i < n; ++i) std::copy(dfeat.at(i, stream * c3), dfeat.at(i, stream * c3) + c3 * plane, a.at(i, 0));
    return a;
  };
  encoder_backward(tp.br.color, slice(0), params, NetParams::color_conv(b, 0), grads);
  encoder_backward(tp.br.depth, slice(1), params, NetParams::depth_conv(b, 0), grads);
  if (train_goal) encoder_backward(tp.goal, slice(2), params, NetParams::goal_conv(0), grads);

  for (const auto& g : grads.per_tensor) check_finite(g, "gradient");

  grads.batch_mean = hc.mean;
  grads.batch_var = hc.var;
  return le;
}

TrainResult train_step(NetParams& params, const Observation& obs, const Action& action, double target,
                       const AdamConfig& adam) {
  Gradients g;
  const LossEval le = loss_and_gradients(params, obs, action, target, g);
  const int b = branch_index(action.kind);

  // Running statistics (unbiased variance), stored at float precision.
  const std::vector<double>& mean = g.batch_mean;
  const std::vector<double>& var = g.batch_var;
  const int side = params.arch.feature_side();
  const double count = static_cast<double>(kRotations) * side * side;
  Tensor& rm = params.tensors[NetParams::bn(b) + 2];
  Tensor& rv = params.tensors[NetParams::bn(b) + 3];
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm.value[c] = to_float((1.0 - kBnMomentum) * rm.value[c] + kBnMomentum * mean[c]);
    const double unbiased = count > 1.0 ? var[c] * count / (count - 1.0) : var[c];
    rv.value[c] = to_float((1.0 - kBnMomentum) * rv.value[c] + kBnMomentum * unbiased);
  }

  // An exact label leaves the weights alone; the moments still decay.
  const bool exact = le.delta == 0.0;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (g.per_tensor[i].empty()) continue;
    Tensor& t = params.tensors[i];
    ++t.step;
    const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(t.step));
    const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(t.step));
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double grad = exact ? 0.0 : g.per_tensor[i][j] + adam.weight_decay * t.value[j];
      t.m[j] = to_float(adam.beta1 * t.m[j] + (1.0 - adam.beta1) * grad);
      t.v[j] = to_float(adam.beta2 * t.v[j] + (1.0 - adam.beta2) * grad * grad);
      if (exact) continue;
      const double mhat = t.m[j] / c1, vhat = t.v[j] / c2;
      t.value[j] = to_float(t.value[j] - adam.lr * mhat / (std::sqrt(vhat) + adam.eps));
    }
  }
  ++params.global_step;
  return {le.loss, le.q, le.delta};
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian, float32 tensors.

namespace {

constexpr char kMagic[8] = {'M', 'P', 'G', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(v);
  char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
  out.write(b, sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  static_assert(std::is_integral_v<T>);
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw Error(ErrorKind::parse_error, "checkpoint: truncated");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(b[i]) << (8 * i);
  return static_cast<T>(u);
}

void put_f32(std::ostream& out, double x) { put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(x))); }
double get_f32(std::istream& in) { return static_cast<double>(std::bit_cast<float>(get<std::uint32_t>(in))); }
void put_f64(std::ostream& out, double x) { put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get<std::uint64_t>(in)); }

}  // namespace

void save_checkpoint(std::ostream& out, const NetParams& p) {
  out.write(kMagic, 8);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.arch.resolution));
  for (int c : p.arch.enc_channels) put<std::uint32_t>(out, static_cast<std::uint32_t>(c));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.arch.head_hidden));
  put<std::uint32_t>(out, p.arch.interp == Interp::bilinear ? 0u : 1u);
  for (int st : p.arch.strides) put<std::uint32_t>(out, static_cast<std::uint32_t>(st));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.completed_stage));
  put_f64(out, p.q_star);
  put<std::uint64_t>(out, p.global_step);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensors.size()));
  for (const Tensor& t : p.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put<std::uint8_t>(out, t.trainable ? 1 : 0);
    put<std::int64_t>(out, t.step);
    for (double x : t.value) put_f32(out, x);
    for (double x : t.m) put_f32(out, x);
    for (double x : t.v) put_f32(out, x);
  }
  if (!out) throw Error(ErrorKind::io_error, "checkpoint: write failed");
}

NetParams load_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw Error(ErrorKind::parse_error, "checkpoint: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw Error(ErrorKind::parse_error, "checkpoint: unsupported version");
  ArchConfig arch;
  arch.resolution = static_cast<int>(get<std::uint32_t>(in));
  for (int& c : arch.enc_channels) c = static_cast<int>(get<std::uint32_t>(in));
  arch.head_hidden = static_cast<int>(get<std::uint32_t>(in));
  const auto interp = get<std::uint32_t>(in);
  if (interp > 1) throw Error(ErrorKind::parse_error, "checkpoint: bad interpolation mode");
  arch.interp = interp == 0 ? Interp::bilinear : Interp::nearest;
  for (int& st : arch.strides) st = static_cast<int>(get<std::uint32_t>(in));
  try {
    arch.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::parse_error, std::string("checkpoint: ") + e.what());
  }
  NetParams p = init_params(arch, 0);
  p.completed_stage = static_cast<int>(get<std::uint32_t>(in));
  p.q_star = get_f64(in);
  p.global_step = get<std::uint64_t>(in);
  const auto count = get<std::uint32_t>(in);
  if (count != p.tensors.size()) throw Error(ErrorKind::parse_error, "checkpoint: tensor count mismatch");
  for (Tensor& t : p.tensors) {
    const auto len = get<std::uint32_t>(in);
    if (len > 256) throw Error(ErrorKind::parse_error, "checkpoint: tensor name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error(ErrorKind::parse_error, "checkpoint: truncated");
    if (name != t.name) throw Error(ErrorKind::parse_error, "checkpoint: expected tensor " + t.name + ", got " + name);
    const auto ndim = get<std::uint32_t>(in);
    if (ndim != t.shape.size()) throw Error(ErrorKind::parse_error, "checkpoint: rank mismatch for " + name);
    for (int d : t.shape)
      if (get<std::uint32_t>(in) != static_cast<std::uint32_t>(d))
        throw Error(ErrorKind::parse_error, "checkpoint: shape mismatch for " + name);
    if ((get<std::uint8_t>(in) != 0) != t.trainable)
      throw Error(ErrorKind::parse_error, "checkpoint: trainable flag mismatch for " + name);
    t.step = get<std::int64_t>(in);
    for (double& x : t.value) x = get_f32(in);
    for (double& x : t.m) x = get_f32(in);
    for (double& x : t.v) x = get_f32(in);
    for (double x : t.value)
      if (!std::isfinite(x)) throw Error(ErrorKind::parse_error, "checkpoint: non-finite value in " + name);
  }
  return p;
}

void save_checkpoint(const std::string& path, const NetParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io_error, "cannot write " + path);
  save_checkpoint(out, params);
}

NetParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io_error, "cannot read " + path);
  return load_checkpoint(in);
}

}  // namespace mpg
