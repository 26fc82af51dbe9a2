#include "fvhand/segnet.hpp"

#include "fvhand/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <stdexcept>

namespace fvhand::segnet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ConstRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("segnet: ") + what);
}

// Rows are output pixels, columns (ky*3 + kx)*c + ci.
template <typename T>
void im2col(const T* in, int h, int w, int c, std::vector<T>& col) {
  const std::size_t k = 9 * static_cast<std::size_t>(c);
  col.resize(static_cast<std::size_t>(h) * w * k);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      T* row = col.data() + (static_cast<std::size_t>(y) * w + x) * k;
      for (int ky = 0; ky < 3; ++ky) {
        T* dst = row + ky * 3 * c;
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= h) {
          std::fill(dst, dst + 3 * c, T(0));
          continue;
        }
        const T* src = in + static_cast<std::size_t>(sy) * w * c;
        if (x > 0 && x + 1 < w) {
          std::memcpy(dst, src + (x - 1) * c, sizeof(T) * 3 * c);
          continue;
        }
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= w) {
            std::fill(dst + kx * c, dst + (kx + 1) * c, T(0));
          } else {
            std::memcpy(dst + kx * c, src + sx * c, sizeof(T) * c);
          }
        }
      }
    }
  }
}

template <typename T>
void conv_gemm(const std::vector<T>& col, std::size_t pixels, const ConvLayer<T>& layer,
               std::vector<T>& out, bool relu) {
  const auto k = static_cast<Eigen::Index>(9 * layer.shape.in_channels);
  const auto n = static_cast<Eigen::Index>(layer.shape.out_channels);
  const auto m = static_cast<Eigen::Index>(pixels);
  out.resize(pixels * static_cast<std::size_t>(n));
  ConstMatMap<T> a(col.data(), m, k);
  ConstMatMap<T> wk(layer.kernel.data(), k, n);
  MatMap<T> z(out.data(), m, n);
  z.noalias() = a * wk;
  z.rowwise() += ConstRowVecMap<T>(layer.bias.data(), n);
  if (relu) z = z.cwiseMax(T(0));
}

void check_layer_shape(const KernelShape& s) {
  require(s.kernel_h == 3 && s.kernel_w == 3, "only 3x3 kernels are supported");
  require(s.in_channels > 0 && s.out_channels > 0, "empty kernel");
}

template <typename T>
void check_layer(const ConvLayer<T>& layer) {
  check_layer_shape(layer.shape);
  require(layer.kernel.size() == layer.shape.count(), "kernel size does not match its shape");
  require(layer.bias.size() == static_cast<std::size_t>(layer.shape.out_channels),
          "bias size does not match output channels");
}

const char* const kRowNames[] = {"input",    "conv1",  "conv2", "maxpool", "conv3",
                                 "upsample", "concat", "conv4", "conv5"};

void finalize_ledger(ResourceLedger& ledger) {
  const auto& r = ledger.rows;
  ledger.total_macs = 0;
  ledger.weight_bytes = 0;
  for (std::size_t i = 0; i < kConvLayers; ++i) ledger.total_macs += ledger.conv_macs[i];
  for (const auto& row : r) ledger.weight_bytes += row.weight_bytes;
  if (r.size() != 9) return;
  auto a = [&](int i) { return r[i].activation_bytes; };
  // The skip tensor (conv2 output) stays live until the concatenation.
  ledger.peak_activation_bytes = std::max({a(0) + a(1), a(1) + a(2), a(2) + a(3),
                                           a(2) + a(3) + a(4), a(2) + a(4) + a(5), a(6),
                                           a(6) + a(7), a(7) + a(8)});
}

LayerRecord make_row(int index, Shape output, std::uint64_t macs, std::size_t weights) {
  return {kRowNames[index], output, macs, weights, output.size()};
}

// Per-sample activations kept for the backward pass.
template <typename T>
struct Workspace {
  int h = 0, w = 0, hp = 0, wp = 0;
  std::vector<T> col1, a1, col2, a2, p, col3, a3, c, col4, a4, col5, out;
  std::vector<std::uint32_t> argmax;
  // backward scratch
  std::vector<T> dz5, dcol, flipped, da4, dc, da3, dp, da2, da1;
};

template <typename T>
void run_forward(const Tensor<T>& image, const Params<T>& params, Workspace<T>& ws,
                 ResourceLedger* ledger) {
  const Architecture& arch = params.arch;
  const int h = image.shape.height;
  const int w = image.shape.width;
  const int f = arch.pool;
  require(image.shape.channels == arch.input_channels, "input channel count mismatch");
  require(h > 0 && w > 0 && f > 0 && h % f == 0 && w % f == 0,
          "input size must be divisible by the pool factor");
  require(image.values.size() == image.shape.size(), "tensor size mismatch");
  ws.h = h;
  ws.w = w;
  ws.hp = h / f;
  ws.wp = w / f;
  const std::size_t px = static_cast<std::size_t>(h) * w;
  const std::size_t ppx = static_cast<std::size_t>(ws.hp) * ws.wp;
  const auto& L = params.layers;

  im2col(image.values.data(), h, w, arch.input_channels, ws.col1);
  conv_gemm(ws.col1, px, L[0], ws.a1, true);
  im2col(ws.a1.data(), h, w, arch.conv1, ws.col2);
  conv_gemm(ws.col2, px, L[1], ws.a2, true);

  const int c2 = arch.conv2;
  ws.p.assign(ppx * c2, T(0));
  ws.argmax.assign(ppx * c2, 0);
  for (int py = 0; py < ws.hp; ++py) {
    for (int pxl = 0; pxl < ws.wp; ++pxl) {
      for (int ch = 0; ch < c2; ++ch) {
        std::size_t best_i = (static_cast<std::size_t>(py * f) * w + pxl * f) * c2 + ch;
        T best = ws.a2[best_i];
        for (int dy = 0; dy < f; ++dy) {
          for (int dx = 0; dx < f; ++dx) {
            const std::size_t i =
                (static_cast<std::size_t>(py * f + dy) * w + pxl * f + dx) * c2 + ch;
            if (ws.a2[i] > best) {
              best = ws.a2[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(py) * ws.wp + pxl) * c2 + ch;
        ws.p[o] = best;
        ws.argmax[o] = static_cast<std::uint32_t>(best_i);
      }
    }
  }

  im2col(ws.p.data(), ws.hp, ws.wp, c2, ws.col3);
  conv_gemm(ws.col3, ppx, L[2], ws.a3, true);

  // upsample + concat in one pass
  const int c3 = arch.conv3;
  const int cc = c2 + c3;
  ws.c.resize(px * cc);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      T* dst = ws.c.data() + (static_cast<std::size_t>(y) * w + x) * cc;
      std::memcpy(dst, ws.a2.data() + (static_cast<std::size_t>(y) * w + x) * c2, sizeof(T) * c2);
      std::memcpy(dst + c2, ws.a3.data() + (static_cast<std::size_t>(y / f) * ws.wp + x / f) * c3,
                  sizeof(T) * c3);
    }
  }

  im2col(ws.c.data(), h, w, cc, ws.col4);
  conv_gemm(ws.col4, px, L[3], ws.a4, true);
  im2col(ws.a4.data(), h, w, arch.conv4, ws.col5);
  conv_gemm(ws.col5, px, L[4], ws.out, false);
  for (T& v : ws.out) v = T(1) / (T(1) + std::exp(-v));

  if (ledger) {
    ledger->rows.clear();
    const Shape full3{h, w, arch.input_channels};
    const Shape s1{h, w, arch.conv1}, s2{h, w, c2}, sp{ws.hp, ws.wp, c2}, s3{ws.hp, ws.wp, c3},
        su{h, w, c3}, sc{h, w, cc}, s4{h, w, arch.conv4}, s5{h, w, 1};
    const Shape shapes[] = {s1, s2, s3, s4, s5};
    const int conv_rows[] = {1, 2, 4, 7, 8};
    const int cins[] = {arch.input_channels, arch.conv1, c2, cc, arch.conv4};
    for (std::size_t i = 0; i < kConvLayers; ++i) {
      ledger->conv_macs[i] = conv_macs(shapes[i], cins[i]);
    }
    ledger->rows.push_back(make_row(0, full3, 0, 0));
    for (int i = 0, r = 1; r < 9; ++r) {
      if (i < 5 && conv_rows[i] == r) {
        ledger->rows.push_back(make_row(r, shapes[i], ledger->conv_macs[i], L[i].kernel.size()));
        ++i;
      } else {
        const Shape s = r == 3 ? sp : r == 5 ? su : sc;
        ledger->rows.push_back(make_row(r, s, 0, 0));
      }
    }
    finalize_ledger(*ledger);
  }
}

template <typename T>
void add_weight_grad(const std::vector<T>& col, const std::vector<T>& dz, std::size_t pixels,
                     ConvLayer<T>& g) {
  const auto k = static_cast<Eigen::Index>(9 * g.shape.in_channels);
  const auto n = static_cast<Eigen::Index>(g.shape.out_channels);
  const auto m = static_cast<Eigen::Index>(pixels);
  ConstMatMap<T> a(col.data(), m, k);
  ConstMatMap<T> d(dz.data(), m, n);
  MatMap<T> gw(g.kernel.data(), k, n);
  gw.noalias() += a.transpose() * d;
  // Eigen's colwise().sum() picks its summation order from the destination's
  // alignment, so the bias sums are spelled out.
  std::vector<T> sum(static_cast<std::size_t>(n), T(0));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) sum[j] += d(i, j);
  }
  for (Eigen::Index j = 0; j < n; ++j) g.bias[j] += sum[j];
}

// The input gradient of a same-padded 3x3 convolution is the same-padded
// convolution of dz with the spatially flipped, channel-transposed kernel.
template <typename T>
void input_grad(const std::vector<T>& dz, std::size_t pixels, const ConvLayer<T>& layer, int h,
                int w, std::vector<T>& col, std::vector<T>& flipped, std::vector<T>& dx) {
  const int cin = layer.shape.in_channels, cout = layer.shape.out_channels;
  flipped.resize(layer.kernel.size());
  for (int t = 0; t < 9; ++t) {
    for (int ci = 0; ci < cin; ++ci) {
      for (int co = 0; co < cout; ++co) {
        flipped[(static_cast<std::size_t>(t) * cout + co) * cin + ci] =
            layer.kernel[(static_cast<std::size_t>(8 - t) * cin + ci) * cout + co];
      }
    }
  }
  im2col(dz.data(), h, w, cout, col);
  dx.resize(pixels * static_cast<std::size_t>(cin));
  ConstMatMap<T> a(col.data(), static_cast<Eigen::Index>(pixels), 9 * cout);
  ConstMatMap<T> wf(flipped.data(), 9 * cout, cin);
  MatMap<T>(dx.data(), static_cast<Eigen::Index>(pixels), cin).noalias() = a * wf;
}

template <typename T>
void relu_mask(std::vector<T>& grad, const std::vector<T>& activation) {
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = activation[i] > T(0) ? grad[i] : T(0);
}

void check_mask(std::span<const std::uint8_t> mask, std::size_t pixels) {
  require(mask.size() == pixels, "mask size does not match the image");
  for (std::uint8_t m : mask) require(m <= 1, "mask must be binary (0 or 1)");
}

template <typename T>
double backward(std::span<const std::uint8_t> mask, const Params<T>& params, Workspace<T>& ws,
                Params<T>& grad) {
  const Architecture& arch = params.arch;
  const int h = ws.h, w = ws.w, f = arch.pool;
  const std::size_t px = static_cast<std::size_t>(h) * w;
  const std::size_t ppx = static_cast<std::size_t>(ws.hp) * ws.wp;
  const auto& L = params.layers;
  auto& G = grad.layers;

  const double loss = bce_loss<T>(ws.out, mask);
  ws.dz5.resize(px);
  const T inv_n = T(1) / static_cast<T>(px);
  for (std::size_t i = 0; i < px; ++i) ws.dz5[i] = (ws.out[i] - static_cast<T>(mask[i])) * inv_n;

  add_weight_grad(ws.col5, ws.dz5, px, G[4]);
  input_grad(ws.dz5, px, L[4], h, w, ws.dcol, ws.flipped, ws.da4);
  relu_mask(ws.da4, ws.a4);

  add_weight_grad(ws.col4, ws.da4, px, G[3]);
  input_grad(ws.da4, px, L[3], h, w, ws.dcol, ws.flipped, ws.dc);

  const int c2 = arch.conv2, c3 = arch.conv3, cc = c2 + c3;
  ws.da2.resize(px * c2);
  ws.da3.assign(ppx * c3, T(0));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T* src = ws.dc.data() + (static_cast<std::size_t>(y) * w + x) * cc;
      std::memcpy(ws.da2.data() + (static_cast<std::size_t>(y) * w + x) * c2, src, sizeof(T) * c2);
      T* up = ws.da3.data() + (static_cast<std::size_t>(y / f) * ws.wp + x / f) * c3;
      for (int ch = 0; ch < c3; ++ch) up[ch] += src[c2 + ch];
    }
  }
  relu_mask(ws.da3, ws.a3);

  add_weight_grad(ws.col3, ws.da3, ppx, G[2]);
  input_grad(ws.da3, ppx, L[2], ws.hp, ws.wp, ws.dcol, ws.flipped, ws.dp);
  for (std::size_t i = 0; i < ws.dp.size(); ++i) ws.da2[ws.argmax[i]] += ws.dp[i];
  relu_mask(ws.da2, ws.a2);

  add_weight_grad(ws.col2, ws.da2, px, G[1]);
  input_grad(ws.da2, px, L[1], h, w, ws.dcol, ws.flipped, ws.da1);
  relu_mask(ws.da1, ws.a1);

  add_weight_grad(ws.col1, ws.da1, px, G[0]);
  return loss;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  float f32() {
    need(4);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(bits);
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw DataError("weights: truncated file");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'F', 'V', 'S', 'N'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

std::array<KernelShape, kConvLayers> Architecture::kernel_shapes() const {
  return {KernelShape{3, 3, input_channels, conv1}, KernelShape{3, 3, conv1, conv2},
          KernelShape{3, 3, conv2, conv3}, KernelShape{3, 3, conv2 + conv3, conv4},
          KernelShape{3, 3, conv4, 1}};
}

template <typename T>
Params<T> Params<T>::zeros(const Architecture& arch) {
  Params p;
  p.arch = arch;
  const auto shapes = arch.kernel_shapes();
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    p.layers[i].shape = shapes[i];
    p.layers[i].kernel.assign(shapes[i].count(), T(0));
    p.layers[i].bias.assign(static_cast<std::size_t>(shapes[i].out_channels), T(0));
  }
  return p;
}

template <typename T>
Params<T> Params<T>::random(const Architecture& arch, std::uint64_t seed) {
  Params p = zeros(arch);
  std::mt19937_64 rng(seed);
  for (auto& layer : p.layers) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (9.0 * layer.shape.in_channels)));
    for (T& v : layer.kernel) v = static_cast<T>(dist(rng));
  }
  return p;
}

template <typename T>
std::size_t Params<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.kernel.size() + l.bias.size();
  return n;
}

template <typename T>
void Params<T>::check() const {
  require(arch.pool > 0, "pool factor must be positive");
  const auto shapes = arch.kernel_shapes();
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    check_layer(layers[i]);
    require(layers[i].shape == shapes[i], "layer shape does not match the architecture");
    for (T v : layers[i].kernel) require(std::isfinite(v), "non-finite weight");
    for (T v : layers[i].bias) require(std::isfinite(v), "non-finite bias");
  }
}

std::uint64_t conv_macs(const Shape& output, int in_channels) {
  return static_cast<std::uint64_t>(output.height) * output.width * output.channels * 9ULL *
         static_cast<std::uint64_t>(in_channels);
}

template <typename T>
Tensor<T> conv2d_3x3_same(const Tensor<T>& input, const ConvLayer<T>& layer, std::uint64_t* macs) {
  check_layer(layer);
  require(input.shape.channels == layer.shape.in_channels,
          "kernel input channels do not match the tensor");
  require(input.values.size() == input.shape.size(), "tensor size mismatch");
  const int h = input.shape.height, w = input.shape.width;
  std::vector<T> col;
  im2col(input.values.data(), h, w, input.shape.channels, col);
  Tensor<T> out;
  out.shape = {h, w, layer.shape.out_channels};
  conv_gemm(col, static_cast<std::size_t>(h) * w, layer, out.values, false);
  if (macs) *macs = conv_macs(out.shape, layer.shape.in_channels);
  return out;
}

template <typename T>
Tensor<T> maxpool(const Tensor<T>& input, int factor) {
  const Shape s = input.shape;
  require(factor > 0 && s.height % factor == 0 && s.width % factor == 0,
          "maxpool needs dimensions divisible by the factor");
  Tensor<T> out(s.height / factor, s.width / factor, s.channels,
                -std::numeric_limits<T>::infinity());
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      for (int c = 0; c < s.channels; ++c) {
        T& o = out.at(y / factor, x / factor, c);
        o = std::max(o, input.at(y, x, c));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, int factor) {
  require(factor > 0, "upsample factor must be positive");
  const Shape s = input.shape;
  Tensor<T> out(s.height * factor, s.width * factor, s.channels);
  for (int y = 0; y < out.shape.height; ++y) {
    for (int x = 0; x < out.shape.width; ++x) {
      for (int c = 0; c < s.channels; ++c) out.at(y, x, c) = input.at(y / factor, x / factor, c);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape.height == b.shape.height && a.shape.width == b.shape.width,
          "concat needs matching spatial size");
  Tensor<T> out(a.shape.height, a.shape.width, a.shape.channels + b.shape.channels);
  for (int y = 0; y < a.shape.height; ++y) {
    for (int x = 0; x < a.shape.width; ++x) {
      for (int c = 0; c < a.shape.channels; ++c) out.at(y, x, c) = a.at(y, x, c);
      for (int c = 0; c < b.shape.channels; ++c) out.at(y, x, a.shape.channels + c) = b.at(y, x, c);
    }
  }
  return out;
}

ResourceLedger expected_ledger(const Architecture& arch, int height, int width) {
  require(arch.pool > 0 && height % arch.pool == 0 && width % arch.pool == 0,
          "input size must be divisible by the pool factor");
  const int hp = height / arch.pool, wp = width / arch.pool;
  const auto k = arch.kernel_shapes();
  ResourceLedger l;
  const Shape s1{height, width, arch.conv1}, s2{height, width, arch.conv2},
      s3{hp, wp, arch.conv3}, s4{height, width, arch.conv4}, s5{height, width, 1};
  l.conv_macs = {conv_macs(s1, k[0].in_channels), conv_macs(s2, k[1].in_channels),
                 conv_macs(s3, k[2].in_channels), conv_macs(s4, k[3].in_channels),
                 conv_macs(s5, k[4].in_channels)};
  l.rows = {make_row(0, {height, width, arch.input_channels}, 0, 0),
            make_row(1, s1, l.conv_macs[0], k[0].count()),
            make_row(2, s2, l.conv_macs[1], k[1].count()),
            make_row(3, {hp, wp, arch.conv2}, 0, 0),
            make_row(4, s3, l.conv_macs[2], k[2].count()),
            make_row(5, {height, width, arch.conv3}, 0, 0),
            make_row(6, {height, width, arch.conv2 + arch.conv3}, 0, 0),
            make_row(7, s4, l.conv_macs[3], k[3].count()),
            make_row(8, s5, l.conv_macs[4], k[4].count())};
  finalize_ledger(l);
  return l;
}

template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const Params<T>& params, double threshold) {
  params.check();
  thread_local Workspace<T> ws;
  ForwardResult<T> r;
  run_forward(image, params, ws, &r.ledger);
  r.probability.shape = {ws.h, ws.w, 1};
  r.probability.values = ws.out;
  r.mask.resize(r.probability.values.size());
  for (std::size_t i = 0; i < r.mask.size(); ++i) {
    r.mask[i] = static_cast<double>(r.probability.values[i]) > threshold ? 1 : 0;
  }
  return r;
}

template <typename T>
double bce_loss(std::span<const T> probability, std::span<const std::uint8_t> mask) {
  require(probability.size() == mask.size() && !mask.empty(), "loss size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double p =
        std::clamp(static_cast<double>(probability[i]), kProbabilityClamp, 1.0 - kProbabilityClamp);
    sum -= mask[i] ? std::log(p) : std::log1p(-p);
  }
  return sum / static_cast<double>(mask.size());
}

template <typename T>
double loss_and_gradient(const Tensor<T>& image, std::span<const std::uint8_t> mask,
                         const Params<T>& params, Params<T>& grad) {
  params.check();
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    require(grad.layers[i].kernel.size() == params.layers[i].kernel.size() &&
                grad.layers[i].bias.size() == params.layers[i].bias.size(),
            "gradient buffer is not shaped like the parameters");
  }
  check_mask(mask, static_cast<std::size_t>(image.shape.height) * image.shape.width);
  Workspace<T> ws;
  run_forward(image, params, ws, nullptr);
  return backward(mask, params, ws, grad);
}

TrainResult train(std::span<const Sample> samples, const TrainConfig& config,
                  const Architecture& arch, const EpochCallback& on_epoch) {
  require(!samples.empty(), "training set is empty");
  require(config.epochs >= 0 && config.batch_size > 0, "bad epoch or batch count");
  for (const auto& s : samples) {
    check_mask(s.mask, static_cast<std::size_t>(s.image.shape.height) * s.image.shape.width);
  }

  TrainResult result;
  result.params = Params<float>::random(arch, config.seed);
  auto& params = result.params;
  Params<float> grad = Params<float>::zeros(arch);
  Params<float> m1 = grad, m2 = grad;
  Workspace<float> ws;
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto b1 = static_cast<float>(config.beta1);
  const auto b2 = static_cast<float>(config.beta2);
  const auto eps = static_cast<float>(config.epsilon);
  const auto lr = static_cast<float>(config.learning_rate);
  std::int64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng() % i]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (auto& l : grad.layers) {
        std::fill(l.kernel.begin(), l.kernel.end(), 0.0f);
        std::fill(l.bias.begin(), l.bias.end(), 0.0f);
      }
      for (std::size_t j = start; j < end; ++j) {
        const Sample& s = samples[order[j]];
        run_forward(s.image, params, ws, nullptr);
        epoch_loss += backward(s.mask, params, ws, grad);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      ++step;
      const float c1 = 1.0f - static_cast<float>(std::pow(config.beta1, step));
      const float c2 = 1.0f - static_cast<float>(std::pow(config.beta2, step));
      auto update = [&](std::vector<float>& w, const std::vector<float>& g, std::vector<float>& m,
                        std::vector<float>& v) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          const float gi = g[i] * inv;
          m[i] = b1 * m[i] + (1.0f - b1) * gi;
          v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
          w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
      };
      for (std::size_t l = 0; l < kConvLayers; ++l) {
        update(params.layers[l].kernel, grad.layers[l].kernel, m1.layers[l].kernel,
               m2.layers[l].kernel);
        update(params.layers[l].bias, grad.layers[l].bias, m1.layers[l].bias, m2.layers[l].bias);
      }
    }
    epoch_loss /= static_cast<double>(samples.size());
    result.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss, params);
  }
  return result;
}

std::size_t SegNetWeights::payload_bytes() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.values.size();
  return n;
}

SegNetWeights quantize(const Params<float>& params) {
  params.check();
  SegNetWeights q;
  q.arch = params.arch;
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    const auto& src = params.layers[i];
    auto& dst = q.layers[i];
    dst.shape = src.shape;
    float max_abs = 0.0f;
    for (float v : src.kernel) max_abs = std::max(max_abs, std::fabs(v));
    dst.scale = max_abs > 0.0f ? max_abs / 127.0f : 1.0f;
    dst.values.resize(src.kernel.size());
    for (std::size_t j = 0; j < src.kernel.size(); ++j) {
      const long r = std::lround(src.kernel[j] / dst.scale);
      dst.values[j] = static_cast<std::int8_t>(std::clamp(r, -127L, 127L));
    }
    dst.bias = src.bias;
  }
  return q;
}

Params<float> dequantize(const SegNetWeights& weights) {
  Params<float> p = Params<float>::zeros(weights.arch);
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    const auto& src = weights.layers[i];
    require(src.shape == p.layers[i].shape && src.values.size() == src.shape.count() &&
                src.bias.size() == static_cast<std::size_t>(src.shape.out_channels),
            "quantized layer does not match the architecture");
    for (std::size_t j = 0; j < src.values.size(); ++j) {
      p.layers[i].kernel[j] = src.scale * static_cast<float>(src.values[j]);
    }
    p.layers[i].bias = src.bias;
  }
  return p;
}

std::vector<std::uint8_t> serialize(const SegNetWeights& weights) {
  dequantize(weights);  // shape validation
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u16(out, kVersion);
  out.push_back(static_cast<std::uint8_t>(kConvLayers));
  out.push_back(static_cast<std::uint8_t>(weights.arch.pool));
  for (const auto& l : weights.layers) {
    out.push_back(static_cast<std::uint8_t>(l.shape.kernel_h));
    out.push_back(static_cast<std::uint8_t>(l.shape.kernel_w));
    put_u16(out, static_cast<std::uint16_t>(l.shape.in_channels));
    put_u16(out, static_cast<std::uint16_t>(l.shape.out_channels));
    put_f32(out, l.scale);
    for (std::int8_t v : l.values) out.push_back(static_cast<std::uint8_t>(v));
  }
  for (const auto& l : weights.layers) {
    for (float b : l.bias) put_f32(out, b);
  }
  return out;
}

SegNetWeights deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    throw DataError("weights: bad magic");
  }
  if (r.u16() != kVersion) throw DataError("weights: unsupported version");
  if (r.u8() != kConvLayers) throw DataError("weights: unexpected layer count");
  SegNetWeights w;
  w.arch.pool = r.u8();
  for (auto& l : w.layers) {
    l.shape.kernel_h = r.u8();
    l.shape.kernel_w = r.u8();
    l.shape.in_channels = r.u16();
    l.shape.out_channels = r.u16();
    l.scale = r.f32();
    if (l.shape.kernel_h != 3 || l.shape.kernel_w != 3 || l.shape.in_channels == 0 ||
        l.shape.out_channels == 0) {
      throw DataError("weights: bad layer shape");
    }
    if (!std::isfinite(l.scale) || l.scale <= 0.0f) throw DataError("weights: bad scale");
    const auto payload = r.take(l.shape.count());
    l.values.assign(payload.begin(), payload.end());
  }
  for (auto& l : w.layers) {
    l.bias.resize(static_cast<std::size_t>(l.shape.out_channels));
    for (float& b : l.bias) {
      b = r.f32();
      if (!std::isfinite(b)) throw DataError("weights: non-finite bias");
    }
  }
  if (!r.done()) throw DataError("weights: trailing bytes");
  w.arch.input_channels = w.layers[0].shape.in_channels;
  w.arch.conv1 = w.layers[0].shape.out_channels;
  w.arch.conv2 = w.layers[1].shape.out_channels;
  w.arch.conv3 = w.layers[2].shape.out_channels;
  w.arch.conv4 = w.layers[3].shape.out_channels;
  if (w.arch.kernel_shapes() !=
      std::array<KernelShape, kConvLayers>{w.layers[0].shape, w.layers[1].shape, w.layers[2].shape,
                                           w.layers[3].shape, w.layers[4].shape} ||
      w.arch.pool == 0) {
    throw DataError("weights: layer shapes are not a valid chain");
  }
  return w;
}

void save_weights(const std::filesystem::path& path, const SegNetWeights& weights) {
  const auto bytes = serialize(weights);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

SegNetWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  return deserialize(bytes);
}

Tensor<float> normalize_rgb(std::span<const std::uint8_t> rgb, int height, int width) {
  require(rgb.size() == static_cast<std::size_t>(height) * width * 3, "rgb size mismatch");
  Tensor<float> t(height, width, 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) t.values[i] = static_cast<float>(rgb[i]) / 255.0f;
  return t;
}

#define FVHAND_SEGNET_INSTANTIATE(T)                                                              \
  template struct Params<T>;                                                                      \
  template Tensor<T> conv2d_3x3_same(const Tensor<T>&, const ConvLayer<T>&, std::uint64_t*);      \
  template Tensor<T> maxpool(const Tensor<T>&, int);                                              \
  template Tensor<T> upsample(const Tensor<T>&, int);                                             \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                         \
  template ForwardResult<T> forward(const Tensor<T>&, const Params<T>&, double);                  \
  template double bce_loss(std::span<const T>, std::span<const std::uint8_t>);                    \
  template double loss_and_gradient(const Tensor<T>&, std::span<const std::uint8_t>,              \
                                    const Params<T>&, Params<T>&);

FVHAND_SEGNET_INSTANTIATE(float)
FVHAND_SEGNET_INSTANTIATE(double)

}  // namespace fvhand::segnet
