#pragma once

// Straightforward reference implementations used as test oracles.

#include "fvhand/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

using fvhand::segnet::ConvLayer;
using fvhand::segnet::Params;
using fvhand::segnet::Tensor;

struct Counted {
  Tensor<double> t;
  std::uint64_t macs = 0;
};

// Zero-padded 3x3 convolution, one multiply-accumulate per tap and input
// channel, padded taps included.
inline Counted conv(const Tensor<double>& in, const ConvLayer<double>& l, bool relu) {
  const int h = in.shape.height, w = in.shape.width, ci = in.shape.channels, co = l.shape.out_channels;
  Counted r{Tensor<double>(h, w, co), 0};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int o = 0; o < co; ++o) {
        double acc = l.bias[o];
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            for (int c = 0; c < ci; ++c) {
              const int yy = y + ky - 1, xx = x + kx - 1;
              const double v = (yy < 0 || yy >= h || xx < 0 || xx >= w) ? 0.0 : in.at(yy, xx, c);
              acc += v * l.kernel[((ky * 3 + kx) * ci + c) * co + o];
              ++r.macs;
            }
          }
        }
        r.t.at(y, x, o) = relu ? std::max(acc, 0.0) : acc;
      }
    }
  }
  return r;
}

struct Forward {
  std::vector<Tensor<double>> outputs;  // conv1, conv2, pool, conv3, up, concat, conv4, prob
  std::vector<std::uint64_t> macs;      // per conv layer
  Tensor<double> probability() const { return outputs.back(); }
};

inline Forward forward(const Tensor<double>& image, const Params<double>& p) {
  const int f = p.arch.pool;
  Forward r;
  auto step = [&](const Tensor<double>& in, int layer, bool relu) {
    auto c = conv(in, p.layers[layer], relu);
    r.macs.push_back(c.macs);
    return c.t;
  };
  const auto a1 = step(image, 0, true);
  const auto a2 = step(a1, 1, true);
  Tensor<double> pool(a2.shape.height / f, a2.shape.width / f, a2.shape.channels, -INFINITY);
  for (int y = 0; y < a2.shape.height; ++y)
    for (int x = 0; x < a2.shape.width; ++x)
      for (int c = 0; c < a2.shape.channels; ++c) pool.at(y / f, x / f, c) = std::max(pool.at(y / f, x / f, c), a2.at(y, x, c));
  const auto a3 = step(pool, 2, true);
  Tensor<double> up(a2.shape.height, a2.shape.width, a3.shape.channels);
  for (int y = 0; y < up.shape.height; ++y)
    for (int x = 0; x < up.shape.width; ++x)
      for (int c = 0; c < up.shape.channels; ++c) up.at(y, x, c) = a3.at(y / f, x / f, c);
  Tensor<double> cat(a2.shape.height, a2.shape.width, a2.shape.channels + up.shape.channels);
  for (int y = 0; y < cat.shape.height; ++y)
    for (int x = 0; x < cat.shape.width; ++x)
      for (int c = 0; c < cat.shape.channels; ++c)
        cat.at(y, x, c) = c < a2.shape.channels ? a2.at(y, x, c) : up.at(y, x, c - a2.shape.channels);
  const auto a4 = step(cat, 3, true);
  auto z = step(a4, 4, false);
  for (auto& v : z.values) v = 1.0 / (1.0 + std::exp(-v));
  r.outputs = {a1, a2, pool, a3, up, cat, a4, z};
  return r;
}

inline double bce(const Tensor<double>& prob, const std::vector<std::uint8_t>& mask) {
  double s = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) s -= mask[i] ? std::log(prob.values[i]) : std::log(1.0 - prob.values[i]);
  return s / static_cast<double>(mask.size());
}

}  // namespace oracle
