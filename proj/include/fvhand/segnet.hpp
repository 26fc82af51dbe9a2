#pragma once

// Five-layer encoder-decoder segmentation network with one skip connection:
//
//   input 88x72x3
//   conv 3x3x3x16   + ReLU          88x72x16
//   conv 3x3x16x16  + ReLU   (*)    88x72x16
//   maxpool 4x4                     22x18x16
//   conv 3x3x16x16  + ReLU          22x18x16
//   upsample 4x (nearest)           88x72x16
//   concat with (*)                 88x72x32
//   conv 3x3x32x8   + ReLU          88x72x8
//   conv 3x3x8x1    + sigmoid       88x72x1   -> mask = p > 0.5
//
// Everything is templated on the scalar type: float for training and
// inference, double for gradient and oracle checks.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fvhand::segnet {

inline constexpr std::size_t kConvLayers = 5;

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const { return static_cast<std::size_t>(height) * width * channels; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> values;  // row-major (y, x, c)

  Tensor() = default;
  Tensor(int height, int width, int channels, T fill = T(0))
      : shape{height, width, channels}, values(shape.size(), fill) {}

  T& at(int y, int x, int c) { return values[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c]; }
  const T& at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c];
  }
};

struct KernelShape {
  int kernel_h = 3;
  int kernel_w = 3;
  int in_channels = 0;
  int out_channels = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(kernel_h) * kernel_w * in_channels * out_channels;
  }
  friend bool operator==(const KernelShape&, const KernelShape&) = default;
};

// Kernel layout is (ky, kx, c_in, c_out), row-major.
template <typename T>
struct ConvLayer {
  KernelShape shape;
  std::vector<T> kernel;
  std::vector<T> bias;
};

struct Architecture {
  int input_channels = 3;
  int conv1 = 16;
  int conv2 = 16;  // skip connection source
  int conv3 = 16;
  int conv4 = 8;
  int pool = 4;

  std::array<KernelShape, kConvLayers> kernel_shapes() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

template <typename T>
struct Params {
  Architecture arch;
  std::array<ConvLayer<T>, kConvLayers> layers;

  static Params zeros(const Architecture& arch);
  // He-normal kernels, zero biases.
  static Params random(const Architecture& arch, std::uint64_t seed);

  std::size_t parameter_count() const;
  // Validates kernel and bias sizes against the architecture.
  void check() const;
};

std::uint64_t conv_macs(const Shape& output, int in_channels);

template <typename T>
Tensor<T> conv2d_3x3_same(const Tensor<T>& input, const ConvLayer<T>& layer,
                          std::uint64_t* macs = nullptr);
template <typename T>
Tensor<T> maxpool(const Tensor<T>& input, int factor);
template <typename T>
Tensor<T> upsample(const Tensor<T>& input, int factor);
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

inline constexpr int kPoolFactor = 4;
template <typename T>
Tensor<T> maxpool_4x4(const Tensor<T>& input) { return maxpool(input, kPoolFactor); }
template <typename T>
Tensor<T> upsample_4x(const Tensor<T>& input) { return upsample(input, kPoolFactor); }

struct LayerRecord {
  std::string name;
  Shape output;
  std::uint64_t macs = 0;
  std::size_t weight_bytes = 0;      // one byte per kernel weight
  std::size_t activation_bytes = 0;  // one byte per output value
};

struct ResourceLedger {
  std::vector<LayerRecord> rows;  // input row first, in execution order
  std::array<std::uint64_t, kConvLayers> conv_macs{};
  std::uint64_t total_macs = 0;
  std::size_t weight_bytes = 0;
  // Largest set of simultaneously live activations (inputs, outputs and the
  // retained skip tensor; concatenation is a view), one byte per value.
  std::size_t peak_activation_bytes = 0;
};

// Ledger implied by the architecture for an input of the given size.
ResourceLedger expected_ledger(const Architecture& arch, int height, int width);

template <typename T>
struct ForwardResult {
  Tensor<T> probability;
  std::vector<std::uint8_t> mask;  // 1 where probability > threshold
  ResourceLedger ledger;           // counted while executing
};

// Throws std::invalid_argument for malformed weights or a mismatching input.
template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const Params<T>& params, double threshold = 0.5);

inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
double bce_loss(std::span<const T> probability, std::span<const std::uint8_t> mask);

// Mean pixel BCE of one sample; accumulates d(loss)/d(params) into `grad`
// (which must be shaped like `params`). The gradient is that of the unclamped
// loss.
template <typename T>
double loss_and_gradient(const Tensor<T>& image, std::span<const std::uint8_t> mask,
                         const Params<T>& params, Params<T>& grad);

struct Sample {
  Tensor<float> image;  // values in [0, 1]
  std::vector<std::uint8_t> mask;
};

struct TrainConfig {
  int epochs = 150;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1;
};

struct TrainResult {
  Params<float> params;
  std::vector<double> epoch_loss;  // mean per-sample loss during each epoch
};

using EpochCallback = std::function<void(int epoch, double loss, const Params<float>& params)>;

// Throws std::invalid_argument on an empty dataset or non-binary masks.
TrainResult train(std::span<const Sample> samples, const TrainConfig& config,
                  const Architecture& arch = {}, const EpochCallback& on_epoch = {});

// --- 8-bit weights ---

struct QuantizedLayer {
  KernelShape shape;
  float scale = 1.0f;  // weight = scale * value
  std::vector<std::int8_t> values;
  std::vector<float> bias;  // kept at full precision
};

struct SegNetWeights {
  Architecture arch;
  std::array<QuantizedLayer, kConvLayers> layers;

  std::size_t payload_bytes() const;  // kernel bytes only
};

// Symmetric per-layer quantization to [-127, 127].
SegNetWeights quantize(const Params<float>& params);
Params<float> dequantize(const SegNetWeights& weights);

std::vector<std::uint8_t> serialize(const SegNetWeights& weights);
SegNetWeights deserialize(std::span<const std::uint8_t> bytes);
void save_weights(const std::filesystem::path& path, const SegNetWeights& weights);
SegNetWeights load_weights(const std::filesystem::path& path);

// Converts 8-bit RGB pixels to a normalized tensor.
Tensor<float> normalize_rgb(std::span<const std::uint8_t> rgb, int height, int width);

}  // namespace fvhand::segnet
