#pragma once

// Cross-channel Interaction Strategy: channel attention whose 1D-convolution
// kernel size adapts to the channel count, plus the forward reweighting
// applied to deep feature maps.

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "sa3/tensor.hpp"

namespace sa3 {

// Nearest odd integer to t, ties resolved upward. 2*floor(t/2)+1 lands on
// the nearest odd below or at t+1, which is exactly that rule.
inline int nearest_odd(double t) {
  return 2 * static_cast<int>(std::floor(t / 2.0)) + 1;
}

// Adaptive kernel size k from channel count C: t = |(log2 C - b) / gamma|,
// rounded to the nearest odd integer (ties upward) and clamped to the
// largest odd number not exceeding C.
inline int kernel_size(std::int64_t channels, int gamma = 2, int b = 1) {
  if (channels < 2) throw std::invalid_argument("kernel_size: channel count must be >= 2");
  if (gamma < 1) throw std::invalid_argument("kernel_size: gamma must be >= 1");
  const double t = std::fabs((std::log2(static_cast<double>(channels)) - b) / gamma);
  int k = nearest_odd(t);
  const std::int64_t cap = channels % 2 == 1 ? channels : channels - 1;
  if (k > cap) k = static_cast<int>(cap);
  return k < 1 ? 1 : k;
}

// Inverse mapping C = 2^(gamma*k + b).
inline std::int64_t channel_dim(int k, int gamma = 2, int b = 1) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("channel_dim: k must be odd and >= 1");
  const std::int64_t e = static_cast<std::int64_t>(gamma) * k + b;
  if (e < 0 || e > 62) throw std::invalid_argument("channel_dim: exponent out of range");
  return std::int64_t{1} << e;
}

struct CisConfig {
  int gamma = 2;
  int b = 1;
  int expected_channels = 0;
  Tensor kernel_weights;  // length k, learnable

  // Uniform averaging kernel: a neutral, reproducible starting point.
  static CisConfig adaptive(int channels, int gamma = 2, int b = 1) {
    CisConfig cfg;
    cfg.gamma = gamma;
    cfg.b = b;
    cfg.expected_channels = channels;
    const int k = kernel_size(channels, gamma, b);
    cfg.kernel_weights = Tensor::full({k}, 1.0 / k);
    return cfg;
  }

  // ECA-style comparator with a constant kernel size.
  static CisConfig fixed(int channels, int k = 3) {
    CisConfig cfg;
    cfg.expected_channels = channels;
    cfg.kernel_weights = Tensor::full({k}, 1.0 / k);
    return cfg;
  }
};

struct CisOutput {
  Tensor reweighted;  // same shape as the input map
  Tensor omega;       // per-channel weights, each strictly in (0,1)
};

// omega = sigmoid(conv1d(global_avg_pool(chi), kernel)); output scales each
// channel of chi by its weight. `kernel` may be a tape leaf so the weights
// stay learnable.
inline CisOutput cis_forward(const Tensor& chi, const CisConfig& cfg, const Tensor& kernel) {
  if (chi.rank() != 3) throw std::invalid_argument("cis_forward: expected [H,W,C] input");
  if (chi.extent(2) != cfg.expected_channels)
    throw std::invalid_argument("cis_forward: channel count does not match config");
  Tensor pooled = global_avg_pool(chi);
  Tensor omega = sigmoid(conv1d(pooled, kernel));
  return CisOutput{mul_channels(chi, omega), omega};
}

inline CisOutput cis_forward(const Tensor& chi, const CisConfig& cfg) {
  return cis_forward(chi, cfg, cfg.kernel_weights);
}

}  // namespace sa3
