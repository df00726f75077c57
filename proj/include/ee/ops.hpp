#pragma once

#include <span>
#include <string_view>

#include "ee/tensor.hpp"

namespace ee {

enum class Activation { kRelu, kGelu, kSilu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kRmsNormEps = 1e-6;

// All kernels reduce in ascending index order so results do not depend on
// scheduling; see the determinism tests.

Tensor2 matmul(const Tensor2& a, const Tensor2& b);
// a * b^T without materializing the transpose.
Tensor2 matmul_transposed(const Tensor2& a, const Tensor2& b);
// x * w^T + bias, where w is (out x in) and bias is a 1 x out row (or empty).
Tensor2 linear(const Tensor2& x, const Tensor2& w, const Tensor2& bias);

Tensor2 transpose(const Tensor2& a);
Tensor2 add(const Tensor2& a, const Tensor2& b);
void add_inplace(Tensor2& a, const Tensor2& b);

// Row-wise softmax with max subtraction. -inf entries map to 0.
Tensor2 softmax_rows(const Tensor2& a);

double relu(double x);
double gelu(double x);
double silu(double x);
Tensor2 activate(Activation kind, const Tensor2& x);

Tensor2 layer_norm(const Tensor2& x, std::span<const double> gamma,
                   std::span<const double> beta, double eps = kLayerNormEps);
Tensor2 rms_norm(const Tensor2& x, std::span<const double> gamma,
                 double eps = kRmsNormEps);

// Index of the maximum entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> row);

}  // namespace ee
