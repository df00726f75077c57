#include "ee/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ee/error.hpp"

namespace ee {

namespace {

void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::kShape, std::string(op) + ": " + a.shape_string() + " vs " +
                                       b.shape_string());
  }
}

void require_width(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw Error(ErrorKind::kShape, std::string(what) + " length " + std::to_string(got) +
                                       " does not match width " + std::to_string(want));
  }
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  if (name == "silu") return Activation::kSilu;
  throw Error(ErrorKind::kConfig, "unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
    case Activation::kSilu: return "silu";
  }
  throw Error(ErrorKind::kConfig, "unknown activation kind");
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::kShape,
                "matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor2 out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor2 matmul_transposed(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorKind::kShape,
                "matmul_transposed: " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  Tensor2 out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < ar.size(); ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor2 linear(const Tensor2& x, const Tensor2& w, const Tensor2& bias) {
  Tensor2 out = matmul_transposed(x, w);
  if (bias.size() == 0) return out;
  require_width(bias.size(), out.cols(), "bias");
  const auto b = bias.values();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
  return out;
}

Tensor2 transpose(const Tensor2& a) {
  Tensor2 out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

Tensor2 add(const Tensor2& a, const Tensor2& b) {
  Tensor2 out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "add");
  auto dst = a.values();
  auto src = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor2 softmax_rows(const Tensor2& a) {
  Tensor2 out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto in = a.row(i);
    auto dst = out.row(i);
    double max = -std::numeric_limits<double>::infinity();
    for (double v : in) max = std::max(max, v);
    if (!std::isfinite(max)) {
      // Fully masked row: nothing to normalize.
      continue;
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - max);
      sum += dst[j];
    }
    for (double& v : dst) v /= sum;
  }
  return out;
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

// Exact erf form, x * Phi(x).
double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Tensor2 activate(Activation kind, const Tensor2& x) {
  double (*fn)(double) = nullptr;
  switch (kind) {
    case Activation::kRelu: fn = relu; break;
    case Activation::kGelu: fn = gelu; break;
    case Activation::kSilu: fn = silu; break;
    default: throw Error(ErrorKind::kConfig, "unknown activation kind");
  }
  Tensor2 out = x;
  for (double& v : out.values()) v = fn(v);
  return out;
}

Tensor2 layer_norm(const Tensor2& x, std::span<const double> gamma,
                   std::span<const double> beta, double eps) {
  require_width(gamma.size(), x.cols(), "layer_norm gamma");
  require_width(beta.size(), x.cols(), "layer_norm beta");
  Tensor2 out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= n;
    const double denom = std::sqrt(var + eps);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) {
      // 0/0 on a constant row with eps = 0 resolves to a zero numerator.
      const double centered = in[j] - mean;
      dst[j] = (centered == 0.0 ? 0.0 : centered / denom) * gamma[j] + beta[j];
    }
  }
  return out;
}

Tensor2 rms_norm(const Tensor2& x, std::span<const double> gamma, double eps) {
  require_width(gamma.size(), x.cols(), "rms_norm gamma");
  Tensor2 out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    double sq = 0.0;
    for (double v : in) sq += v * v;
    const double denom = std::sqrt(sq / n + eps);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = (in[j] == 0.0 ? 0.0 : in[j] / denom) * gamma[j];
    }
  }
  return out;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace ee
