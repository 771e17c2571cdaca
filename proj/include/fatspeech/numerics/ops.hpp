#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fatspeech/numerics/tensor.hpp"

// Differentiable primitives. Every op checks shapes, computes its value, and
// records a backward rule on the active tape when any input requires grad.
namespace fatspeech::num {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a: [N, D], row: [D]; adds row to every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);

// [M, K] x [K, N] -> [M, N]
Tensor matmul(const Tensor& a, const Tensor& b);
// [M, K] x [N, K]^T -> [M, N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// [A, B, C] -> [B, A, C]
Tensor swap_leading_axes(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

// Gathers rows of a 2-D table; shared by embedding lookup and row selection.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows);
// Rows flagged in `masked` are replaced by `fill` (a [D] vector).
Tensor substitute_rows(const Tensor& a, const Tensor& fill, std::span<const std::uint8_t> masked);

// Row-wise over the last axis of a 2-D tensor.
Tensor softmax(const Tensor& a);
// Row i only attends to columns j <= i + offset; excluded entries get weight 0.
Tensor causal_softmax(const Tensor& a, std::size_t offset = 0);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
// Inverted dropout with a deterministic keep mask drawn from `seed`.
Tensor dropout(const Tensor& a, double p, std::uint64_t seed);

// x: [C_in, H, W], w: [C_out, C_in, k, k], b: [C_out]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);
// x: [C_in, H, W], w: [C_in, C_out, k, k], b: [C_out]
// Output extent per axis: (in - 1) * stride - 2 * padding + k + output_padding.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                        std::size_t padding, std::size_t output_padding);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);
// Mean negative log-likelihood of `targets` under row-wise softmax of logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// Squared error summed over the feature axis, averaged over rows flagged in
// `rows`; zero when no row is flagged.
Tensor masked_sq_error(const Tensor& pred, const Tensor& target,
                       std::span<const std::uint8_t> rows);

struct ConvShape {
  std::size_t time;
  std::size_t freq;
  bool operator==(const ConvShape&) const = default;
};

// floor((in + 2 * padding - kernel) / stride) + 1 per axis.
ConvShape conv2d_output_shape(std::size_t in_t, std::size_t in_f, std::size_t kernel,
                              std::size_t stride, std::size_t padding);

namespace detail {
// True when recording is on and at least one input needs a gradient.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
Tensor make_result(Shape shape, std::vector<double> data, bool track);
}  // namespace detail

}  // namespace fatspeech::num
