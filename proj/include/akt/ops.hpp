// SPDX-License-Identifier: Apache-2.0
//
// Differentiable elementwise, reduction and matrix primitives. Binary ops
// broadcast only a single-element operand against a tensor; any other shape
// mismatch is a ConfigError. log/div/sqrt add kEps inside their argument.
#pragma once

#include <vector>

#include "akt/tensor.hpp"

namespace akt {

enum class Elementwise { kAdd, kSub, kMul, kDiv, kSquare, kRelu, kLog, kExp, kSqrt };

const char* elementwise_name(Elementwise kind);

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b);
Tensor elementwise(Elementwise kind, const Tensor& a);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::kAdd, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::kSub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::kMul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::kDiv, a, b); }
inline Tensor add(const Tensor& a, float b) { return add(a, Tensor::scalar(b)); }
inline Tensor sub(const Tensor& a, float b) { return sub(a, Tensor::scalar(b)); }
inline Tensor mul(const Tensor& a, float b) { return mul(a, Tensor::scalar(b)); }
inline Tensor div(const Tensor& a, float b) { return div(a, Tensor::scalar(b)); }

inline Tensor square(const Tensor& a) { return elementwise(Elementwise::kSquare, a); }
inline Tensor relu(const Tensor& a) { return elementwise(Elementwise::kRelu, a); }
inline Tensor log(const Tensor& a) { return elementwise(Elementwise::kLog, a); }
inline Tensor exp(const Tensor& a) { return elementwise(Elementwise::kExp, a); }
inline Tensor sqrt(const Tensor& a) { return elementwise(Elementwise::kSqrt, a); }

/// Sum / mean of all elements, returned as shape [1].
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Reduces the listed axes away (they are removed from the shape). Reducing
/// every axis yields shape [1].
Tensor sum_over(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor mean_over(const Tensor& a, const std::vector<std::size_t>& axes);

Tensor reshape(const Tensor& a, Shape shape);

/// x / (d + eps) and x * d where d's shape equals the leading axes of x.
Tensor div_leading(const Tensor& x, const Tensor& d);
Tensor mul_leading(const Tensor& x, const Tensor& d);

/// Adds b[c] along axis 1 of x ([B, C, ...]).
Tensor add_bias(const Tensor& x, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace akt
