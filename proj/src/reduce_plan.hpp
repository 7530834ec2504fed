// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "akt/tensor.hpp"

namespace akt::detail {

/// Maps every flat input index to the flat index of the output it reduces into.
struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;
  std::size_t group = 1;  // inputs folded into each output
};

ReducePlan plan_reduce(const Shape& in, const std::vector<std::size_t>& axes);

}  // namespace akt::detail
