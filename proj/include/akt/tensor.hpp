// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float32 tensors and the reverse-mode tape that records
// operations on them.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "akt/errors.hpp"

namespace akt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Guard added inside every log/div/sqrt argument.
inline constexpr float kEps = 1e-8f;

struct TensorStorage {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;

  std::span<float> ensure_grad();
};

/// Handle to a shared storage block. Copies alias the same data (and the same
/// gradient slot), which is what the tape relies on; use clone() for a deep
/// copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  /// Accumulated gradient; zeros when nothing has flowed back yet.
  Tensor grad() const;
  bool has_grad() const;
  void zero_grad();

  Tensor clone() const;
  /// Same values, fresh storage, never tracked.
  Tensor detach() const;

  const TensorStorage* id() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorStorage>& storage() const { return impl_; }

 private:
  std::shared_ptr<TensorStorage> impl_;
};

/// Ordered record of differentiable operations for one thread. Constructing a
/// tape makes it the active recorder on the calling thread until it is
/// destroyed; ops whose inputs require grad append an entry to it.
class GradTape {
 public:
  using BackwardFn = std::function<void()>;

  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// The recorder ops should append to, or nullptr (no tape, or inside NoGrad).
  static GradTape* active();

  void record(std::string_view op, const Tensor& output, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape newest-first, then clears it.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string_view op;
    std::shared_ptr<TensorStorage> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  GradTape* previous_ = nullptr;
};

/// Suspends recording on this thread for its lifetime.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// True when an op over these inputs has to be recorded.
bool tracking(std::initializer_list<const Tensor*> inputs);

/// Marks `out` as tracked and appends the backward closure to the active tape.
void record(std::string_view op, Tensor& out, GradTape::BackwardFn backward);

/// Throws NumericError naming `op` if any value is NaN/Inf.
void check_finite(std::string_view op, std::span<const float> values);

}  // namespace detail

}  // namespace akt
