// SPDX-License-Identifier: Apache-2.0
#include "akt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace akt {

namespace {
thread_local GradTape* t_tape = nullptr;
thread_local bool t_no_grad = false;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<float> TensorStorage::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<TensorStorage>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ConfigError("tensor dimension must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<TensorStorage>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ConfigError("tensor dimension must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ConfigError("shape " + shape_str(shape) + " does not match " +
                      std::to_string(values.size()) + " values");
  }
  impl_->data = std::move(values);
  impl_->shape = std::move(shape);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{1}, std::vector<float>{value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<float> Tensor::data() {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->data;
}

std::span<const float> Tensor::data() const {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ConfigError("use of undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl_) throw ConfigError("use of undefined tensor");
  if (impl_->grad.size() != impl_->data.size()) return Tensor(impl_->shape, 0.0f);
  return Tensor(impl_->shape, impl_->grad);
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  Tensor out(shape(), impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

GradTape::GradTape() : previous_(t_tape) { t_tape = this; }

GradTape::~GradTape() {
  if (t_tape == this) t_tape = previous_;
}

GradTape* GradTape::active() { return t_no_grad ? nullptr : t_tape; }

void GradTape::record(std::string_view op, const Tensor& output, BackwardFn backward) {
  entries_.push_back(Entry{op, output.storage(), std::move(backward)});
}

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ConfigError("backward() needs a scalar loss, got " +
                      (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad() || entries_.empty()) {
    throw ConfigError("backward() on a loss that was not recorded on this tape");
  }
  loss.storage()->ensure_grad()[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward();
  }
  entries_.clear();
}

NoGrad::NoGrad() : previous_(t_no_grad) { t_no_grad = true; }
NoGrad::~NoGrad() { t_no_grad = previous_; }

namespace detail {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (GradTape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->requires_grad(); });
}

void record(std::string_view op, Tensor& out, GradTape::BackwardFn backward) {
  out.set_requires_grad(true);
  GradTape::active()->record(op, out, std::move(backward));
}

void check_finite(std::string_view op, std::span<const float> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite value produced by " + std::string(op) + " at element " +
                         std::to_string(i));
    }
  }
}

}  // namespace detail

}  // namespace akt
