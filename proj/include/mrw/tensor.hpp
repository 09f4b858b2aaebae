#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mrw {

// Storage node shared by tensor handles and tape closures.
struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), 0.0);
  }
};

// Dense row-major tensor of doubles, rank 1..3. Value-semantic handle over
// shared storage; ops never mutate their inputs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) {
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data.assign(check_numel(impl_->shape), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> values) {
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    if (static_cast<int64_t>(values.size()) != check_numel(impl_->shape))
      throw std::invalid_argument("tensor: value count does not match shape");
    impl_->data = std::move(values);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.impl_->data) x = v;
    return t;
  }

  static Tensor from(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor({n}, std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int axis) const { return impl_->shape.at(static_cast<size_t>(axis)); }
  int64_t numel() const { return impl_->numel(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double value() const {
    if (numel() != 1) throw std::invalid_argument("tensor: value() needs a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }

  double* grad_data() {
    impl_->ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<double>& grad() const {
    const_cast<TensorImpl*>(impl_.get())->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->zero_grad(); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }

 private:
  static int64_t check_numel(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 3)
      throw std::invalid_argument("tensor: rank must be 1..3");
    int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor: dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::shared_ptr<TensorImpl> impl_;
};

std::string shape_str(const std::vector<int>& shape);

}  // namespace mrw
