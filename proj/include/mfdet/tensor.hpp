#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfdet {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline int shape_numel(const std::vector<int>& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

// Dense row-major tensor. Copies are shallow: they alias the same value and
// gradient storage, which is what lets backward closures accumulate into the
// buffers the caller still holds.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))),
        requires_grad_(false) {
    for (int d : shape_)
      if (d < 0) throw ShapeError("tensor: negative dimension in " + shape_str(shape_));
    if (requires_grad) set_requires_grad(true);
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int>(values.size()))
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    Tensor t(std::move(shape), requires_grad);
    std::copy(values.begin(), values.end(), t.data().begin());
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }

  int dim(int i) const {
    int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw ShapeError("tensor: axis out of range for " + shape_str(shape_));
    return shape_[i];
  }

  int numel() const { return data_ ? static_cast<int>(data_->size()) : 0; }

  std::vector<T>& data() { return *data_; }
  const std::vector<T>& data() const { return *data_; }

  bool requires_grad() const { return requires_grad_; }

  void set_requires_grad(bool b) {
    requires_grad_ = b;
    if (b) ensure_grad();
  }

  std::vector<T>& grad() {
    ensure_grad();
    return *grad_;
  }

  const std::vector<T>* grad_if_allocated() const { return grad_ ? grad_.get() : nullptr; }

  std::shared_ptr<std::vector<T>> grad_handle() {
    ensure_grad();
    return grad_;
  }

  std::shared_ptr<std::vector<T>> data_handle() const { return data_; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape_));
    return (*data_)[0];
  }

  // Aliasing view with a new shape. Value and gradient buffers are shared, so
  // no tape node is needed for gradients to flow through a reshape.
  Tensor reshaped(std::vector<int> new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(new_shape));
    Tensor out(*this);
    out.shape_ = std::move(new_shape);
    return out;
  }

 private:
  void ensure_grad() {
    if (!grad_ && data_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  bool requires_grad_ = false;
};

// Records one backward closure per forward operation. Creation order is
// topological order, so replaying the list once in reverse reaches every node
// exactly once. Nodes whose output gradient is still all-zero are skipped.
template <typename T>
class GradTape {
 public:
  void record(const char* op, std::shared_ptr<std::vector<T>> out_grad,
              std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(out_grad), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  void replay_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      bool any = false;
      for (T v : *it->out_grad)
        if (v != T(0)) {
          any = true;
          break;
        }
      if (any) it->backward();
    }
  }

  static GradTape*& active() {
    static thread_local GradTape* tape = nullptr;
    return tape;
  }

 private:
  struct Node {
    const char* op;
    std::shared_ptr<std::vector<T>> out_grad;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>* tape) : prev_(GradTape<T>::active()) {
    GradTape<T>::active() = tape;
  }
  ~TapeScope() { GradTape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* prev_;
};

template <typename T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  GradTape<T>* tape = GradTape<T>::active();
  if (!tape) throw std::logic_error("backward: no active gradient tape");
  loss.grad()[0] += T(1);
  tape->replay_backward();
}

}  // namespace mfdet
