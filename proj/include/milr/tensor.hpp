#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle: copying it aliases the same storage. Operations
// never modify their inputs; they allocate a new result and, when a Tape is
// active and some input requires gradients, append a backward rule to the
// tape. Tape::backward replays the rules in reverse recording order, which is
// a valid reverse topological order because an operation can only consume
// tensors that already exist.
//
// Every operation checks its output for NaN/inf and throws NumericError.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace milr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;

  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view of a leaf's storage (parameters, optimizer updates).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Copy of the values that does not participate in differentiation.
  Tensor detach() const;
  /// Deep copy preserving requires_grad (no tape history).
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const TensorImpl& output)>;

  struct Record {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(Record record);
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Populates gradients of every requires_grad tensor reachable from loss.
  /// Throws ContractError unless loss holds exactly one element. The tape is
  /// consumed.
  void backward(const Tensor& loss);

  /// Number of backward rules executed by the last backward().
  std::size_t last_visit_count() const { return visits_; }

 private:
  std::vector<Record> records_;
  std::size_t visits_ = 0;
};

/// Makes a tape the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Convenience: backward on the thread's active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise (numpy broadcasting for binary ops)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
/// Clamps to [lo, hi]; gradient is zero outside the interval.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& x);
Tensor operator*(const Tensor& x, double factor);
Tensor operator*(double factor, const Tensor& x);
Tensor operator+(const Tensor& x, double value);

// ---------------------------------------------------------------------------
// Reductions. `axis` may be negative (counted from the end).

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor logsumexp(const Tensor& x, int axis, bool keepdim = false);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor index_select(const Tensor& x, const std::vector<std::size_t>& rows);
Tensor concat(const std::vector<Tensor>& parts);  // along axis 0

// ---------------------------------------------------------------------------
// Linear algebra and convolution

Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation (no kernel flip). input [B,C,H,W], weight [O,C,kh,kw],
/// bias [O] or undefined. Output spatial size floor((H + 2p - kh) / s) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Conv2dOptions options = {});

/// Non-overlapping average pooling with window and stride `kernel`.
Tensor avgpool2d(const Tensor& x, std::size_t kernel);

/// Mean over the two trailing spatial axes: [B,C,H,W] -> [B,C].
Tensor spatial_mean(const Tensor& x);

}  // namespace milr
