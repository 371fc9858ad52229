#include <cmath>
#include <sstream>

#include "detail.hpp"
#include "milr/errors.hpp"

namespace milr {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  detail::check_finite(data, "tensor construction");
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

namespace {
const TensorImpl& require(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) throw ContractError("use of an undefined tensor");
  return *impl;
}
}  // namespace

const Shape& Tensor::shape() const { return require(impl_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return require(impl_).data.size(); }

std::span<const double> Tensor::data() const { return require(impl_).data; }

std::span<double> Tensor::mutable_data() {
  require(impl_);
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) {
    throw DimensionError("index rank does not match tensor rank");
  }
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range");
    offset = offset * s[axis] + i;
    ++axis;
  }
  return impl_->data[offset];
}

bool Tensor::requires_grad() const { return require(impl_).requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require(impl_);
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

bool Tensor::has_grad() const { return !require(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const { return require(impl_).grad; }

void Tensor::zero_grad() {
  require(impl_);
  if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
  const TensorImpl& src = require(impl_);
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = src.shape;
  t.impl_->data = src.data;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::record(Record record) { records_.push_back(std::move(record)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss");
  }
  const auto& root = loss.impl();
  bool on_tape = root->requires_grad;
  for (const auto& r : records_) {
    if (r.output == root) on_tape = true;
  }
  if (!on_tape) {
    throw ContractError("backward() loss is not connected to the tape");
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  visits_ = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // no gradient flows here
    it->backward(*it->output);
    ++visits_;
  }
  // Intermediate gradients are dropped with the tape; leaves keep theirs.
  records_.clear();
}

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------

namespace detail {

void check_finite(std::span<const double> values, std::string_view op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

Tensor finish(std::string_view op, Shape shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs,
              Tape::BackwardFn backward) {
  check_finite(values, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tape* tape = active_tape();
  bool needs = false;
  for (const Tensor* in : inputs) needs = needs || wants_grad(*in);
  if (tape && needs && backward) {
    impl->requires_grad = true;
    Tape::Record rec;
    rec.op = op;
    for (const Tensor* in : inputs) {
      if (in->defined()) rec.inputs.push_back(in->impl());
    }
    rec.output = impl;
    rec.backward = std::move(backward);
    tape->record(std::move(rec));
  }
  return Tensor::from_impl(std::move(impl));
}

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail
}  // namespace milr
