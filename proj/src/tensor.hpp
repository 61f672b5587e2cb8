#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "errors.hpp"

namespace slkd {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Fixed monotone table for piecewise-linear interpolation (lookup-interp1d).
// xs must be strictly increasing; queries are clamped to [xs.front(), xs.back()].
struct InterpTable {
  std::vector<double> xs;
  std::vector<double> ys;
  InterpTable(std::vector<double> xs_, std::vector<double> ys_);
  double eval(double q) const;
  double slope_at(double q) const;
};

enum class OpKind {
  Add, Sub, Mul, Div, Neg, Abs, Log, Exp, Sqrt, Square, PowConst,
  Relu, Gelu, Conv2d, BilinearResize, AvgPool2d,
  SumAxes, MeanAxes, MaxAxes, SoftmaxAxis, ClampMin, LookupInterp1d,
  ConcatAxis, Slice, Reshape, Transpose,
  Leaf,
};

const char* op_name(OpKind k);

// Attribute record for apply_primitive. Each op reads only its own fields.
struct OpAttrs {
  double scalar = 0.0;               // PowConst exponent, ClampMin bound
  int axis = 0;                      // SoftmaxAxis, ConcatAxis
  bool keepdims = false;             // reductions
  std::vector<int> axes;             // reduction axes, Transpose permutation
  int stride = 1;                    // Conv2d
  int pad = 0;                       // Conv2d
  int groups = 1;                    // Conv2d
  bool reflect_pad = false;          // Conv2d border mode
  int kh = 2, kw = 2, sh = 0, sw = 0;  // AvgPool2d (sh/sw 0 = same as kernel)
  int out_h = 0, out_w = 0;          // BilinearResize target
  std::vector<int> starts, sizes;    // Slice
  Shape dims;                        // Reshape target
  std::shared_ptr<const InterpTable> table;  // LookupInterp1d
};

struct TapeState;
class GradTape;
class GradientMap;
class Tensor;
GradientMap backward(const Tensor& loss);

// Dense row-major float32 tensor. Data is immutable after construction;
// ops always allocate fresh storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, float v);
  static Tensor scalar(float v);
  static Tensor from_data(const Shape& s, std::vector<float> v);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  const std::vector<float>& data() const;
  float at(int64_t flat) const { return data()[static_cast<size_t>(flat)]; }
  float item() const;  // contract: exactly one element
  bool all_finite() const;

  bool attached() const;
  Tensor detached() const;
  int node_id() const { return node_; }

 private:
  std::shared_ptr<const std::vector<float>> data_;
  Shape shape_;
  std::shared_ptr<TapeState> tape_;
  int node_ = -1;

  friend class GradTape;
  friend Tensor apply_primitive(OpKind, const std::vector<Tensor>&, const OpAttrs&);
  friend class GradientMap;
  friend GradientMap backward(const Tensor& loss);
  friend double gradient_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps);
};

// Records primitive applications for reverse-mode differentiation. Confined
// to one training step and one thread; keeps saved forward values alive.
class GradTape {
 public:
  GradTape();
  // Registers t as a differentiable leaf and returns the attached handle
  // (shares storage with t).
  Tensor leaf(const Tensor& t);
  size_t size() const;

  std::shared_ptr<TapeState> state() const { return state_; }

 private:
  std::shared_ptr<TapeState> state_;
};

// node-id -> gradient tensor. Absent entries mean zero gradient.
class GradientMap {
 public:
  bool contains(const Tensor& t) const;
  // Gradient of the loss w.r.t. t; zeros(t.shape) when t is unused.
  Tensor get(const Tensor& t) const;
  const std::unordered_map<int, Tensor>& entries() const { return grads_; }

 private:
  std::unordered_map<int, Tensor> grads_;
  std::shared_ptr<TapeState> tape_;
  friend GradientMap backward(const Tensor& loss);
};

// Core entry point: validates shapes, computes the forward value and, when
// any input is tape-attached, records the node with a reverse rule.
Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// Gradients of a scalar, tape-attached loss w.r.t. every attached leaf.
GradientMap backward(const Tensor& loss);

// Max over elements of |analytic - central difference| /
// max(|analytic|, |central difference|, 1e-8). The finite-difference side
// replays the recorded graph in 64-bit arithmetic.
double gradient_check(const std::function<Tensor(const Tensor&)>& f,
                      const Tensor& x, double eps);

// ---- convenience wrappers -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor pow_const(const Tensor& a, double e);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double bound);
Tensor lookup_interp1d(const Tensor& q, std::shared_ptr<const InterpTable> table);

// weight [C_out, C_in/groups, kh, kw]; optional bias [C_out]. pad < 0 means
// "same" padding ((k-1)/2). Zero borders by default, reflect when requested.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int stride = 1, int pad = -1, int groups = 1, bool reflect = false);
Tensor conv2d_nobias(const Tensor& x, const Tensor& w,
                     int stride = 1, int pad = -1, int groups = 1, bool reflect = false);

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor avgpool2d(const Tensor& x, int kh, int kw, int sh = 0, int sw = 0);

Tensor sum_axes(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor mean_axes(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor max_axes(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor softmax_axis(const Tensor& x, int axis);

Tensor concat_axis(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, const std::vector<int>& starts, const std::vector<int>& sizes);
Tensor reshape(const Tensor& x, const Shape& dims);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor add_scalar(const Tensor& a, float c) { return add(a, Tensor::scalar(c)); }
inline Tensor mul_scalar(const Tensor& a, float c) { return mul(a, Tensor::scalar(c)); }

// 1 / (1 + exp(min(-x, 30))): overflow-safe composite, gradient-exact except
// in the saturated tail where the true gradient is below 1e-13 anyway.
Tensor sigmoid(const Tensor& x);

}  // namespace slkd
