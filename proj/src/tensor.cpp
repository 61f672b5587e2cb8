#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace slkd {

// ---------------------------------------------------------------------------
// shape utilities

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    st[d] = acc;
    acc *= s[d];
  }
  return st;
}

void check_shape_valid(const Shape& s, const char* who) {
  for (int d : s)
    require(d > 0, std::string(who) + ": dimensions must be positive, got " + shape_str(s));
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* who) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int d = 0; d < r; ++d) {
    const int da = d < r - ra ? 1 : a[d - (r - ra)];
    const int db = d < r - rb ? 1 : b[d - (r - rb)];
    if (da == db || da == 1 || db == 1) {
      out[d] = std::max(da, db);
    } else {
      throw ContractError(std::string(who) + ": shapes not broadcastable: " + shape_str(a) +
                          " vs " + shape_str(b));
    }
  }
  return out;
}

// Strides of `in` aligned to the trailing dims of the broadcast shape `out`,
// with 0 for broadcast dimensions.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const int r = static_cast<int>(out.size()), ri = static_cast<int>(in.size());
  std::vector<int64_t> real = row_strides(in);
  std::vector<int64_t> st(r, 0);
  for (int d = 0; d < r; ++d) {
    const int id = d - (r - ri);
    if (id >= 0 && in[id] != 1) st[d] = real[id];
  }
  return st;
}

// Iterates the broadcast output space calling f(out_flat, a_flat, b_flat).
template <typename F>
void for_each_broadcast2(const Shape& sa, const Shape& sb, const Shape& so, F&& f) {
  const int64_t n = shape_numel(so);
  const int r = static_cast<int>(so.size());
  const std::vector<int64_t> ost = row_strides(so);
  const std::vector<int64_t> ast = broadcast_strides(sa, so);
  const std::vector<int64_t> bst = broadcast_strides(sb, so);
  std::vector<int64_t> coord(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      coord[d]++;
      ia += ast[d];
      ib += bst[d];
      if (coord[d] < so[d]) break;
      ia -= ast[d] * so[d];
      ib -= bst[d] * so[d];
      coord[d] = 0;
    }
  }
}

std::vector<int> normalize_axes(const std::vector<int>& axes, int rank, const char* who) {
  require(!axes.empty(), std::string(who) + ": empty axis list");
  std::vector<int> out;
  for (int a : axes) {
    int v = a < 0 ? a + rank : a;
    require(v >= 0 && v < rank,
            std::string(who) + ": axis " + std::to_string(a) + " out of range for rank " +
                std::to_string(rank));
    out.push_back(v);
  }
  std::sort(out.begin(), out.end());
  require(std::adjacent_find(out.begin(), out.end()) == out.end(),
          std::string(who) + ": duplicate axis");
  return out;
}

Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdims) {
  Shape out;
  size_t ai = 0;
  for (int d = 0; d < static_cast<int>(in.size()); ++d) {
    const bool red = ai < axes.size() && axes[ai] == d;
    if (red) {
      ++ai;
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[d]);
    }
  }
  if (out.empty()) out.push_back(1);  // full reduction yields a scalar [1]
  return out;
}

// Per-input-dimension stride into the reduced output (0 on reduced dims).
std::vector<int64_t> reduction_strides(const Shape& in, const std::vector<int>& axes,
                                       bool keepdims, const Shape& out) {
  const int r = static_cast<int>(in.size());
  std::vector<int64_t> st(r, 0);
  if (shape_numel(out) == 1) return st;
  const std::vector<int64_t> ost = row_strides(out);
  size_t ai = 0;
  int od = 0;
  for (int d = 0; d < r; ++d) {
    const bool red = ai < axes.size() && axes[ai] == d;
    if (red) {
      ++ai;
      if (keepdims) ++od;
    } else {
      st[d] = ost[od];
      ++od;
    }
  }
  return st;
}

template <typename F>
void for_each_reduced(const Shape& in, const std::vector<int64_t>& out_st, F&& f) {
  const int64_t n = shape_numel(in);
  const int r = static_cast<int>(in.size());
  std::vector<int64_t> coord(r, 0);
  int64_t o = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, o);
    for (int d = r - 1; d >= 0; --d) {
      coord[d]++;
      o += out_st[d];
      if (coord[d] < in[d]) break;
      o -= out_st[d] * in[d];
      coord[d] = 0;
    }
  }
}

int reflect_idx(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

struct ConvDims {
  int ci, h, w, co, cig, kh, kw, oh, ow, pad;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, const OpAttrs& at) {
  require(xs.size() == 3, "conv2d: input must be [C,H,W], got " + shape_str(xs));
  require(ws.size() == 4, "conv2d: weight must be [Co,Ci/g,kh,kw], got " + shape_str(ws));
  ConvDims d;
  d.ci = xs[0]; d.h = xs[1]; d.w = xs[2];
  d.co = ws[0]; d.cig = ws[1]; d.kh = ws[2]; d.kw = ws[3];
  require(at.groups >= 1 && d.ci % at.groups == 0 && d.co % at.groups == 0,
          "conv2d: channels " + std::to_string(d.ci) + "->" + std::to_string(d.co) +
              " not divisible by groups " + std::to_string(at.groups));
  require(d.cig == d.ci / at.groups,
          "conv2d: weight in-channels " + std::to_string(d.cig) + " != C/groups " +
              std::to_string(d.ci / at.groups));
  require(at.stride >= 1, "conv2d: stride must be >= 1");
  d.pad = at.pad < 0 ? (d.kh - 1) / 2 : at.pad;
  if (at.reflect_pad) {
    require(d.pad <= d.h - 1 && d.pad <= d.w - 1,
            "conv2d: reflect padding " + std::to_string(d.pad) + " too large for input " +
                shape_str(xs));
  }
  d.oh = (d.h + 2 * d.pad - d.kh) / at.stride + 1;
  d.ow = (d.w + 2 * d.pad - d.kw) / at.stride + 1;
  require(d.oh >= 1 && d.ow >= 1, "conv2d: kernel " + shape_str(ws) +
                                      " larger than padded input " + shape_str(xs));
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// InterpTable

InterpTable::InterpTable(std::vector<double> xs_, std::vector<double> ys_)
    : xs(std::move(xs_)), ys(std::move(ys_)) {
  require(xs.size() == ys.size() && xs.size() >= 2,
          "lookup-interp1d: table needs >= 2 matching points");
  for (size_t i = 1; i < xs.size(); ++i)
    require(xs[i] > xs[i - 1], "lookup-interp1d: table x-axis not strictly increasing at index " +
                                   std::to_string(i));
}

double InterpTable::eval(double q) const {
  if (q <= xs.front()) return ys.front();
  if (q >= xs.back()) return ys.back();
  const size_t hi = std::upper_bound(xs.begin(), xs.end(), q) - xs.begin();
  const size_t lo = hi - 1;
  const double t = (q - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + t * (ys[hi] - ys[lo]);
}

double InterpTable::slope_at(double q) const {
  if (q <= xs.front() || q >= xs.back()) return 0.0;
  const size_t hi = std::upper_bound(xs.begin(), xs.end(), q) - xs.begin();
  const size_t lo = hi - 1;
  return (ys[hi] - ys[lo]) / (xs[hi] - xs[lo]);
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Abs: return "abs";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::PowConst: return "power-const";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BilinearResize: return "bilinear-resize";
    case OpKind::AvgPool2d: return "avgpool2d";
    case OpKind::SumAxes: return "sum-axes";
    case OpKind::MeanAxes: return "mean-axes";
    case OpKind::MaxAxes: return "max-axes";
    case OpKind::SoftmaxAxis: return "softmax-axis";
    case OpKind::ClampMin: return "clamp-min";
    case OpKind::LookupInterp1d: return "lookup-interp1d";
    case OpKind::ConcatAxis: return "concat-axis";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::Leaf: return "leaf";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(const Shape& s) { return full(s, 0.0f); }

Tensor Tensor::full(const Shape& s, float v) {
  check_shape_valid(s, "tensor");
  Tensor t;
  t.shape_ = s;
  t.data_ = std::make_shared<const std::vector<float>>(shape_numel(s), v);
  return t;
}

Tensor Tensor::scalar(float v) { return full({1}, v); }

Tensor Tensor::from_data(const Shape& s, std::vector<float> v) {
  check_shape_valid(s, "tensor");
  require(shape_numel(s) == static_cast<int64_t>(v.size()),
          "tensor: shape " + shape_str(s) + " does not match data length " +
              std::to_string(v.size()));
  Tensor t;
  t.shape_ = s;
  t.data_ = std::make_shared<const std::vector<float>>(std::move(v));
  return t;
}

const std::vector<float>& Tensor::data() const {
  require(defined(), "tensor: use of undefined tensor");
  return *data_;
}

float Tensor::item() const {
  require(numel() == 1, "tensor: item() requires exactly one element, shape is " +
                            shape_str(shape_));
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  for (float v : data())
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::attached() const { return tape_ != nullptr && node_ >= 0; }

Tensor Tensor::detached() const {
  Tensor t;
  t.data_ = data_;
  t.shape_ = shape_;
  return t;
}

// ---------------------------------------------------------------------------
// tape

struct TapeNode {
  OpKind kind;
  OpAttrs attrs;
  std::vector<int> inputs;
  Shape shape;
  std::shared_ptr<const std::vector<float>> value;
};

struct TapeState {
  std::vector<TapeNode> nodes;
  std::unordered_map<const void*, int> const_ids;  // dedup constants by storage
};

GradTape::GradTape() : state_(std::make_shared<TapeState>()) {}

size_t GradTape::size() const { return state_->nodes.size(); }

Tensor GradTape::leaf(const Tensor& t) {
  require(t.defined(), "tape: cannot attach an undefined tensor");
  TapeNode n;
  n.kind = OpKind::Leaf;
  n.shape = t.shape_;
  n.value = t.data_;
  state_->nodes.push_back(std::move(n));
  const int id = static_cast<int>(state_->nodes.size()) - 1;
  state_->const_ids[t.data_.get()] = id;
  Tensor out;
  out.data_ = t.data_;
  out.shape_ = t.shape_;
  out.tape_ = state_;
  out.node_ = id;
  return out;
}

// ---------------------------------------------------------------------------
// shape inference

namespace {

Shape infer_shape(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& at) {
  const char* name = op_name(kind);
  auto arity = [&](size_t lo, size_t hi) {
    require(in.size() >= lo && in.size() <= hi,
            std::string(name) + ": wrong number of inputs (" + std::to_string(in.size()) + ")");
  };
  for (const Tensor& t : in) require(t.defined(), std::string(name) + ": undefined input");

  switch (kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
    case OpKind::Div:
      arity(2, 2);
      return broadcast_shape(in[0].shape(), in[1].shape(), name);
    case OpKind::Neg:
    case OpKind::Abs:
    case OpKind::Log:
    case OpKind::Exp:
    case OpKind::Sqrt:
    case OpKind::Square:
    case OpKind::PowConst:
    case OpKind::Relu:
    case OpKind::Gelu:
    case OpKind::ClampMin:
      arity(1, 1);
      return in[0].shape();
    case OpKind::LookupInterp1d:
      arity(1, 1);
      require(at.table != nullptr, "lookup-interp1d: missing table");
      return in[0].shape();
    case OpKind::Conv2d: {
      arity(2, 3);
      const ConvDims d = conv_dims(in[0].shape(), in[1].shape(), at);
      if (in.size() == 3)
        require(in[2].shape() == Shape{d.co},
                "conv2d: bias shape " + shape_str(in[2].shape()) + " != [" +
                    std::to_string(d.co) + "]");
      return {d.co, d.oh, d.ow};
    }
    case OpKind::BilinearResize:
      arity(1, 1);
      require(in[0].rank() == 3, "bilinear-resize: input must be [C,H,W], got " +
                                     shape_str(in[0].shape()));
      require(at.out_h >= 1 && at.out_w >= 1, "bilinear-resize: bad target size");
      return {in[0].shape()[0], at.out_h, at.out_w};
    case OpKind::AvgPool2d: {
      arity(1, 1);
      require(in[0].rank() == 3, "avgpool2d: input must be [C,H,W], got " +
                                     shape_str(in[0].shape()));
      const int sh = at.sh > 0 ? at.sh : at.kh, sw = at.sw > 0 ? at.sw : at.kw;
      require(at.kh >= 1 && at.kw >= 1 && sh >= 1 && sw >= 1, "avgpool2d: bad kernel/stride");
      const int h = in[0].shape()[1], w = in[0].shape()[2];
      require(h >= at.kh && w >= at.kw, "avgpool2d: kernel (" + std::to_string(at.kh) + "," +
                                            std::to_string(at.kw) + ") larger than input " +
                                            shape_str(in[0].shape()));
      return {in[0].shape()[0], (h - at.kh) / sh + 1, (w - at.kw) / sw + 1};
    }
    case OpKind::SumAxes:
    case OpKind::MeanAxes:
    case OpKind::MaxAxes: {
      arity(1, 1);
      const auto ax = normalize_axes(at.axes, in[0].rank(), name);
      return reduced_shape(in[0].shape(), ax, at.keepdims);
    }
    case OpKind::SoftmaxAxis: {
      arity(1, 1);
      const int r = in[0].rank();
      const int a = at.axis < 0 ? at.axis + r : at.axis;
      require(a >= 0 && a < r, "softmax-axis: axis out of range");
      return in[0].shape();
    }
    case OpKind::ConcatAxis: {
      require(!in.empty(), "concat-axis: needs at least one input");
      const int r = in[0].rank();
      const int a = at.axis < 0 ? at.axis + r : at.axis;
      require(a >= 0 && a < r, "concat-axis: axis out of range");
      Shape out = in[0].shape();
      for (size_t i = 1; i < in.size(); ++i) {
        require(in[i].rank() == r, "concat-axis: rank mismatch");
        for (int d = 0; d < r; ++d)
          require(d == a || in[i].shape()[d] == out[d],
                  "concat-axis: shape mismatch " + shape_str(in[i].shape()) + " vs " +
                      shape_str(out));
        out[a] += in[i].shape()[a];
      }
      return out;
    }
    case OpKind::Slice: {
      arity(1, 1);
      const Shape& s = in[0].shape();
      require(at.starts.size() == s.size() && at.sizes.size() == s.size(),
              "slice: starts/sizes must match rank " + std::to_string(s.size()));
      Shape out(s.size());
      for (size_t d = 0; d < s.size(); ++d) {
        require(at.starts[d] >= 0 && at.sizes[d] >= 1 &&
                    at.starts[d] + at.sizes[d] <= s[d],
                "slice: range [" + std::to_string(at.starts[d]) + "," +
                    std::to_string(at.starts[d] + at.sizes[d]) + ") out of bounds for dim " +
                    std::to_string(d) + " of " + shape_str(s));
        out[d] = at.sizes[d];
      }
      return out;
    }
    case OpKind::Reshape:
      arity(1, 1);
      check_shape_valid(at.dims, "reshape");
      require(shape_numel(at.dims) == in[0].numel(),
              "reshape: cannot reshape " + shape_str(in[0].shape()) + " to " +
                  shape_str(at.dims));
      return at.dims;
    case OpKind::Transpose: {
      arity(1, 1);
      const int r = in[0].rank();
      require(static_cast<int>(at.axes.size()) == r, "transpose: permutation rank mismatch");
      std::vector<char> seen(r, 0);
      Shape out(r);
      for (int d = 0; d < r; ++d) {
        const int p = at.axes[d];
        require(p >= 0 && p < r && !seen[p], "transpose: invalid permutation");
        seen[p] = 1;
        out[d] = in[0].shape()[p];
      }
      return out;
    }
    case OpKind::Leaf:
      throw ContractError("apply_primitive: 'leaf' is not applicable");
  }
  throw ContractError("apply_primitive: unknown op kind");
}

// ---------------------------------------------------------------------------
// forward kernels, templated so gradient_check can replay the tape in f64

template <typename T>
T gelu_fwd(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
void conv2d_fwd(const T* x, const T* wt, const T* bias, const OpAttrs& at, const ConvDims& d,
                T* y) {
  const int stride = at.stride;
  const int64_t xhw = static_cast<int64_t>(d.h) * d.w;
  const int64_t yhw = static_cast<int64_t>(d.oh) * d.ow;
  const int co_per_g = d.co / at.groups;
  for (int oc = 0; oc < d.co; ++oc) {
    const T bv = bias ? bias[oc] : T(0);
    std::fill(y + oc * yhw, y + (oc + 1) * yhw, bv);
  }
  for (int g = 0; g < at.groups; ++g) {
    for (int oc = g * co_per_g; oc < (g + 1) * co_per_g; ++oc) {
      T* yc = y + oc * yhw;
      const T* woc = wt + static_cast<int64_t>(oc) * d.cig * d.kh * d.kw;
      for (int icl = 0; icl < d.cig; ++icl) {
        const T* xc = x + static_cast<int64_t>(g * d.cig + icl) * xhw;
        const T* wic = woc + static_cast<int64_t>(icl) * d.kh * d.kw;
        for (int ky = 0; ky < d.kh; ++ky) {
          for (int kx = 0; kx < d.kw; ++kx) {
            const T wv = wic[ky * d.kw + kx];
            for (int oy = 0; oy < d.oh; ++oy) {
              int iy = oy * stride - d.pad + ky;
              T* yrow = yc + static_cast<int64_t>(oy) * d.ow;
              if (at.reflect_pad) {
                iy = reflect_idx(iy, d.h);
                const T* xrow = xc + static_cast<int64_t>(iy) * d.w;
                for (int ox = 0; ox < d.ow; ++ox)
                  yrow[ox] += wv * xrow[reflect_idx(ox * stride - d.pad + kx, d.w)];
              } else {
                if (iy < 0 || iy >= d.h) continue;
                const T* xrow = xc + static_cast<int64_t>(iy) * d.w;
                const int off = kx - d.pad;
                int lo = 0;
                if (off < 0) lo = (-off + stride - 1) / stride;
                int hi = d.ow - 1;
                if (hi * stride + off > d.w - 1) hi = (d.w - 1 - off) / stride;
                for (int ox = lo; ox <= hi; ++ox) yrow[ox] += wv * xrow[ox * stride + off];
              }
            }
          }
        }
      }
    }
  }
}

struct ResizeTap {
  int i0, i1;
  double f;  // weight of i1
};

std::vector<ResizeTap> resize_taps(int in_n, int out_n) {
  std::vector<ResizeTap> taps(out_n);
  const double scale = static_cast<double>(in_n) / out_n;
  for (int o = 0; o < out_n; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    if (s > in_n - 1) s = in_n - 1;
    const int i0 = static_cast<int>(s);
    taps[o].i0 = i0;
    taps[o].i1 = std::min(i0 + 1, in_n - 1);
    taps[o].f = s - i0;
  }
  return taps;
}

template <typename T>
void resize_fwd(const T* x, int c, int h, int w, int oh, int ow, T* y) {
  const auto ty = resize_taps(h, oh);
  const auto tx = resize_taps(w, ow);
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x + static_cast<int64_t>(ch) * h * w;
    T* yc = y + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const T* r0 = xc + static_cast<int64_t>(ty[oy].i0) * w;
      const T* r1 = xc + static_cast<int64_t>(ty[oy].i1) * w;
      const T fy = static_cast<T>(ty[oy].f);
      for (int ox = 0; ox < ow; ++ox) {
        const T fx = static_cast<T>(tx[ox].f);
        const T top = r0[tx[ox].i0] * (T(1) - fx) + r0[tx[ox].i1] * fx;
        const T bot = r1[tx[ox].i0] * (T(1) - fx) + r1[tx[ox].i1] * fx;
        yc[static_cast<int64_t>(oy) * ow + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
}

template <typename T>
std::vector<T> eval_op(OpKind kind, const OpAttrs& at,
                       const std::vector<const std::vector<T>*>& in,
                       const std::vector<Shape>& ish, const Shape& osh) {
  std::vector<T> out(shape_numel(osh));
  auto unary = [&](auto&& f) {
    const std::vector<T>& a = *in[0];
    for (size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  };
  auto binary = [&](auto&& f) {
    const std::vector<T>& a = *in[0];
    const std::vector<T>& b = *in[1];
    if (ish[0] == ish[1]) {
      for (size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    } else if (a.size() == 1) {
      for (size_t i = 0; i < out.size(); ++i) out[i] = f(a[0], b[i]);
    } else if (b.size() == 1) {
      for (size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[0]);
    } else {
      for_each_broadcast2(ish[0], ish[1], osh,
                          [&](int64_t o, int64_t ia, int64_t ib) { out[o] = f(a[ia], b[ib]); });
    }
  };

  switch (kind) {
    case OpKind::Add: binary([](T a, T b) { return a + b; }); break;
    case OpKind::Sub: binary([](T a, T b) { return a - b; }); break;
    case OpKind::Mul: binary([](T a, T b) { return a * b; }); break;
    case OpKind::Div: binary([](T a, T b) { return a / b; }); break;
    case OpKind::Neg: unary([](T a) { return -a; }); break;
    case OpKind::Abs: unary([](T a) { return std::abs(a); }); break;
    case OpKind::Log: unary([](T a) { return std::log(a); }); break;
    case OpKind::Exp: unary([](T a) { return std::exp(a); }); break;
    case OpKind::Sqrt: unary([](T a) { return std::sqrt(a); }); break;
    case OpKind::Square: unary([](T a) { return a * a; }); break;
    case OpKind::PowConst: {
      const T e = static_cast<T>(at.scalar);
      unary([e](T a) { return std::pow(a, e); });
      break;
    }
    case OpKind::Relu: unary([](T a) { return a > T(0) ? a : T(0); }); break;
    case OpKind::Gelu: unary([](T a) { return gelu_fwd(a); }); break;
    case OpKind::ClampMin: {
      const T c = static_cast<T>(at.scalar);
      unary([c](T a) { return a < c ? c : a; });
      break;
    }
    case OpKind::LookupInterp1d: {
      const InterpTable& tb = *at.table;
      unary([&tb](T a) { return static_cast<T>(tb.eval(static_cast<double>(a))); });
      break;
    }
    case OpKind::Conv2d: {
      const ConvDims d = conv_dims(ish[0], ish[1], at);
      conv2d_fwd(in[0]->data(), in[1]->data(), in.size() == 3 ? in[2]->data() : nullptr, at, d,
                 out.data());
      break;
    }
    case OpKind::BilinearResize:
      resize_fwd(in[0]->data(), ish[0][0], ish[0][1], ish[0][2], at.out_h, at.out_w, out.data());
      break;
    case OpKind::AvgPool2d: {
      const int c = ish[0][0], h = ish[0][1], w = ish[0][2];
      const int sh = at.sh > 0 ? at.sh : at.kh, sw = at.sw > 0 ? at.sw : at.kw;
      const int oh = osh[1], ow = osh[2];
      const T inv = T(1) / static_cast<T>(at.kh * at.kw);
      const T* x = in[0]->data();
      for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < oh; ++py)
          for (int px = 0; px < ow; ++px) {
            double acc = 0.0;
            for (int ky = 0; ky < at.kh; ++ky) {
              const T* row = x + (static_cast<int64_t>(ch) * h + py * sh + ky) * w + px * sw;
              for (int kx = 0; kx < at.kw; ++kx) acc += row[kx];
            }
            out[(static_cast<int64_t>(ch) * oh + py) * ow + px] = static_cast<T>(acc) * inv;
          }
      break;
    }
    case OpKind::SumAxes:
    case OpKind::MeanAxes: {
      const auto ax = normalize_axes(at.axes, static_cast<int>(ish[0].size()), op_name(kind));
      const auto st = reduction_strides(ish[0], ax, at.keepdims, osh);
      std::vector<double> acc(out.size(), 0.0);
      const std::vector<T>& a = *in[0];
      for_each_reduced(ish[0], st, [&](int64_t i, int64_t o) { acc[o] += a[i]; });
      double scale = 1.0;
      if (kind == OpKind::MeanAxes) {
        int64_t cnt = 1;
        for (int d : ax) cnt *= ish[0][d];
        scale = 1.0 / static_cast<double>(cnt);
      }
      for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(acc[i] * scale);
      break;
    }
    case OpKind::MaxAxes: {
      const auto ax = normalize_axes(at.axes, static_cast<int>(ish[0].size()), op_name(kind));
      const auto st = reduction_strides(ish[0], ax, at.keepdims, osh);
      std::fill(out.begin(), out.end(), -std::numeric_limits<T>::infinity());
      const std::vector<T>& a = *in[0];
      for_each_reduced(ish[0], st, [&](int64_t i, int64_t o) {
        if (a[i] > out[o]) out[o] = a[i];
      });
      break;
    }
    case OpKind::SoftmaxAxis: {
      const int r = static_cast<int>(ish[0].size());
      const int axis = at.axis < 0 ? at.axis + r : at.axis;
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= ish[0][d];
      for (int d = axis + 1; d < r; ++d) inner *= ish[0][d];
      const int64_t n = ish[0][axis];
      const std::vector<T>& a = *in[0];
      for (int64_t uo = 0; uo < outer; ++uo)
        for (int64_t ui = 0; ui < inner; ++ui) {
          const int64_t base = uo * n * inner + ui;
          T m = a[base];
          for (int64_t j = 1; j < n; ++j) m = std::max(m, a[base + j * inner]);
          double z = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const T e = std::exp(a[base + j * inner] - m);
            out[base + j * inner] = e;
            z += e;
          }
          const T invz = static_cast<T>(1.0 / z);
          for (int64_t j = 0; j < n; ++j) out[base + j * inner] *= invz;
        }
      break;
    }
    case OpKind::ConcatAxis: {
      const int r = static_cast<int>(osh.size());
      const int axis = at.axis < 0 ? at.axis + r : at.axis;
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= osh[d];
      for (int d = axis + 1; d < r; ++d) inner *= osh[d];
      int64_t pos = 0;
      for (size_t k = 0; k < in.size(); ++k) {
        const int64_t rows = ish[k][axis];
        const std::vector<T>& a = *in[k];
        for (int64_t uo = 0; uo < outer; ++uo)
          std::copy(a.begin() + uo * rows * inner, a.begin() + (uo + 1) * rows * inner,
                    out.begin() + (uo * osh[axis] + pos) * inner);
        pos += rows;
      }
      break;
    }
    case OpKind::Slice: {
      const int r = static_cast<int>(ish[0].size());
      const auto ist = row_strides(ish[0]);
      const std::vector<T>& a = *in[0];
      std::vector<int64_t> coord(r, 0);
      int64_t ibase = 0;
      for (int d = 0; d < r; ++d) ibase += static_cast<int64_t>(at.starts[d]) * ist[d];
      for (int64_t o = 0; o < static_cast<int64_t>(out.size()); ++o) {
        out[o] = a[ibase];
        for (int d = r - 1; d >= 0; --d) {
          coord[d]++;
          ibase += ist[d];
          if (coord[d] < osh[d]) break;
          ibase -= ist[d] * osh[d];
          coord[d] = 0;
        }
      }
      break;
    }
    case OpKind::Reshape:
      out = *in[0];
      break;
    case OpKind::Transpose: {
      const int r = static_cast<int>(osh.size());
      const auto ist = row_strides(ish[0]);
      std::vector<int64_t> step(r);
      for (int d = 0; d < r; ++d) step[d] = ist[at.axes[d]];
      const std::vector<T>& a = *in[0];
      std::vector<int64_t> coord(r, 0);
      int64_t i = 0;
      for (int64_t o = 0; o < static_cast<int64_t>(out.size()); ++o) {
        out[o] = a[i];
        for (int d = r - 1; d >= 0; --d) {
          coord[d]++;
          i += step[d];
          if (coord[d] < osh[d]) break;
          i -= step[d] * osh[d];
          coord[d] = 0;
        }
      }
      break;
    }
    case OpKind::Leaf:
      throw ContractError("eval: 'leaf' has no forward rule");
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// apply_primitive

Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  const Shape osh = infer_shape(kind, inputs, attrs);

  std::shared_ptr<TapeState> tape;
  for (const Tensor& t : inputs) {
    if (!t.attached()) continue;
    if (!tape) {
      tape = t.tape_;
    } else {
      require(tape == t.tape_, std::string(op_name(kind)) + ": inputs attached to different tapes");
    }
  }

  std::vector<const std::vector<float>*> bufs;
  std::vector<Shape> shapes;
  for (const Tensor& t : inputs) {
    bufs.push_back(t.data_.get());
    shapes.push_back(t.shape());
  }
  auto value = std::make_shared<const std::vector<float>>(
      eval_op<float>(kind, attrs, bufs, shapes, osh));

  Tensor out;
  out.data_ = value;
  out.shape_ = osh;
  if (tape) {
    TapeNode n;
    n.kind = kind;
    n.attrs = attrs;
    n.shape = osh;
    n.value = value;
    for (const Tensor& t : inputs) {
      if (t.attached()) {
        n.inputs.push_back(t.node_);
      } else {
        // register detached operands as constant leaves so replay can see them
        auto it = tape->const_ids.find(t.data_.get());
        int id;
        if (it != tape->const_ids.end()) {
          id = it->second;
        } else {
          TapeNode c;
          c.kind = OpKind::Leaf;
          c.shape = t.shape();
          c.value = t.data_;
          tape->nodes.push_back(std::move(c));
          id = static_cast<int>(tape->nodes.size()) - 1;
          tape->const_ids[t.data_.get()] = id;
        }
        n.inputs.push_back(id);
      }
    }
    tape->nodes.push_back(std::move(n));
    out.tape_ = tape;
    out.node_ = static_cast<int>(tape->nodes.size()) - 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward

namespace {

void accumulate_binary_grads(const TapeNode& n, const TapeState& ts, const std::vector<float>& g,
                             std::vector<float>* ga, std::vector<float>* gb) {
  const Shape& sa = ts.nodes[n.inputs[0]].shape;
  const Shape& sb = ts.nodes[n.inputs[1]].shape;
  const std::vector<float>& av = *ts.nodes[n.inputs[0]].value;
  const std::vector<float>& bv = *ts.nodes[n.inputs[1]].value;
  auto run = [&](auto&& fa, auto&& fb) {
    if (sa == sb) {
      for (size_t i = 0; i < g.size(); ++i) {
        if (ga) (*ga)[i] += fa(g[i], av[i], bv[i]);
        if (gb) (*gb)[i] += fb(g[i], av[i], bv[i]);
      }
    } else {
      for_each_broadcast2(sa, sb, n.shape, [&](int64_t o, int64_t ia, int64_t ib) {
        if (ga) (*ga)[ia] += fa(g[o], av[ia], bv[ib]);
        if (gb) (*gb)[ib] += fb(g[o], av[ia], bv[ib]);
      });
    }
  };
  switch (n.kind) {
    case OpKind::Add:
      run([](float go, float, float) { return go; }, [](float go, float, float) { return go; });
      break;
    case OpKind::Sub:
      run([](float go, float, float) { return go; }, [](float go, float, float) { return -go; });
      break;
    case OpKind::Mul:
      run([](float go, float, float b) { return go * b; },
          [](float go, float a, float) { return go * a; });
      break;
    case OpKind::Div:
      run([](float go, float, float b) { return go / b; },
          [](float go, float a, float b) { return -go * a / (b * b); });
      break;
    default: break;
  }
}

void conv2d_backward(const TapeNode& n, const TapeState& ts, const std::vector<float>& g,
                     std::vector<float>* gx, std::vector<float>* gw, std::vector<float>* gb) {
  const OpAttrs& at = n.attrs;
  const ConvDims d = conv_dims(ts.nodes[n.inputs[0]].shape, ts.nodes[n.inputs[1]].shape, at);
  const float* x = ts.nodes[n.inputs[0]].value->data();
  const float* wt = ts.nodes[n.inputs[1]].value->data();
  const int stride = at.stride;
  const int64_t xhw = static_cast<int64_t>(d.h) * d.w;
  const int64_t yhw = static_cast<int64_t>(d.oh) * d.ow;
  const int co_per_g = d.co / at.groups;

  if (gb) {
    for (int oc = 0; oc < d.co; ++oc) {
      double acc = 0.0;
      const float* gc = g.data() + oc * yhw;
      for (int64_t i = 0; i < yhw; ++i) acc += gc[i];
      (*gb)[oc] += static_cast<float>(acc);
    }
  }

  for (int grp = 0; grp < at.groups; ++grp) {
    for (int oc = grp * co_per_g; oc < (grp + 1) * co_per_g; ++oc) {
      const float* gc = g.data() + oc * yhw;
      const float* woc = wt + static_cast<int64_t>(oc) * d.cig * d.kh * d.kw;
      float* gwoc = gw ? gw->data() + static_cast<int64_t>(oc) * d.cig * d.kh * d.kw : nullptr;
      for (int icl = 0; icl < d.cig; ++icl) {
        const int ic = grp * d.cig + icl;
        const float* xc = x + static_cast<int64_t>(ic) * xhw;
        float* gxc = gx ? gx->data() + static_cast<int64_t>(ic) * xhw : nullptr;
        for (int ky = 0; ky < d.kh; ++ky) {
          for (int kx = 0; kx < d.kw; ++kx) {
            const float wv = woc[(static_cast<int64_t>(icl) * d.kh + ky) * d.kw + kx];
            double wacc = 0.0;
            for (int oy = 0; oy < d.oh; ++oy) {
              const int iy_raw = oy * stride - d.pad + ky;
              const float* grow = gc + static_cast<int64_t>(oy) * d.ow;
              if (at.reflect_pad) {
                const int iy = reflect_idx(iy_raw, d.h);
                const float* xrow = xc + static_cast<int64_t>(iy) * d.w;
                float* gxrow = gxc ? gxc + static_cast<int64_t>(iy) * d.w : nullptr;
                for (int ox = 0; ox < d.ow; ++ox) {
                  const int ix = reflect_idx(ox * stride - d.pad + kx, d.w);
                  if (gw) wacc += static_cast<double>(grow[ox]) * xrow[ix];
                  if (gxrow) gxrow[ix] += wv * grow[ox];
                }
              } else {
                if (iy_raw < 0 || iy_raw >= d.h) continue;
                const float* xrow = xc + static_cast<int64_t>(iy_raw) * d.w;
                float* gxrow = gxc ? gxc + static_cast<int64_t>(iy_raw) * d.w : nullptr;
                const int off = kx - d.pad;
                int lo = 0;
                if (off < 0) lo = (-off + stride - 1) / stride;
                int hi = d.ow - 1;
                if (hi * stride + off > d.w - 1) hi = (d.w - 1 - off) / stride;
                if (gw)
                  for (int ox = lo; ox <= hi; ++ox)
                    wacc += static_cast<double>(grow[ox]) * xrow[ox * stride + off];
                if (gxrow)
                  for (int ox = lo; ox <= hi; ++ox) gxrow[ox * stride + off] += wv * grow[ox];
              }
            }
            if (gw) gwoc[(static_cast<int64_t>(icl) * d.kh + ky) * d.kw + kx] +=
                static_cast<float>(wacc);
          }
        }
      }
    }
  }
}

}  // namespace

bool GradientMap::contains(const Tensor& t) const {
  return t.attached() && t.tape_ == tape_ && grads_.count(t.node_) > 0;
}

Tensor GradientMap::get(const Tensor& t) const {
  require(t.attached(), "gradient map: tensor is not tape-attached");
  require(t.tape_ == tape_, "gradient map: tensor belongs to a different tape");
  auto it = grads_.find(t.node_);
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return it->second;
}

GradientMap backward(const Tensor& loss) {
  require(loss.attached(), "backward: loss is not tape-attached");
  require(loss.numel() == 1, "backward: loss must be a scalar, shape is " +
                                 shape_str(loss.shape()));
  const std::shared_ptr<TapeState> ts = loss.tape_;
  const std::vector<TapeNode>& nodes = ts->nodes;
  const int top = loss.node_;

  // reverse reachability from the loss
  std::vector<char> reach(nodes.size(), 0);
  reach[top] = 1;
  for (int id = top; id >= 0; --id) {
    if (!reach[id]) continue;
    for (int in : nodes[id].inputs) reach[in] = 1;
  }

  std::vector<std::vector<float>> grads(nodes.size());
  grads[top].assign(1, 1.0f);

  GradientMap result;
  result.tape_ = ts;

  for (int id = top; id >= 0; --id) {
    if (!reach[id] || grads[id].empty()) continue;
    const TapeNode& n = nodes[id];
    const std::vector<float>& g = grads[id];

    if (n.kind == OpKind::Leaf) {
      result.grads_.emplace(id, Tensor::from_data(n.shape, g));
      continue;
    }

    auto grad_of = [&](size_t k) -> std::vector<float>* {
      const int in_id = n.inputs[k];
      if (grads[in_id].empty())
        grads[in_id].assign(shape_numel(nodes[in_id].shape), 0.0f);
      return &grads[in_id];
    };
    const auto in_val = [&](size_t k) -> const std::vector<float>& {
      return *nodes[n.inputs[k]].value;
    };
    const std::vector<float>& y = *n.value;

    switch (n.kind) {
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul:
      case OpKind::Div:
        accumulate_binary_grads(n, *ts, g, grad_of(0), grad_of(1));
        break;
      case OpKind::Neg: {
        auto* gx = grad_of(0);
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] -= g[i];
        break;
      }
      case OpKind::Abs: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        for (size_t i = 0; i < g.size(); ++i)
          (*gx)[i] += x[i] > 0 ? g[i] : (x[i] < 0 ? -g[i] : 0.0f);
        break;
      }
      case OpKind::Log: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / x[i];
        break;
      }
      case OpKind::Exp: {
        auto* gx = grad_of(0);
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
        break;
      }
      case OpKind::Sqrt: {
        // derivative guarded near zero so clamp-min(v,0) -> sqrt chains stay finite
        auto* gx = grad_of(0);
        for (size_t i = 0; i < g.size(); ++i)
          (*gx)[i] += g[i] * 0.5f / std::max(y[i], 1e-6f);
        break;
      }
      case OpKind::Square: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += 2.0f * x[i] * g[i];
        break;
      }
      case OpKind::PowConst: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        const float e = static_cast<float>(n.attrs.scalar);
        for (size_t i = 0; i < g.size(); ++i)
          (*gx)[i] += g[i] * e * std::pow(x[i], e - 1.0f);
        break;
      }
      case OpKind::Relu: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0) (*gx)[i] += g[i];
        break;
      }
      case OpKind::Gelu: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        const float inv_sqrt2pi = 0.3989422804014327f;
        for (size_t i = 0; i < g.size(); ++i) {
          const float cdf = 0.5f * (1.0f + std::erf(x[i] * static_cast<float>(M_SQRT1_2)));
          const float pdf = inv_sqrt2pi * std::exp(-0.5f * x[i] * x[i]);
          (*gx)[i] += g[i] * (cdf + x[i] * pdf);
        }
        break;
      }
      case OpKind::ClampMin: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        const float c = static_cast<float>(n.attrs.scalar);
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > c) (*gx)[i] += g[i];
        break;
      }
      case OpKind::LookupInterp1d: {
        auto* gx = grad_of(0);
        const auto& x = in_val(0);
        const InterpTable& tb = *n.attrs.table;
        for (size_t i = 0; i < g.size(); ++i)
          (*gx)[i] += g[i] * static_cast<float>(tb.slope_at(x[i]));
        break;
      }
      case OpKind::Conv2d:
        conv2d_backward(n, *ts, g, grad_of(0), grad_of(1),
                        n.inputs.size() == 3 ? grad_of(2) : nullptr);
        break;
      case OpKind::BilinearResize: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const int c = s[0], h = s[1], w = s[2];
        const int oh = n.shape[1], ow = n.shape[2];
        const auto ty = resize_taps(h, oh);
        const auto tx = resize_taps(w, ow);
        for (int ch = 0; ch < c; ++ch) {
          float* gc = gx->data() + static_cast<int64_t>(ch) * h * w;
          const float* grow = g.data() + static_cast<int64_t>(ch) * oh * ow;
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const float go = grow[static_cast<int64_t>(oy) * ow + ox];
              const float fy = static_cast<float>(ty[oy].f), fx = static_cast<float>(tx[ox].f);
              gc[ty[oy].i0 * w + tx[ox].i0] += go * (1 - fy) * (1 - fx);
              gc[ty[oy].i0 * w + tx[ox].i1] += go * (1 - fy) * fx;
              gc[ty[oy].i1 * w + tx[ox].i0] += go * fy * (1 - fx);
              gc[ty[oy].i1 * w + tx[ox].i1] += go * fy * fx;
            }
        }
        break;
      }
      case OpKind::AvgPool2d: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const int c = s[0], h = s[1], w = s[2];
        const OpAttrs& at = n.attrs;
        const int sh = at.sh > 0 ? at.sh : at.kh, sw = at.sw > 0 ? at.sw : at.kw;
        const int oh = n.shape[1], ow = n.shape[2];
        const float inv = 1.0f / static_cast<float>(at.kh * at.kw);
        for (int ch = 0; ch < c; ++ch)
          for (int py = 0; py < oh; ++py)
            for (int px = 0; px < ow; ++px) {
              const float go = g[(static_cast<int64_t>(ch) * oh + py) * ow + px] * inv;
              for (int ky = 0; ky < at.kh; ++ky) {
                float* row =
                    gx->data() + (static_cast<int64_t>(ch) * h + py * sh + ky) * w + px * sw;
                for (int kx = 0; kx < at.kw; ++kx) row[kx] += go;
              }
            }
        break;
      }
      case OpKind::SumAxes:
      case OpKind::MeanAxes: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const auto ax = normalize_axes(n.attrs.axes, static_cast<int>(s.size()), op_name(n.kind));
        const auto st = reduction_strides(s, ax, n.attrs.keepdims, n.shape);
        float scale = 1.0f;
        if (n.kind == OpKind::MeanAxes) {
          int64_t cnt = 1;
          for (int d : ax) cnt *= s[d];
          scale = 1.0f / static_cast<float>(cnt);
        }
        for_each_reduced(s, st, [&](int64_t i, int64_t o) { (*gx)[i] += g[o] * scale; });
        break;
      }
      case OpKind::MaxAxes: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const auto& x = in_val(0);
        const auto ax = normalize_axes(n.attrs.axes, static_cast<int>(s.size()), op_name(n.kind));
        const auto st = reduction_strides(s, ax, n.attrs.keepdims, n.shape);
        std::vector<char> taken(y.size(), 0);  // subgradient: first max only
        for_each_reduced(s, st, [&](int64_t i, int64_t o) {
          if (!taken[o] && x[i] == y[o]) {
            (*gx)[i] += g[o];
            taken[o] = 1;
          }
        });
        break;
      }
      case OpKind::SoftmaxAxis: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const int r = static_cast<int>(s.size());
        const int axis = n.attrs.axis < 0 ? n.attrs.axis + r : n.attrs.axis;
        int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= s[d];
        for (int d = axis + 1; d < r; ++d) inner *= s[d];
        const int64_t nn = s[axis];
        for (int64_t uo = 0; uo < outer; ++uo)
          for (int64_t ui = 0; ui < inner; ++ui) {
            const int64_t base = uo * nn * inner + ui;
            double dot = 0.0;
            for (int64_t j = 0; j < nn; ++j)
              dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
            for (int64_t j = 0; j < nn; ++j)
              (*gx)[base + j * inner] +=
                  y[base + j * inner] * (g[base + j * inner] - static_cast<float>(dot));
          }
        break;
      }
      case OpKind::ConcatAxis: {
        const int r = static_cast<int>(n.shape.size());
        const int axis = n.attrs.axis < 0 ? n.attrs.axis + r : n.attrs.axis;
        int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= n.shape[d];
        for (int d = axis + 1; d < r; ++d) inner *= n.shape[d];
        int64_t pos = 0;
        for (size_t k = 0; k < n.inputs.size(); ++k) {
          auto* gi = grad_of(k);
          const int64_t rows = nodes[n.inputs[k]].shape[axis];
          for (int64_t uo = 0; uo < outer; ++uo) {
            const float* src = g.data() + (uo * n.shape[axis] + pos) * inner;
            float* dst = gi->data() + uo * rows * inner;
            for (int64_t i = 0; i < rows * inner; ++i) dst[i] += src[i];
          }
          pos += rows;
        }
        break;
      }
      case OpKind::Slice: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const int r = static_cast<int>(s.size());
        const auto ist = row_strides(s);
        std::vector<int64_t> coord(r, 0);
        int64_t ibase = 0;
        for (int d = 0; d < r; ++d) ibase += static_cast<int64_t>(n.attrs.starts[d]) * ist[d];
        for (int64_t o = 0; o < static_cast<int64_t>(g.size()); ++o) {
          (*gx)[ibase] += g[o];
          for (int d = r - 1; d >= 0; --d) {
            coord[d]++;
            ibase += ist[d];
            if (coord[d] < n.shape[d]) break;
            ibase -= ist[d] * n.shape[d];
            coord[d] = 0;
          }
        }
        break;
      }
      case OpKind::Reshape: {
        auto* gx = grad_of(0);
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        break;
      }
      case OpKind::Transpose: {
        auto* gx = grad_of(0);
        const Shape& s = nodes[n.inputs[0]].shape;
        const int r = static_cast<int>(s.size());
        const auto ist = row_strides(s);
        std::vector<int64_t> step(r);
        for (int d = 0; d < r; ++d) step[d] = ist[n.attrs.axes[d]];
        std::vector<int64_t> coord(r, 0);
        int64_t i = 0;
        for (int64_t o = 0; o < static_cast<int64_t>(g.size()); ++o) {
          (*gx)[i] += g[o];
          for (int d = r - 1; d >= 0; --d) {
            coord[d]++;
            i += step[d];
            if (coord[d] < n.shape[d]) break;
            i -= step[d] * n.shape[d];
            coord[d] = 0;
          }
        }
        break;
      }
      case OpKind::Leaf:
        break;
    }
    // free intermediate grad buffers early
    if (n.kind != OpKind::Leaf) grads[id].clear();
  }
  return result;
}

// ---------------------------------------------------------------------------
// gradient_check: analytic reverse-mode (f32) vs central differences obtained
// by replaying the recorded graph in f64

double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                      double eps) {
  require(eps > 0, "gradient_check: eps must be positive");
  require(x.defined(), "gradient_check: undefined input");

  GradTape tape;
  const Tensor xa = tape.leaf(x);
  const Tensor y = f(xa);
  require(y.defined() && y.numel() == 1, "gradient_check: f must return a scalar");
  require(std::isfinite(y.item()), "gradient_check: f is non-finite at the base point");
  if (!y.attached()) return 0.0;  // f ignored x entirely

  const Tensor analytic = backward(y).get(xa);

  const std::shared_ptr<TapeState> ts = tape.state();
  const std::vector<TapeNode>& nodes = ts->nodes;
  const int top = y.node_;
  const int leaf_id = xa.node_;

  // base f64 evaluation of every node up to the output
  std::vector<std::vector<double>> base(top + 1);
  for (int id = 0; id <= top; ++id) {
    const TapeNode& n = nodes[id];
    if (n.kind == OpKind::Leaf) {
      base[id].assign(n.value->begin(), n.value->end());
    } else {
      std::vector<const std::vector<double>*> ins;
      std::vector<Shape> ish;
      for (int in_id : n.inputs) {
        ins.push_back(&base[in_id]);
        ish.push_back(nodes[in_id].shape);
      }
      base[id] = eval_op<double>(n.kind, n.attrs, ins, ish, n.shape);
    }
  }

  // only nodes depending on the perturbed leaf need recomputation
  std::vector<char> dep(top + 1, 0);
  dep[leaf_id] = 1;
  for (int id = 0; id <= top; ++id) {
    for (int in_id : nodes[id].inputs)
      if (dep[in_id]) dep[id] = 1;
  }
  if (!dep[top]) {
    // output does not depend on x; analytic must be zero as well
    double worst = 0.0;
    for (float a : analytic.data())
      worst = std::max(worst, std::abs(a) / std::max(std::abs(static_cast<double>(a)), 1e-8));
    return worst;
  }

  std::vector<std::vector<double>> work(top + 1);
  auto eval_perturbed = [&](int64_t elem, double delta) -> double {
    for (int id = leaf_id; id <= top; ++id) {
      if (!dep[id]) continue;
      const TapeNode& n = nodes[id];
      if (id == leaf_id) {
        work[id] = base[id];
        work[id][elem] += delta;
        continue;
      }
      std::vector<const std::vector<double>*> ins;
      std::vector<Shape> ish;
      for (int in_id : n.inputs) {
        ins.push_back(dep[in_id] ? &work[in_id] : &base[in_id]);
        ish.push_back(nodes[in_id].shape);
      }
      work[id] = eval_op<double>(n.kind, n.attrs, ins, ish, n.shape);
    }
    return work[top][0];
  };

  double worst = 0.0;
  const int64_t n_elem = x.numel();
  for (int64_t i = 0; i < n_elem; ++i) {
    const double yp = eval_perturbed(i, eps);
    const double ym = eval_perturbed(i, -eps);
    if (!std::isfinite(yp) || !std::isfinite(ym))
      throw ContractError("gradient_check: non-finite value at perturbation index " +
                          std::to_string(i));
    const double fd = (yp - ym) / (2.0 * eps);
    const double an = static_cast<double>(analytic.at(i));
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// convenience wrappers

Tensor add(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::Add, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::Sub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::Mul, {a, b}); }
Tensor div(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::Div, {a, b}); }
Tensor neg(const Tensor& a) { return apply_primitive(OpKind::Neg, {a}); }
Tensor abs(const Tensor& a) { return apply_primitive(OpKind::Abs, {a}); }
Tensor log(const Tensor& a) { return apply_primitive(OpKind::Log, {a}); }
Tensor exp(const Tensor& a) { return apply_primitive(OpKind::Exp, {a}); }
Tensor sqrt(const Tensor& a) { return apply_primitive(OpKind::Sqrt, {a}); }
Tensor square(const Tensor& a) { return apply_primitive(OpKind::Square, {a}); }

Tensor pow_const(const Tensor& a, double e) {
  OpAttrs at;
  at.scalar = e;
  return apply_primitive(OpKind::PowConst, {a}, at);
}

Tensor relu(const Tensor& a) { return apply_primitive(OpKind::Relu, {a}); }
Tensor gelu(const Tensor& a) { return apply_primitive(OpKind::Gelu, {a}); }

Tensor clamp_min(const Tensor& a, double bound) {
  OpAttrs at;
  at.scalar = bound;
  return apply_primitive(OpKind::ClampMin, {a}, at);
}

Tensor lookup_interp1d(const Tensor& q, std::shared_ptr<const InterpTable> table) {
  OpAttrs at;
  at.table = std::move(table);
  return apply_primitive(OpKind::LookupInterp1d, {q}, at);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, int groups,
              bool reflect) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  at.groups = groups;
  at.reflect_pad = reflect;
  return apply_primitive(OpKind::Conv2d, {x, w, b}, at);
}

Tensor conv2d_nobias(const Tensor& x, const Tensor& w, int stride, int pad, int groups,
                     bool reflect) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  at.groups = groups;
  at.reflect_pad = reflect;
  return apply_primitive(OpKind::Conv2d, {x, w}, at);
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  OpAttrs at;
  at.out_h = out_h;
  at.out_w = out_w;
  return apply_primitive(OpKind::BilinearResize, {x}, at);
}

Tensor avgpool2d(const Tensor& x, int kh, int kw, int sh, int sw) {
  OpAttrs at;
  at.kh = kh;
  at.kw = kw;
  at.sh = sh;
  at.sw = sw;
  return apply_primitive(OpKind::AvgPool2d, {x}, at);
}

Tensor sum_axes(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  OpAttrs at;
  at.axes = axes;
  at.keepdims = keepdims;
  return apply_primitive(OpKind::SumAxes, {x}, at);
}

Tensor mean_axes(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  OpAttrs at;
  at.axes = axes;
  at.keepdims = keepdims;
  return apply_primitive(OpKind::MeanAxes, {x}, at);
}

Tensor max_axes(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  OpAttrs at;
  at.axes = axes;
  at.keepdims = keepdims;
  return apply_primitive(OpKind::MaxAxes, {x}, at);
}

namespace {
std::vector<int> all_axes(const Tensor& x) {
  std::vector<int> ax(x.rank());
  for (int i = 0; i < x.rank(); ++i) ax[i] = i;
  return ax;
}
}  // namespace

Tensor sum_all(const Tensor& x) { return sum_axes(x, all_axes(x)); }
Tensor mean_all(const Tensor& x) { return mean_axes(x, all_axes(x)); }

Tensor softmax_axis(const Tensor& x, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(OpKind::SoftmaxAxis, {x}, at);
}

Tensor concat_axis(const std::vector<Tensor>& xs, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(OpKind::ConcatAxis, xs, at);
}

Tensor slice(const Tensor& x, const std::vector<int>& starts, const std::vector<int>& sizes) {
  OpAttrs at;
  at.starts = starts;
  at.sizes = sizes;
  return apply_primitive(OpKind::Slice, {x}, at);
}

Tensor reshape(const Tensor& x, const Shape& dims) {
  OpAttrs at;
  at.dims = dims;
  return apply_primitive(OpKind::Reshape, {x}, at);
}

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  OpAttrs at;
  at.axes = perm;
  return apply_primitive(OpKind::Transpose, {x}, at);
}

Tensor sigmoid(const Tensor& x) {
  // min(-x, 30) == -max(x, -30)
  const Tensor z = exp(neg(clamp_min(x, -30.0)));
  return div(Tensor::scalar(1.0f), add_scalar(z, 1.0f));
}

}  // namespace slkd
