#include "stealth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stealth {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void accum(TensorImpl& t, std::size_t i, double g) {
  if (t.requires_grad) t.grad[i] += g;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::constant(std::vector<int> shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.impl = std::make_shared<TensorImpl>();
  t.impl->shape = std::move(shape);
  t.impl->data = std::move(data);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape) {
  const std::size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  const std::size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

const std::vector<double>& Tensor::grad() const {
  if (!impl || !impl->requires_grad) {
    throw std::logic_error("grad() on a tensor that does not require gradients");
  }
  return impl->grad;
}

double Tensor::item() const {
  if (!impl || impl->data.size() != 1) {
    throw std::logic_error("item() requires a 1-element tensor");
  }
  return impl->data[0];
}

Tensor Tape::variable(std::vector<int> shape, std::vector<double> data) {
  Tensor t = Tensor::constant(std::move(shape), std::move(data));
  t.impl->requires_grad = true;
  t.impl->grad.assign(t.impl->data.size(), 0.0);
  t.impl->tape = this;
  adopt(t.impl);
  return t;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar (1-element) loss");
  }
  if (!loss.requires_grad() || loss.impl->tape != this) {
    throw std::invalid_argument("backward: loss is not connected to this tape");
  }
  for (auto& n : nodes_) {
    if (n->requires_grad) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  loss.impl->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

namespace detail {

Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  bool req = false;
  for (const Tensor* in : inputs) {
    if (!in->defined()) throw std::invalid_argument("operation on an undefined tensor");
    if (in->impl->tape) {
      if (tape && tape != in->impl->tape) {
        throw std::logic_error("operation mixes tensors from two different tapes");
      }
      tape = in->impl->tape;
    }
    req = req || in->impl->requires_grad;
  }
  Tensor out = Tensor::constant(std::move(shape), std::move(data));
  if (req) {
    out.impl->requires_grad = true;
    out.impl->grad.assign(out.impl->data.size(), 0.0);
    out.impl->tape = tape;
    tape->adopt(out.impl);
  }
  return out;
}

}  // namespace detail

namespace {

enum class BinKind { AA, AS, SA };  // elementwise, scalar rhs, scalar lhs

// Dispatches a binary op over equal shapes or a 1-element broadcast.
template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  BinKind kind;
  if (a.shape() == b.shape()) {
    kind = BinKind::AA;
  } else if (b.numel() == 1) {
    kind = BinKind::AS;
  } else if (a.numel() == 1) {
    kind = BinKind::SA;
  } else {
    throw std::invalid_argument(std::string(name) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t n = std::max(av.size(), bv.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = kind == BinKind::SA ? av[0] : av[i];
    const double y = kind == BinKind::AS ? bv[0] : bv[i];
    out[i] = fwd(x, y);
  }
  const auto& big_shape = kind == BinKind::SA ? b.shape() : a.shape();
  Tensor c = detail::make_result(big_shape, std::move(out), {&a, &b});
  if (c.requires_grad()) {
    c.impl->tape->record([ai = a.impl, bi = b.impl, ci = c.impl, kind, bwd]() {
      const std::size_t n = ci->data.size();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = kind == BinKind::SA ? 0 : i;
        const std::size_t ib = kind == BinKind::AS ? 0 : i;
        double ga = 0.0, gb = 0.0;
        bwd(ai->data[ia], bi->data[ib], ci->data[i], ci->grad[i], ga, gb);
        accum(*ai, ia, ga);
        accum(*bi, ib, gb);
      }
    });
  }
  return c;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor c = detail::make_result(a.shape(), std::move(out), {&a});
  if (c.requires_grad()) {
    c.impl->tape->record([ai = a.impl, ci = c.impl, bwd]() {
      for (std::size_t i = 0; i < ci->data.size(); ++i) {
        ai->grad[i] += bwd(ai->data[i], ci->data[i]) * ci->grad[i];
      }
    });
  }
  return c;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.values()) {
    if (y == 0.0) throw std::domain_error("div: division by zero");
  }
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double, double g, double& ga, double& gb) {
        ga = g / y;
        gb = -g * x / (y * y);
      });
}

Tensor add(const Tensor& a, double b) {
  return unary_op(
      a, [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}
Tensor sub(const Tensor& a, double b) { return add(a, -b); }
Tensor sub(double a, const Tensor& b) {
  return unary_op(
      b, [a](double x) { return a - x; }, [](double, double) { return -1.0; });
}
Tensor mul(const Tensor& a, double b) { return scale(a, b); }
Tensor div(const Tensor& a, double b) {
  if (b == 0.0) throw std::domain_error("div: division by zero");
  return scale(a, 1.0 / b);
}

Tensor scale(const Tensor& a, double k) {
  return unary_op(
      a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  Tensor c = unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
  for (double v : c.values()) {
    if (!std::isfinite(v)) throw std::domain_error("exp: overflow to non-finite value");
  }
  return c;
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (v <= 0.0) throw std::domain_error("log: argument must be positive, got " + std::to_string(v));
  }
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  // relu'(0) = 0
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
  // abs'(0) = 0
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  // ties route the gradient to the first argument
  return binary_op(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double, double g, double& ga, double& gb) {
        if (x >= y) ga = g; else gb = g;
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double, double g, double& ga, double& gb) {
        if (x <= y) ga = g; else gb = g;
      });
}

Tensor maximum(const Tensor& a, double b) {
  return unary_op(
      a, [b](double x) { return x >= b ? x : b; },
      [b](double x, double) { return x >= b ? 1.0 : 0.0; });
}

Tensor minimum(const Tensor& a, double b) {
  return unary_op(
      a, [b](double x) { return x <= b ? x : b; },
      [b](double x, double) { return x <= b ? 1.0 : 0.0; });
}

Tensor clamp01(const Tensor& a) {
  // pass-through gradient strictly inside (0,1), zero outside and at the rails
  return unary_op(
      a, [](double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); },
      [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& a, int axis) {
  const auto& shape = a.shape();
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " invalid for shape " + shape_str(shape));
  }
  const std::size_t m = static_cast<std::size_t>(shape[axis]);
  std::size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) inner *= shape[i];
  for (int i = 0; i < axis; ++i) outer *= shape[i];

  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * m * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) mx = std::max(mx, av[base + i * inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double e = std::exp(av[base + i * inner] - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < m; ++i) out[base + i * inner] /= sum;
    }
  }
  Tensor c = detail::make_result(shape, std::move(out), {&a});
  if (c.requires_grad()) {
    c.impl->tape->record([ai = a.impl, ci = c.impl, m, inner, outer]() {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * m * inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            const std::size_t k = base + i * inner;
            dot += ci->grad[k] * ci->data[k];
          }
          for (std::size_t i = 0; i < m; ++i) {
            const std::size_t k = base + i * inner;
            ai->grad[k] += ci->data[k] * (ci->grad[k] - dot);
          }
        }
      }
    });
  }
  return c;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (is.size() != 4 || ks.size() != 4) {
    throw std::invalid_argument("conv2d: input must be [N,C,H,W] and kernel [O,C,kh,kw], got " +
                                shape_str(is) + " and " + shape_str(ks));
  }
  if (stride <= 0 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  const int O = ks[0], KC = ks[1], KH = ks[2], KW = ks[3];
  if (C != KC) {
    throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(C) +
                                " channels but kernel expects " + std::to_string(KC));
  }
  if (KH > H + 2 * padding || KW > W + 2 * padding) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  const int OH = (H + 2 * padding - KH) / stride + 1;
  const int OW = (W + 2 * padding - KW) / stride + 1;

  const double* in = input.values().data();
  const double* kw = kernel.values().data();
  std::vector<double> out(static_cast<std::size_t>(N) * O * OH * OW, 0.0);

  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      double* op = out.data() + (static_cast<std::size_t>(n) * O + o) * OH * OW;
      for (int c = 0; c < C; ++c) {
        const double* ip = in + (static_cast<std::size_t>(n) * C + c) * H * W;
        const double* kp = kw + (static_cast<std::size_t>(o) * C + c) * KH * KW;
        for (int ki = 0; ki < KH; ++ki) {
          for (int kj = 0; kj < KW; ++kj) {
            const double wv = kp[ki * KW + kj];
            if (wv == 0.0) continue;
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - padding + ki;
              if (ih < 0 || ih >= H) continue;
              // valid ow range so that iw = ow*stride - padding + kj is in [0,W)
              int ow0 = 0;
              while (ow0 < OW && ow0 * stride - padding + kj < 0) ++ow0;
              int ow1 = OW;
              while (ow1 > ow0 && (ow1 - 1) * stride - padding + kj >= W) --ow1;
              const double* irow = ip + ih * W - padding + kj;
              double* orow = op + oh * OW;
              for (int ow = ow0; ow < ow1; ++ow) orow[ow] += wv * irow[ow * stride];
            }
          }
        }
      }
    }
  }

  Tensor c = detail::make_result({N, O, OH, OW}, std::move(out), {&input, &kernel});
  if (c.requires_grad()) {
    c.impl->tape->record([ii = input.impl, ki = kernel.impl, ci = c.impl, N, C, H, W, O, KH,
                          KW, OH, OW, stride, padding]() {
      const double* g = ci->grad.data();
      const double* in = ii->data.data();
      const double* kw = ki->data.data();
      for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
          const double* gp = g + (static_cast<std::size_t>(n) * O + o) * OH * OW;
          for (int c2 = 0; c2 < C; ++c2) {
            const std::size_t koff = (static_cast<std::size_t>(o) * C + c2) * KH * KW;
            const double* ip = in + (static_cast<std::size_t>(n) * C + c2) * H * W;
            double* gin = ii->requires_grad
                              ? ii->grad.data() + (static_cast<std::size_t>(n) * C + c2) * H * W
                              : nullptr;
            for (int ki2 = 0; ki2 < KH; ++ki2) {
              for (int kj = 0; kj < KW; ++kj) {
                const double wv = kw[koff + ki2 * KW + kj];
                double wg = 0.0;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * stride - padding + ki2;
                  if (ih < 0 || ih >= H) continue;
                  int ow0 = 0;
                  while (ow0 < OW && ow0 * stride - padding + kj < 0) ++ow0;
                  int ow1 = OW;
                  while (ow1 > ow0 && (ow1 - 1) * stride - padding + kj >= W) --ow1;
                  const double* grow = gp + oh * OW;
                  const int roff = ih * W - padding + kj;
                  if (gin) {
                    double* gr = gin + roff;
                    for (int ow = ow0; ow < ow1; ++ow) gr[ow * stride] += wv * grow[ow];
                  }
                  if (ki->requires_grad) {
                    const double* ir = ip + roff;
                    for (int ow = ow0; ow < ow1; ++ow) wg += ir[ow * stride] * grow[ow];
                  }
                }
                if (ki->requires_grad) ki->grad[koff + ki2 * KW + kj] += wg;
              }
            }
          }
        }
      }
    });
  }
  return c;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || bias.shape().size() != 1 || bias.shape()[0] != xs[1]) {
    throw std::invalid_argument("add_channel_bias: x must be [N,C,H,W] with bias [C], got " +
                                shape_str(xs) + " and " + shape_str(bias.shape()));
  }
  const int N = xs[0], C = xs[1];
  const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
  std::vector<double> out(x.values());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      double* p = out.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      const double b = bias.values()[c];
      for (std::size_t i = 0; i < hw; ++i) p[i] += b;
    }
  }
  Tensor c = detail::make_result(xs, std::move(out), {&x, &bias});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, bi = bias.impl, ci = c.impl, N, C, hw]() {
      for (int n = 0; n < N; ++n) {
        for (int ch = 0; ch < C; ++ch) {
          const double* g = ci->grad.data() + (static_cast<std::size_t>(n) * C + ch) * hw;
          if (xi->requires_grad) {
            double* gx = xi->grad.data() + (static_cast<std::size_t>(n) * C + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) gx[i] += g[i];
          }
          if (bi->requires_grad) {
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += g[i];
            bi->grad[ch] += s;
          }
        }
      }
    });
  }
  return c;
}

namespace {

struct ReducePlan {
  std::vector<int> out_shape;          // reduced axes removed; {1} if all reduced
  std::vector<std::size_t> out_index;  // flat input index -> flat output index
  std::size_t group_size = 0;          // elements reduced per output slot
};

ReducePlan plan_reduce(const std::vector<int>& shape, std::vector<int> axes) {
  const int rank = static_cast<int>(shape.size());
  std::vector<bool> reduced(rank, false);
  if (axes.empty()) {
    std::fill(reduced.begin(), reduced.end(), true);
  } else {
    for (int a : axes) {
      if (a < 0 || a >= rank) {
        throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                    " invalid for shape " + shape_str(shape));
      }
      reduced[a] = true;
    }
  }
  ReducePlan plan;
  plan.group_size = 1;
  for (int i = 0; i < rank; ++i) {
    if (reduced[i]) {
      plan.group_size *= static_cast<std::size_t>(shape[i]);
    } else {
      plan.out_shape.push_back(shape[i]);
    }
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};

  std::size_t numel = 1;
  for (int d : shape) numel *= static_cast<std::size_t>(d);
  plan.out_index.resize(numel);
  std::vector<std::size_t> strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) strides[i] = strides[i + 1] * shape[i + 1];
  for (std::size_t f = 0; f < numel; ++f) {
    std::size_t rem = f, out = 0;
    for (int i = 0; i < rank; ++i) {
      const std::size_t idx = rem / strides[i];
      rem %= strides[i];
      if (!reduced[i]) out = out * static_cast<std::size_t>(shape[i]) + idx;
    }
    plan.out_index[f] = out;
  }
  return plan;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes) {
  ReducePlan plan = plan_reduce(x.shape(), axes);
  std::size_t out_n = x.numel() / plan.group_size;
  std::vector<double> out(out_n, 0.0);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out[plan.out_index[i]] += xv[i];
  Tensor c = detail::make_result(plan.out_shape, std::move(out), {&x});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, ci = c.impl, idx = std::move(plan.out_index)]() {
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += ci->grad[idx[i]];
    });
  }
  return c;
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes) {
  ReducePlan plan = plan_reduce(x.shape(), axes);
  const double inv = 1.0 / static_cast<double>(plan.group_size);
  std::size_t out_n = x.numel() / plan.group_size;
  std::vector<double> out(out_n, 0.0);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out[plan.out_index[i]] += xv[i] * inv;
  Tensor c = detail::make_result(plan.out_shape, std::move(out), {&x});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, ci = c.impl, idx = std::move(plan.out_index), inv]() {
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += ci->grad[idx[i]] * inv;
    });
  }
  return c;
}

Tensor reduce_l2norm(const Tensor& x, const std::vector<int>& axes) {
  ReducePlan plan = plan_reduce(x.shape(), axes);
  std::size_t out_n = x.numel() / plan.group_size;
  std::vector<double> sq(out_n, 0.0);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) sq[plan.out_index[i]] += xv[i] * xv[i];
  std::vector<double> out(out_n);
  for (std::size_t i = 0; i < out_n; ++i) out[i] = std::sqrt(sq[i]);
  Tensor c = detail::make_result(plan.out_shape, std::move(out), {&x});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, ci = c.impl, idx = std::move(plan.out_index)]() {
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        const double norm = ci->data[idx[i]];
        if (norm > 0.0) xi->grad[i] += ci->grad[idx[i]] * xi->data[i] / norm;
        // zero-norm group: subgradient 0
      }
    });
  }
  return c;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor c = detail::make_result(std::move(shape), std::vector<double>(x.values()), {&x});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, ci = c.impl]() {
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += ci->grad[i];
    });
  }
  return c;
}

Tensor gather_scalar(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.numel()) {
    throw std::out_of_range("gather_scalar: index " + std::to_string(flat_index) +
                            " out of range for " + shape_str(x.shape()));
  }
  Tensor c = detail::make_result({1}, {x.values()[flat_index]}, {&x});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, ci = c.impl, flat_index]() {
      xi->grad[flat_index] += ci->grad[0];
    });
  }
  return c;
}

Tensor mul_spatial(const Tensor& x, const Tensor& m) {
  const auto& xs = x.shape();
  const auto& ms = m.shape();
  if (xs.size() != 3 || ms.size() != 2 || xs[1] != ms[0] || xs[2] != ms[1]) {
    throw std::invalid_argument("mul_spatial: expected x [C,H,W] with m [H,W], got " +
                                shape_str(xs) + " and " + shape_str(ms));
  }
  const int C = xs[0];
  const std::size_t hw = static_cast<std::size_t>(xs[1]) * xs[2];
  std::vector<double> out(x.numel());
  for (int c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      out[c * hw + i] = x.values()[c * hw + i] * m.values()[i];
    }
  }
  Tensor c = detail::make_result(xs, std::move(out), {&x, &m});
  if (c.requires_grad()) {
    c.impl->tape->record([xi = x.impl, mi = m.impl, ci = c.impl, C, hw]() {
      for (int ch = 0; ch < C; ++ch) {
        for (std::size_t i = 0; i < hw; ++i) {
          const double g = ci->grad[ch * hw + i];
          if (xi->requires_grad) xi->grad[ch * hw + i] += g * mi->data[i];
          if (mi->requires_grad) mi->grad[i] += g * xi->data[ch * hw + i];
        }
      }
    });
  }
  return c;
}

Tensor bce_with_logits_sum(const Tensor& logits, const Tensor& targets,
                           const Tensor& weights) {
  if (logits.shape() != targets.shape() || logits.shape() != weights.shape()) {
    throw std::invalid_argument("bce_with_logits_sum: shape mismatch " +
                                shape_str(logits.shape()) + " vs " +
                                shape_str(targets.shape()) + " vs " +
                                shape_str(weights.shape()));
  }
  const auto& z = logits.values();
  const auto& t = targets.values();
  const auto& w = weights.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += w[i] * (softplus(z[i]) - z[i] * t[i]);
  Tensor c = detail::make_result({1}, {sum}, {&logits, &targets, &weights});
  if (c.requires_grad()) {
    c.impl->tape->record([zi = logits.impl, ti = targets.impl, wi = weights.impl,
                          ci = c.impl]() {
      if (!zi->requires_grad) return;
      const double g = ci->grad[0];
      for (std::size_t i = 0; i < zi->data.size(); ++i) {
        zi->grad[i] += g * wi->data[i] * (stable_sigmoid(zi->data[i]) - ti->data[i]);
      }
    });
  }
  return c;
}

}  // namespace stealth
