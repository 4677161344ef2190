#pragma once

// Dense double-precision tensors with an eager reverse-mode gradient tape.
//
// Tensors are immutable values and safe to share across threads for reading.
// A GradTape records one forward pass and is consumed by a single backward()
// call; parallelism happens across independent tapes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sa3 {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Compensated sum over a canonical (value-sorted) order. Reductions built on
// it are exactly invariant to permutations of their inputs.
inline double stable_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double sum = 0.0;
  double carry = 0.0;
  for (double t : terms) {
    double y = t - carry;
    double s = sum + y;
    carry = (s - sum) - y;
    sum = s;
  }
  return sum;
}

struct EmptyBoxError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class GradTape;

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    if (data_->size() != shape_numel(shape_))
      throw std::invalid_argument("data length does not match shape");
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor full(Shape shape, double v) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return !data_; }

  const std::vector<double>& values() const {
    if (!data_) throw std::logic_error("empty tensor");
    return *data_;
  }

  std::shared_ptr<const std::vector<double>> storage() const { return data_; }

  double value() const {
    if (size() != 1) throw std::invalid_argument("value() requires a scalar tensor");
    return (*data_)[0];
  }

  GradTape* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }
  bool requires_grad() const { return requires_grad_; }

  // Metadata-only view; shares storage and tape node.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw std::invalid_argument("reshape changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

 private:
  friend class GradTape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  GradTape* tape_ = nullptr;
  int node_ = -1;
  bool requires_grad_ = false;
};

// Records operations eagerly in topological order; every node's inputs
// precede it by construction. One backward() per tape.
class GradTape {
 public:
  using PullFn = std::function<void(GradTape&, const std::vector<double>&)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    bind(t, nullptr);
    t.requires_grad_ = true;
    return t;
  }

  Tensor leaf(const Tensor& value) { return leaf(value.shape(), value.values()); }

  // Op-extension API: register a result tensor with its backward rule. The
  // rule receives the tape and the upstream gradient of this node.
  Tensor make_node(Shape shape, std::vector<double> values, PullFn pull) {
    Tensor t(std::move(shape), std::move(values));
    bind(t, std::move(pull));
    return t;
  }

  void backward(const Tensor& loss) {
    if (loss.tape() != this || loss.node() < 0)
      throw std::invalid_argument("loss was not recorded on this tape");
    if (loss.size() != 1) throw std::invalid_argument("backward requires a scalar loss");
    if (consumed_) throw std::logic_error("tape already consumed by backward");
    consumed_ = true;
    grads_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) grads_[i].assign(nodes_[i].size, 0.0);
    grads_[static_cast<std::size_t>(loss.node())][0] = 1.0;
    for (int i = loss.node(); i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      if (node.pull) node.pull(*this, grads_[static_cast<std::size_t>(i)]);
    }
  }

  const std::vector<double>& grad(const Tensor& t) const {
    if (t.tape() != this || t.node() < 0)
      throw std::invalid_argument("tensor was not recorded on this tape");
    if (!consumed_) throw std::logic_error("backward has not run");
    return grads_[static_cast<std::size_t>(t.node())];
  }

  std::vector<double>& grad_buf(int node) { return grads_[static_cast<std::size_t>(node)]; }

  std::size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::size_t size;
    PullFn pull;
  };

  void bind(Tensor& t, PullFn pull) {
    if (consumed_) throw std::logic_error("tape already consumed by backward");
    nodes_.push_back(Node{t.size(), std::move(pull)});
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool consumed_ = false;
};

namespace detail {

inline GradTape* joint_tape(const Tensor& a, const Tensor& b) {
  if (a.tape() && b.tape() && a.tape() != b.tape())
    throw std::invalid_argument("operands were recorded on different tapes");
  return a.tape() ? a.tape() : b.tape();
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline void axpy(std::vector<double>& acc, const std::vector<double>& g, double c) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c * g[i];
}

}  // namespace detail

// ---- elementwise arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  GradTape* tape = detail::joint_tape(a, b);
  if (!tape) return Tensor(a.shape(), std::move(out));
  const int ia = a.node(), ib = b.node();
  return tape->make_node(a.shape(), std::move(out),
                         [ia, ib](GradTape& t, const std::vector<double>& g) {
                           if (ia >= 0) detail::axpy(t.grad_buf(ia), g, 1.0);
                           if (ib >= 0) detail::axpy(t.grad_buf(ib), g, 1.0);
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  GradTape* tape = detail::joint_tape(a, b);
  if (!tape) return Tensor(a.shape(), std::move(out));
  const int ia = a.node(), ib = b.node();
  return tape->make_node(a.shape(), std::move(out),
                         [ia, ib](GradTape& t, const std::vector<double>& g) {
                           if (ia >= 0) detail::axpy(t.grad_buf(ia), g, 1.0);
                           if (ib >= 0) detail::axpy(t.grad_buf(ib), g, -1.0);
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  GradTape* tape = detail::joint_tape(a, b);
  if (!tape) return Tensor(a.shape(), std::move(out));
  const int ia = a.node(), ib = b.node();
  auto sa = a.storage(), sb = b.storage();
  return tape->make_node(a.shape(), std::move(out),
                         [ia, ib, sa, sb](GradTape& t, const std::vector<double>& g) {
                           if (ia >= 0) {
                             auto& ga = t.grad_buf(ia);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*sb)[i];
                           }
                           if (ib >= 0) {
                             auto& gb = t.grad_buf(ib);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*sa)[i];
                           }
                         });
}

inline Tensor scale(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  return a.tape()->make_node(a.shape(), std::move(out),
                             [ia, c](GradTape& t, const std::vector<double>& g) {
                               if (ia >= 0) detail::axpy(t.grad_buf(ia), g, c);
                             });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  return a.tape()->make_node(a.shape(), std::move(out),
                             [ia](GradTape& t, const std::vector<double>& g) {
                               if (ia >= 0) detail::axpy(t.grad_buf(ia), g, 1.0);
                             });
}

// x is [H,W,C], w is [C]; scales every channel slice by its weight.
inline Tensor mul_channels(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 1 || x.extent(2) != w.extent(0))
    throw std::invalid_argument("mul_channels: expected [H,W,C] and [C]");
  const auto& xv = x.values();
  const auto& wv = w.values();
  const std::size_t c = static_cast<std::size_t>(x.extent(2));
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * wv[i % c];
  GradTape* tape = detail::joint_tape(x, w);
  if (!tape) return Tensor(x.shape(), std::move(out));
  const int ix = x.node(), iw = w.node();
  auto sx = x.storage(), sw = w.storage();
  return tape->make_node(x.shape(), std::move(out),
                         [ix, iw, sx, sw, c](GradTape& t, const std::vector<double>& g) {
                           if (ix >= 0) {
                             auto& gx = t.grad_buf(ix);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*sw)[i % c];
                           }
                           if (iw >= 0) {
                             auto& gw = t.grad_buf(iw);
                             for (std::size_t i = 0; i < g.size(); ++i) gw[i % c] += g[i] * (*sx)[i];
                           }
                         });
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul: incompatible shapes");
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = pa[static_cast<std::size_t>(i) * k + p];
      const double* brow = pb + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  GradTape* tape = detail::joint_tape(a, b);
  if (!tape) return Tensor({m, n}, std::move(out));
  const int ia = a.node(), ib = b.node();
  auto sa = a.storage(), sb = b.storage();
  return tape->make_node(
      {m, n}, std::move(out),
      [ia, ib, sa, sb, m, k, n](GradTape& t, const std::vector<double>& g) {
        if (ia >= 0) {
          auto& ga = t.grad_buf(ia);
          const double* pb2 = sb->data();
          for (int i = 0; i < m; ++i) {
            const double* grow = g.data() + static_cast<std::size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
              const double* brow = pb2 + static_cast<std::size_t>(p) * n;
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i) * k + p] += acc;
            }
          }
        }
        if (ib >= 0) {
          auto& gb = t.grad_buf(ib);
          const double* pa2 = sa->data();
          for (int i = 0; i < m; ++i) {
            const double* grow = g.data() + static_cast<std::size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
              const double av = pa2[static_cast<std::size_t>(i) * k + p];
              double* gbrow = gb.data() + static_cast<std::size_t>(p) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      });
}

// ---- convolutions ----

// signal [C] (*) kernel [k], zero padding (k-1)/2, shape preserved. When the
// kernel is longer than the signal only its central taps are applied.
inline Tensor conv1d(const Tensor& signal, const Tensor& kernel) {
  if (signal.rank() != 1 || kernel.rank() != 1)
    throw std::invalid_argument("conv1d: expected rank-1 operands");
  const int c = signal.extent(0);
  const int k = kernel.extent(0);
  if (k % 2 == 0) throw std::invalid_argument("conv1d: kernel length must be odd");
  int keff = k;
  if (keff > c) keff = (c % 2 == 1) ? c : c - 1;  // largest odd <= C
  if (keff < 1) keff = 1;
  const int off = (k - keff) / 2;
  const int pad = (keff - 1) / 2;
  const double* ps = signal.values().data();
  const double* pk = kernel.values().data();
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < c; ++i) {
    double acc = 0.0;
    for (int j = 0; j < keff; ++j) {
      const int s = i + j - pad;
      if (s >= 0 && s < c) acc += pk[off + j] * ps[s];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  GradTape* tape = detail::joint_tape(signal, kernel);
  if (!tape) return Tensor({c}, std::move(out));
  const int is = signal.node(), ik = kernel.node();
  auto ss = signal.storage(), sk = kernel.storage();
  return tape->make_node(
      {c}, std::move(out),
      [is, ik, ss, sk, c, keff, off, pad](GradTape& t, const std::vector<double>& g) {
        for (int i = 0; i < c; ++i) {
          for (int j = 0; j < keff; ++j) {
            const int s = i + j - pad;
            if (s < 0 || s >= c) continue;
            if (is >= 0) t.grad_buf(is)[static_cast<std::size_t>(s)] += (*sk)[off + j] * g[i];
            if (ik >= 0) t.grad_buf(ik)[static_cast<std::size_t>(off + j)] += (*ss)[s] * g[i];
          }
        }
      });
}

// x [H,W,Ci], w [kh,kw,Ci,Co], bias [Co]; odd square kernel, zero padding
// (k-1)/2, stride 1 or 2.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  if (x.rank() != 3 || w.rank() != 4) throw std::invalid_argument("conv2d: bad operand ranks");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  const int h = x.extent(0), wd = x.extent(1), ci = x.extent(2);
  const int kh = w.extent(0), kw = w.extent(1), co = w.extent(3);
  if (kh != kw || kh % 2 == 0) throw std::invalid_argument("conv2d: kernel must be odd square");
  if (w.extent(2) != ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (bias.rank() != 1 || bias.extent(0) != co)
    throw std::invalid_argument("conv2d: bias must be [Co]");
  const int pad = (kh - 1) / 2;
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const double* px = x.values().data();
  const double* pw = w.values().data();
  const double* pbias = bias.values().data();
  std::vector<double> out(static_cast<std::size_t>(ho) * wo * co);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* orow = out.data() + (static_cast<std::size_t>(oy) * wo + ox) * co;
      for (int j = 0; j < co; ++j) orow[j] = pbias[j];
      const int iy0 = oy * stride - pad;
      const int ix0 = ox * stride - pad;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ix0 + kx;
          if (ix < 0 || ix >= wd) continue;
          const double* xin = px + (static_cast<std::size_t>(iy) * wd + ix) * ci;
          const double* wk = pw + (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
          for (int p = 0; p < ci; ++p) {
            const double a = xin[p];
            const double* wrow = wk + static_cast<std::size_t>(p) * co;
            for (int j = 0; j < co; ++j) orow[j] += a * wrow[j];
          }
        }
      }
    }
  GradTape* tape = detail::joint_tape(x, w);
  if (!tape) tape = bias.tape();
  if (!tape) return Tensor({ho, wo, co}, std::move(out));
  if ((bias.tape() && tape != bias.tape()))
    throw std::invalid_argument("operands were recorded on different tapes");
  const int ix_ = x.node(), iw_ = w.node(), ib_ = bias.node();
  auto sx = x.storage(), sw = w.storage();
  return tape->make_node(
      {ho, wo, co}, std::move(out),
      [=](GradTape& t, const std::vector<double>& g) {
        const double* px2 = sx->data();
        const double* pw2 = sw->data();
        double* gx = ix_ >= 0 ? t.grad_buf(ix_).data() : nullptr;
        double* gw = iw_ >= 0 ? t.grad_buf(iw_).data() : nullptr;
        double* gb = ib_ >= 0 ? t.grad_buf(ib_).data() : nullptr;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const double* grow = g.data() + (static_cast<std::size_t>(oy) * wo + ox) * co;
            if (gb)
              for (int j = 0; j < co; ++j) gb[j] += grow[j];
            const int iy0 = oy * stride - pad;
            const int ix0 = ox * stride - pad;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= wd) continue;
                const std::size_t xoff = (static_cast<std::size_t>(iy) * wd + ix) * ci;
                const std::size_t woff = (static_cast<std::size_t>(ky) * kw + kx) * ci * co;
                for (int p = 0; p < ci; ++p) {
                  const double* wrow = pw2 + woff + static_cast<std::size_t>(p) * co;
                  if (gx) {
                    double acc = 0.0;
                    for (int j = 0; j < co; ++j) acc += wrow[j] * grow[j];
                    gx[xoff + static_cast<std::size_t>(p)] += acc;
                  }
                  if (gw) {
                    const double a = px2[xoff + static_cast<std::size_t>(p)];
                    double* gwrow = gw + woff + static_cast<std::size_t>(p) * co;
                    for (int j = 0; j < co; ++j) gwrow[j] += a * grow[j];
                  }
                }
              }
            }
          }
      });
}

// ---- activations and pointwise math ----

inline Tensor relu(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  auto sa = a.storage();
  return a.tape()->make_node(a.shape(), std::move(out),
                             [ia, sa](GradTape& t, const std::vector<double>& g) {
                               if (ia < 0) return;
                               auto& ga = t.grad_buf(ia);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if ((*sa)[i] > 0.0) ga[i] += g[i];
                             });
}

inline double sigmoid_value(double x) {
  double y;
  if (x >= 0.0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  // keep the output strictly inside (0,1) even where exp over/underflows
  if (y <= 0.0) return std::numeric_limits<double>::min();
  if (y >= 1.0) return 1.0 - std::numeric_limits<double>::epsilon() / 2;
  return y;
}

inline Tensor sigmoid(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(av[i]);
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  auto res = std::make_shared<std::vector<double>>(out);
  return a.tape()->make_node(a.shape(), std::move(out),
                             [ia, res](GradTape& t, const std::vector<double>& g) {
                               if (ia < 0) return;
                               auto& ga = t.grad_buf(ia);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double y = (*res)[i];
                                 ga[i] += g[i] * y * (1.0 - y);
                               }
                             });
}

inline Tensor log(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] <= 0.0) throw std::invalid_argument("log: requires positive input");
    out[i] = std::log(av[i]);
  }
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  auto sa = a.storage();
  return a.tape()->make_node(a.shape(), std::move(out),
                             [ia, sa](GradTape& t, const std::vector<double>& g) {
                               if (ia < 0) return;
                               auto& ga = t.grad_buf(ia);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*sa)[i];
                             });
}

// Forward is a bit-exact copy; backward multiplies the upstream gradient by
// -1 exactly. This is what turns the domain-classifier losses adversarial.
inline Tensor gradient_reversal(const Tensor& a) {
  std::vector<double> out = a.values();
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  return a.tape()->make_node(a.shape(), std::move(out),
                             [ia](GradTape& t, const std::vector<double>& g) {
                               if (ia < 0) return;
                               auto& ga = t.grad_buf(ia);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += -g[i];
                             });
}

// ---- softmax ----

enum class Axis { row, column };

// Stabilized softmax over each row (axis=row) or each column (axis=column)
// of a rank-2 tensor. Denominators use stable_sum, so the output is exactly
// invariant to permuting the other axis.
inline Tensor softmax_axis(const Tensor& a, Axis axis) {
  if (a.rank() != 2) throw std::invalid_argument("softmax_axis: expected rank-2 tensor");
  const int rows = a.extent(0), cols = a.extent(1);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  const int slices = axis == Axis::row ? rows : cols;
  const int len = axis == Axis::row ? cols : rows;
  auto at = [&](int s, int i) -> std::size_t {
    return axis == Axis::row ? static_cast<std::size_t>(s) * cols + i
                             : static_cast<std::size_t>(i) * cols + s;
  };
  std::vector<double> exps(static_cast<std::size_t>(len));
  for (int s = 0; s < slices; ++s) {
    double mx = av[at(s, 0)];
    for (int i = 1; i < len; ++i) mx = std::max(mx, av[at(s, i)]);
    for (int i = 0; i < len; ++i) exps[static_cast<std::size_t>(i)] = std::exp(av[at(s, i)] - mx);
    const double denom = stable_sum(exps);
    for (int i = 0; i < len; ++i) out[at(s, i)] = exps[static_cast<std::size_t>(i)] / denom;
  }
  if (!a.tape()) return Tensor(a.shape(), std::move(out));
  const int ia = a.node();
  auto res = std::make_shared<std::vector<double>>(out);
  return a.tape()->make_node(
      a.shape(), std::move(out),
      [ia, res, rows, cols, axis](GradTape& t, const std::vector<double>& g) {
        if (ia < 0) return;
        auto& ga = t.grad_buf(ia);
        const int slices = axis == Axis::row ? rows : cols;
        const int len = axis == Axis::row ? cols : rows;
        auto at = [&](int s, int i) -> std::size_t {
          return axis == Axis::row ? static_cast<std::size_t>(s) * cols + i
                                   : static_cast<std::size_t>(i) * cols + s;
        };
        for (int s = 0; s < slices; ++s) {
          double dot = 0.0;
          for (int i = 0; i < len; ++i) dot += g[at(s, i)] * (*res)[at(s, i)];
          for (int i = 0; i < len; ++i)
            ga[at(s, i)] += (*res)[at(s, i)] * (g[at(s, i)] - dot);
        }
      });
}

// ---- reductions ----

// Channel-wise mean over the spatial grid of an [H,W,C] map. Summation is
// order-canonical, so spatial permutations leave the result exactly intact.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("global_avg_pool: expected [H,W,C]");
  const int h = x.extent(0), w = x.extent(1), c = x.extent(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c));
  std::vector<double> slice(hw);
  for (int j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < hw; ++i) slice[i] = xv[i * c + j];
    out[static_cast<std::size_t>(j)] = stable_sum(slice) / static_cast<double>(hw);
  }
  if (!x.tape()) return Tensor({c}, std::move(out));
  const int ix = x.node();
  return x.tape()->make_node({c}, std::move(out),
                             [ix, hw, c](GradTape& t, const std::vector<double>& g) {
                               if (ix < 0) return;
                               auto& gx = t.grad_buf(ix);
                               const double inv = 1.0 / static_cast<double>(hw);
                               for (std::size_t i = 0; i < hw; ++i)
                                 for (int j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
                             });
}

inline Tensor sum(const Tensor& a) {
  const auto& av = a.values();
  double s = 0.0;
  for (double v : av) s += v;
  if (!a.tape()) return Tensor::scalar(s);
  const int ia = a.node();
  return a.tape()->make_node({1}, {s}, [ia](GradTape& t, const std::vector<double>& g) {
    if (ia < 0) return;
    auto& ga = t.grad_buf(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const auto& av = a.values();
  double s = 0.0;
  for (double v : av) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  if (!a.tape()) return Tensor::scalar(s * inv);
  const int ia = a.node();
  return a.tape()->make_node({1}, {s * inv}, [ia, inv](GradTape& t, const std::vector<double>& g) {
    if (ia < 0) return;
    auto& ga = t.grad_buf(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * inv;
  });
}

// Column sums of [N,K] -> [K]; stable_sum keeps the result exactly invariant
// to row permutations.
inline Tensor sum_columns(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("sum_columns: expected rank-2 tensor");
  const int rows = m.extent(0), cols = m.extent(1);
  const auto& mv = m.values();
  std::vector<double> out(static_cast<std::size_t>(cols));
  std::vector<double> col(static_cast<std::size_t>(rows));
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) col[static_cast<std::size_t>(i)] = mv[static_cast<std::size_t>(i) * cols + j];
    out[static_cast<std::size_t>(j)] = stable_sum(col);
  }
  if (!m.tape()) return Tensor({cols}, std::move(out));
  const int im = m.node();
  return m.tape()->make_node({cols}, std::move(out),
                             [im, rows, cols](GradTape& t, const std::vector<double>& g) {
                               if (im < 0) return;
                               auto& gm = t.grad_buf(im);
                               for (int i = 0; i < rows; ++i)
                                 for (int j = 0; j < cols; ++j)
                                   gm[static_cast<std::size_t>(i) * cols + j] += g[static_cast<std::size_t>(j)];
                             });
}

// ---- structural ops ----

inline Tensor slice_cols(const Tensor& m, int c0, int c1) {
  if (m.rank() != 2) throw std::invalid_argument("slice_cols: expected rank-2 tensor");
  const int rows = m.extent(0), cols = m.extent(1);
  if (c0 < 0 || c1 <= c0 || c1 > cols) throw std::invalid_argument("slice_cols: bad column range");
  const int width = c1 - c0;
  const auto& mv = m.values();
  std::vector<double> out(static_cast<std::size_t>(rows) * width);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < width; ++j)
      out[static_cast<std::size_t>(i) * width + j] = mv[static_cast<std::size_t>(i) * cols + c0 + j];
  if (!m.tape()) return Tensor({rows, width}, std::move(out));
  const int im = m.node();
  return m.tape()->make_node({rows, width}, std::move(out),
                             [im, rows, cols, c0, width](GradTape& t, const std::vector<double>& g) {
                               if (im < 0) return;
                               auto& gm = t.grad_buf(im);
                               for (int i = 0; i < rows; ++i)
                                 for (int j = 0; j < width; ++j)
                                   gm[static_cast<std::size_t>(i) * cols + c0 + j] +=
                                       g[static_cast<std::size_t>(i) * width + j];
                             });
}

inline Tensor gather(const Tensor& v, const std::vector<int>& idx) {
  if (v.rank() != 1) throw std::invalid_argument("gather: expected rank-1 tensor");
  const int n = v.extent(0);
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw std::invalid_argument("gather: index out of range");
    out[i] = v.values()[static_cast<std::size_t>(idx[i])];
  }
  if (!v.tape()) return Tensor({static_cast<int>(idx.size())}, std::move(out));
  const int iv = v.node();
  auto ids = idx;
  return v.tape()->make_node({static_cast<int>(idx.size())}, std::move(out),
                             [iv, ids](GradTape& t, const std::vector<double>& g) {
                               if (iv < 0) return;
                               auto& gv = t.grad_buf(iv);
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 gv[static_cast<std::size_t>(ids[i])] += g[i];
                             });
}

inline Tensor gather_rows(const Tensor& m, const std::vector<int>& idx) {
  if (m.rank() != 2) throw std::invalid_argument("gather_rows: expected rank-2 tensor");
  const int rows = m.extent(0), cols = m.extent(1);
  std::vector<double> out(idx.size() * static_cast<std::size_t>(cols));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw std::invalid_argument("gather_rows: index out of range");
    const double* src = m.values().data() + static_cast<std::size_t>(idx[i]) * cols;
    std::copy(src, src + cols, out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  const int n = static_cast<int>(idx.size());
  if (!m.tape()) return Tensor({n, cols}, std::move(out));
  const int im = m.node();
  auto ids = idx;
  return m.tape()->make_node({n, cols}, std::move(out),
                             [im, ids, cols](GradTape& t, const std::vector<double>& g) {
                               if (im < 0) return;
                               auto& gm = t.grad_buf(im);
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (int j = 0; j < cols; ++j)
                                   gm[static_cast<std::size_t>(ids[i]) * cols + j] +=
                                       g[i * static_cast<std::size_t>(cols) + j];
                             });
}

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  const int cols = rows[0].extent(0);
  GradTape* tape = nullptr;
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.extent(0) != cols)
      throw std::invalid_argument("stack_rows: rows must be rank-1 of equal length");
    if (r.tape()) {
      if (tape && tape != r.tape())
        throw std::invalid_argument("operands were recorded on different tapes");
      tape = r.tape();
    }
  }
  const int n = static_cast<int>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(n) * cols);
  for (int i = 0; i < n; ++i)
    std::copy(rows[static_cast<std::size_t>(i)].values().begin(),
              rows[static_cast<std::size_t>(i)].values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(i) * cols);
  if (!tape) return Tensor({n, cols}, std::move(out));
  std::vector<int> nodes;
  nodes.reserve(rows.size());
  for (const auto& r : rows) nodes.push_back(r.node());
  return tape->make_node({n, cols}, std::move(out),
                         [nodes, cols](GradTape& t, const std::vector<double>& g) {
                           for (std::size_t i = 0; i < nodes.size(); ++i) {
                             if (nodes[i] < 0) continue;
                             auto& gr = t.grad_buf(nodes[i]);
                             for (int j = 0; j < cols; ++j)
                               gr[static_cast<std::size_t>(j)] += g[i * static_cast<std::size_t>(cols) + j];
                           }
                         });
}

// m [N,K] + v [K] broadcast over rows.
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.extent(1) != v.extent(0))
    throw std::invalid_argument("add_rowvec: expected [N,K] and [K]");
  const int rows = m.extent(0), cols = m.extent(1);
  const auto& mv = m.values();
  const auto& vv = v.values();
  std::vector<double> out(mv.size());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(i) * cols + j] = mv[static_cast<std::size_t>(i) * cols + j] + vv[static_cast<std::size_t>(j)];
  GradTape* tape = detail::joint_tape(m, v);
  if (!tape) return Tensor(m.shape(), std::move(out));
  const int im = m.node(), iv = v.node();
  return tape->make_node(m.shape(), std::move(out),
                         [im, iv, rows, cols](GradTape& t, const std::vector<double>& g) {
                           if (im >= 0) detail::axpy(t.grad_buf(im), g, 1.0);
                           if (iv >= 0) {
                             auto& gv = t.grad_buf(iv);
                             for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < cols; ++j)
                                 gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * cols + j];
                           }
                         });
}

// ---- losses ----

constexpr double kBceEps = 1e-7;

// Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps] and
// the clamp zeroes the gradient outside that band.
inline Tensor bce_loss(const Tensor& p, const std::vector<double>& y) {
  if (p.size() != y.size()) throw std::invalid_argument("bce_loss: shape mismatch");
  const auto& pv = p.values();
  const std::size_t n = pv.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::min(std::max(pv[i], kBceEps), 1.0 - kBceEps);
    acc += -(y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc));
  }
  const double loss = acc / static_cast<double>(n);
  if (!p.tape()) return Tensor::scalar(loss);
  const int ip = p.node();
  auto sp = p.storage();
  auto ty = y;
  return p.tape()->make_node({1}, {loss}, [ip, sp, ty, n](GradTape& t, const std::vector<double>& g) {
    if (ip < 0) return;
    auto& gp = t.grad_buf(ip);
    const double inv = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double pi = (*sp)[i];
      if (pi < kBceEps || pi > 1.0 - kBceEps) continue;
      gp[i] += inv * (pi - ty[i]) / (pi * (1.0 - pi));
    }
  });
}

// Mean elementwise smooth-L1 (Huber, beta = 1).
inline Tensor smooth_l1_loss(const Tensor& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) throw std::invalid_argument("smooth_l1_loss: shape mismatch");
  const auto& pv = pred.values();
  const std::size_t n = pv.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pv[i] - target[i];
    const double a = std::fabs(d);
    acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  const double loss = acc / static_cast<double>(n);
  if (!pred.tape()) return Tensor::scalar(loss);
  const int ip = pred.node();
  auto sp = pred.storage();
  auto tt = target;
  return pred.tape()->make_node({1}, {loss}, [ip, sp, tt, n](GradTape& t, const std::vector<double>& g) {
    if (ip < 0) return;
    auto& gp = t.grad_buf(ip);
    const double inv = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (*sp)[i] - tt[i];
      gp[i] += inv * std::clamp(d, -1.0, 1.0);
    }
  });
}

// Mean softmax cross-entropy over the rows of [N,K] against integer labels.
inline Tensor softmax_xent(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_xent: expected rank-2 logits");
  const int n = logits.extent(0), k = logits.extent(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("softmax_xent: label count mismatch");
  const auto& xv = logits.values();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
      throw std::invalid_argument("softmax_xent: label out of range");
    const double* row = xv.data() + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double se = 0.0;
    for (int j = 0; j < k; ++j) se += std::exp(row[j] - mx);
    acc += mx + std::log(se) - row[labels[static_cast<std::size_t>(i)]];
  }
  const double loss = acc / static_cast<double>(n);
  if (!logits.tape()) return Tensor::scalar(loss);
  const int il = logits.node();
  auto sl = logits.storage();
  auto tl = labels;
  return logits.tape()->make_node({1}, {loss}, [il, sl, tl, n, k](GradTape& t, const std::vector<double>& g) {
    if (il < 0) return;
    auto& gl = t.grad_buf(il);
    const double inv = g[0] / static_cast<double>(n);
    for (int i = 0; i < n; ++i) {
      const double* row = sl->data() + static_cast<std::size_t>(i) * k;
      double mx = row[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double se = 0.0;
      for (int j = 0; j < k; ++j) se += std::exp(row[j] - mx);
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(row[j] - mx) / se;
        const double y = j == tl[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        gl[static_cast<std::size_t>(i) * k + j] += inv * (p - y);
      }
    }
  });
}

// ---- bilinear crop-resize ----

// Samples an SxS grid at cell centers of the box [x1,x2)x[y1,y2) given in
// feature-space coordinates; out-of-range samples clamp to border values.
// Differentiable w.r.t. the feature values only.
inline Tensor bilinear_crop(const Tensor& feat, double x1, double y1, double x2, double y2, int s) {
  if (feat.rank() != 3) throw std::invalid_argument("bilinear_crop: expected [H,W,C]");
  if (s < 1) throw std::invalid_argument("bilinear_crop: grid size must be >= 1");
  if (!(x2 > x1) || !(y2 > y1)) throw EmptyBoxError("bilinear_crop: empty box");
  const int h = feat.extent(0), w = feat.extent(1), c = feat.extent(2);
  const auto& fv = feat.values();
  struct Samp {
    int x0, y0;
    double fx, fy;
  };
  std::vector<Samp> samples(static_cast<std::size_t>(s) * s);
  for (int v = 0; v < s; ++v)
    for (int u = 0; u < s; ++u) {
      double sx = x1 + (u + 0.5) * (x2 - x1) / s - 0.5;
      double sy = y1 + (v + 0.5) * (y2 - y1) / s - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      int x0 = std::min(static_cast<int>(sx), w > 1 ? w - 2 : 0);
      int y0 = std::min(static_cast<int>(sy), h > 1 ? h - 2 : 0);
      samples[static_cast<std::size_t>(v) * s + u] =
          Samp{x0, y0, w > 1 ? sx - x0 : 0.0, h > 1 ? sy - y0 : 0.0};
    }
  std::vector<double> out(static_cast<std::size_t>(s) * s * c);
  const int x_step = w > 1 ? c : 0;
  const int y_step = h > 1 ? w * c : 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Samp& sp = samples[i];
    const double* base = fv.data() + (static_cast<std::size_t>(sp.y0) * w + sp.x0) * c;
    double* orow = out.data() + i * c;
    for (int j = 0; j < c; ++j) {
      const double v00 = base[j];
      const double v01 = base[x_step + j];
      const double v10 = base[y_step + j];
      const double v11 = base[y_step + x_step + j];
      const double top = v00 + sp.fx * (v01 - v00);
      const double bot = v10 + sp.fx * (v11 - v10);
      orow[j] = top + sp.fy * (bot - top);
    }
  }
  if (!feat.tape()) return Tensor({s, s, c}, std::move(out));
  const int fi = feat.node();
  return feat.tape()->make_node(
      {s, s, c}, std::move(out),
      [fi, samples, w, c, x_step, y_step](GradTape& t, const std::vector<double>& g) {
        if (fi < 0) return;
        auto& gf = t.grad_buf(fi);
        for (std::size_t i = 0; i < samples.size(); ++i) {
          const Samp& sp = samples[i];
          const std::size_t base = (static_cast<std::size_t>(sp.y0) * w + sp.x0) * c;
          const double* grow = g.data() + i * c;
          const double w00 = (1.0 - sp.fx) * (1.0 - sp.fy);
          const double w01 = sp.fx * (1.0 - sp.fy);
          const double w10 = (1.0 - sp.fx) * sp.fy;
          const double w11 = sp.fx * sp.fy;
          for (int j = 0; j < c; ++j) {
            gf[base + j] += w00 * grow[j];
            gf[base + x_step + j] += w01 * grow[j];
            gf[base + y_step + j] += w10 * grow[j];
            gf[base + y_step + x_step + j] += w11 * grow[j];
          }
        }
      });
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace sa3
