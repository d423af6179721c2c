#include "bscst/gradcore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bscst::grad {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                              b.shape_string());
}

Tape& same_tape(const Value& a, const Value& b, const char* op) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": invalid value");
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": values on different tapes");
  return a.tape();
}

// Elementwise unary op whose derivative is a function of the input and output.
template <typename Fwd, typename Deriv>
Value unary(Value a, Fwd fwd, Deriv deriv) {
  Tape& t = a.tape();
  const Tensor& x = a.data();
  Tensor y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = fwd(x.data[i]);
  const std::size_t ia = a.id();
  return t.push(std::move(y), {ia}, [ia, deriv](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& g = tp.upstream(self);
    const Tensor& xin = tp.data(ia);
    const Tensor& yout = tp.data(self);
    Tensor& ga = tp.grad_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * deriv(xin.data[i], yout.data[i]);
  });
}

}  // namespace

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) throw std::invalid_argument("tensor: value count does not match shape");
}

std::string Tensor::shape_string() const {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

const Tensor& Value::data() const { return tape_->data(id_); }
Tensor Value::grad() const { return tape_->grad(id_); }

double Value::item() const {
  const Tensor& d = data();
  if (d.size() != 1) throw std::invalid_argument("item: value is not 1x1");
  return d.data[0];
}

// ---------------------------------------------------------------------------

Value Tape::constant(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, {}, {}, false, nullptr});
  return Value(this, nodes_.size() - 1);
}

Value Tape::variable(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, {}, {}, record_, nullptr});
  return Value(this, nodes_.size() - 1);
}

Value Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Value(this, it->second);
  nodes_.push_back(Node{p.value, {}, {}, {}, record_, &p});
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Value(this, nodes_.size() - 1);
}

Value Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  bool needs = false;
  if (record_) {
    for (std::size_t i : inputs) needs = needs || nodes_[i].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Value(this, nodes_.size() - 1);
}

Tensor& Tape::grad_mut(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.rows != n.value.rows)
    n.grad = Tensor(n.value.rows, n.value.cols, 0.0);
  return n.grad;
}

Tensor Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.same_shape(n.value) && n.grad.size() == n.value.size()) return n.grad;
  return Tensor(n.value.rows, n.value.cols, 0.0);
}

void Tape::backward(Value loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss lives on another tape");
  if (!record_) throw std::logic_error("backward: tape was built without recording");
  if (consumed_) throw std::logic_error("backward: tape already differentiated");
  const Tensor& l = loss.data();
  if (l.rows != 1 || l.cols != 1) throw std::invalid_argument("backward: loss must be a 1x1 scalar");
  consumed_ = true;
  grad_mut(loss.id()).data[0] = 1.0;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, k);
  }
  for (auto& [p, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    auto* param = const_cast<Parameter*>(p);
    if (!param->grad.same_shape(param->value)) param->grad = Tensor(param->value.rows, param->value.cols);
    for (std::size_t i = 0; i < n.grad.size(); ++i) param->grad.data[i] += n.grad.data[i];
  }
}

// ---------------------------------------------------------------------------

Value add(Value a, Value b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor& x = a.data();
  const Tensor& y = b.data();
  const bool row_bcast = y.rows == 1 && x.rows != 1 && y.cols == x.cols;
  if (!x.same_shape(y) && !row_bcast) shape_error("add", x, y);
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* yr = row_bcast ? y.data.data() : y.data.data() + r * y.cols;
    double* o = out.data.data() + r * x.cols;
    for (std::size_t c = 0; c < x.cols; ++c) o[c] += yr[c];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {ia, ib}, [ia, ib, row_bcast](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_mut(ib);
      if (row_bcast) {
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) gb.data[c] += g(r, c);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
      }
    }
  });
}

Value sub(Value a, Value b) {
  Tape& t = same_tape(a, b, "sub");
  const Tensor& x = a.data();
  const Tensor& y = b.data();
  if (!x.same_shape(y)) shape_error("sub", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= y.data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_mut(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

Value mul(Value a, Value b) {
  Tape& t = same_tape(a, b, "mul");
  // Normalise so that only b can be the broadcast column.
  if (a.data().cols == 1 && b.data().cols != 1 && a.data().rows == b.data().rows) std::swap(a, b);
  const Tensor& x = a.data();
  const Tensor& y = b.data();
  const bool col_bcast = y.cols == 1 && x.cols != 1 && y.rows == x.rows;
  if (!x.same_shape(y) && !col_bcast) shape_error("mul", x, y);
  Tensor out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c)
      out(r, c) = x(r, c) * (col_bcast ? y(r, 0) : y(r, c));
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {ia, ib}, [ia, ib, col_bcast](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    const Tensor& xa = tp.data(ia);
    const Tensor& xb = tp.data(ib);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) ga(r, c) += g(r, c) * (col_bcast ? xb(r, 0) : xb(r, c));
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_mut(ib);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
          if (col_bcast)
            gb(r, 0) += g(r, c) * xa(r, c);
          else
            gb(r, c) += g(r, c) * xa(r, c);
        }
    }
  });
}

Value scale(Value a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Value matmul(Value a, Value b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& x = a.data();
  const Tensor& w = b.data();
  if (x.cols != w.rows) shape_error("matmul", x, w);
  const std::size_t n = x.rows, k = x.cols, m = w.cols;
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data.data() + i * m;
    const double* xi = x.data.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = xi[p];
      if (s == 0.0) continue;
      const double* wp = w.data.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * wp[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    const Tensor& xa = tp.data(ia);
    const Tensor& wb = tp.data(ib);
    const std::size_t n = xa.rows, k = xa.cols, m = wb.cols;
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data.data() + i * m;
        double* gai = ga.data.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double* wp = wb.data.data() + p * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gi[j] * wp[j];
          gai[p] += acc;
        }
      }
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_mut(ib);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data.data() + i * m;
        const double* xi = xa.data.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = xi[p];
          if (s == 0.0) continue;
          double* gbp = gb.data.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gbp[j] += s * gi[j];
        }
      }
    }
  });
}

Value tanh(Value a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Value sigmoid(Value a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Value exp(Value a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Value log(Value a) {
  for (double x : a.data().data)
    if (!(x > 0.0)) throw std::domain_error("log: non-positive input");
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value softmax(Value a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  Tape& t = a.tape();
  const Tensor& x = a.data();
  Tensor y(x.rows, x.cols);
  const std::size_t outer = axis == 1 ? x.rows : x.cols;
  const std::size_t inner = axis == 1 ? x.cols : x.rows;
  auto at = [axis](auto& m, std::size_t o, std::size_t i) -> auto& {
    return axis == 1 ? m.data[o * m.cols + i] : m.data[i * m.cols + o];
  };
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, at(x, o, i));
    double z = 0.0;
    for (std::size_t i = 0; i < inner; ++i) z += (at(y, o, i) = std::exp(at(x, o, i) - mx));
    for (std::size_t i = 0; i < inner; ++i) at(y, o, i) /= z;
  }
  const std::size_t ia = a.id();
  return t.push(std::move(y), {ia}, [ia, axis, outer, inner, at](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& g = tp.upstream(self);
    const Tensor& yv = tp.data(self);
    Tensor& ga = tp.grad_mut(ia);
    for (std::size_t o = 0; o < outer; ++o) {
      double dot = 0.0;
      for (std::size_t i = 0; i < inner; ++i) dot += at(g, o, i) * at(yv, o, i);
      for (std::size_t i = 0; i < inner; ++i) at(ga, o, i) += at(yv, o, i) * (at(g, o, i) - dot);
    }
  });
}

Value log_softmax(Value a) {
  Tape& t = a.tape();
  const Tensor& x = a.data();
  Tensor y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto xr = x.row(r);
    const double mx = *std::max_element(xr.begin(), xr.end());
    double z = 0.0;
    for (double v : xr) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    auto yr = y.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) yr[c] = xr[c] - lse;
  }
  const std::size_t ia = a.id();
  return t.push(std::move(y), {ia}, [ia](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& g = tp.upstream(self);
    const Tensor& yv = tp.data(self);
    Tensor& ga = tp.grad_mut(ia);
    for (std::size_t r = 0; r < g.rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < g.cols; ++c) gsum += g(r, c);
      for (std::size_t c = 0; c < g.cols; ++c) ga(r, c) += g(r, c) - std::exp(yv(r, c)) * gsum;
    }
  });
}

Value gather(Value table, std::span<const int> indices) {
  Tape& t = table.tape();
  const Tensor& w = table.data();
  Tensor out(indices.size(), w.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int idx = indices[r];
    if (idx < 0 || static_cast<std::size_t>(idx) >= w.rows)
      throw std::invalid_argument("gather: index " + std::to_string(idx) + " out of range");
    std::copy_n(w.data.data() + static_cast<std::size_t>(idx) * w.cols, w.cols, out.data.data() + r * w.cols);
  }
  const std::size_t ia = table.id();
  std::vector<int> idx(indices.begin(), indices.end());
  return t.push(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& g = tp.upstream(self);
    Tensor& ga = tp.grad_mut(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = ga.data.data() + static_cast<std::size_t>(idx[r]) * ga.cols;
      for (std::size_t c = 0; c < g.cols; ++c) dst[c] += g(r, c);
    }
  });
}

Value pick(Value a, std::span<const int> indices) {
  Tape& t = a.tape();
  const Tensor& x = a.data();
  if (indices.size() != x.rows) throw std::invalid_argument("pick: one index per row required");
  Tensor out(x.rows, 1);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const int idx = indices[r];
    if (idx < 0 || static_cast<std::size_t>(idx) >= x.cols)
      throw std::invalid_argument("pick: index out of range");
    out(r, 0) = x(r, static_cast<std::size_t>(idx));
  }
  const std::size_t ia = a.id();
  std::vector<int> idx(indices.begin(), indices.end());
  return t.push(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& g = tp.upstream(self);
    Tensor& ga = tp.grad_mut(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) ga(r, static_cast<std::size_t>(idx[r])) += g(r, 0);
  });
}

Value concat(std::span<const Value> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const Value& v : parts) {
    same_tape(parts.front(), v, "concat");
    if (v.rows() != rows) shape_error("concat", parts.front().data(), v.data());
    cols += v.cols();
    ids.push_back(v.id());
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const Value& v : parts) {
    const Tensor& x = v.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data.data() + r * x.cols, x.cols, out.data.data() + r * cols + off);
    off += x.cols;
  }
  return t.push(std::move(out), ids, [ids](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t w = tp.data(id).cols;
      if (tp.requires_grad(id)) {
        Tensor& gi = tp.grad_mut(id);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

Value slice_cols(Value a, std::size_t start, std::size_t width) {
  Tape& t = a.tape();
  const Tensor& x = a.data();
  if (start + width > x.cols) throw std::invalid_argument("slice_cols: range exceeds " + x.shape_string());
  Tensor out(x.rows, width);
  for (std::size_t r = 0; r < x.rows; ++r) std::copy_n(x.data.data() + r * x.cols + start, width, out.data.data() + r * width);
  const std::size_t ia = a.id();
  return t.push(std::move(out), {ia}, [ia, start, width](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const Tensor& g = tp.upstream(self);
    Tensor& ga = tp.grad_mut(ia);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < width; ++c) ga(r, start + c) += g(r, c);
  });
}

Value dropout(Value a, const Tensor& mask, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  const Tensor& x = a.data();
  if (!x.same_shape(mask)) shape_error("dropout", x, mask);
  Tensor scaled(mask.rows, mask.cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double m = mask.data[i];
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("dropout: mask entries must be 0 or 1");
    scaled.data[i] = m * keep_scale;
  }
  Tape& t = a.tape();
  return mul(a, t.constant(std::move(scaled)));
}

Value sum(Value a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.data().data) s += v;
  const std::size_t ia = a.id();
  return t.push(Tensor(1, 1, s), {ia}, [ia](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const double g = tp.upstream(self).data[0];
    Tensor& ga = tp.grad_mut(ia);
    for (double& v : ga.data) v += g;
  });
}

Value mean(Value a) {
  const double n = static_cast<double>(a.data().size());
  if (n == 0) throw std::invalid_argument("mean: empty value");
  return scale(sum(a), 1.0 / n);
}

}  // namespace bscst::grad
