// Central finite-difference checks for tape primitives and parameter stores.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bscst/gradcore.hpp"
#include "bscst/rng.hpp"

namespace gradcheck {

using bscst::grad::ParamStore;
using bscst::grad::Tape;
using bscst::grad::Tensor;
using bscst::grad::Value;

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose gradient is
/// at the level of fp64 round-off in the difference quotient from dominating.
inline double rel_err(double a, double n, double floor = 1e-5) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct Report {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

inline Tensor random_tensor(std::size_t r, std::size_t c, bscst::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// `f` maps input leaves to any value; the check differentiates
/// sum(f(x) * R) for a fixed random R with respect to every input entry.
inline Report check_op(const std::function<Value(Tape&, std::vector<Value>&)>& f, std::vector<Tensor> inputs,
                       std::uint64_t seed, double h = 1e-5) {
  bscst::Rng rng(seed);
  Tensor weights;
  auto eval = [&](bool record, std::vector<Tensor>* grads) {
    Tape tape(record);
    std::vector<Value> xs;
    for (const Tensor& t : inputs) xs.push_back(record ? tape.variable(t) : tape.constant(t));
    Value y = f(tape, xs);
    if (weights.rows == 0) weights = random_tensor(y.rows(), y.cols(), rng);
    Value loss = bscst::grad::sum(bscst::grad::mul(y, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const Value& x : xs) grads->push_back(x.grad());
    }
    return loss.item();
  };
  std::vector<Tensor> analytic;
  eval(true, &analytic);
  Report rep;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i].data[k];
      inputs[i].data[k] = x0 + h;
      const double up = eval(false, nullptr);
      inputs[i].data[k] = x0 - h;
      const double down = eval(false, nullptr);
      inputs[i].data[k] = x0;
      const double e = rel_err(analytic[i].data[k], (up - down) / (2 * h));
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst = "input " + std::to_string(i) + "[" + std::to_string(k) + "]";
      }
    }
  return rep;
}

/// Compares the gradients already accumulated in `store` with central
/// differences of `loss` over every scalar of every parameter.
inline Report check_params(ParamStore& store, const std::function<double()>& loss, double h = 1e-5) {
  Report rep;
  for (auto& p : store) {
    const Tensor analytic = p.grad;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double x0 = p.value.data[k];
      p.value.data[k] = x0 + h;
      const double up = loss();
      p.value.data[k] = x0 - h;
      const double down = loss();
      p.value.data[k] = x0;
      const double e = rel_err(analytic.data[k], (up - down) / (2 * h));
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst = p.name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return rep;
}

struct NamedReport {
  std::string op;
  Report report;
};

/// Every tape primitive on small random inputs.
inline std::vector<NamedReport> primitive_suite(std::uint64_t seed) {
  namespace g = bscst::grad;
  bscst::Rng rng(seed);
  auto R = [&](std::size_t r, std::size_t c) { return random_tensor(r, c, rng); };
  Tensor mask(3, 4);
  for (double& v : mask.data) v = rng.uniform() < 0.7 ? 1.0 : 0.0;
  const std::vector<int> rows_idx = {2, 0, 2, 1};
  const std::vector<int> cols_idx = {3, 0, 1};
  std::vector<NamedReport> out;
  auto run = [&](std::string name, std::function<Value(Tape&, std::vector<Value>&)> f, std::vector<Tensor> in) {
    out.push_back({std::move(name), check_op(f, std::move(in), rng.next())});
  };
  run("add", [](Tape&, auto& x) { return g::add(x[0], x[1]); }, {R(3, 4), R(3, 4)});
  run("add_row_broadcast", [](Tape&, auto& x) { return g::add(x[0], x[1]); }, {R(3, 4), R(1, 4)});
  run("sub", [](Tape&, auto& x) { return g::sub(x[0], x[1]); }, {R(3, 4), R(3, 4)});
  run("mul", [](Tape&, auto& x) { return g::mul(x[0], x[1]); }, {R(3, 4), R(3, 4)});
  run("mul_col_broadcast", [](Tape&, auto& x) { return g::mul(x[0], x[1]); }, {R(3, 4), R(3, 1)});
  run("scale", [](Tape&, auto& x) { return g::scale(x[0], -1.7); }, {R(3, 4)});
  run("matmul", [](Tape&, auto& x) { return g::matmul(x[0], x[1]); }, {R(3, 5), R(5, 2)});
  run("tanh", [](Tape&, auto& x) { return g::tanh(x[0]); }, {R(3, 4)});
  run("sigmoid", [](Tape&, auto& x) { return g::sigmoid(x[0]); }, {R(3, 4)});
  run("exp", [](Tape&, auto& x) { return g::exp(x[0]); }, {R(3, 4)});
  run("log", [](Tape&, auto& x) { return g::log(x[0]); }, {random_tensor(3, 4, rng, 0.5, 2.0)});
  run("softmax_rows", [](Tape&, auto& x) { return g::softmax(x[0], 1); }, {R(3, 4)});
  run("softmax_cols", [](Tape&, auto& x) { return g::softmax(x[0], 0); }, {R(3, 4)});
  run("log_softmax", [](Tape&, auto& x) { return g::log_softmax(x[0]); }, {R(3, 4)});
  run("gather", [&](Tape&, auto& x) { return g::gather(x[0], rows_idx); }, {R(3, 4)});
  run("pick", [&](Tape&, auto& x) { return g::pick(x[0], cols_idx); }, {R(3, 4)});
  run("concat", [](Tape&, auto& x) { return g::concat(x); }, {R(3, 2), R(3, 3), R(3, 1)});
  run("slice_cols", [](Tape&, auto& x) { return g::slice_cols(x[0], 1, 2); }, {R(3, 4)});
  run("dropout", [&](Tape&, auto& x) { return g::dropout(x[0], mask, 0.3); }, {R(3, 4)});
  run("sum", [](Tape&, auto& x) { return g::sum(x[0]); }, {R(3, 4)});
  run("mean", [](Tape&, auto& x) { return g::mean(x[0]); }, {R(3, 4)});
  run("composite", [](Tape&, auto& x) {
    return g::log_softmax(g::add(g::matmul(g::tanh(x[0]), x[1]), x[2]));
  }, {R(2, 3), R(3, 4), R(1, 4)});
  return out;
}

}  // namespace gradcheck
