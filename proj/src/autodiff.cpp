#include "cue/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cue/simd/kernels.hpp"
#include "cue/special.hpp"

namespace cue::ad {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::needs_grad() const { return tape_->needs_grad(id_); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const auto& p : parents) {
    if (&p.tape() != this) throw std::logic_error("autodiff: mixing vars from different tapes");
    needs = needs || nodes_[p.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
  if (loss.value().size() != 1) throw ShapeError("backward: loss must be scalar");
  if (backward_done_) throw std::logic_error("backward: tape already consumed");
  backward_done_ = true;
  for (auto& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0);
  nodes_[loss.id()].grad[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.needs_grad && n.backward) n.backward(*this, id);
  }
}

namespace {

// Accumulates g into the gradient of v if v participates in differentiation.
template <class F>
void accumulate(Tape& t, const Var& v, F&& f) {
  if (t.needs_grad(v.id())) f(t.grad_mut(v.id()));
}

template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return a.tape().push(std::move(y), {a}, [a, deriv](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const Tensor& x = t.value(a.id());
      const Tensor& y = t.value(self);
      const Tensor& g = t.grad(self);
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
  });
}

void require_2d(const Var& a, const char* what) {
  if (a.value().rank() != 2) throw ShapeError(std::string(what) + ": expected a 2-D tensor");
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape().push(std::move(y), {a, b}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    for (const Var& v : {a, b})
      accumulate(t, v, [&](Tensor& gv) {
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      });
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape().push(std::move(y), {a, b}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape().push(std::move(y), {a, b}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    });
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= b.value()[i];
  return a.tape().push(std::move(y), {a, b}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& bv = t.value(b.id());
    const Tensor& yv = t.value(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    });
    accumulate(t, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
    });
  });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return cue::softplus(x); },
      [](double x, double) { return cue::sigmoid(x); });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clamp_min(const Var& a, double lo) {
  return unary(
      a, [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Var std_normal_log_cdf(const Var& a) {
  return unary(
      a, [](double x) { return cue::std_normal_log_cdf(x); },
      [](double x, double) { return cue::std_normal_log_cdf_grad(x); });
}

Var mul_const(const Var& a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
  return a.tape().push(std::move(y), {a}, [a, c](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const Tensor& g = t.grad(self);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
    });
  });
}

Var matmul(const Var& a, const Var& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  const auto& kern = simd::active();
  Tensor y(Shape{m, n}, 0.0);
  kern.gemm_nn(m, n, k, a.value().data(), b.value().data(), y.data());
  return a.tape().push(std::move(y), {a, b}, [a, b, m, n, k](Tape& t, int self) {
    const auto& kern = simd::active();
    const Tensor& g = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      // dA = G * B^T
      kern.gemm_nt(m, n, k, g.data(), t.value(b.id()).data(), ga.data());
    });
    accumulate(t, b, [&](Tensor& gb) {
      // dB = A^T * G
      kern.gemm_tn(m, n, k, t.value(a.id()).data(), g.data(), gb.data());
    });
  });
}

Var add_bias(const Var& a, const Var& bias) {
  require_2d(a, "add_bias");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  if (bias.value().size() != cols) throw ShapeError("add_bias: bias length mismatch");
  Tensor y = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += bias.value()[c];
  return a.tape().push(std::move(y), {a, bias}, [a, bias, rows, cols](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    accumulate(t, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    accumulate(t, bias, [&](Tensor& gb) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    });
  });
}

Var l2_normalize_rows(const Var& a) {
  require_2d(a, "l2_normalize_rows");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor y = a.value();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += y[r * cols + c] * y[r * cols + c];
    norms[r] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= norms[r];
  }
  return a.tape().push(std::move(y), {a}, [a, rows, cols, norms](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const Tensor& g = t.grad(self);
      const Tensor& yv = t.value(self);
      for (std::size_t r = 0; r < rows; ++r) {
        double yg = 0.0;
        for (std::size_t c = 0; c < cols; ++c) yg += yv[r * cols + c] * g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] += (g[r * cols + c] - yv[r * cols + c] * yg) / norms[r];
      }
    });
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  require_2d(a, "gather_rows");
  const std::size_t n = a.value().dim(0), cols = a.value().dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor y(Shape{idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(a.value().data() + idx[r] * cols, cols, y.data() + r * cols);
  }
  return a.tape().push(std::move(y), {a}, [a, idx = std::move(idx), cols](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const Tensor& g = t.grad(self);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[idx[r] * cols + c] += g[r * cols + c];
    });
  });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  require_2d(a, "slice_cols");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  if (start + count > cols) throw ShapeError("slice_cols: range exceeds columns");
  Tensor y(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.value().data() + r * cols + start, count, y.data() + r * count);
  return a.tape().push(std::move(y), {a}, [a, rows, cols, start, count](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const Tensor& g = t.grad(self);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c) ga[r * cols + start + c] += g[r * count + c];
    });
  });
}

Var row_sum(const Var& a) {
  require_2d(a, "row_sum");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor y(Shape{rows}, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r] += a.value()[r * cols + c];
  return a.tape().push(std::move(y), {a}, [a, rows, cols](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const Tensor& g = t.grad(self);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r];
    });
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().push(Tensor::scalar(s), {a}, [a](Tape& t, int self) {
    accumulate(t, a, [&](Tensor& ga) {
      const double g = t.grad(self)[0];
      for (auto& v : ga.values()) v += g;
    });
  });
}

Var mean(const Var& a) {
  if (a.value().empty()) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_2d(logits, "cross_entropy");
  const std::size_t n = logits.value().dim(0), c = logits.value().dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  const Tensor& l = logits.value();
  Tensor probs(Shape{n, c});
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c)
      throw std::out_of_range("cross_entropy: label out of range");
    const double* row = l.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    total += lse - row[lab[i]];
  }
  return logits.tape().push(
      Tensor::scalar(total / static_cast<double>(n)), {logits},
      [logits, probs = std::move(probs), lab = std::move(lab), n, c](Tape& t, int self) {
        accumulate(t, logits, [&](Tensor& gl) {
          const double g = t.grad(self)[0] / static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
            gl[i * c + lab[i]] -= g;
          }
        });
      });
}

}  // namespace cue::ad
