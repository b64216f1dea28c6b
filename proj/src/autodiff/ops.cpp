#include "dcrn/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace dcrn::ad {
namespace {

Graph& graph_of(Var a) {
  if (!a.valid()) throw std::logic_error("op on an invalid variable");
  return *a.graph;
}

// C(m x n) += A(m x k) * B(k x n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x k) += A(m x n) * B(k x n)^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

enum class Broadcast { kSame, kRow, kCol, kScalar };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  if (br == ar && bc == ac) return Broadcast::kSame;
  if (br == 1 && bc == 1) return Broadcast::kScalar;
  if (br == 1 && bc == ac) return Broadcast::kRow;
  if (bc == 1 && br == ar) return Broadcast::kCol;
  throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()) + " do not conform");
}

inline std::size_t b_index(Broadcast k, std::size_t r, std::size_t c, std::size_t cols) {
  switch (k) {
    case Broadcast::kSame:
      return r * cols + c;
    case Broadcast::kRow:
      return c;
    case Broadcast::kCol:
      return r;
    case Broadcast::kScalar:
      return 0;
  }
  return 0;
}

template <typename Fwd, typename DA, typename DB>
Var binary(const char* name, Var a, Var b, Fwd fwd, DA da, DB db) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(name, av, bv);
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = fwd(av[r * cols + c], bv[b_index(kind, r, c, cols)]);
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {a, b}, [=](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& x = gr.value(ia);
    const Tensor& y = gr.value(ib);
    if (Tensor* ga = gr.grad_sink(ia)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          (*ga)[i] += go[i] * da(x[i], y[b_index(kind, r, c, cols)]);
        }
    }
    if (Tensor* gb = gr.grad_sink(ib)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          const std::size_t j = b_index(kind, r, c, cols);
          (*gb)[j] += go[i] * db(x[i], y[j]);
        }
    }
  });
}

// Elementwise unary op whose derivative is expressed through input x and
// output y.
template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    const Tensor& x = gr.value(ia);
    const Tensor& y = gr.value(self);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += go[i] * deriv(x[i], y[i]);
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: shapes " + to_string(av.shape()) + " and " +
                     to_string(bv.shape()) + " do not conform");
  }
  Tensor out = Tensor::matrix(m, n);
  gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {a, b}, [=](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    if (Tensor* ga = gr.grad_sink(ia)) gemm_nt(go.data(), gr.value(ib).data(), ga->data(), m, n, k);
    if (Tensor* gb = gr.grad_sink(ib)) gemm_tn(gr.value(ia).data(), go.data(), gb->data(), m, k, n);
  });
}

Var transpose(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = av[r * n + c];
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) (*ga)[r * n + c] += go[c * m + r];
  });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var abs(Var a) {
  // Subgradient 0 at exactly zero.
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(v) + " in shape " +
                        to_string(a.value().shape()));
    }
  }
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Graph& g = graph_of(parts.front());
  const std::size_t rows = parts.front().rows();
  std::vector<std::size_t> widths;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat: row mismatch " + to_string(parts.front().value().shape()) +
                       " vs " + to_string(p.value().shape()));
    }
    widths.push_back(p.cols());
    ids.push_back(p.id);
    total += p.cols();
  }
  Tensor out = Tensor::matrix(rows, total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * total + offset + c] = v[r * widths[k] + c];
    offset += widths[k];
  }
  return g.record(std::move(out), parts, [=](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = gr.grad_sink(ids[k])) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) (*gp)[r * widths[k] + c] += go[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  if (begin > end || end > cols) {
    throw ShapeError("slice: columns [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for shape " + to_string(av.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out = Tensor::matrix(rows, w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = av[r * cols + begin + c];
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) (*ga)[r * cols + begin + c] += go[r * w + c];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Graph& g = graph_of(parts.front());
  const std::size_t cols = parts.front().cols();
  std::vector<std::size_t> sizes;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + to_string(parts.front().value().shape()) +
                       " vs " + to_string(p.value().shape()));
    }
    sizes.push_back(p.value().size());
    ids.push_back(p.id);
    total += p.rows();
  }
  Tensor out = Tensor::matrix(total, cols);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    std::copy(v.data(), v.data() + sizes[k], out.data() + offset);
    offset += sizes[k];
  }
  return g.record(std::move(out), parts, [=](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = gr.grad_sink(ids[k]))
        for (std::size_t i = 0; i < sizes[k]; ++i) (*gp)[i] += go[off + i];
      off += sizes[k];
    }
  });
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const std::size_t cols = av.cols(), n = av.rows();
  Tensor out = Tensor::matrix(rows.size(), cols);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[k]) + " out of range for shape " +
                       to_string(av.shape()));
    }
    std::copy(av.data() + rows[k] * cols, av.data() + (rows[k] + 1) * cols, out.data() + k * cols);
  }
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t c = 0; c < cols; ++c) (*ga)[rows[k] * cols + c] += go[k * cols + c];
  });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  const int ia = a.id;
  return g.record(Tensor::scalar(acc), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const double go = gr.grad(self)[0];
    for (double& v : ga->values()) v += go;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty operand");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_cols(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  if (cols == 0) throw ShapeError("mean_cols: no columns");
  Tensor out = Tensor::matrix(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += av[r * cols + c];
    out[r] = acc / static_cast<double>(cols);
  }
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    const double inv = 1.0 / static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += go[r] * inv;
  });
}

Var sum_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out = Tensor::matrix(1, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += av[r * cols + c];
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += go[c];
  });
}

Var dropout(Var a, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(av.size());
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    (*mask)[i] = keep(rng) ? inv : 0.0;
    out[i] = av[i] * (*mask)[i];
  }
  const int ia = a.id;
  return g.record(std::move(out), {a}, [=](Graph& gr, int self) {
    Tensor* ga = gr.grad_sink(ia);
    if (!ga) return;
    const Tensor& go = gr.grad(self);
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * (*mask)[i];
  });
}

Var detach(Var a) { return graph_of(a).constant(a.value()); }

LstmState lstm_cell(Var x, LstmState prev, Var wx, Var wh, Var b) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  const Tensor& hv = prev.h.value();
  const Tensor& cv = prev.c.value();
  const Tensor& wxv = wx.value();
  const Tensor& whv = wh.value();
  const Tensor& bv = b.value();
  const std::size_t batch = xv.rows(), in = xv.cols(), hid = hv.cols(), g4 = 4 * hid;
  if (wxv.rows() != in || wxv.cols() != g4 || whv.rows() != hid || whv.cols() != g4 ||
      bv.size() != g4 || hv.rows() != batch || cv.rows() != batch || cv.cols() != hid) {
    throw ShapeError("lstm_cell: x " + to_string(xv.shape()) + ", h " + to_string(hv.shape()) +
                     ", c " + to_string(cv.shape()) + ", Wx " + to_string(wxv.shape()) +
                     ", Wh " + to_string(whv.shape()) + ", b " + to_string(bv.shape()));
  }

  // Gate activations are kept for the backward pass.
  auto gates = std::make_shared<Tensor>(Tensor::matrix(batch, g4));
  Tensor& z = *gates;
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t j = 0; j < g4; ++j) z[r * g4 + j] = bv[j];
  gemm_nn(xv.data(), wxv.data(), z.data(), batch, in, g4);
  gemm_nn(hv.data(), whv.data(), z.data(), batch, hid, g4);

  // out = [h' | c']
  Tensor out = Tensor::matrix(batch, 2 * hid);
  for (std::size_t r = 0; r < batch; ++r) {
    double* zr = z.data() + r * g4;
    for (std::size_t j = 0; j < hid; ++j) {
      const double i = sigmoid_scalar(zr[j]);
      const double f = sigmoid_scalar(zr[hid + j]);
      const double gg = std::tanh(zr[2 * hid + j]);
      const double o = sigmoid_scalar(zr[3 * hid + j]);
      zr[j] = i;
      zr[hid + j] = f;
      zr[2 * hid + j] = gg;
      zr[3 * hid + j] = o;
      const double c_new = f * cv[r * hid + j] + i * gg;
      out[r * 2 * hid + hid + j] = c_new;
      out[r * 2 * hid + j] = o * std::tanh(c_new);
    }
  }

  const int ix = x.id, ih = prev.h.id, ic = prev.c.id, iwx = wx.id, iwh = wh.id, ib = b.id;
  Var fused = g.record(std::move(out), {x, prev.h, prev.c, wx, wh, b}, [=](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& outv = gr.value(self);
    const Tensor& cprev = gr.value(ic);
    const Tensor& act = *gates;
    Tensor dz = Tensor::matrix(batch, g4);
    Tensor* gc = gr.grad_sink(ic);
    for (std::size_t r = 0; r < batch; ++r) {
      const double* a = act.data() + r * g4;
      double* d = dz.data() + r * g4;
      for (std::size_t j = 0; j < hid; ++j) {
        const double i = a[j], f = a[hid + j], gg = a[2 * hid + j], o = a[3 * hid + j];
        const double c_new = outv[r * 2 * hid + hid + j];
        const double tc = std::tanh(c_new);
        const double dh = go[r * 2 * hid + j];
        const double dc = dh * o * (1.0 - tc * tc) + go[r * 2 * hid + hid + j];
        const double c_old = cprev[r * hid + j];
        d[j] = dc * gg * i * (1.0 - i);
        d[hid + j] = dc * c_old * f * (1.0 - f);
        d[2 * hid + j] = dc * i * (1.0 - gg * gg);
        d[3 * hid + j] = dh * tc * o * (1.0 - o);
        if (gc) (*gc)[r * hid + j] += dc * f;
      }
    }
    if (Tensor* gwx = gr.grad_sink(iwx)) gemm_tn(gr.value(ix).data(), dz.data(), gwx->data(), batch, in, g4);
    if (Tensor* gwh = gr.grad_sink(iwh)) gemm_tn(gr.value(ih).data(), dz.data(), gwh->data(), batch, hid, g4);
    if (Tensor* gb = gr.grad_sink(ib)) {
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < g4; ++j) (*gb)[j] += dz[r * g4 + j];
    }
    if (Tensor* gx = gr.grad_sink(ix)) gemm_nt(dz.data(), gr.value(iwx).data(), gx->data(), batch, g4, in);
    if (Tensor* gh = gr.grad_sink(ih)) gemm_nt(dz.data(), gr.value(iwh).data(), gh->data(), batch, g4, hid);
  });
  return LstmState{slice_cols(fused, 0, hid), slice_cols(fused, hid, 2 * hid)};
}

}  // namespace dcrn::ad
