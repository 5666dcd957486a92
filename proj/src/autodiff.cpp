#include "cmkt/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "cmkt/errors.hpp"
#include "cmkt/kernels.hpp"

namespace cmkt {

const Tensor2D& Var::value() const { return graph->value(id); }
const Tensor2D& Var::grad() const { return graph->grad(id); }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on a " + v.shape_string() + " node");
  return v[0];
}

Var Graph::constant(Tensor2D value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::leaf(Tensor2D value) {
  nodes_.push_back(Node{std::move(value), {}, true, nullptr});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::record(Tensor2D value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Graph::record(Tensor2D value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.graph != this) throw std::logic_error("Var from a different graph");
    needs = needs || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : nullptr});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor2D& Graph::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.rows() != n.value.rows())
    n.grad = Tensor2D(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::backward(Var out) {
  if (out.graph != this) throw std::logic_error("backward on a Var from another graph");
  if (nodes_[out.id].value.size() != 1) throw ShapeError("backward needs a scalar output");
  for (auto& n : nodes_) n.grad = Tensor2D();
  grad_buffer(out.id)[0] = 1.0;
  for (std::uint32_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

Var ParamBinder::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto p = params_->find(name);
  if (p == params_->end()) throw ConfigError("unknown parameter '" + name + "'");
  Var v = trainable_ ? graph_->leaf(p->second) : graph_->constant(p->second);
  bound_.emplace(name, v);
  return v;
}

GradTable ParamBinder::grads() const {
  GradTable out;
  for (const auto& [name, v] : bound_) {
    const Tensor2D& g = v.grad();
    out.emplace(name, g.empty() ? Tensor2D(v.rows(), v.cols()) : g);
  }
  return out;
}

namespace ad {

namespace {

void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

void accumulate(Tensor2D& dst, const Tensor2D& src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

template <typename F>
Var unary(Var x, F&& f, std::function<double(double x, double y)> dfdx) {
  const Tensor2D& xv = x.value();
  Tensor2D y(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const std::uint32_t xi = x.id;
  return x.graph->record(std::move(y), {x}, [xi, dfdx](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    const Tensor2D& xv = g.value(xi);
    const Tensor2D& yv = g.value(self);
    Tensor2D& dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up[i] * dfdx(xv[i], yv[i]);
  });
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Var matmul(Var a, Var b) {
  Tensor2D out;
  kernels::gemm_nn(a.value(), b.value(), out);
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    if (g.requires_grad(ai)) {
      Tensor2D t;
      kernels::gemm_nt(up, g.value(bi), t);
      accumulate(g.grad_buffer(ai), t);
    }
    if (g.requires_grad(bi)) kernels::gemm_tn_acc(g.value(ai), up, g.grad_buffer(bi));
  });
}

Var matmul_nt(Var a, Var b) {
  Tensor2D out;
  kernels::gemm_nt(a.value(), b.value(), out);
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    if (g.requires_grad(ai)) {
      Tensor2D t;
      kernels::gemm_nn(up, g.value(bi), t);
      accumulate(g.grad_buffer(ai), t);
    }
    if (g.requires_grad(bi)) kernels::gemm_tn_acc(up, g.value(ai), g.grad_buffer(bi));
  });
}

Var transpose(Var a) {
  const auto ai = a.id;
  return a.graph->record(a.value().transposed(), {a}, [ai](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    Tensor2D& da = g.grad_buffer(ai);
    for (std::size_t i = 0; i < da.rows(); ++i)
      for (std::size_t j = 0; j < da.cols(); ++j) da(i, j) += up(j, i);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor2D out = a.value();
  accumulate(out, b.value());
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    if (g.requires_grad(ai)) accumulate(g.grad_buffer(ai), up);
    if (g.requires_grad(bi)) accumulate(g.grad_buffer(bi), up);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor2D out = a.value();
  accumulate(out, b.value(), -1.0);
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    if (g.requires_grad(ai)) accumulate(g.grad_buffer(ai), up);
    if (g.requires_grad(bi)) accumulate(g.grad_buffer(bi), up, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor2D out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [ai, bi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    if (g.requires_grad(ai)) {
      Tensor2D& da = g.grad_buffer(ai);
      const Tensor2D& bv = g.value(bi);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += up[i] * bv[i];
    }
    if (g.requires_grad(bi)) {
      Tensor2D& db = g.grad_buffer(bi);
      const Tensor2D& av = g.value(ai);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += up[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor2D out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const auto ai = a.id;
  return a.graph->record(std::move(out), {a}, [ai, s](Graph& g, std::uint32_t self) {
    accumulate(g.grad_buffer(ai), g.grad(self), s);
  });
}

Var add_scalar(Var a, double s) {
  Tensor2D out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  const auto ai = a.id;
  return a.graph->record(std::move(out), {a}, [ai](Graph& g, std::uint32_t self) {
    accumulate(g.grad_buffer(ai), g.grad(self));
  });
}

Var add_row(Var x, Var bias) {
  const Tensor2D& xv = x.value();
  const Tensor2D& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw ShapeError("add_row: " + xv.shape_string() + " + bias " + bv.shape_string());
  Tensor2D out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  const auto xi = x.id, bi = bias.id;
  return x.graph->record(std::move(out), {x, bias}, [xi, bi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    if (g.requires_grad(xi)) accumulate(g.grad_buffer(xi), up);
    if (g.requires_grad(bi)) {
      Tensor2D& db = g.grad_buffer(bi);
      for (std::size_t r = 0; r < up.rows(); ++r)
        for (std::size_t c = 0; c < up.cols(); ++c) db[c] += up(r, c);
    }
  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var swish(Var x) {
  return unary(x, [](double v) { return v * sigmoid(v); },
               [](double v, double) {
                 const double s = sigmoid(v);
                 return s + v * s * (1.0 - s);
               });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor2D& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d)
    throw ShapeError("layer_norm: width " + std::to_string(d) + " with gain " + gain.value().shape_string() +
                     " and bias " + bias.value().shape_string());
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  Tensor2D xhat(n, d), out(n, d), rstd(n, 1);
  const Tensor2D& gv = gain.value();
  const Tensor2D& bv = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (row[c] - mean) * rs;
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const auto xi = x.id, gi = gain.id, bi = bias.id;
  return x.graph->record(
      std::move(out), {x, gain, bias},
      [xi, gi, bi, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, std::uint32_t self) {
        const Tensor2D& up = g.grad(self);
        const std::size_t n = up.rows(), d = up.cols();
        if (g.requires_grad(gi)) {
          Tensor2D& dg = g.grad_buffer(gi);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) dg[c] += up(r, c) * xhat(r, c);
        }
        if (g.requires_grad(bi)) {
          Tensor2D& db = g.grad_buffer(bi);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) db[c] += up(r, c);
        }
        if (g.requires_grad(xi)) {
          const Tensor2D& gv = g.value(gi);
          Tensor2D& dx = g.grad_buffer(xi);
          std::vector<double> dxhat(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dxhat[c] = up(r, c) * gv[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xhat(r, c);
            }
            mean_d /= static_cast<double>(d);
            mean_dx /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c)
              dx(r, c) += rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
          }
        }
      });
}

Var softmax_rows(Var x) {
  const Tensor2D& xv = x.value();
  Tensor2D y(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    auto out = y.row(r);
    const double m = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) s += out[c] = std::exp(in[c] - m);
    for (double& v : out) v /= s;
  }
  const auto xi = x.id;
  return x.graph->record(std::move(y), {x}, [xi](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    const Tensor2D& yv = g.value(self);
    Tensor2D& dx = g.grad_buffer(xi);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < yv.cols(); ++c) s += up(r, c) * yv(r, c);
      for (std::size_t c = 0; c < yv.cols(); ++c) dx(r, c) += yv(r, c) * (up(r, c) - s);
    }
  });
}

namespace {

// Log-softmax along rows (by_rows) or columns of x.
Tensor2D log_softmax_impl(const Tensor2D& xv, bool by_rows) {
  Tensor2D y(xv.rows(), xv.cols());
  const std::size_t outer = by_rows ? xv.rows() : xv.cols();
  const std::size_t inner = by_rows ? xv.cols() : xv.rows();
  auto at = [&](const Tensor2D& t, std::size_t o, std::size_t i) { return by_rows ? t(o, i) : t(i, o); };
  for (std::size_t o = 0; o < outer; ++o) {
    double m = -INFINITY;
    for (std::size_t i = 0; i < inner; ++i) m = std::max(m, at(xv, o, i));
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += std::exp(at(xv, o, i) - m);
    const double lse = m + std::log(s);
    for (std::size_t i = 0; i < inner; ++i) (by_rows ? y(o, i) : y(i, o)) = at(xv, o, i) - lse;
  }
  return y;
}

Var log_softmax_dir(Var x, bool by_rows) {
  const auto xi = x.id;
  return x.graph->record(log_softmax_impl(x.value(), by_rows), {x}, [xi, by_rows](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    const Tensor2D& yv = g.value(self);
    Tensor2D& dx = g.grad_buffer(xi);
    const std::size_t outer = by_rows ? yv.rows() : yv.cols();
    const std::size_t inner = by_rows ? yv.cols() : yv.rows();
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) s += by_rows ? up(o, i) : up(i, o);
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t r = by_rows ? o : i, c = by_rows ? i : o;
        dx(r, c) += up(r, c) - std::exp(yv(r, c)) * s;
      }
    }
  });
}

}  // namespace

Var log_softmax_rows(Var x) { return log_softmax_dir(x, true); }
Var log_softmax_cols(Var x) { return log_softmax_dir(x, false); }

Var cosine_rows(Var a, Var b, double eps) {
  require_same_shape(a.value(), b.value(), "cosine_rows");
  const Tensor2D& av = a.value();
  const Tensor2D& bv = b.value();
  const std::size_t n = av.rows();
  Tensor2D out(n, 1), na(n, 1), nb(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t c = 0; c < av.cols(); ++c) {
      s += av(r, c) * bv(r, c);
      aa += av(r, c) * av(r, c);
      bb += bv(r, c) * bv(r, c);
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out[r] = s / ((na[r] + eps) * (nb[r] + eps));
  }
  const auto ai = a.id, bi = b.id;
  return a.graph->record(
      std::move(out), {a, b},
      [ai, bi, eps, na = std::move(na), nb = std::move(nb)](Graph& g, std::uint32_t self) {
        const Tensor2D& up = g.grad(self);
        const Tensor2D& cv = g.value(self);
        const Tensor2D& av = g.value(ai);
        const Tensor2D& bv = g.value(bi);
        // d cos / d a = b / D - cos * a / (|a| (|a| + eps)), D = (|a|+eps)(|b|+eps).
        auto side = [&](std::uint32_t id, const Tensor2D& self_v, const Tensor2D& other_v, const Tensor2D& ns,
                        const Tensor2D& no) {
          if (!g.requires_grad(id)) return;
          Tensor2D& d = g.grad_buffer(id);
          for (std::size_t r = 0; r < d.rows(); ++r) {
            const double denom = (ns[r] + eps) * (no[r] + eps);
            const double k = ns[r] > 0.0 ? cv[r] / (ns[r] * (ns[r] + eps)) : 0.0;
            for (std::size_t c = 0; c < d.cols(); ++c)
              d(r, c) += up[r] * (other_v(r, c) / denom - k * self_v(r, c));
          }
        };
        side(ai, av, bv, na, nb);
        side(bi, bv, av, nb, na);
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor2D& xv = x.value();
  if (begin + count > xv.rows()) throw ShapeError("slice_rows out of range on " + xv.shape_string());
  Tensor2D out(count, xv.cols());
  std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * xv.cols()),
            xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * xv.cols()), out.data().begin());
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, begin](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    Tensor2D& dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < up.size(); ++i) dx[begin * dx.cols() + i] += up[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor2D& xv = x.value();
  if (begin + count > xv.cols()) throw ShapeError("slice_cols out of range on " + xv.shape_string());
  Tensor2D out(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, begin + c);
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, begin](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    Tensor2D& dx = g.grad_buffer(xi);
    for (std::size_t r = 0; r < up.rows(); ++r)
      for (std::size_t c = 0; c < up.cols(); ++c) dx(r, begin + c) += up(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    offsets.push_back(total);
    total += p.cols();
  }
  Tensor2D out(n, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor2D& pv = parts[k].value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offsets[k] + c) = pv(r, c);
  }
  return parts[0].graph->record(std::move(out), parts, [ids, offsets](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.requires_grad(ids[k])) continue;
      Tensor2D& d = g.grad_buffer(ids[k]);
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) += up(r, offsets[k] + c);
    }
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor2D& tv = table.value();
  Tensor2D out(ids.size(), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows())
      throw ShapeError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const auto ti = table.id;
  std::vector<int> idv(ids.begin(), ids.end());
  return table.graph->record(std::move(out), {table}, [ti, idv = std::move(idv)](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    Tensor2D& dt = g.grad_buffer(ti);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t c = 0; c < up.cols(); ++c) dt(static_cast<std::size_t>(idv[r]), c) += up(r, c);
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const auto xi = x.id;
  return x.graph->record(Tensor2D(1, 1, s), {x}, [xi](Graph& g, std::uint32_t self) {
    const double up = g.grad(self)[0];
    Tensor2D& dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up;
  });
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var entropy_sum(Var p, double eps) {
  const Tensor2D& pv = p.value();
  double s = 0.0;
  for (double v : pv.data()) s += v * std::log(std::max(v, eps));
  const auto pi = p.id;
  return p.graph->record(Tensor2D(1, 1, s), {p}, [pi, eps](Graph& g, std::uint32_t self) {
    const double up = g.grad(self)[0];
    const Tensor2D& pv = g.value(pi);
    Tensor2D& dp = g.grad_buffer(pi);
    for (std::size_t i = 0; i < dp.size(); ++i)
      dp[i] += up * (pv[i] > eps ? std::log(pv[i]) + 1.0 : std::log(eps));
  });
}

Var strided_windows(Var x, std::size_t kernel, std::size_t stride) {
  const Tensor2D& xv = x.value();
  if (kernel == 0 || stride == 0) throw ShapeError("strided_windows: kernel and stride must be positive");
  if (xv.rows() < kernel)
    throw ShapeError("strided_windows: " + std::to_string(xv.rows()) + " rows shorter than kernel " +
                     std::to_string(kernel));
  const std::size_t len = (xv.rows() - kernel) / stride + 1;
  const std::size_t c = xv.cols();
  Tensor2D out(len, kernel * c);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t k = 0; k < kernel; ++k)
      for (std::size_t j = 0; j < c; ++j) out(t, k * c + j) = xv(t * stride + k, j);
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [xi, kernel, stride](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    Tensor2D& dx = g.grad_buffer(xi);
    const std::size_t c = dx.cols();
    for (std::size_t t = 0; t < up.rows(); ++t)
      for (std::size_t k = 0; k < kernel; ++k)
        for (std::size_t j = 0; j < c; ++j) dx(t * stride + k, j) += up(t, k * c + j);
  });
}

Var depthwise_conv_same(Var x, Var weight, Var bias) {
  const Tensor2D& xv = x.value();
  const Tensor2D& wv = weight.value();
  const Tensor2D& bv = bias.value();
  const std::size_t n = xv.rows(), c = xv.cols(), k = wv.rows();
  if (wv.cols() != c || bv.size() != c || k % 2 == 0)
    throw ShapeError("depthwise_conv_same: input " + xv.shape_string() + ", weight " + wv.shape_string() +
                     ", bias " + bv.shape_string() + " (kernel must be odd)");
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor2D out(n, c);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = bv[ch];
      for (std::size_t j = 0; j < k; ++j) {
        const auto src = static_cast<std::ptrdiff_t>(t + j) - pad;
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(n)) s += wv(j, ch) * xv(static_cast<std::size_t>(src), ch);
      }
      out(t, ch) = s;
    }
  const auto xi = x.id, wi = weight.id, bi = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias}, [xi, wi, bi, pad](Graph& g, std::uint32_t self) {
    const Tensor2D& up = g.grad(self);
    const Tensor2D& xv = g.value(xi);
    const Tensor2D& wv = g.value(wi);
    const std::size_t n = up.rows(), c = up.cols(), k = wv.rows();
    const bool gx = g.requires_grad(xi), gw = g.requires_grad(wi), gb = g.requires_grad(bi);
    Tensor2D* dx = gx ? &g.grad_buffer(xi) : nullptr;
    Tensor2D* dw = gw ? &g.grad_buffer(wi) : nullptr;
    Tensor2D* db = gb ? &g.grad_buffer(bi) : nullptr;
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double u = up(t, ch);
        if (db) (*db)[ch] += u;
        for (std::size_t j = 0; j < k; ++j) {
          const auto src = static_cast<std::ptrdiff_t>(t + j) - pad;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
          const auto s = static_cast<std::size_t>(src);
          if (dw) (*dw)(j, ch) += u * xv(s, ch);
          if (dx) (*dx)(s, ch) += u * wv(j, ch);
        }
      }
  });
}

}  // namespace ad

}  // namespace cmkt
