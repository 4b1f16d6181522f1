#include "mstkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mstkd/error.hpp"

namespace mstkd::ad {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const char* op, Var a, Var b) {
  if (!a.value().same_shape(b.value())) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.value()) +
                         " vs " + shape_str(b.value()));
  }
}

void require_same_tape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
}

double clamp_cos(double c, double eps) {
  return std::clamp(c, -1.0 + eps, 1.0 - eps);
}

bool inside_clamp(double c, double eps) {
  return c > -1.0 + eps && c < 1.0 - eps;
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(*this); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_str(v));
  }
  return v[0];
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("tensor handle does not belong to this tape");
  }
  return nodes_[v.id_];
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

bool Tape::has_grad(Var v) const { return node(v).grad.has_value(); }

const Matrix& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grad) {
    throw ContractError("no gradient recorded for node " +
                        std::to_string(v.id_));
  }
  return *n.grad;
}

Var Tape::record(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](auto id) {
    return nodes_[id].requires_grad;
  });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& delta) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.grad) {
    n.grad = delta;
  } else {
    n.grad->add_scaled(delta);
  }
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        shape_str(root.value));
  }
  for (auto& n : nodes_) n.grad.reset();
  if (!root.requires_grad) return;
  nodes_[loss.id_].grad = Matrix::scalar(1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad || !n.backward) continue;
    n.backward(*this, *n.grad, n.value);
  }
}

Var matmul(Var a, Var b) {
  require_same_tape("matmul", a, b);
  Matrix out = multiply(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.requires_grad(a)) t.accumulate(a.id(), multiply_a_bt(g, b.value()));
    if (t.requires_grad(b)) t.accumulate(b.id(), multiply_at_b(a.value(), g));
  });
}

Var transpose(Var a) {
  return a.tape().record(mstkd::transpose(a.value()), {a.id()},
                         [a](Tape& t, const Matrix& g, const Matrix&) {
                           t.accumulate(a.id(), mstkd::transpose(g));
                         });
}

Var add(Var a, Var b) {
  require_same_tape("add", a, b);
  require_same_shape("add", a, b);
  Matrix out = a.value();
  out.add_scaled(b.value());
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [a, b](Tape& t, const Matrix& g, const Matrix&) {
                           t.accumulate(a.id(), g);
                           t.accumulate(b.id(), g);
                         });
}

Var sub(Var a, Var b) {
  require_same_tape("sub", a, b);
  require_same_shape("sub", a, b);
  Matrix out = a.value();
  out.add_scaled(b.value(), -1.0);
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [a, b](Tape& t, const Matrix& g, const Matrix&) {
                           t.accumulate(a.id(), g);
                           Matrix neg(g.rows(), g.cols());
                           neg.add_scaled(g, -1.0);
                           t.accumulate(b.id(), neg);
                         });
}

Var mul(Var a, Var b) {
  require_same_tape("mul", a, b);
  require_same_shape("mul", a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [a, b](Tape& t, const Matrix& g, const Matrix&) {
                           const Matrix& av = a.value();
                           const Matrix& bv = b.value();
                           if (t.requires_grad(a)) {
                             Matrix da(g.rows(), g.cols());
                             for (std::size_t i = 0; i < g.size(); ++i)
                               da[i] = g[i] * bv[i];
                             t.accumulate(a.id(), da);
                           }
                           if (t.requires_grad(b)) {
                             Matrix db(g.rows(), g.cols());
                             for (std::size_t i = 0; i < g.size(); ++i)
                               db[i] = g[i] * av[i];
                             t.accumulate(b.id(), db);
                           }
                         });
}

Var scale(Var a, double factor) {
  Matrix out(a.rows(), a.cols());
  out.add_scaled(a.value(), factor);
  return a.tape().record(std::move(out), {a.id()},
                         [a, factor](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix da(g.rows(), g.cols());
                           da.add_scaled(g, factor);
                           t.accumulate(a.id(), da);
                         });
}

Var add_row_bias(Var x, Var bias) {
  require_same_tape("add_row_bias", x, bias);
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row_bias: bias " + shape_str(bv) + " for input " +
                         shape_str(xv));
  }
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return x.tape().record(std::move(out), {x.id(), bias.id()},
                         [x, bias](Tape& t, const Matrix& g, const Matrix&) {
                           t.accumulate(x.id(), g);
                           if (t.requires_grad(bias)) {
                             Matrix db(1, g.cols());
                             for (std::size_t r = 0; r < g.rows(); ++r)
                               for (std::size_t c = 0; c < g.cols(); ++c)
                                 db[c] += g(r, c);
                             t.accumulate(bias.id(), db);
                           }
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  std::vector<Matrix> blocks;
  std::vector<std::size_t> ids;
  blocks.reserve(parts.size());
  for (const Var& p : parts) {
    require_same_tape("concat_cols", parts.front(), p);
    blocks.push_back(p.value());
    ids.push_back(p.id());
  }
  Matrix out = concat_columns(blocks);
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(
      std::move(out), std::move(ids), [inputs](Tape& t, const Matrix& g, const Matrix&) {
        std::size_t offset = 0;
        for (const Var& p : inputs) {
          const std::size_t w = p.cols();
          if (t.requires_grad(p)) {
            Matrix dp(g.rows(), w);
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < w; ++c) dp(r, c) = g(r, offset + c);
            t.accumulate(p.id(), dp);
          }
          offset += w;
        }
      });
}

Var detach(Var a) { return a.tape().constant(a.value()); }

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Matrix::scalar(s), {a.id()},
                         [a](Tape& t, const Matrix& g, const Matrix&) {
                           t.accumulate(a.id(), Matrix(a.rows(), a.cols(), g[0]));
                         });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ContractError("mean of empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Matrix::scalar(s / n), {a.id()},
                         [a, n](Tape& t, const Matrix& g, const Matrix&) {
                           t.accumulate(a.id(),
                                        Matrix(a.rows(), a.cols(), g[0] / n));
                         });
}

Var mean_squared_error(Var a, Var b) {
  require_same_tape("mean_squared_error", a, b);
  require_same_shape("mean_squared_error", a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const double n = static_cast<double>(av.size());
  if (n == 0) throw ContractError("mean_squared_error of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return a.tape().record(
      Matrix::scalar(s / n), {a.id(), b.id()}, [a, b, n](Tape& t, const Matrix& g, const Matrix&) {
        const Matrix& av = a.value();
        const Matrix& bv = b.value();
        Matrix da(av.rows(), av.cols());
        for (std::size_t i = 0; i < av.size(); ++i)
          da[i] = 2.0 * (av[i] - bv[i]) / n * g[0];
        t.accumulate(a.id(), da);
        if (t.requires_grad(b)) {
          Matrix db(av.rows(), av.cols());
          db.add_scaled(da, -1.0);
          t.accumulate(b.id(), db);
        }
      });
}

Var leaky_relu(Var x, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) {
    throw ContractError("leaky_relu slope must lie in [0, 1)");
  }
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = xv[i] >= 0.0 ? xv[i] : slope * xv[i];
  return x.tape().record(std::move(out), {x.id()},
                         [x, slope](Tape& t, const Matrix& g, const Matrix&) {
                           const Matrix& xv = x.value();
                           Matrix dx(g.rows(), g.cols());
                           for (std::size_t i = 0; i < g.size(); ++i)
                             dx[i] = xv[i] >= 0.0 ? g[i] : slope * g[i];
                           t.accumulate(x.id(), dx);
                         });
}

Var dropout(Var x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ContractError("dropout probability must lie in [0, 1)");
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  const Matrix& xv = x.value();
  const double keep_scale = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Matrix mask(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = uniform(rng) < p ? 0.0 : keep_scale;
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return x.tape().record(std::move(out), {x.id()},
                         [x, mask = std::move(mask)](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix dx(g.rows(), g.cols());
                           for (std::size_t i = 0; i < g.size(); ++i)
                             dx[i] = g[i] * mask[i];
                           t.accumulate(x.id(), dx);
                         });
}

Var l2_normalize(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  std::vector<double> norms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0.0;
    for (double v : xv.row(r)) s += v * v;
    const double norm = std::sqrt(s);
    if (!std::isfinite(norm)) {
      // Overflowed or poisoned rows stay non-finite so the loss reports
      // divergence instead of a degenerate embedding.
      norms[r] = std::numeric_limits<double>::quiet_NaN();
      for (auto& v : out.row(r)) v = norms[r];
      continue;
    }
    if (!(norm > kNormEpsilon)) {
      throw DegenerateEmbeddingError("l2_normalize: row " + std::to_string(r) +
                                     " has norm " + std::to_string(norm));
    }
    norms[r] = norm;
    auto src = xv.row(r);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / norm;
  }
  return x.tape().record(
      std::move(out), {x.id()},
      [x, norms = std::move(norms)](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix dx(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r);
          auto yr = y.row(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < gr.size(); ++c) dot += gr[c] * yr[c];
          auto dr = dx.row(r);
          for (std::size_t c = 0; c < gr.size(); ++c)
            dr[c] = (gr[c] - yr[c] * dot) / norms[r];
        }
        t.accumulate(x.id(), dx);
      });
}

Var arccos_clamped(Var x, double eps) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = std::acos(clamp_cos(xv[i], eps));
  return x.tape().record(std::move(out), {x.id()},
                         [x, eps](Tape& t, const Matrix& g, const Matrix&) {
                           const Matrix& xv = x.value();
                           Matrix dx(g.rows(), g.cols());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (inside_clamp(xv[i], eps))
                               dx[i] = -g[i] / std::sqrt(1.0 - xv[i] * xv[i]);
                           }
                           t.accumulate(x.id(), dx);
                         });
}

Var cos(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::cos(xv[i]);
  return x.tape().record(std::move(out), {x.id()}, [x](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& xv = x.value();
    Matrix dx(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = -g[i] * std::sin(xv[i]);
    t.accumulate(x.id(), dx);
  });
}

Var cos_margin(Var cosines, std::span<const std::uint32_t> labels,
               std::span<const double> margins, double eps) {
  const Matrix& cv = cosines.value();
  if (labels.size() != cv.rows() || margins.size() != cv.rows()) {
    throw DimensionError("cos_margin: expected " + std::to_string(cv.rows()) +
                         " labels and margins");
  }
  for (auto y : labels) {
    if (y >= cv.cols()) {
      throw ContractError("cos_margin: label " + std::to_string(y) +
                          " out of range for " + std::to_string(cv.cols()) +
                          " classes");
    }
  }
  Matrix out(cv.rows(), cv.cols());
  for (std::size_t i = 0; i < cv.size(); ++i) out[i] = clamp_cos(cv[i], eps);
  for (std::size_t r = 0; r < cv.rows(); ++r) {
    const double c = clamp_cos(cv(r, labels[r]), eps);
    out(r, labels[r]) = std::cos(std::acos(c) + margins[r]);
  }
  std::vector<std::uint32_t> ys(labels.begin(), labels.end());
  std::vector<double> ms(margins.begin(), margins.end());
  return cosines.tape().record(
      std::move(out), {cosines.id()},
      [cosines, eps, ys = std::move(ys), ms = std::move(ms)](Tape& t,
                                                            const Matrix& g, const Matrix&) {
        const Matrix& cv = cosines.value();
        Matrix dx(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i)
          if (inside_clamp(cv[i], eps)) dx[i] = g[i];
        for (std::size_t r = 0; r < cv.rows(); ++r) {
          const double c = cv(r, ys[r]);
          double d = 0.0;
          if (inside_clamp(c, eps)) {
            d = std::sin(std::acos(c) + ms[r]) / std::sqrt(1.0 - c * c);
          }
          dx(r, ys[r]) = g(r, ys[r]) * d;
        }
        t.accumulate(cosines.id(), dx);
      });
}

Var log_sum_exp_rows(Var x) {
  const Matrix& xv = x.value();
  if (xv.cols() == 0) throw ContractError("log_sum_exp_rows: zero columns");
  Matrix out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto row = xv.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    out[r] = m + std::log(s);
  }
  Matrix lse = out;
  return x.tape().record(std::move(out), {x.id()},
                         [x, lse = std::move(lse)](Tape& t, const Matrix& g, const Matrix&) {
                           const Matrix& xv = x.value();
                           Matrix dx(xv.rows(), xv.cols());
                           for (std::size_t r = 0; r < xv.rows(); ++r) {
                             auto xr = xv.row(r);
                             auto dr = dx.row(r);
                             for (std::size_t c = 0; c < xr.size(); ++c)
                               dr[c] = g[r] * std::exp(xr[c] - lse[r]);
                           }
                           t.accumulate(x.id(), dx);
                         });
}

Var pick(Var x, std::span<const std::uint32_t> labels) {
  const Matrix& xv = x.value();
  if (labels.size() != xv.rows()) {
    throw DimensionError("pick: expected " + std::to_string(xv.rows()) +
                         " labels, got " + std::to_string(labels.size()));
  }
  Matrix out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (labels[r] >= xv.cols()) {
      throw ContractError("label " + std::to_string(labels[r]) +
                          " out of range for " + std::to_string(xv.cols()) +
                          " classes");
    }
    out[r] = xv(r, labels[r]);
  }
  std::vector<std::uint32_t> ys(labels.begin(), labels.end());
  return x.tape().record(std::move(out), {x.id()},
                         [x, ys = std::move(ys)](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix dx(x.rows(), x.cols());
                           for (std::size_t r = 0; r < ys.size(); ++r)
                             dx(r, ys[r]) = g[r];
                           t.accumulate(x.id(), dx);
                         });
}

Var cross_entropy_rows(Var x, std::span<const std::uint32_t> labels) {
  const Matrix& xv = x.value();
  if (labels.size() != xv.rows()) {
    throw DimensionError("cross_entropy_rows: expected " + std::to_string(xv.rows()) +
                         " labels, got " + std::to_string(labels.size()));
  }
  Matrix out(xv.rows(), 1);
  // Per row: the max m, the pivot column (the label when it attains m) and
  // rest = sum over other columns of exp(x - m).
  std::vector<double> maxima(xv.rows()), rests(xv.rows());
  std::vector<std::size_t> pivots(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (labels[r] >= xv.cols()) {
      throw ContractError("label " + std::to_string(labels[r]) + " out of range for " +
                          std::to_string(xv.cols()) + " classes");
    }
    auto row = xv.row(r);
    const auto top = std::max_element(row.begin(), row.end());
    const double m = *top;
    const std::size_t pivot = row[labels[r]] == m ? labels[r]
                                                  : static_cast<std::size_t>(top - row.begin());
    double rest = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c)
      if (c != pivot) rest += std::exp(row[c] - m);
    out[r] = (m - row[labels[r]]) + std::log1p(rest);
    maxima[r] = m;
    rests[r] = rest;
    pivots[r] = pivot;
  }
  std::vector<std::uint32_t> ys(labels.begin(), labels.end());
  return x.tape().record(
      std::move(out), {x.id()},
      [x, ys = std::move(ys), maxima = std::move(maxima), rests = std::move(rests),
       pivots = std::move(pivots)](Tape& t, const Matrix& g, const Matrix&) {
        const Matrix& xv = x.value();
        Matrix dx(xv.rows(), xv.cols());
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const double denom = 1.0 + rests[r];
          for (std::size_t c = 0; c < xv.cols(); ++c) {
            const double p = c == pivots[r] ? 1.0 / denom : std::exp(xv(r, c) - maxima[r]) / denom;
            double d = p;
            if (c == ys[r]) d = c == pivots[r] ? -rests[r] / denom : p - 1.0;
            dx(r, c) = g[r] * d;
          }
        }
        t.accumulate(x.id(), dx);
      });
}

}  // namespace mstkd::ad
