#include "tshamo/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace tshamo::diffcore {

namespace {

Tape& tape_of(std::initializer_list<const Var*> vars, const char* primitive) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) throw std::invalid_argument(std::string(primitive) + ": unbound operand");
    if (tape && v->tape() != tape) throw std::invalid_argument(std::string(primitive) + ": operands on different tapes");
    tape = v->tape();
  }
  return *tape;
}

[[noreturn]] void shape_fail(const char* primitive, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(primitive) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

[[noreturn]] void shape_fail(const char* primitive, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(primitive) + ": " + why + " for shape " + to_string(a));
}

int normalize_axis(int axis, int rank, const char* primitive, const Shape& shape) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_fail(primitive, shape, "axis out of range");
  return axis;
}

Index product(const Shape& s, std::size_t begin, std::size_t end) {
  Index p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

bool is_scalar(const Tensor& t) { return t.size() == 1 && t.rank() <= 1; }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b}, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ia = a.id(), ib = b.id();

  if (bv.rank() == 2 && av.rank() >= 2) {
    const Index k = bv.dim(0), n = bv.dim(1);
    if (av.shape().back() != k) shape_fail("matmul", av.shape(), bv.shape());
    const Index rows = av.size() / k;
    Shape out_shape = av.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    out.matrix(rows, n).noalias() = av.matrix(rows, k) * bv.matrix();
    return tape.record("matmul", std::move(out), rg, [ia, ib, rows, k, n](Tape& t, const Tensor& g) {
      auto gm = g.matrix(rows, n);
      if (t.requires_grad(ia)) t.grad(ia).matrix(rows, k).noalias() += gm * t.value(ib).matrix().transpose();
      if (t.requires_grad(ib)) t.grad(ib).matrix().noalias() += t.value(ia).matrix(rows, k).transpose() * gm;
    });
  }
  if (av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(1)) {
    const Index batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor out(Shape{batch, m, n});
    for (Index i = 0; i < batch; ++i) {
      MatrixMap(out.data().data() + i * m * n, m, n).noalias() =
          ConstMatrixMap(av.data().data() + i * m * k, m, k) * ConstMatrixMap(bv.data().data() + i * k * n, k, n);
    }
    return tape.record("matmul", std::move(out), rg, [ia, ib, batch, m, k, n](Tape& t, const Tensor& g) {
      const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
      const double* A = t.value(ia).data().data();
      const double* B = t.value(ib).data().data();
      double* dA = ga ? t.grad(ia).data().data() : nullptr;
      double* dB = gb ? t.grad(ib).data().data() : nullptr;
      for (Index i = 0; i < batch; ++i) {
        ConstMatrixMap gm(g.data().data() + i * m * n, m, n);
        if (ga) MatrixMap(dA + i * m * k, m, k).noalias() += gm * ConstMatrixMap(B + i * k * n, k, n).transpose();
        if (gb) MatrixMap(dB + i * k * n, k, n).noalias() += ConstMatrixMap(A + i * m * k, m, k).transpose() * gm;
      }
    });
  }
  shape_fail("matmul", av.shape(), bv.shape());
}

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b}, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ia = a.id(), ib = b.id();

  if (av.shape() == bv.shape()) {
    Tensor out(av.shape(), av.data() + bv.data());
    return tape.record("add", std::move(out), rg, [ia, ib](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) t.grad(ia).data() += g.data();
      if (t.requires_grad(ib)) t.grad(ib).data() += g.data();
    });
  }
  if (bv.rank() == 1 && av.rank() >= 1 && av.shape().back() == bv.dim(0)) {
    Tensor out = av;
    out.matrix().rowwise() += bv.data().transpose();
    return tape.record("add", std::move(out), rg, [ia, ib](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) t.grad(ia).data() += g.data();
      if (t.requires_grad(ib)) t.grad(ib).data() += g.matrix().colwise().sum().transpose();
    });
  }
  if (is_scalar(bv)) {
    Tensor out = av;
    out.data().array() += bv[0];
    return tape.record("add", std::move(out), rg, [ia, ib](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) t.grad(ia).data() += g.data();
      if (t.requires_grad(ib)) t.grad(ib)[0] += g.data().sum();
    });
  }
  shape_fail("add", av.shape(), bv.shape());
}

Var subtract(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b}, "subtract");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_fail("subtract", av.shape(), bv.shape());
  const std::size_t ia = a.id(), ib = b.id();
  Tensor out(av.shape(), av.data() - bv.data());
  return tape.record("subtract", std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape& t, const Tensor& g) {
                       if (t.requires_grad(ia)) t.grad(ia).data() += g.data();
                       if (t.requires_grad(ib)) t.grad(ib).data() -= g.data();
                     });
}

Var multiply(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b}, "multiply");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ia = a.id(), ib = b.id();
  if (av.shape() == bv.shape()) {
    Tensor out(av.shape(), av.data().cwiseProduct(bv.data()));
    return tape.record("multiply", std::move(out), rg, [ia, ib](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) t.grad(ia).data() += g.data().cwiseProduct(t.value(ib).data());
      if (t.requires_grad(ib)) t.grad(ib).data() += g.data().cwiseProduct(t.value(ia).data());
    });
  }
  if (is_scalar(bv)) {
    Tensor out(av.shape(), av.data() * bv[0]);
    return tape.record("multiply", std::move(out), rg, [ia, ib](Tape& t, const Tensor& g) {
      if (t.requires_grad(ia)) t.grad(ia).data() += g.data() * t.value(ib)[0];
      if (t.requires_grad(ib)) t.grad(ib)[0] += g.data().dot(t.value(ia).data());
    });
  }
  shape_fail("multiply", av.shape(), bv.shape());
}

Var scale(const Var& a, double factor) {
  Tape& tape = tape_of({&a}, "scale");
  const std::size_t ia = a.id();
  Tensor out(a.shape(), a.value().data() * factor);
  return tape.record("scale", std::move(out), a.requires_grad(), [ia, factor](Tape& t, const Tensor& g) {
    t.grad(ia).data() += factor * g.data();
  });
}

Var add_scalar(const Var& a, double offset) {
  Tape& tape = tape_of({&a}, "add_scalar");
  const std::size_t ia = a.id();
  Tensor out = a.value();
  out.data().array() += offset;
  return tape.record("add_scalar", std::move(out), a.requires_grad(),
                     [ia](Tape& t, const Tensor& g) { t.grad(ia).data() += g.data(); });
}

Var sum(const Var& a) {
  Tape& tape = tape_of({&a}, "sum");
  const std::size_t ia = a.id();
  return tape.record("sum", Tensor::scalar(a.value().data().sum()), a.requires_grad(),
                     [ia](Tape& t, const Tensor& g) { t.grad(ia).data().array() += g[0]; });
}

Var mean(const Var& a) {
  Tape& tape = tape_of({&a}, "mean");
  const std::size_t ia = a.id();
  const double n = static_cast<double>(a.value().size());
  return tape.record("mean", Tensor::scalar(a.value().data().sum() / n), a.requires_grad(),
                     [ia, n](Tape& t, const Tensor& g) { t.grad(ia).data().array() += g[0] / n; });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Tape* tape = parts.front().tape();
  for (const Var& p : parts) {
    if (p.tape() != tape || !tape) throw std::invalid_argument("concat: operands on different tapes");
  }
  const Shape& first = parts.front().shape();
  const int rank = static_cast<int>(first.size());
  axis = normalize_axis(axis, rank, "concat", first);
  const auto ax = static_cast<std::size_t>(axis);
  Shape out_shape = first;
  out_shape[ax] = 0;
  bool rg = false;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank) shape_fail("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != first[d]) shape_fail("concat", first, s);
    }
    out_shape[ax] += s[ax];
    rg = rg || p.requires_grad();
  }
  const Index outer = product(first, 0, ax);
  const Index inner = product(first, ax + 1, first.size());
  const Index out_chunk = out_shape[ax] * inner;
  Tensor out(out_shape);
  std::vector<std::size_t> ids;
  std::vector<Index> chunks, offsets;
  Index offset = 0;
  for (const Var& p : parts) {
    const Index chunk = p.shape()[ax] * inner;
    const double* src = p.value().data().data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.data().data() + o * out_chunk + offset);
    }
    ids.push_back(p.id());
    chunks.push_back(chunk);
    offsets.push_back(offset);
    offset += chunk;
  }
  return tape->record("concat", std::move(out), rg,
                      [ids, chunks, offsets, outer, out_chunk](Tape& t, const Tensor& g) {
                        for (std::size_t i = 0; i < ids.size(); ++i) {
                          if (!t.requires_grad(ids[i])) continue;
                          double* dst = t.grad(ids[i]).data().data();
                          for (Index o = 0; o < outer; ++o) {
                            Eigen::Map<Eigen::VectorXd>(dst + o * chunks[i], chunks[i]) +=
                                Eigen::Map<const Eigen::VectorXd>(g.data().data() + o * out_chunk + offsets[i],
                                                                  chunks[i]);
                          }
                        }
                      });
}

Var slice(const Var& a, int axis, Index begin, Index end) {
  Tape& tape = tape_of({&a}, "slice");
  const Shape& s = a.shape();
  axis = normalize_axis(axis, static_cast<int>(s.size()), "slice", s);
  const auto ax = static_cast<std::size_t>(axis);
  if (begin < 0 || end > s[ax] || begin >= end) {
    shape_fail("slice", s, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid");
  }
  Shape out_shape = s;
  out_shape[ax] = end - begin;
  const Index outer = product(s, 0, ax);
  const Index inner = product(s, ax + 1, s.size());
  const Index in_chunk = s[ax] * inner;
  const Index out_chunk = out_shape[ax] * inner;
  const Index off = begin * inner;
  Tensor out(out_shape);
  const double* src = a.value().data().data();
  for (Index o = 0; o < outer; ++o) std::copy_n(src + o * in_chunk + off, out_chunk, out.data().data() + o * out_chunk);
  const std::size_t ia = a.id();
  return tape.record("slice", std::move(out), a.requires_grad(),
                     [ia, outer, in_chunk, out_chunk, off](Tape& t, const Tensor& g) {
                       double* dst = t.grad(ia).data().data();
                       for (Index o = 0; o < outer; ++o) {
                         Eigen::Map<Eigen::VectorXd>(dst + o * in_chunk + off, out_chunk) +=
                             Eigen::Map<const Eigen::VectorXd>(g.data().data() + o * out_chunk, out_chunk);
                       }
                     });
}

Var reshape(const Var& a, Shape shape) {
  Tape& tape = tape_of({&a}, "reshape");
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record("reshape", std::move(out), a.requires_grad(),
                     [ia](Tape& t, const Tensor& g) { t.grad(ia).data() += g.data(); });
}

Var transpose(const Var& a) {
  Tape& tape = tape_of({&a}, "transpose");
  const Shape& s = a.shape();
  if (s.size() < 2) shape_fail("transpose", s, "rank < 2");
  const Index m = s[s.size() - 2], n = s.back();
  const Index batch = a.value().size() / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor out(out_shape);
  const double* src = a.value().data().data();
  for (Index i = 0; i < batch; ++i) {
    MatrixMap(out.data().data() + i * m * n, n, m) = ConstMatrixMap(src + i * m * n, m, n).transpose();
  }
  const std::size_t ia = a.id();
  return tape.record("transpose", std::move(out), a.requires_grad(), [ia, batch, m, n](Tape& t, const Tensor& g) {
    double* dst = t.grad(ia).data().data();
    for (Index i = 0; i < batch; ++i) {
      MatrixMap(dst + i * m * n, m, n) += ConstMatrixMap(g.data().data() + i * m * n, n, m).transpose();
    }
  });
}

namespace {

// Maps every output offset of a permutation to its input offset.
std::vector<Index> permutation_index(const Shape& in, const std::vector<int>& order) {
  const std::size_t r = in.size();
  std::vector<Index> in_strides(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * in[d + 1];
  Shape out(r);
  std::vector<Index> stride_of_out(r);
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = in[static_cast<std::size_t>(order[d])];
    stride_of_out[d] = in_strides[static_cast<std::size_t>(order[d])];
  }
  const Index n = num_elements(in);
  std::vector<Index> map(static_cast<std::size_t>(n));
  std::vector<Index> counter(r, 0);
  Index src = 0;
  for (Index i = 0; i < n; ++i) {
    map[static_cast<std::size_t>(i)] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      src += stride_of_out[d];
      if (counter[d] < out[d]) break;
      src -= stride_of_out[d] * out[d];
      counter[d] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(const Var& a, const std::vector<int>& order) {
  Tape& tape = tape_of({&a}, "permute");
  const Shape& s = a.shape();
  if (order.size() != s.size()) shape_fail("permute", s, "order length mismatch");
  std::vector<bool> seen(s.size(), false);
  for (int o : order) {
    if (o < 0 || o >= static_cast<int>(s.size()) || seen[static_cast<std::size_t>(o)]) {
      shape_fail("permute", s, "order is not a permutation");
    }
    seen[static_cast<std::size_t>(o)] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) out_shape[d] = s[static_cast<std::size_t>(order[d])];
  auto map = std::make_shared<std::vector<Index>>(permutation_index(s, order));
  Tensor out(out_shape);
  const double* src = a.value().data().data();
  double* dst = out.data().data();
  for (std::size_t i = 0; i < map->size(); ++i) dst[i] = src[(*map)[i]];
  const std::size_t ia = a.id();
  return tape.record("permute", std::move(out), a.requires_grad(), [ia, map](Tape& t, const Tensor& g) {
    double* d = t.grad(ia).data().data();
    const double* gs = g.data().data();
    for (std::size_t i = 0; i < map->size(); ++i) d[(*map)[i]] += gs[i];
  });
}

Var repeat(const Var& a, int axis, Index count) {
  Tape& tape = tape_of({&a}, "repeat");
  const Shape& s = a.shape();
  axis = normalize_axis(axis, static_cast<int>(s.size()), "repeat", s);
  const auto ax = static_cast<std::size_t>(axis);
  if (s[ax] != 1) shape_fail("repeat", s, "repeated axis must have size 1");
  if (count < 1) shape_fail("repeat", s, "count must be positive");
  Shape out_shape = s;
  out_shape[ax] = count;
  const Index outer = product(s, 0, ax);
  const Index inner = product(s, ax + 1, s.size());
  Tensor out(out_shape);
  const double* src = a.value().data().data();
  double* dst = out.data().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index r = 0; r < count; ++r) std::copy_n(src + o * inner, inner, dst + (o * count + r) * inner);
  }
  const std::size_t ia = a.id();
  return tape.record("repeat", std::move(out), a.requires_grad(), [ia, outer, inner, count](Tape& t, const Tensor& g) {
    double* d = t.grad(ia).data().data();
    for (Index o = 0; o < outer; ++o) {
      Eigen::Map<Eigen::VectorXd> acc(d + o * inner, inner);
      for (Index r = 0; r < count; ++r) {
        acc += Eigen::Map<const Eigen::VectorXd>(g.data().data() + (o * count + r) * inner, inner);
      }
    }
  });
}

Var gelu(const Var& a) {
  Tape& tape = tape_of({&a}, "gelu");
  const Eigen::VectorXd& x = a.value().data();
  Tensor out(a.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  const std::size_t ia = a.id();
  return tape.record("gelu", std::move(out), a.requires_grad(), [ia](Tape& t, const Tensor& g) {
    const Eigen::VectorXd& xv = t.value(ia).data();
    Eigen::VectorXd& d = t.grad(ia).data();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (Index i = 0; i < xv.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
      d[i] += g[i] * (cdf + xv[i] * pdf);
    }
  });
}

namespace {

Tensor softmax_rows(const Tensor& x, const std::vector<Index>* key_lengths, Index rows_per_group) {
  Tensor out(x.shape());
  auto xm = x.matrix();
  auto om = out.matrix();
  const Index cols = xm.cols();
  for (Index r = 0; r < xm.rows(); ++r) {
    const Index valid = key_lengths ? (*key_lengths)[static_cast<std::size_t>(r / rows_per_group)] : cols;
    const double mx = xm.row(r).head(valid).maxCoeff();
    om.row(r).head(valid) = (xm.row(r).head(valid).array() - mx).exp().matrix();
    om.row(r).head(valid) /= om.row(r).head(valid).sum();
  }
  return out;
}

void softmax_backward(Tape& t, std::size_t ia, std::size_t iout, const Tensor& g) {
  auto y = t.value(iout).matrix();
  auto gm = g.matrix();
  auto d = t.grad(ia).matrix();
  const Eigen::VectorXd dots = (gm.cwiseProduct(y)).rowwise().sum();
  d.array() += y.array() * (gm.colwise() - dots).array();
}

}  // namespace

Var softmax(const Var& a) {
  Tape& tape = tape_of({&a}, "softmax");
  if (a.value().rank() < 1) shape_fail("softmax", a.shape(), "rank < 1");
  Tensor out = softmax_rows(a.value(), nullptr, 1);
  const std::size_t ia = a.id();
  const std::size_t iout = tape.size();
  return tape.record("softmax", std::move(out), a.requires_grad(),
                     [ia, iout](Tape& t, const Tensor& g) { softmax_backward(t, ia, iout, g); });
}

Var masked_softmax(const Var& a, const std::vector<Index>& key_lengths) {
  Tape& tape = tape_of({&a}, "masked_softmax");
  const Shape& s = a.shape();
  if (s.size() != 3) shape_fail("masked_softmax", s, "expected rank 3 [G, Tq, Tk]");
  if (static_cast<Index>(key_lengths.size()) != s[0]) shape_fail("masked_softmax", s, "key length count mismatch");
  for (Index len : key_lengths) {
    if (len < 1 || len > s[2]) shape_fail("masked_softmax", s, "key length " + std::to_string(len) + " out of range");
  }
  Tensor out = softmax_rows(a.value(), &key_lengths, s[1]);
  const std::size_t ia = a.id();
  const std::size_t iout = tape.size();
  return tape.record("masked_softmax", std::move(out), a.requires_grad(),
                     [ia, iout](Tape& t, const Tensor& g) { softmax_backward(t, ia, iout, g); });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tape& tape = tape_of({&x, &gamma, &beta}, "layer_norm");
  const Tensor& xv = x.value();
  if (xv.rank() < 1) shape_fail("layer_norm", xv.shape(), "rank < 1");
  const Index d = xv.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) shape_fail("layer_norm", xv.shape(), gamma.shape());
  const Index rows = xv.size() / d;
  auto xm = xv.matrix(rows, d);
  auto xhat = std::make_shared<RowMatrix>(rows, d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    (*inv_std)[r] = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xm.row(r).array() - mu) * (*inv_std)[r];
  }
  Tensor out(xv.shape());
  out.matrix(rows, d) = (xhat->array().rowwise() * gamma.value().data().transpose().array()).rowwise() +
                        beta.value().data().transpose().array();
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return tape.record("layer_norm", std::move(out), rg, [ix, ig, ib, rows, d, xhat, inv_std](Tape& t, const Tensor& g) {
    auto gm = g.matrix(rows, d);
    if (t.requires_grad(ig)) t.grad(ig).data() += gm.cwiseProduct(*xhat).colwise().sum().transpose();
    if (t.requires_grad(ib)) t.grad(ib).data() += gm.colwise().sum().transpose();
    if (t.requires_grad(ix)) {
      const Eigen::RowVectorXd gam = t.value(ig).data().transpose();
      RowMatrix dxhat = gm.array().rowwise() * gam.array();
      const Eigen::VectorXd mean_d = dxhat.rowwise().mean();
      const Eigen::VectorXd mean_dx = dxhat.cwiseProduct(*xhat).rowwise().mean();
      RowMatrix dx = (dxhat.colwise() - mean_d).array() - (xhat->array().colwise() * mean_dx.array());
      dx.array().colwise() *= inv_std->array();
      t.grad(ix).matrix(rows, d) += dx;
    }
  });
}

Var embedding(const Var& table, const std::vector<Index>& rows) {
  Tape& tape = tape_of({&table}, "embedding");
  const Tensor& tv = table.value();
  if (tv.rank() != 2) shape_fail("embedding", tv.shape(), "table must be rank 2");
  if (rows.empty()) shape_fail("embedding", tv.shape(), "no rows requested");
  const Index d = tv.dim(1);
  Tensor out(Shape{static_cast<Index>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.dim(0)) {
      shape_fail("embedding", tv.shape(), "row " + std::to_string(rows[i]) + " out of range");
    }
    out.matrix().row(static_cast<Index>(i)) = tv.matrix().row(rows[i]);
  }
  const std::size_t it = table.id();
  return tape.record("embedding", std::move(out), table.requires_grad(), [it, rows](Tape& t, const Tensor& g) {
    auto d = t.grad(it).matrix();
    for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += g.matrix().row(static_cast<Index>(i));
  });
}

Var squared_error(const Var& pred, const Var& target, const Tensor& weights) {
  Tape& tape = tape_of({&pred, &target}, "squared_error");
  const Tensor& p = pred.value();
  const Tensor& q = target.value();
  if (p.shape() != q.shape()) shape_fail("squared_error", p.shape(), q.shape());
  if (weights.shape() != p.shape()) shape_fail("squared_error", p.shape(), weights.shape());
  const double total = weights.data().sum();
  if (!(total > 0.0)) throw std::invalid_argument("squared_error: empty mask");
  const Eigen::VectorXd diff = p.data() - q.data();
  const double loss = weights.data().dot(diff.cwiseAbs2()) / total;
  const std::size_t ip = pred.id(), iq = target.id();
  Eigen::VectorXd coef = weights.data() * (2.0 / total);
  return tape.record("squared_error", Tensor::scalar(loss), pred.requires_grad() || target.requires_grad(),
                     [ip, iq, coef = std::move(coef)](Tape& t, const Tensor& g) {
                       const Eigen::VectorXd d =
                           g[0] * coef.cwiseProduct(t.value(ip).data() - t.value(iq).data());
                       if (t.requires_grad(ip)) t.grad(ip).data() += d;
                       if (t.requires_grad(iq)) t.grad(iq).data() -= d;
                     });
}

Var cross_entropy(const Var& logits, const std::vector<Index>& labels) {
  Tape& tape = tape_of({&logits}, "cross_entropy");
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != static_cast<Index>(labels.size())) {
    shape_fail("cross_entropy", lv.shape(), "expected [B, C] with B labels");
  }
  const Index batch = lv.dim(0), classes = lv.dim(1);
  auto probs = std::make_shared<RowMatrix>(batch, classes);
  double loss = 0.0;
  for (Index r = 0; r < batch; ++r) {
    const Index y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) shape_fail("cross_entropy", lv.shape(), "label out of range");
    const double mx = lv.matrix().row(r).maxCoeff();
    probs->row(r) = (lv.matrix().row(r).array() - mx).exp().matrix();
    const double z = probs->row(r).sum();
    probs->row(r) /= z;
    loss -= lv.matrix()(r, y) - mx - std::log(z);
  }
  loss /= static_cast<double>(batch);
  const std::size_t il = logits.id();
  return tape.record("cross_entropy", Tensor::scalar(loss), logits.requires_grad(),
                     [il, probs, labels, batch](Tape& t, const Tensor& g) {
                       RowMatrix d = *probs;
                       for (Index r = 0; r < batch; ++r) d(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
                       t.grad(il).matrix() += d * (g[0] / static_cast<double>(batch));
                     });
}

Var conv1d(const Var& x, const Var& w) {
  Tape& tape = tape_of({&x, &w}, "conv1d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 2) shape_fail("conv1d", xv.shape(), wv.shape());
  const Index batch = xv.dim(0), len = xv.dim(1), cin = xv.dim(2);
  if (wv.dim(0) % cin != 0 || (wv.dim(0) / cin) % 2 == 0) shape_fail("conv1d", xv.shape(), wv.shape());
  const Index taps = wv.dim(0) / cin, cout = wv.dim(1), pad = taps / 2;
  auto cols = std::make_shared<RowMatrix>(RowMatrix::Zero(batch * len, taps * cin));
  const double* src = xv.data().data();
  for (Index b = 0; b < batch; ++b) {
    for (Index l = 0; l < len; ++l) {
      for (Index k = 0; k < taps; ++k) {
        const Index s = l + k - pad;
        if (s < 0 || s >= len) continue;
        std::copy_n(src + (b * len + s) * cin, cin, cols->data() + (b * len + l) * taps * cin + k * cin);
      }
    }
  }
  Tensor out(Shape{batch, len, cout});
  out.matrix(batch * len, cout).noalias() = *cols * wv.matrix();
  const std::size_t ix = x.id(), iw = w.id();
  return tape.record("conv1d", std::move(out), x.requires_grad() || w.requires_grad(),
                     [ix, iw, cols, batch, len, cin, taps, cout, pad](Tape& t, const Tensor& g) {
                       auto gm = g.matrix(batch * len, cout);
                       if (t.requires_grad(iw)) t.grad(iw).matrix().noalias() += cols->transpose() * gm;
                       if (!t.requires_grad(ix)) return;
                       const RowMatrix dcols = gm * t.value(iw).matrix().transpose();
                       double* dx = t.grad(ix).data().data();
                       for (Index b = 0; b < batch; ++b) {
                         for (Index l = 0; l < len; ++l) {
                           for (Index k = 0; k < taps; ++k) {
                             const Index s = l + k - pad;
                             if (s < 0 || s >= len) continue;
                             Eigen::Map<Eigen::VectorXd>(dx + (b * len + s) * cin, cin) +=
                                 Eigen::Map<const Eigen::VectorXd>(dcols.data() + (b * len + l) * taps * cin + k * cin,
                                                                   cin);
                           }
                         }
                       }
                     });
}

Var avg_pool2(const Var& x) {
  Tape& tape = tape_of({&x}, "avg_pool2");
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || xv.dim(1) % 2 != 0) shape_fail("avg_pool2", xv.shape(), "expected [B, even L, C]");
  const Index batch = xv.dim(0), len = xv.dim(1), ch = xv.dim(2), half = len / 2;
  Tensor out(Shape{batch, half, ch});
  auto in = xv.matrix(batch * len, ch);
  auto om = out.matrix(batch * half, ch);
  for (Index r = 0; r < batch * half; ++r) om.row(r) = 0.5 * (in.row(2 * r) + in.row(2 * r + 1));
  const std::size_t ix = x.id();
  return tape.record("avg_pool2", std::move(out), x.requires_grad(), [ix, batch, half, ch, len](Tape& t, const Tensor& g) {
    auto d = t.grad(ix).matrix(batch * len, ch);
    auto gm = g.matrix(batch * half, ch);
    for (Index r = 0; r < batch * half; ++r) {
      d.row(2 * r) += 0.5 * gm.row(r);
      d.row(2 * r + 1) += 0.5 * gm.row(r);
    }
  });
}

Var upsample2(const Var& x) {
  Tape& tape = tape_of({&x}, "upsample2");
  const Tensor& xv = x.value();
  if (xv.rank() != 3) shape_fail("upsample2", xv.shape(), "expected [B, L, C]");
  const Index batch = xv.dim(0), len = xv.dim(1), ch = xv.dim(2);
  Tensor out(Shape{batch, 2 * len, ch});
  auto in = xv.matrix(batch * len, ch);
  auto om = out.matrix(batch * len * 2, ch);
  for (Index r = 0; r < batch * len; ++r) {
    om.row(2 * r) = in.row(r);
    om.row(2 * r + 1) = in.row(r);
  }
  const std::size_t ix = x.id();
  return tape.record("upsample2", std::move(out), x.requires_grad(), [ix, batch, len, ch](Tape& t, const Tensor& g) {
    auto d = t.grad(ix).matrix(batch * len, ch);
    auto gm = g.matrix(batch * len * 2, ch);
    for (Index r = 0; r < batch * len; ++r) d.row(r) += gm.row(2 * r) + gm.row(2 * r + 1);
  });
}

}  // namespace tshamo::diffcore
