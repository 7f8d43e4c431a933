#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "autodiff/kernels.hpp"
#include "autodiff/tape.hpp"
#include "common/error.hpp"

namespace nlimb::ad {
namespace {

Tape& same_tape(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid()) throw InvalidArgument(std::string(op) + ": unbound operand");
  if (a.tape() != b.tape()) throw InvalidArgument(std::string(op) + ": operands live on different tapes");
  return *a.tape();
}

Tape& tape_of(const char* op, Var a) {
  if (!a.valid()) throw InvalidArgument(std::string(op) + ": unbound operand");
  return *a.tape();
}

void require_finite(const char* op, const Tensor& out) {
  if (!out.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value (input outside the op's domain)");
  }
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// Numpy-style broadcast of two shapes, with fast paths for the common
// layouts (identical, scalar, and a row vector tiled over leading axes).
struct Broadcast {
  enum Kind { same, a_scalar, b_scalar, a_tiled, b_tiled, general };
  Kind kind = same;
  Shape out;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;

  Broadcast(const char* op, const Shape& a, const Shape& b) {
    na = numel(a);
    nb = numel(b);
    if (a == b) {
      kind = same;
      out = a;
      return;
    }
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
      const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
      if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
      out[i] = std::max(da, db);
    }
    const std::size_t n = numel(out);
    auto is_suffix = [&](const Shape& s) {
      if (s.size() > out.size()) return false;
      return std::equal(s.begin(), s.end(), out.end() - static_cast<std::ptrdiff_t>(s.size()));
    };
    if (na == 1 && nb == n) {
      kind = a_scalar;
    } else if (nb == 1 && na == n) {
      kind = b_scalar;
    } else if (nb == n && is_suffix(a)) {
      kind = a_tiled;
    } else if (na == n && is_suffix(b)) {
      kind = b_tiled;
    } else {
      kind = general;
      ia = index_map(a, n);
      ib = index_map(b, n);
    }
  }

  std::vector<std::size_t> index_map(const Shape& s, std::size_t n) const {
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      const std::size_t oi = i + r - s.size();
      stride[oi] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < r; ++d) off += idx[d] * stride[d];
      map[flat] = off;
      for (std::size_t d = r; d-- > 0;) {
        if (++idx[d] < out[d]) break;
        idx[d] = 0;
      }
    }
    return map;
  }

  // fn(out_index, a_index, b_index)
  template <class Fn>
  void each(Fn&& fn) const {
    const std::size_t n = numel(out);
    switch (kind) {
      case same:
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
        break;
      case a_scalar:
        for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0}, i);
        break;
      case b_scalar:
        for (std::size_t i = 0; i < n; ++i) fn(i, i, std::size_t{0});
        break;
      case a_tiled:
        for (std::size_t r = 0, i = 0; r < n / na; ++r)
          for (std::size_t c = 0; c < na; ++c, ++i) fn(i, c, i);
        break;
      case b_tiled:
        for (std::size_t r = 0, i = 0; r < n / nb; ++r)
          for (std::size_t c = 0; c < nb; ++c, ++i) fn(i, i, c);
        break;
      case general:
        for (std::size_t i = 0; i < n; ++i) fn(i, ia[i], ib[i]);
        break;
    }
  }
};

template <class F>
Tensor binary_forward(const Broadcast& bc, const Tensor& a, const Tensor& b, F f) {
  Tensor out(bc.out);
  double* o = out.data();
  const double* pa = a.data();
  const double* pb = b.data();
  bc.each([&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = f(pa[ia], pb[ib]); });
  return out;
}

template <class F>
Tensor unary_forward(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* o = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) o[i] = f(pa[i]);
  return out;
}

// Reduces over everything but `axis` split as outer x len x inner.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
  AxisSplit(const char* op, const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                       to_string(s));
    }
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  }
};

}  // namespace

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = same_tape("add", a, b);
  auto bc = std::make_shared<Broadcast>("add", a.shape(), b.shape());
  Tensor out = binary_forward(*bc, a.value(), b.value(), [](double x, double y) { return x + y; });
  require_finite("add", out);
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, bc](Tape& tp, const Tensor& g) {
    const bool ga_on = tp.requires_grad(ia), gb_on = tp.requires_grad(ib);
    double* ga = ga_on ? tp.grad_buffer(ia).data() : nullptr;
    double* gb = gb_on ? tp.grad_buffer(ib).data() : nullptr;
    const double* pg = g.data();
    bc->each([&](std::size_t i, std::size_t x, std::size_t y) {
      if (ga) ga[x] += pg[i];
      if (gb) gb[y] += pg[i];
    });
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape("sub", a, b);
  auto bc = std::make_shared<Broadcast>("sub", a.shape(), b.shape());
  Tensor out = binary_forward(*bc, a.value(), b.value(), [](double x, double y) { return x - y; });
  require_finite("sub", out);
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, bc](Tape& tp, const Tensor& g) {
    double* ga = tp.requires_grad(ia) ? tp.grad_buffer(ia).data() : nullptr;
    double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).data() : nullptr;
    const double* pg = g.data();
    bc->each([&](std::size_t i, std::size_t x, std::size_t y) {
      if (ga) ga[x] += pg[i];
      if (gb) gb[y] -= pg[i];
    });
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape("mul", a, b);
  auto bc = std::make_shared<Broadcast>("mul", a.shape(), b.shape());
  Tensor out = binary_forward(*bc, a.value(), b.value(), [](double x, double y) { return x * y; });
  require_finite("mul", out);
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, bc](Tape& tp, const Tensor& g) {
    const double* va = tp.value(ia).data();
    const double* vb = tp.value(ib).data();
    double* ga = tp.requires_grad(ia) ? tp.grad_buffer(ia).data() : nullptr;
    double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).data() : nullptr;
    const double* pg = g.data();
    bc->each([&](std::size_t i, std::size_t x, std::size_t y) {
      if (ga) ga[x] += pg[i] * vb[y];
      if (gb) gb[y] += pg[i] * va[x];
    });
  });
}

Var div(Var a, Var b) {
  Tape& t = same_tape("div", a, b);
  auto bc = std::make_shared<Broadcast>("div", a.shape(), b.shape());
  Tensor out = binary_forward(*bc, a.value(), b.value(), [](double x, double y) { return x / y; });
  require_finite("div", out);
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, bc](Tape& tp, const Tensor& g) {
    const double* va = tp.value(ia).data();
    const double* vb = tp.value(ib).data();
    double* ga = tp.requires_grad(ia) ? tp.grad_buffer(ia).data() : nullptr;
    double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).data() : nullptr;
    const double* pg = g.data();
    bc->each([&](std::size_t i, std::size_t x, std::size_t y) {
      if (ga) ga[x] += pg[i] / vb[y];
      if (gb) gb[y] -= pg[i] * va[x] / (vb[y] * vb[y]);
    });
  });
}

Var minimum(Var a, Var b) {
  Tape& t = same_tape("minimum", a, b);
  auto bc = std::make_shared<Broadcast>("minimum", a.shape(), b.shape());
  Tensor out = binary_forward(*bc, a.value(), b.value(), [](double x, double y) { return std::min(x, y); });
  require_finite("minimum", out);
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, bc](Tape& tp, const Tensor& g) {
    const double* va = tp.value(ia).data();
    const double* vb = tp.value(ib).data();
    double* ga = tp.requires_grad(ia) ? tp.grad_buffer(ia).data() : nullptr;
    double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).data() : nullptr;
    const double* pg = g.data();
    bc->each([&](std::size_t i, std::size_t x, std::size_t y) {
      if (va[x] <= vb[y]) {
        if (ga) ga[x] += pg[i];
      } else if (gb) {
        gb[y] += pg[i];
      }
    });
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  Tape& t = tape_of("scale", a);
  Tensor out = unary_forward(a.value(), [s](double x) { return x * s; });
  require_finite("scale", out);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, s](Tape& tp, const Tensor& g) {
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var shift(Var a, double c) {
  Tape& t = tape_of("shift", a);
  Tensor out = unary_forward(a.value(), [c](double x) { return x + c; });
  require_finite("shift", out);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) { tp.accumulate(ia, g); });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_fail("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n});
  kernels::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  require_finite("matmul", out);
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) {
      // dA = G * B^T
      std::vector<double> bt(n * k);
      kernels::transpose(tp.value(ib).data(), bt.data(), k, n);
      kernels::gemm_nn(g.data(), bt.data(), tp.grad_buffer(ia).data(), m, n, k);
    }
    if (tp.requires_grad(ib)) {
      // dB = A^T * G
      kernels::gemm_tn(tp.value(ia).data(), g.data(), tp.grad_buffer(ib).data(), m, k, n);
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of("transpose", a);
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose: expected a 2-D tensor, got " + to_string(s));
  const std::size_t r = s[0], c = s[1];
  Tensor out(Shape{c, r});
  kernels::transpose(a.value().data(), out.data(), r, c);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, r, c](Tape& tp, const Tensor& g) {
    Tensor gt(Shape{r, c});
    kernels::transpose(g.data(), gt.data(), c, r);
    tp.accumulate(ia, gt);
  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of("reshape", a);
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  Tape& t = tape_of("concat", parts[0]);
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for shape " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw InvalidArgument("concat: operands live on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) shape_fail("concat", s0, s);
    out_shape[axis] += s[axis];
  }
  AxisSplit split("concat", out_shape, axis);
  for (const Var& p : parts) widths.push_back(p.shape()[axis] * split.inner);
  const std::size_t row = split.len * split.inner;
  Tensor out(out_shape);
  std::size_t col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const double* src = parts[pi].value().data();
    const std::size_t w = widths[pi];
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src + o * w, w, out.data() + o * row + col);
    }
    col += w;
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return t.record(std::move(out), parts, [ids, widths, row, outer = split.outer](Tape& tp, const Tensor& g) {
    std::size_t c = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      const std::size_t w = widths[pi];
      if (tp.requires_grad(ids[pi])) {
        double* dst = tp.grad_buffer(ids[pi]).data();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data() + o * row + c;
          for (std::size_t j = 0; j < w; ++j) dst[o * w + j] += src[j];
        }
      }
      c += w;
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& t = tape_of("slice", a);
  const Shape& s = a.shape();
  AxisSplit split("slice", s, axis);
  if (begin > end || end > split.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for axis " + std::to_string(axis) + " of shape " + to_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t row = split.len * split.inner;
  const std::size_t w = (end - begin) * split.inner;
  const std::size_t off = begin * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(a.value().data() + o * row + off, w, out.data() + o * w);
  }
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, row, w, off, outer = split.outer](Tape& tp, const Tensor& g) {
    double* dst = tp.grad_buffer(ia).data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < w; ++j) dst[o * row + off + j] += g[o * w + j];
    }
  });
}

Var take_rows(Var table, const std::vector<std::size_t>& rows) {
  Tape& t = tape_of("take_rows", table);
  const Shape& s = table.shape();
  if (s.size() != 2) throw ShapeError("take_rows: table must be 2-D, got " + to_string(s));
  const std::size_t width = s[1];
  Tensor out(Shape{rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= s[0]) {
      throw ShapeError("take_rows: index " + std::to_string(rows[i]) + " out of range for table " + to_string(s));
    }
    std::copy_n(table.value().data() + rows[i] * width, width, out.data() + i * width);
  }
  const int ia = table.id();
  return t.record(std::move(out), {table}, [ia, rows, width](Tape& tp, const Tensor& g) {
    double* dst = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < width; ++j) dst[rows[i] * width + j] += g[i * width + j];
    }
  });
}

namespace {

void check_segments(const char* op, Var x, const std::vector<std::size_t>& segment, std::size_t segments) {
  if (x.value().size() != segment.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(segment.size()) + " segment ids for " +
                     std::to_string(x.value().size()) + " elements");
  }
  for (std::size_t s : segment) {
    if (s >= segments) throw ShapeError(std::string(op) + ": segment id " + std::to_string(s) + " out of range");
  }
}

}  // namespace

Var segment_sum(Var x, const std::vector<std::size_t>& segment, std::size_t segments) {
  Tape& t = tape_of("segment_sum", x);
  check_segments("segment_sum", x, segment, segments);
  Tensor out(Shape{segments});
  for (std::size_t i = 0; i < segment.size(); ++i) out[segment[i]] += x.value()[i];
  const int ia = x.id();
  return t.record(std::move(out), {x}, [ia, segment](Tape& tp, const Tensor& g) {
    double* dst = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < segment.size(); ++i) dst[i] += g[segment[i]];
  });
}

Var segment_mean(Var x, const std::vector<std::size_t>& segment, std::size_t segments) {
  Tape& t = tape_of("segment_mean", x);
  check_segments("segment_mean", x, segment, segments);
  Tensor out(Shape{segments});
  std::vector<double> count(segments, 0.0);
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const std::size_t s = segment[i];
    count[s] += 1.0;
    out[s] += (x.value()[i] - out[s]) / count[s];
  }
  for (std::size_t s = 0; s < segments; ++s) {
    if (count[s] == 0.0) throw ShapeError("segment_mean: segment " + std::to_string(s) + " is empty");
  }
  const int ia = x.id();
  return t.record(std::move(out), {x}, [ia, segment, count](Tape& tp, const Tensor& g) {
    double* dst = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < segment.size(); ++i) dst[i] += g[segment[i]] / count[segment[i]];
  });
}

Var relu(Var a) {
  Tape& t = tape_of("relu", a);
  Tensor out = unary_forward(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    const double* x = tp.value(ia).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
  });
}

Var tanh(Var a) {
  Tape& t = tape_of("tanh", a);
  Tensor out = unary_forward(a.value(), [](double x) { return std::tanh(x); });
  const int ia = a.id();
  const int iy = static_cast<int>(t.num_nodes());
  return t.record(std::move(out), {a}, [ia, iy](Tape& tp, const Tensor& g) {
    const double* yv = tp.value(iy).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
  });
}

Var exp(Var a) {
  Tape& t = tape_of("exp", a);
  Tensor out = unary_forward(a.value(), [](double x) { return std::exp(x); });
  require_finite("exp", out);
  const int ia = a.id();
  const int iy = static_cast<int>(t.num_nodes());
  return t.record(std::move(out), {a}, [ia, iy](Tape& tp, const Tensor& g) {
    const double* yv = tp.value(iy).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
  });
}

Var log(Var a) {
  Tape& t = tape_of("log", a);
  Tensor out = unary_forward(a.value(), [](double x) { return std::log(x); });
  require_finite("log", out);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    const double* x = tp.value(ia).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Var softplus(Var a) {
  Tape& t = tape_of("softplus", a);
  Tensor out = unary_forward(a.value(), [](double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); });
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    const double* x = tp.value(ia).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double sig = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      ga[i] += g[i] * sig;
    }
  });
}

Var square(Var a) {
  Tape& t = tape_of("square", a);
  Tensor out = unary_forward(a.value(), [](double x) { return x * x; });
  require_finite("square", out);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    const double* x = tp.value(ia).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
  });
}

Var clamp(Var a, double lo, double hi) {
  Tape& t = tape_of("clamp", a);
  if (!(lo <= hi)) throw InvalidArgument("clamp: lo > hi");
  Tensor out = unary_forward(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); });
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, lo, hi](Tape& tp, const Tensor& g) {
    const double* x = tp.value(ia).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += (x[i] >= lo && x[i] <= hi) ? g[i] : 0.0;
  });
}

Var sum(Var a) {
  Tape& t = tape_of("sum", a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  Tensor out = Tensor::scalar(s);
  require_finite("sum", out);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    const double gv = g[0];
    for (double& v : ga.values()) v += gv;
  });
}

Var sum(Var a, std::size_t axis) {
  Tape& t = tape_of("sum", a);
  AxisSplit sp("sum", a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape, 0.0);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.len + l) * sp.inner + i];
  require_finite("sum", out);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, sp](Tape& tp, const Tensor& g) {
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean(Var a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var mean(Var a, std::size_t axis) {
  const std::size_t len = a.value().dim(axis);
  if (len == 0) throw ShapeError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(len));
}

Var dot(Var a, Var b) {
  if (a.shape() != b.shape()) shape_fail("dot", a.shape(), b.shape());
  return sum(mul(a, b));
}

Var logsumexp(Var a) {
  Tape& t = tape_of("logsumexp", a);
  const auto v = a.value().values();
  if (v.empty()) throw ShapeError("logsumexp: empty tensor");
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  Tensor out = Tensor::scalar(m + std::log(s));
  require_finite("logsumexp", out);
  const int ia = a.id();
  const double lse = out[0];
  return t.record(std::move(out), {a}, [ia, lse](Tape& tp, const Tensor& g) {
    const double* x = tp.value(ia).data();
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * std::exp(x[i] - lse);
  });
}

Var softmax(Var a, std::size_t axis) {
  Tape& t = tape_of("softmax", a);
  AxisSplit sp("softmax", a.shape(), axis);
  if (sp.len == 0) throw ShapeError("softmax: empty axis");
  Tensor out(a.shape());
  const double* x = a.value().data();
  double* y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, x[base + l * sp.inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(x[base + l * sp.inner] - m);
        y[base + l * sp.inner] = e;
        s += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) y[base + l * sp.inner] /= s;
    }
  }
  const int ia = a.id();
  const int iy = static_cast<int>(t.num_nodes());
  return t.record(std::move(out), {a}, [ia, iy, sp](Tape& tp, const Tensor& g) {
    const double* yv = tp.value(iy).data();
    double* ga = tp.grad_buffer(ia).data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double dotp = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dotp += g[base + l * sp.inner] * yv[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = base + l * sp.inner;
          ga[j] += yv[j] * (g[j] - dotp);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape("layer_norm", x, gain);
  same_tape("layer_norm", x, bias);
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t width = s.back();
  if (gain.size() != width || bias.size() != width) shape_fail("layer_norm", s, gain.shape());
  const std::size_t rows = x.size() / width;
  Tensor out(s);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.value().data();
  const double* gv = gain.value().data();
  const double* bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    const double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = iv;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (row[j] - mu) * iv;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gv[j] + bv[j];
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.record(std::move(out), {x, gain, bias}, [ix, ig, ib, xhat, inv, rows, width](Tape& tp, const Tensor& g) {
    const double* gv = tp.value(ig).data();
    if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
      double* dg = tp.requires_grad(ig) ? tp.grad_buffer(ig).data() : nullptr;
      double* db = tp.requires_grad(ib) ? tp.grad_buffer(ib).data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) {
          const double gr = g[r * width + j];
          if (dg) dg[j] += gr * (*xhat)[r * width + j];
          if (db) db[j] += gr;
        }
      }
    }
    if (!tp.requires_grad(ix)) return;
    double* dx = tp.grad_buffer(ix).data();
    const double n = static_cast<double>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        const double dh = g[r * width + j] * gv[j];
        s1 += dh;
        s2 += dh * (*xhat)[r * width + j];
      }
      const double iv = (*inv)[r];
      for (std::size_t j = 0; j < width; ++j) {
        const double dh = g[r * width + j] * gv[j];
        dx[r * width + j] += iv / n * (n * dh - s1 - (*xhat)[r * width + j] * s2);
      }
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads, const Tensor* key_mask) {
  Tape& t = same_tape("attention", q, k);
  same_tape("attention", q, v);
  const Shape& sq = q.shape();
  if (sq.size() != 2 || sq[0] != batch * seq) {
    throw ShapeError("attention: query shape " + to_string(sq) + " does not match batch*seq=" +
                     std::to_string(batch * seq));
  }
  if (k.shape() != sq) shape_fail("attention", sq, k.shape());
  if (v.shape() != sq) shape_fail("attention", sq, v.shape());
  const std::size_t d = sq[1];
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (key_mask && key_mask->shape() != Shape{batch, seq}) {
    shape_fail("attention", Shape{batch, seq}, key_mask->shape());
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // weights[b][h][i][j]
  auto weights = std::make_shared<Tensor>(Shape{batch, heads, seq, seq}, 0.0);
  Tensor out(sq, 0.0);
  const double* qv = q.value().data();
  const double* kv = k.value().data();
  const double* vv = v.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* mask = key_mask ? key_mask->data() + b * seq : nullptr;
    std::size_t visible = 0;
    for (std::size_t j = 0; j < seq; ++j) visible += (!mask || std::isfinite(mask[j])) ? 1 : 0;
    if (visible == 0) {
      throw InvalidArgument("attention: batch row " + std::to_string(b) + " has no unmasked key");
    }
    for (std::size_t h = 0; h < heads; ++h) {
      double* w = weights->data() + ((b * heads + h) * seq) * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qv + (b * seq + i) * d + h * dh;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask && !std::isfinite(mask[j])) continue;
          const double* kj = kv + (b * seq + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s = s * sc + (mask ? mask[j] : 0.0);
          w[i * seq + j] = s;
          m = std::max(m, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask && !std::isfinite(mask[j])) {
            w[i * seq + j] = 0.0;
            continue;
          }
          const double e = std::exp(w[i * seq + j] - m);
          w[i * seq + j] = e;
          z += e;
        }
        double* oi = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          w[i * seq + j] /= z;
          const double wij = w[i * seq + j];
          if (wij == 0.0) continue;
          const double* vj = vv + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += wij * vj[c];
        }
      }
    }
  }
  require_finite("attention", out);
  if (t.attention_log()) t.attention_log()->push_back(*weights);
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return t.record(std::move(out), {q, k, v}, [=](Tape& tp, const Tensor& g) {
    const double* qv2 = tp.value(iq).data();
    const double* kv2 = tp.value(ik).data();
    const double* vv2 = tp.value(iv).data();
    double* dq = tp.requires_grad(iq) ? tp.grad_buffer(iq).data() : nullptr;
    double* dk = tp.requires_grad(ik) ? tp.grad_buffer(ik).data() : nullptr;
    double* dv = tp.requires_grad(iv) ? tp.grad_buffer(iv).data() : nullptr;
    std::vector<double> dw(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* w = weights->data() + ((b * heads + h) * seq) * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const double* gi = g.data() + (b * seq + i) * d + h * dh;
          double wdw = 0.0;
          for (std::size_t j = 0; j < seq; ++j) {
            const double wij = w[i * seq + j];
            if (wij == 0.0) {
              dw[j] = 0.0;
              continue;
            }
            const double* vj = vv2 + (b * seq + j) * d + h * dh;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
            dw[j] = s;
            wdw += wij * s;
            if (dv) {
              double* dvj = dv + (b * seq + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dvj[c] += wij * gi[c];
            }
          }
          const double* qi = qv2 + (b * seq + i) * d + h * dh;
          double* dqi = dq ? dq + (b * seq + i) * d + h * dh : nullptr;
          for (std::size_t j = 0; j < seq; ++j) {
            const double wij = w[i * seq + j];
            if (wij == 0.0) continue;
            const double ds = wij * (dw[j] - wdw) * sc;
            const double* kj = kv2 + (b * seq + j) * d + h * dh;
            if (dqi) {
              for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
            }
            if (dk) {
              double* dkj = dk + (b * seq + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace nlimb::ad
