// Copyright 2026 The rbev Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "rbev/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace rbev {
namespace {

Tape& tape_of(Var v) { return *v.tape; }

void check_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw DimensionError(std::string(op) + ": operands on different tapes");
}

void require_rank2(const Tensor& t, const char* op) { require_rank(t, 2, op); }

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  Tensor ycopy = y;
  return tape_of(a).record(std::move(y), {a}, [a, deriv, ycopy = std::move(ycopy)](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * deriv(x[i], ycopy[i]);
  });
}

std::size_t row_size(const Tensor& t) {
  if (t.rank() == 0) return 1;
  return t.dim(0) == 0 ? 0 : t.size() / t.dim(0);
}

}  // namespace

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  require_same_shape(a.shape(), b.shape(), "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  require_same_shape(a.shape(), b.shape(), "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  require_same_shape(a.shape(), b.shape(), "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  return tape_of(a).record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_row(Var a, Var row) {
  check_same_tape(a, row, "add_row");
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  require_rank2(x, "add_row");
  if (r.rank() != 1 || r.dim(0) != x.dim(1)) {
    throw DimensionError("add_row: " + shape_str(x.shape()) + " vs row " + shape_str(r.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * k + j] + r[j];
  return tape_of(a).record(std::move(out), {a, row}, [a, row, n, k](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(row)) {
      Tensor& gr = t.grad(row);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gr[j] += g[i * k + j];
    }
  });
}

Var mul_row(Var a, Var row) {
  check_same_tape(a, row, "mul_row");
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  require_rank2(x, "mul_row");
  if (r.rank() != 1 || r.dim(0) != x.dim(1)) {
    throw DimensionError("mul_row: " + shape_str(x.shape()) + " vs row " + shape_str(r.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * k + j] * r[j];
  return tape_of(a).record(std::move(out), {a, row}, [a, row, n, k](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& r = t.value(row);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[i * k + j] * r[j];
    }
    if (t.requires_grad(row)) {
      Tensor& gr = t.grad(row);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gr[j] += g[i * k + j] * x[i * k + j];
    }
  });
}

Var mul_col(Var a, Var col) {
  check_same_tape(a, col, "mul_col");
  const Tensor& x = a.value();
  const Tensor& c = col.value();
  require_rank2(x, "mul_col");
  if (c.rank() != 1 || c.dim(0) != x.dim(0)) {
    throw DimensionError("mul_col: " + shape_str(x.shape()) + " vs column " +
                         shape_str(c.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * k + j] * c[i];
  return tape_of(a).record(std::move(out), {a, col}, [a, col, n, k](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& c = t.value(col);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[i * k + j] * c[i];
    }
    if (t.requires_grad(col)) {
      Tensor& gc = t.grad(col);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += g[i * k + j] * x[i * k + j];
        gc[i] += s;
      }
    }
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var elu(Var a, double alpha) {
  return unary(a, [alpha](double x) { return x > 0.0 ? x : alpha * std::expm1(x); },
               [alpha](double x, double y) { return x > 0.0 ? 1.0 : y + alpha; });
}

Var leaky_relu(Var a, double slope) {
  return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(x.shape()) + " by " +
                         shape_str(y.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1), m = y.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* yrow = &y.data()[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += xv * yrow[j];
    }
  }
  return tape_of(a).record(std::move(out), {a, b}, [a, b, n, k, m](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          if (xv == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += xv * g[i * m + j];
        }
    }
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var transpose(Var a) {
  const Tensor& x = a.value();
  require_rank2(x, "transpose");
  const std::size_t n = x.dim(0), m = x.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x[i * m + j];
  return tape_of(a).record(std::move(out), {a}, [a, n, m](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != 2 || v.dim(0) != n) {
      throw DimensionError("concat_cols: " + shape_str(v.shape()) + " does not have " +
                           std::to_string(n) + " rows");
    }
    widths.push_back(v.dim(1));
    total += v.dim(1);
  }
  Tensor out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const Tensor& v = parts[q].value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[q]; ++j) out[i * total + off + j] = v[i * widths[q] + j];
    off += widths[q];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  // The recorded input list is fixed-size; pass one grad-requiring input so the
  // node is marked, the closure handles the rest.
  Var anchor = parts[0];
  for (const Var& p : ins)
    if (p.requires_grad()) anchor = p;
  return tape_of(parts[0]).record(std::move(out), {anchor}, [ins, widths, n, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t q = 0; q < ins.size(); ++q) {
      if (t.requires_grad(ins[q])) {
        Tensor& gq = t.grad(ins[q]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[q]; ++j) gq[i * widths[q] + j] += g[i * total + off + j];
      }
      off += widths[q];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Tensor& first = parts[0].value();
  const std::size_t k = row_size(first);
  std::size_t rows = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != first.rank() || row_size(v) != k) {
      throw DimensionError("concat_rows: " + shape_str(v.shape()) + " incompatible with " +
                           shape_str(first.shape()));
    }
    rows += v.dim(0);
  }
  Shape shape = first.shape();
  shape[0] = rows;
  Tensor out(shape);
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const Tensor& v = p.value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  Var anchor = parts[0];
  for (const Var& p : ins)
    if (p.requires_grad()) anchor = p;
  return tape_of(parts[0]).record(std::move(out), {anchor}, [ins, offsets](Tape& t, const Tensor& g) {
    for (std::size_t q = 0; q < ins.size(); ++q) {
      if (!t.requires_grad(ins[q])) continue;
      Tensor& gq = t.grad(ins[q]);
      for (std::size_t i = 0; i < gq.size(); ++i) gq[i] += g[offsets[q] + i];
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& x = a.value();
  require_rank2(x, "slice_cols");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (start + count > m) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(x.shape()));
  }
  Tensor out(Shape{n, count});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * m + start + j];
  return tape_of(a).record(std::move(out), {a}, [a, n, m, start, count](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * m + start + j] += g[i * count + j];
  });
}

Var gather_rows(Var a, std::span<const std::uint32_t> index) {
  const Tensor& x = a.value();
  if (x.rank() < 1) throw DimensionError("gather_rows: scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t k = row_size(x);
  Shape shape = x.shape();
  shape[0] = index.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " out of " +
                           shape_str(x.shape()));
    }
    std::copy_n(&x.data()[index[i] * k], k, &out[i * k]);
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return tape_of(a).record(std::move(out), {a}, [a, idx = std::move(idx), k](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) ga[idx[i] * k + j] += g[i * k + j];
  });
}

namespace {

// out[seg] += rows of x, adding each segment's terms in ascending order so the
// result does not depend on the order of the rows.
void sorted_segment_sum(const double* x, std::span<const std::uint32_t> segment, std::size_t k, double* out) {
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] >= members.size()) members.resize(segment[i] + 1);
    members[segment[i]].push_back(i);
  }
  std::vector<double> terms;
  for (std::size_t s = 0; s < members.size(); ++s) {
    for (std::size_t j = 0; j < k; ++j) {
      terms.clear();
      for (std::size_t i : members[s]) terms.push_back(x[i * k + j]);
      std::sort(terms.begin(), terms.end());
      for (double t : terms) out[s * k + j] += t;
    }
  }
}

}  // namespace

Var scatter_add_rows(Var a, std::span<const std::uint32_t> index, std::size_t rows, bool sorted_sum) {
  const Tensor& x = a.value();
  if (x.rank() < 1 || x.dim(0) != index.size()) {
    throw DimensionError("scatter_add_rows: " + shape_str(x.shape()) + " with " +
                         std::to_string(index.size()) + " indices");
  }
  const std::size_t k = row_size(x);
  Shape shape = x.shape();
  shape[0] = rows;
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index[i] >= rows) throw DimensionError("scatter_add_rows: index out of range");
  if (sorted_sum) {
    sorted_segment_sum(x.data().data(), index, k, out.data().data());
  } else {
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) out[index[i] * k + j] += x[i * k + j];
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return tape_of(a).record(std::move(out), {a}, [a, idx = std::move(idx), k](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[idx[i] * k + j];
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return tape_of(a).record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_last(Var a) {
  const Tensor& x = a.value();
  require_rank2(x, "mean_last");
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (k == 0) throw DimensionError("mean_last: empty reduction axis in " + shape_str(x.shape()));
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += x[i * k + j];
    out[i] = s / static_cast<double>(k);
  }
  return tape_of(a).record(std::move(out), {a}, [a, n, k](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const double inv = 1.0 / static_cast<double>(k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[i] * inv;
  });
}

MaskedSoftmax softmax_masked(const Tensor& logits, const Mask& mask, std::size_t axis, bool sorted_sum) {
  require_same_shape(logits.shape(), mask.shape, "softmax_masked");
  if (axis >= logits.rank()) {
    throw DimensionError("softmax_masked: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(logits.shape()));
  }
  const Shape& s = logits.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  MaskedSoftmax r{Tensor(s), std::vector<char>(outer * inner, 0)};
  std::vector<double> terms;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      auto idx = [&](std::size_t k) { return (o * len + k) * inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t k = 0; k < len; ++k) {
        if (!mask[idx(k)]) continue;
        any = true;
        mx = std::max(mx, logits[idx(k)]);
      }
      if (!any) {
        r.empty_slice[o * inner + in] = 1;
        continue;
      }
      double z = 0.0;
      terms.clear();
      for (std::size_t k = 0; k < len; ++k) {
        if (!mask[idx(k)]) continue;
        const double e = std::exp(logits[idx(k)] - mx);
        r.out[idx(k)] = e;
        if (sorted_sum) {
          terms.push_back(e);
        } else {
          z += e;
        }
      }
      if (sorted_sum) {
        std::sort(terms.begin(), terms.end());
        for (double t : terms) z += t;
      }
      for (std::size_t k = 0; k < len; ++k) {
        if (mask[idx(k)]) r.out[idx(k)] /= z;
      }
    }
  }
  return r;
}

Var softmax_masked(Var logits, const Mask& mask, std::vector<char>* empty_rows, bool sorted_sum) {
  const Tensor& x = logits.value();
  require_rank2(x, "softmax_masked");
  MaskedSoftmax r = softmax_masked(x, mask, 1, sorted_sum);
  if (empty_rows) *empty_rows = r.empty_slice;
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor y = r.out;
  return tape_of(logits).record(std::move(r.out), {logits}, [logits, y = std::move(y), n, k](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(logits);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += y[i * k + j] * g[i * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        const double yv = y[i * k + j];
        if (yv != 0.0) gx[i * k + j] += yv * (g[i * k + j] - dot);
      }
    }
  });
}

Var softmax_rows(Var logits) {
  return softmax_masked(logits, Mask(logits.shape(), true));
}

Var segment_softmax(Var scores, std::span<const std::uint32_t> segment, std::size_t segments,
                    bool sorted_sum) {
  const Tensor& x = scores.value();
  require_rank2(x, "segment_softmax");
  const std::size_t e = x.dim(0), h = x.dim(1);
  if (segment.size() != e) {
    throw DimensionError("segment_softmax: " + std::to_string(segment.size()) +
                         " segment ids for " + shape_str(x.shape()));
  }
  Tensor mx(Shape{segments, h}, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t c = 0; c < h; ++c)
      mx[segment[i] * h + c] = std::max(mx[segment[i] * h + c], x[i * h + c]);
  Tensor z(Shape{segments, h});
  Tensor y(x.shape());
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t c = 0; c < h; ++c) y[i * h + c] = std::exp(x[i * h + c] - mx[segment[i] * h + c]);
  if (sorted_sum) {
    sorted_segment_sum(y.data().data(), segment, h, z.data().data());
  } else {
    for (std::size_t i = 0; i < e; ++i)
      for (std::size_t c = 0; c < h; ++c) z[segment[i] * h + c] += y[i * h + c];
  }
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t c = 0; c < h; ++c) y[i * h + c] /= z[segment[i] * h + c];
  std::vector<std::uint32_t> seg(segment.begin(), segment.end());
  Tensor ycopy = y;
  return tape_of(scores).record(
      std::move(y), {scores},
      [scores, seg = std::move(seg), y = std::move(ycopy), e, h, segments](Tape& t, const Tensor& g) {
        Tensor dot(Shape{segments, h});
        for (std::size_t i = 0; i < e; ++i)
          for (std::size_t c = 0; c < h; ++c) dot[seg[i] * h + c] += y[i * h + c] * g[i * h + c];
        Tensor& gx = t.grad(scores);
        for (std::size_t i = 0; i < e; ++i)
          for (std::size_t c = 0; c < h; ++c)
            gx[i * h + c] += y[i * h + c] * (g[i * h + c] - dot[seg[i] * h + c]);
      });
}

Var grouped_dot(Var z, Var a, std::size_t heads) {
  check_same_tape(z, a, "grouped_dot");
  const Tensor& x = z.value();
  const Tensor& w = a.value();
  require_rank2(x, "grouped_dot");
  const std::size_t e = x.dim(0), d = x.dim(1);
  if (w.rank() != 1 || w.dim(0) != d || heads == 0 || d % heads != 0) {
    throw DimensionError("grouped_dot: " + shape_str(x.shape()) + " with " + shape_str(w.shape()) +
                         " and " + std::to_string(heads) + " heads");
  }
  const std::size_t blk = d / heads;
  Tensor out(Shape{e, heads});
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * heads + c / blk] += x[i * d + c] * w[c];
  return tape_of(z).record(std::move(out), {z, a}, [z, a, e, d, heads, blk](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(z);
    const Tensor& w = t.value(a);
    if (t.requires_grad(z)) {
      Tensor& gz = t.grad(z);
      for (std::size_t i = 0; i < e; ++i)
        for (std::size_t c = 0; c < d; ++c) gz[i * d + c] += g[i * heads + c / blk] * w[c];
    }
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < e; ++i)
        for (std::size_t c = 0; c < d; ++c) ga[c] += g[i * heads + c / blk] * x[i * d + c];
    }
  });
}

Var head_scale(Var x, Var w) {
  check_same_tape(x, w, "head_scale");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank2(xv, "head_scale");
  require_rank2(wv, "head_scale");
  const std::size_t e = xv.dim(0), d = xv.dim(1), h = wv.dim(1);
  if (wv.dim(0) != e || h == 0 || d % h != 0) {
    throw DimensionError("head_scale: " + shape_str(xv.shape()) + " with weights " +
                         shape_str(wv.shape()));
  }
  const std::size_t blk = d / h;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = xv[i * d + c] * wv[i * h + c / blk];
  return tape_of(x).record(std::move(out), {x, w}, [x, w, e, d, h, blk](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad(x);
      for (std::size_t i = 0; i < e; ++i)
        for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += g[i * d + c] * wv[i * h + c / blk];
    }
    if (t.requires_grad(w)) {
      Tensor& gw = t.grad(w);
      for (std::size_t i = 0; i < e; ++i)
        for (std::size_t c = 0; c < d; ++c) gw[i * h + c / blk] += g[i * d + c] * xv[i * d + c];
    }
  });
}

Var group_dot(Var q, Var k, std::size_t group) {
  check_same_tape(q, k, "group_dot");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  require_rank2(qv, "group_dot");
  require_rank2(kv, "group_dot");
  const std::size_t n = qv.dim(0), d = qv.dim(1);
  if (kv.dim(0) != n * group || kv.dim(1) != d) {
    throw DimensionError("group_dot: queries " + shape_str(qv.shape()) + " vs keys " +
                         shape_str(kv.shape()) + " with group " + std::to_string(group));
  }
  Tensor out(Shape{n, group});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < group; ++m) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qv[i * d + c] * kv[(i * group + m) * d + c];
      out[i * group + m] = s;
    }
  return tape_of(q).record(std::move(out), {q, k}, [q, k, n, d, group](Tape& t, const Tensor& g) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const bool gq_on = t.requires_grad(q), gk_on = t.requires_grad(k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t m = 0; m < group; ++m) {
        const double gv = g[i * group + m];
        if (gv == 0.0) continue;
        if (gq_on) {
          Tensor& gq = t.grad(q);
          for (std::size_t c = 0; c < d; ++c) gq[i * d + c] += gv * kv[(i * group + m) * d + c];
        }
        if (gk_on) {
          Tensor& gk = t.grad(k);
          for (std::size_t c = 0; c < d; ++c) gk[(i * group + m) * d + c] += gv * qv[i * d + c];
        }
      }
  });
}

Var group_weighted_sum(Var w, Var v) {
  check_same_tape(w, v, "group_weighted_sum");
  const Tensor& wv = w.value();
  const Tensor& vv = v.value();
  require_rank2(wv, "group_weighted_sum");
  require_rank2(vv, "group_weighted_sum");
  const std::size_t n = wv.dim(0), group = wv.dim(1), d = vv.dim(1);
  if (vv.dim(0) != n * group) {
    throw DimensionError("group_weighted_sum: weights " + shape_str(wv.shape()) + " vs values " +
                         shape_str(vv.shape()));
  }
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < group; ++m) {
      const double a = wv[i * group + m];
      if (a == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += a * vv[(i * group + m) * d + c];
    }
  return tape_of(w).record(std::move(out), {w, v}, [w, v, n, group, d](Tape& t, const Tensor& g) {
    const Tensor& wv = t.value(w);
    const Tensor& vv = t.value(v);
    if (t.requires_grad(w)) {
      Tensor& gw = t.grad(w);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < group; ++m) {
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += g[i * d + c] * vv[(i * group + m) * d + c];
          gw[i * group + m] += s;
        }
    }
    if (t.requires_grad(v)) {
      Tensor& gv = t.grad(v);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < group; ++m) {
          const double a = wv[i * group + m];
          for (std::size_t c = 0; c < d; ++c) gv[(i * group + m) * d + c] += a * g[i * d + c];
        }
    }
  });
}

namespace {

struct NormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

}  // namespace

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t n = xv.dim(0), k = xv.dim(1);
  if (gamma.value().shape() != Shape{k} || beta.value().shape() != Shape{k}) {
    throw DimensionError("layer_norm: affine " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " for " + shape_str(xv.shape()));
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  NormCache cache{Tensor(xv.shape()), std::vector<double>(n)};
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < k; ++j) mu += xv[i * k + j];
    mu /= static_cast<double>(k);
    double var = 0.0;
    for (std::size_t j = 0; j < k; ++j) var += (xv[i * k + j] - mu) * (xv[i * k + j] - mu);
    var /= static_cast<double>(k);
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_std[i] = inv;
    for (std::size_t j = 0; j < k; ++j) {
      const double xh = (xv[i * k + j] - mu) * inv;
      cache.xhat[i * k + j] = xh;
      out[i * k + j] = gv[j] * xh + bv[j];
    }
  }
  Tape& t0 = tape_of(x);
  Var anchor = x.requires_grad() ? x : (gamma.requires_grad() ? gamma : beta);
  return t0.record(std::move(out), {anchor, x, gamma, beta},
                   [x, gamma, beta, n, k, cache = std::move(cache)](Tape& t, const Tensor& g) {
                     const Tensor& gv = t.value(gamma);
                     if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                       Tensor* gg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
                       Tensor* gb = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j) {
                           if (gg) (*gg)[j] += g[i * k + j] * cache.xhat[i * k + j];
                           if (gb) (*gb)[j] += g[i * k + j];
                         }
                     }
                     if (t.requires_grad(x)) {
                       Tensor& gx = t.grad(x);
                       const double inv_k = 1.0 / static_cast<double>(k);
                       for (std::size_t i = 0; i < n; ++i) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < k; ++j) {
                           const double dxh = g[i * k + j] * gv[j];
                           m1 += dxh;
                           m2 += dxh * cache.xhat[i * k + j];
                         }
                         m1 *= inv_k;
                         m2 *= inv_k;
                         for (std::size_t j = 0; j < k; ++j) {
                           const double dxh = g[i * k + j] * gv[j];
                           gx[i * k + j] +=
                               cache.inv_std[i] * (dxh - m1 - cache.xhat[i * k + j] * m2);
                         }
                       }
                     }
                   });
}

Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "group_norm");
  const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  if (groups == 0 || c % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw DimensionError("group_norm: affine " + shape_str(gamma.shape()) + " for " +
                         shape_str(xv.shape()));
  }
  const std::size_t per = c / groups;
  const std::size_t len = per * hw;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  NormCache cache{Tensor(xv.shape()), std::vector<double>(groups)};
  Tensor out(xv.shape());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * len;
    double mu = 0.0;
    for (std::size_t i = 0; i < len; ++i) mu += xv[base + i];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
    var /= static_cast<double>(len);
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_std[gi] = inv;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t ch = gi * per + i / hw;
      const double xh = (xv[base + i] - mu) * inv;
      cache.xhat[base + i] = xh;
      out[base + i] = gv[ch] * xh + bv[ch];
    }
  }
  Var anchor = x.requires_grad() ? x : (gamma.requires_grad() ? gamma : beta);
  return tape_of(x).record(
      std::move(out), {anchor, x, gamma, beta},
      [x, gamma, beta, groups, per, hw, len, cache = std::move(cache)](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gamma);
        Tensor* gg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
        Tensor* gb = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
        Tensor* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
        const double inv_len = 1.0 / static_cast<double>(len);
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t base = gi * len;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t ch = gi * per + i / hw;
            const double gy = g[base + i];
            if (gg) (*gg)[ch] += gy * cache.xhat[base + i];
            if (gb) (*gb)[ch] += gy;
            const double dxh = gy * gv[ch];
            m1 += dxh;
            m2 += dxh * cache.xhat[base + i];
          }
          if (!gx) continue;
          m1 *= inv_len;
          m2 *= inv_len;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t ch = gi * per + i / hw;
            const double dxh = g[base + i] * gv[ch];
            (*gx)[base + i] += cache.inv_std[gi] * (dxh - m1 - cache.xhat[base + i] * m2);
          }
        }
      });
}

Var conv2d(Var x, Var w, Var b, Padding padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 3, "conv2d");
  require_rank(wv, 4, "conv2d");
  const std::size_t cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const std::size_t cout = wv.dim(0), ks = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != ks || (ks != 1 && ks != 3) ||
      b.value().shape() != Shape{cout}) {
    throw DimensionError("conv2d: input " + shape_str(xv.shape()) + ", kernel " +
                         shape_str(wv.shape()) + ", bias " + shape_str(b.shape()));
  }
  const std::size_t hw = h * wd;
  const std::size_t kk = cin * ks * ks;
  const int r = static_cast<int>(ks / 2);
  // Column matrix [kk x hw]; -1 source index marks zero padding.
  std::vector<std::int64_t> src(kk * hw, -1);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t dy = 0; dy < ks; ++dy)
      for (std::size_t dx = 0; dx < ks; ++dx) {
        const std::size_t row = (ci * ks + dy) * ks + dx;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < wd; ++xx) {
            int sy = static_cast<int>(y) + static_cast<int>(dy) - r;
            int sx = static_cast<int>(xx) + static_cast<int>(dx) - r;
            const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<int>(h) && sx < static_cast<int>(wd);
            if (!inside) {
              if (padding == Padding::kZero) continue;
              sy = std::clamp(sy, 0, static_cast<int>(h) - 1);
              sx = std::clamp(sx, 0, static_cast<int>(wd) - 1);
            }
            src[row * hw + y * wd + xx] =
                static_cast<std::int64_t>(ci * hw + static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx));
          }
      }
  std::vector<double> cols(kk * hw, 0.0);
  for (std::size_t i = 0; i < kk * hw; ++i)
    if (src[i] >= 0) cols[i] = xv[static_cast<std::size_t>(src[i])];
  Tensor out(Shape{cout, h, wd});
  const Tensor& bv = b.value();
  for (std::size_t o = 0; o < cout; ++o) {
    double* orow = &out[o * hw];
    for (std::size_t p = 0; p < hw; ++p) orow[p] = bv[o];
    for (std::size_t q = 0; q < kk; ++q) {
      const double wq = wv[o * kk + q];
      if (wq == 0.0) continue;
      const double* crow = &cols[q * hw];
      for (std::size_t p = 0; p < hw; ++p) orow[p] += wq * crow[p];
    }
  }
  Var anchor = x.requires_grad() ? x : (w.requires_grad() ? w : b);
  return tape_of(x).record(
      std::move(out), {anchor, x, w, b},
      [x, w, b, cout, kk, hw, src = std::move(src), cols = std::move(cols)](Tape& t, const Tensor& g) {
        const Tensor& wv = t.value(w);
        if (t.requires_grad(b)) {
          Tensor& gb = t.grad(b);
          for (std::size_t o = 0; o < cout; ++o) {
            double s = 0.0;
            for (std::size_t p = 0; p < hw; ++p) s += g[o * hw + p];
            gb[o] += s;
          }
        }
        if (t.requires_grad(w)) {
          Tensor& gw = t.grad(w);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t q = 0; q < kk; ++q) {
              double s = 0.0;
              const double* crow = &cols[q * hw];
              const double* grow = &g.data()[o * hw];
              for (std::size_t p = 0; p < hw; ++p) s += grow[p] * crow[p];
              gw[o * kk + q] += s;
            }
        }
        if (t.requires_grad(x)) {
          Tensor& gx = t.grad(x);
          std::vector<double> dcols(kk * hw, 0.0);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t q = 0; q < kk; ++q) {
              const double wq = wv[o * kk + q];
              if (wq == 0.0) continue;
              double* drow = &dcols[q * hw];
              const double* grow = &g.data()[o * hw];
              for (std::size_t p = 0; p < hw; ++p) drow[p] += wq * grow[p];
            }
          for (std::size_t i = 0; i < kk * hw; ++i)
            if (src[i] >= 0) gx[static_cast<std::size_t>(src[i])] += dcols[i];
        }
      });
}

Var patchify(Var image, std::size_t patch) {
  const Tensor& xv = image.value();
  require_rank(xv, 3, "patchify");
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: image " + shape_str(xv.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t ph = h / patch, pw = w / patch;
  const std::size_t k = c * patch * patch;
  std::vector<std::uint32_t> src(ph * pw * k);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx) {
            const std::size_t row = py * pw + px;
            const std::size_t col = (ci * patch + dy) * patch + dx;
            src[row * k + col] = static_cast<std::uint32_t>(
                (ci * h + py * patch + dy) * w + px * patch + dx);
          }
  Tensor out(Shape{ph * pw, k});
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return tape_of(image).record(std::move(out), {image}, [image, src = std::move(src)](Tape& t, const Tensor& g) {
    Tensor& gi = t.grad(image);
    for (std::size_t i = 0; i < src.size(); ++i) gi[src[i]] += g[i];
  });
}

void bilinear_read(std::span<const double> feat, std::size_t channels, std::size_t height,
                   std::size_t width, double x, double y, std::span<double> out) {
  for (std::size_t c = 0; c < channels; ++c) out[c] = 0.0;
  if (!(x > -1.0 && y > -1.0 && x < static_cast<double>(width) && y < static_cast<double>(height))) {
    return;
  }
  const BilinearTap tap = bilinear_tap(x, y);
  const std::size_t hw = height * width;
  const double wts[4] = {(1.0 - tap.wx1) * (1.0 - tap.wy1), tap.wx1 * (1.0 - tap.wy1),
                         (1.0 - tap.wx1) * tap.wy1, tap.wx1 * tap.wy1};
  for (int corner = 0; corner < 4; ++corner) {
    const int cx = tap.x0 + (corner & 1);
    const int cy = tap.y0 + (corner >> 1);
    if (cx < 0 || cy < 0 || cx >= static_cast<int>(width) || cy >= static_cast<int>(height)) continue;
    const double wgt = wts[corner];
    const std::size_t off = static_cast<std::size_t>(cy) * width + static_cast<std::size_t>(cx);
    for (std::size_t c = 0; c < channels; ++c) out[c] += wgt * feat[c * hw + off];
  }
}

Var bilinear_sample(Var feat, Var points) {
  check_same_tape(feat, points, "bilinear_sample");
  const Tensor& fv = feat.value();
  const Tensor& pv = points.value();
  require_rank(fv, 3, "bilinear_sample");
  if (pv.rank() != 2 || pv.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points must be [P x 2], got " + shape_str(pv.shape()));
  }
  const std::size_t c = fv.dim(0), h = fv.dim(1), w = fv.dim(2), p = pv.dim(0);
  Tensor out(Shape{p, c});
  for (std::size_t i = 0; i < p; ++i) {
    bilinear_read(fv.data(), c, h, w, pv[2 * i], pv[2 * i + 1],
                  std::span<double>(&out[i * c], c));
  }
  return tape_of(feat).record(std::move(out), {feat, points}, [feat, points, c, h, w, p](Tape& t, const Tensor& g) {
    const Tensor& fv = t.value(feat);
    const Tensor& pv = t.value(points);
    Tensor* gf = t.requires_grad(feat) ? &t.grad(feat) : nullptr;
    Tensor* gp = t.requires_grad(points) ? &t.grad(points) : nullptr;
    const std::size_t hw = h * w;
    for (std::size_t i = 0; i < p; ++i) {
      const double x = pv[2 * i], y = pv[2 * i + 1];
      if (!(x > -1.0 && y > -1.0 && x < static_cast<double>(w) && y < static_cast<double>(h))) continue;
      const BilinearTap tap = bilinear_tap(x, y);
      auto corner_val = [&](int cx, int cy, std::size_t ch) {
        if (cx < 0 || cy < 0 || cx >= static_cast<int>(w) || cy >= static_cast<int>(h)) return 0.0;
        return fv[ch * hw + static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx)];
      };
      const double wts[4] = {(1.0 - tap.wx1) * (1.0 - tap.wy1), tap.wx1 * (1.0 - tap.wy1),
                             (1.0 - tap.wx1) * tap.wy1, tap.wx1 * tap.wy1};
      double dx = 0.0, dy = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double gv = g[i * c + ch];
        if (gv == 0.0) continue;
        const double v00 = corner_val(tap.x0, tap.y0, ch);
        const double v10 = corner_val(tap.x0 + 1, tap.y0, ch);
        const double v01 = corner_val(tap.x0, tap.y0 + 1, ch);
        const double v11 = corner_val(tap.x0 + 1, tap.y0 + 1, ch);
        dx += gv * ((1.0 - tap.wy1) * (v10 - v00) + tap.wy1 * (v11 - v01));
        dy += gv * ((1.0 - tap.wx1) * (v01 - v00) + tap.wx1 * (v11 - v10));
        if (gf) {
          for (int corner = 0; corner < 4; ++corner) {
            const int cx = tap.x0 + (corner & 1);
            const int cy = tap.y0 + (corner >> 1);
            if (cx < 0 || cy < 0 || cx >= static_cast<int>(w) || cy >= static_cast<int>(h)) continue;
            (*gf)[ch * hw + static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx)] += gv * wts[corner];
          }
        }
      }
      if (gp) {
        (*gp)[2 * i] += dx;
        (*gp)[2 * i + 1] += dy;
      }
    }
  });
}

Var dropout(Var a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const Tensor& x = a.value();
  Tensor keep(x.shape());
  const double s = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    keep[i] = u < rate ? 0.0 : s;
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * keep[i];
  return tape_of(a).record(std::move(out), {a}, [a, keep = std::move(keep)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * keep[i];
  });
}

namespace {

// Row-wise softmax probabilities and log-normalizers.
void row_softmax(const Tensor& x, std::size_t n, std::size_t k, Tensor& p, std::vector<double>& lse) {
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[i * k + j] - mx);
    lse[i] = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] = std::exp(x[i * k + j] - lse[i]);
  }
}

}  // namespace

Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels) {
  const Tensor& x = logits.value();
  require_rank2(x, "softmax_cross_entropy");
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (labels.size() != n || n == 0) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(x.shape()));
  }
  Tensor p(x.shape());
  std::vector<double> lse(n);
  row_softmax(x, n, k, p, lse);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    loss += lse[i] - x[i * k + labels[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<std::uint32_t> lab(labels.begin(), labels.end());
  return tape_of(logits).record(
      Tensor::scalar(loss), {logits},
      [logits, p = std::move(p), lab = std::move(lab), n, k](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(logits);
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            gx[i * k + j] += s * (p[i * k + j] - (j == lab[i] ? 1.0 : 0.0));
      });
}

Var softmax_focal(Var logits, std::span<const std::uint32_t> labels, double gamma, double alpha,
                  std::uint32_t background) {
  const Tensor& x = logits.value();
  require_rank2(x, "softmax_focal");
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_focal: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(x.shape()));
  }
  Tensor p(x.shape());
  std::vector<double> lse(n);
  row_softmax(x, n, k, p, lse);
  std::vector<double> dl_dpt(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t tgt = labels[i];
    if (tgt >= k) throw DimensionError("softmax_focal: label out of range");
    const double a = tgt == background ? 1.0 - alpha : alpha;
    const double logpt = x[i * k + tgt] - lse[i];
    const double pt = std::exp(logpt);
    const double q = 1.0 - pt;
    const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    loss += -a * mod * logpt;
    double d = -a * mod / pt;
    if (gamma != 0.0) d += a * gamma * std::pow(q, gamma - 1.0) * logpt;
    dl_dpt[i] = d;
  }
  std::vector<std::uint32_t> lab(labels.begin(), labels.end());
  return tape_of(logits).record(
      Tensor::scalar(loss), {logits},
      [logits, p = std::move(p), lab = std::move(lab), dl_dpt = std::move(dl_dpt), n, k](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(logits);
        for (std::size_t i = 0; i < n; ++i) {
          const double pt = p[i * k + lab[i]];
          const double s = g[0] * dl_dpt[i] * pt;
          for (std::size_t j = 0; j < k; ++j)
            gx[i * k + j] += s * ((j == lab[i] ? 1.0 : 0.0) - p[i * k + j]);
        }
      });
}

}  // namespace rbev
