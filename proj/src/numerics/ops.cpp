#include "fatspeech/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace fatspeech::num {

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_result(Shape shape, std::vector<double> data, bool track) {
  return Tensor(std::move(shape), std::move(data), track);
}

}  // namespace detail

namespace {

using detail::make_result;
using detail::needs_grad;

void record(std::vector<Tensor> inputs, const Tensor& out, std::function<void()> fn) {
  active_tape()->record(std::move(inputs), out, std::move(fn));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

// Accumulates `src` into the gradient of `dst` when it is tracked.
void accumulate(const Tensor& dst, std::span<const double> src) {
  if (!dst.requires_grad()) return;
  auto g = dst.grad();
  for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, double sign_b,
                          bool multiply) {
  require_same(op, a, b);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = multiply ? av[i] * bv[i] : av[i] + sign_b * bv[i];
  }
  const bool track = needs_grad({&a, &b});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a, b}, y, [a, b, y, sign_b, multiply]() mutable {
      const auto gy = y.grad_view();
      if (multiply) {
        if (a.requires_grad()) {
          auto ga = a.grad();
          const auto bv = b.data();
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (b.requires_grad()) {
          auto gb = b.grad();
          const auto av = a.data();
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
        }
      } else {
        accumulate(a, gy);
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += sign_b * gy[i];
        }
      }
    });
  }
  return y;
}

// Splits a shape around `axis` into (outer, extent, inner) products.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, 1.0, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, -1.0, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary("mul", a, b, 0.0, true); }

Tensor scale(const Tensor& a, double factor) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  const bool track = needs_grad({&a});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a}, y, [a, y, factor]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * factor;
    });
  }
  return y;
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank("add_row", a, 2);
  if (row.rank() != 1 || row.dim(0) != a.dim(1)) throw ShapeError("add_row", a.shape(), row.shape());
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.data();
  const auto rv = row.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] + rv[j];
  const bool track = needs_grad({&a, &row});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a, row}, y, [a, row, y, n, d]() mutable {
      const auto gy = y.grad_view();
      accumulate(a, gy);
      if (row.requires_grad()) {
        auto gr = row.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gr[j] += gy[i * d + j];
      }
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  const bool track = needs_grad({&a, &b});
  Tensor y = make_result({m, n}, std::move(out), track);
  if (track) {
    record({a, b}, y, [a, b, y, m, k, n]() mutable {
      const auto gy = y.grad_view();
      if (a.requires_grad()) {
        auto ga = a.grad();
        const auto bv = b.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = gy.data() + i * n;
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        const auto av = a.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* grow = gy.data() + i * n;
            double* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
      }
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  if (a.dim(1) != b.dim(1)) throw ShapeError("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = av.data() + i * k;
      const double* brow = bv.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] = acc;
    }
  const bool track = needs_grad({&a, &b});
  Tensor y = make_result({m, n}, std::move(out), track);
  if (track) {
    record({a, b}, y, [a, b, y, m, k, n]() mutable {
      const auto gy = y.grad_view();
      const bool ta = a.requires_grad(), tb = b.requires_grad();
      std::span<double> ga, gb;
      if (ta) ga = a.grad();
      if (tb) gb = b.grad();
      const auto av = a.data();
      const auto bv = b.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = gy[i * n + j];
          if (g == 0.0) continue;
          if (ta) {
            double* garow = ga.data() + i * k;
            const double* brow = bv.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) garow[p] += g * brow[p];
          }
          if (tb) {
            double* gbrow = gb.data() + j * k;
            const double* arow = av.data() + i * k;
            for (std::size_t p = 0; p < k; ++p) gbrow[p] += g * arow[p];
          }
        }
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  const bool track = needs_grad({&a});
  Tensor y = make_result({c, r}, std::move(out), track);
  if (track) {
    record({a}, y, [a, y, r, c]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[j * r + i];
    });
  }
  return y;
}

Tensor swap_leading_axes(const Tensor& a) {
  require_rank("swap_leading_axes", a, 3);
  const std::size_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < d0; ++i)
    for (std::size_t j = 0; j < d1; ++j)
      std::copy_n(av.data() + (i * d1 + j) * d2, d2, out.data() + (j * d0 + i) * d2);
  const bool track = needs_grad({&a});
  Tensor y = make_result({d1, d0, d2}, std::move(out), track);
  if (track) {
    record({a}, y, [a, y, d0, d1, d2]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      for (std::size_t i = 0; i < d0; ++i)
        for (std::size_t j = 0; j < d1; ++j)
          for (std::size_t k = 0; k < d2; ++k)
            ga[(i * d1 + j) * d2 + k] += gy[(j * d0 + i) * d2 + k];
    });
  }
  return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  const auto av = a.data();
  const bool track = needs_grad({&a});
  Tensor y = make_result(std::move(shape), std::vector<double>(av.begin(), av.end()), track);
  if (track) {
    record({a}, y, [a, y]() mutable { accumulate(a, y.grad_view()); });
  }
  return y;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat", "axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) ok = false;
    }
    if (!ok) throw ShapeError("concat", ref, s);
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit os = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  bool track = false;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisSplit ps = split_axis(p.shape(), axis);
    const auto pv = p.data();
    for (std::size_t o = 0; o < ps.outer; ++o)
      std::copy_n(pv.data() + o * ps.extent * ps.inner, ps.extent * ps.inner,
                  out.data() + (o * os.extent + offset) * os.inner);
    offset += ps.extent;
    track = track || needs_grad({&p});
  }
  Tensor y = make_result(out_shape, std::move(out), track);
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record(inputs, y, [inputs, offsets, y, axis, os]() mutable {
      const auto gy = y.grad_view();
      for (std::size_t n = 0; n < inputs.size(); ++n) {
        Tensor& p = inputs[n];
        if (!p.requires_grad()) continue;
        const AxisSplit ps = split_axis(p.shape(), axis);
        auto gp = p.grad();
        for (std::size_t o = 0; o < ps.outer; ++o) {
          const double* src = gy.data() + (o * os.extent + offsets[n]) * os.inner;
          double* dst = gp.data() + o * ps.extent * ps.inner;
          for (std::size_t i = 0; i < ps.extent * ps.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin > end || end > a.dim(axis)) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                  ") on axis " + std::to_string(axis) + " of " +
                                  shape_str(a.shape()));
  }
  const AxisSplit as = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  const auto av = a.data();
  std::vector<double> out(as.outer * len * as.inner);
  for (std::size_t o = 0; o < as.outer; ++o)
    std::copy_n(av.data() + (o * as.extent + begin) * as.inner, len * as.inner,
                out.data() + o * len * as.inner);
  const bool track = needs_grad({&a});
  Tensor y = make_result(std::move(out_shape), std::move(out), track);
  if (track) {
    record({a}, y, [a, y, as, begin, len]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      for (std::size_t o = 0; o < as.outer; ++o) {
        double* dst = ga.data() + (o * as.extent + begin) * as.inner;
        const double* src = gy.data() + o * len * as.inner;
        for (std::size_t i = 0; i < len * as.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank("index_rows", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw ShapeError("index_rows", "row " + std::to_string(rows[i]) + " out of range for " +
                                         shape_str(a.shape()));
    }
    std::copy_n(av.data() + rows[i] * d, d, out.data() + i * d);
  }
  const bool track = needs_grad({&a});
  Tensor y = make_result({rows.size(), d}, std::move(out), track);
  if (track) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record({a}, y, [a, y, idx, d]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) ga[idx[i] * d + j] += gy[i * d + j];
    });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw ShapeError("embedding", "id " + std::to_string(ids[i]) + " outside table " +
                                        shape_str(table.shape()));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return index_rows(table, rows);
}

Tensor substitute_rows(const Tensor& a, const Tensor& fill, std::span<const std::uint8_t> masked) {
  require_rank("substitute_rows", a, 2);
  if (fill.rank() != 1 || fill.dim(0) != a.dim(1)) {
    throw ShapeError("substitute_rows", a.shape(), fill.shape());
  }
  if (masked.size() != a.dim(0)) {
    throw ShapeError("substitute_rows", "mask length " + std::to_string(masked.size()) +
                                            " vs rows of " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.data();
  const auto fv = fill.data();
  std::vector<double> out(av.begin(), av.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (masked[i]) std::copy_n(fv.data(), d, out.data() + i * d);
  }
  const bool track = needs_grad({&a, &fill});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    std::vector<std::uint8_t> m(masked.begin(), masked.end());
    record({a, fill}, y, [a, fill, y, m, n, d]() mutable {
      const auto gy = y.grad_view();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < n; ++i)
          if (!m[i])
            for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += gy[i * d + j];
      }
      if (fill.requires_grad()) {
        auto gf = fill.grad();
        for (std::size_t i = 0; i < n; ++i)
          if (m[i])
            for (std::size_t j = 0; j < d; ++j) gf[j] += gy[i * d + j];
      }
    });
  }
  return y;
}

namespace {

Tensor softmax_impl(const char* op, const Tensor& a, bool causal, std::size_t offset) {
  require_rank(op, a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(av.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t limit = causal ? std::min(d, i + offset + 1) : d;
    const double* x = av.data() + i * d;
    double* o = out.data() + i * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      o[j] = std::exp(x[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < limit; ++j) o[j] /= z;
  }
  const bool track = needs_grad({&a});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a}, y, [a, y, n, d]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      const auto yv = y.data();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += gy[i * d + j] * yv[i * d + j];
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += yv[i * d + j] * (gy[i * d + j] - dot);
      }
    });
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& a) { return softmax_impl("softmax", a, false, 0); }

Tensor causal_softmax(const Tensor& a, std::size_t offset) {
  return softmax_impl("causal_softmax", a, true, offset);
}

Tensor log_softmax(const Tensor& a) {
  require_rank("log_softmax", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = av.data() + i * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[j] - lse;
  }
  const bool track = needs_grad({&a});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a}, y, [a, y, n, d]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      const auto yv = y.data();
      for (std::size_t i = 0; i < n; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < d; ++j) gsum += gy[i * d + j];
        for (std::size_t j = 0; j < d; ++j)
          ga[i * d + j] += gy[i * d + j] - std::exp(yv[i * d + j]) * gsum;
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank("layer_norm", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.shape() != Shape{d}) throw ShapeError("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{d}) throw ShapeError("layer_norm", x.shape(), beta.shape());
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> normed(xv.size());
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += r[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed[i * d + j] = (r[j] - mu) * inv_std[i];
      out[i * d + j] = normed[i * d + j] * gv[j] + bv[j];
    }
  }
  const bool track = needs_grad({&x, &gamma, &beta});
  Tensor y = make_result(x.shape(), std::move(out), track);
  if (track) {
    record({x, gamma, beta}, y,
           [x, gamma, beta, y, normed = std::move(normed), inv_std = std::move(inv_std), n,
            d]() mutable {
             const auto gy = y.grad_view();
             const auto gv = gamma.data();
             if (gamma.requires_grad() || beta.requires_grad()) {
               std::span<double> gg, gb;
               if (gamma.requires_grad()) gg = gamma.grad();
               if (beta.requires_grad()) gb = beta.grad();
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t j = 0; j < d; ++j) {
                   if (!gg.empty()) gg[j] += gy[i * d + j] * normed[i * d + j];
                   if (!gb.empty()) gb[j] += gy[i * d + j];
                 }
             }
             if (x.requires_grad()) {
               auto gx = x.grad();
               const double inv_d = 1.0 / static_cast<double>(d);
               for (std::size_t i = 0; i < n; ++i) {
                 double mg = 0.0, mgx = 0.0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double g = gy[i * d + j] * gv[j];
                   mg += g;
                   mgx += g * normed[i * d + j];
                 }
                 mg *= inv_d;
                 mgx *= inv_d;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double g = gy[i * d + j] * gv[j];
                   gx[i * d + j] += inv_std[i] * (g - mg - normed[i * d + j] * mgx);
                 }
               }
             }
           });
  }
  return y;
}

Tensor relu(const Tensor& a) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  const bool track = needs_grad({&a});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a}, y, [a, y]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      const auto av = a.data();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (av[i] > 0.0) ga[i] += gy[i];
    });
  }
  return y;
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
  const bool track = needs_grad({&a});
  Tensor y = make_result(a.shape(), std::move(out), track);
  if (track) {
    record({a}, y, [a, y]() mutable {
      auto ga = a.grad();
      const auto gy = y.grad_view();
      const auto av = a.data();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double x = av[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga[i] += gy[i] * (cdf + x * pdf);
      }
    });
  }
  return y;
}

Tensor dropout(const Tensor& a, double p, std::uint64_t seed) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ShapeError("dropout", "probability must be < 1");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> factor(a.numel());
  for (auto& f : factor) f = keep(rng) ? inv : 0.0;
  return mul(a, Tensor(a.shape(), std::move(factor)));
}

ConvShape conv2d_output_shape(std::size_t in_t, std::size_t in_f, std::size_t kernel,
                              std::size_t stride, std::size_t padding) {
  if (in_t < 1 || in_f < 1 || kernel < 1 || stride < 1) {
    throw ShapeError("conv2d_output_shape", "extents, kernel and stride must be >= 1");
  }
  auto axis = [&](std::size_t in) -> std::size_t {
    const long long span = static_cast<long long>(in + 2 * padding) - static_cast<long long>(kernel);
    if (span < 0) {
      throw ShapeError("conv2d_output_shape",
                       "input extent " + std::to_string(in) + " too small for kernel " +
                           std::to_string(kernel) + " with padding " + std::to_string(padding));
    }
    return static_cast<std::size_t>(span) / stride + 1;
  };
  return {axis(in_t), axis(in_f)};
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  if (w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3)) throw ShapeError("conv2d", x.shape(), w.shape());
  if (b.shape() != Shape{w.dim(0)}) throw ShapeError("conv2d", w.shape(), b.shape());
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const ConvShape os = conv2d_output_shape(h, wd, k, stride, padding);
  const std::size_t oh = os.time, ow = os.freq;
  const auto xv = x.data();
  const auto wv = w.data();
  const auto bv = b.data();
  std::vector<double> out(cout * oh * ow);
  const long long pad = static_cast<long long>(padding);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = bv[co];
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ki = 0; ki < k; ++ki) {
            const long long r = static_cast<long long>(i * stride + ki) - pad;
            if (r < 0 || r >= static_cast<long long>(h)) continue;
            for (std::size_t kj = 0; kj < k; ++kj) {
              const long long c = static_cast<long long>(j * stride + kj) - pad;
              if (c < 0 || c >= static_cast<long long>(wd)) continue;
              acc += xv[(ci * h + r) * wd + c] * wv[((co * cin + ci) * k + ki) * k + kj];
            }
          }
        out[(co * oh + i) * ow + j] = acc;
      }
  const bool track = needs_grad({&x, &w, &b});
  Tensor y = make_result({cout, oh, ow}, std::move(out), track);
  if (track) {
    record({x, w, b}, y, [x, w, b, y, cin, h, wd, cout, k, oh, ow, stride, pad]() mutable {
      const auto gy = y.grad_view();
      const auto xv = x.data();
      const auto wv = w.data();
      std::span<double> gx, gw, gb;
      if (x.requires_grad()) gx = x.grad();
      if (w.requires_grad()) gw = w.grad();
      if (b.requires_grad()) gb = b.grad();
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double g = gy[(co * oh + i) * ow + j];
            if (!gb.empty()) gb[co] += g;
            if (g == 0.0) continue;
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t ki = 0; ki < k; ++ki) {
                const long long r = static_cast<long long>(i * stride + ki) - pad;
                if (r < 0 || r >= static_cast<long long>(h)) continue;
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const long long c = static_cast<long long>(j * stride + kj) - pad;
                  if (c < 0 || c >= static_cast<long long>(wd)) continue;
                  const std::size_t xi = (ci * h + r) * wd + c;
                  const std::size_t wi = ((co * cin + ci) * k + ki) * k + kj;
                  if (!gx.empty()) gx[xi] += g * wv[wi];
                  if (!gw.empty()) gw[wi] += g * xv[xi];
                }
              }
          }
    });
  }
  return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                        std::size_t padding, std::size_t output_padding) {
  require_rank("conv_transpose2d", x, 3);
  require_rank("conv_transpose2d", w, 4);
  if (w.dim(0) != x.dim(0) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv_transpose2d", x.shape(), w.shape());
  }
  if (b.shape() != Shape{w.dim(1)}) throw ShapeError("conv_transpose2d", w.shape(), b.shape());
  if (output_padding >= stride) throw ShapeError("conv_transpose2d", "output_padding must be < stride");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(1), k = w.dim(2);
  const long long oh_l = static_cast<long long>((h - 1) * stride + k + output_padding) -
                         2 * static_cast<long long>(padding);
  const long long ow_l = static_cast<long long>((wd - 1) * stride + k + output_padding) -
                         2 * static_cast<long long>(padding);
  if (oh_l < 1 || ow_l < 1) throw ShapeError("conv_transpose2d", "non-positive output extent");
  const std::size_t oh = static_cast<std::size_t>(oh_l), ow = static_cast<std::size_t>(ow_l);
  const auto xv = x.data();
  const auto wv = w.data();
  const auto bv = b.data();
  std::vector<double> out(cout * oh * ow);
  for (std::size_t co = 0; co < cout; ++co)
    std::fill_n(out.data() + co * oh * ow, oh * ow, bv[co]);
  const long long pad = static_cast<long long>(padding);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j) {
        const double xval = xv[(ci * h + i) * wd + j];
        if (xval == 0.0) continue;
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t ki = 0; ki < k; ++ki) {
            const long long r = static_cast<long long>(i * stride + ki) - pad;
            if (r < 0 || r >= oh_l) continue;
            for (std::size_t kj = 0; kj < k; ++kj) {
              const long long c = static_cast<long long>(j * stride + kj) - pad;
              if (c < 0 || c >= ow_l) continue;
              out[(co * oh + r) * ow + c] += xval * wv[((ci * cout + co) * k + ki) * k + kj];
            }
          }
      }
  const bool track = needs_grad({&x, &w, &b});
  Tensor y = make_result({cout, oh, ow}, std::move(out), track);
  if (track) {
    record({x, w, b}, y, [x, w, b, y, cin, h, wd, cout, k, oh, ow, oh_l, ow_l, stride, pad]() mutable {
      const auto gy = y.grad_view();
      const auto xv = x.data();
      const auto wv = w.data();
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t p = 0; p < oh * ow; ++p) gb[co] += gy[co * oh * ow + p];
      }
      std::span<double> gx, gw;
      if (x.requires_grad()) gx = x.grad();
      if (w.requires_grad()) gw = w.grad();
      if (gx.empty() && gw.empty()) return;
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < wd; ++j) {
            const std::size_t xi = (ci * h + i) * wd + j;
            double acc = 0.0;
            for (std::size_t co = 0; co < cout; ++co)
              for (std::size_t ki = 0; ki < k; ++ki) {
                const long long r = static_cast<long long>(i * stride + ki) - pad;
                if (r < 0 || r >= oh_l) continue;
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const long long c = static_cast<long long>(j * stride + kj) - pad;
                  if (c < 0 || c >= ow_l) continue;
                  const double g = gy[(co * oh + r) * ow + c];
                  const std::size_t wi = ((ci * cout + co) * k + ki) * k + kj;
                  acc += g * wv[wi];
                  if (!gw.empty()) gw[wi] += g * xv[xi];
                }
              }
            if (!gx.empty()) gx[xi] += acc;
          }
    });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  const auto av = a.data();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  const bool track = needs_grad({&a});
  Tensor y = make_result({}, {s}, track);
  if (track) {
    record({a}, y, [a, y]() mutable {
      auto ga = a.grad();
      const double g = y.grad_view()[0];
      for (auto& v : ga) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same("mse", a, b);
  const Tensor d = sub(a, b);
  return mean(mul(d, d));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy", "targets " + std::to_string(targets.size()) +
                                          " vs logits " + shape_str(logits.shape()));
  }
  if (n == 0) throw ShapeError("cross_entropy", "no rows");
  const auto lv = logits.data();
  std::vector<double> probs(n * v);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw ShapeError("cross_entropy", "target " + std::to_string(targets[i]) +
                                            " outside " + std::to_string(v) + " classes");
    }
    const double* x = lv.data() + i * v;
    const double mx = *std::max_element(x, x + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(x[j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    total += mx + std::log(z) - x[targets[i]];
  }
  const bool track = needs_grad({&logits});
  Tensor y = make_result({}, {total / static_cast<double>(n)}, track);
  if (track) {
    std::vector<int> t(targets.begin(), targets.end());
    record({logits}, y, [logits, y, probs = std::move(probs), t, n, v]() mutable {
      auto gl = logits.grad();
      const double g = y.grad_view()[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs[i * v + j];
        gl[i * v + static_cast<std::size_t>(t[i])] -= g;
      }
    });
  }
  return y;
}

Tensor masked_sq_error(const Tensor& pred, const Tensor& target,
                       std::span<const std::uint8_t> rows) {
  require_same("masked_sq_error", pred, target);
  require_rank("masked_sq_error", pred, 2);
  const std::size_t n = pred.dim(0), d = pred.dim(1);
  if (rows.size() != n) {
    throw ShapeError("masked_sq_error", "mask length " + std::to_string(rows.size()) +
                                            " vs rows of " + shape_str(pred.shape()));
  }
  const std::size_t count = static_cast<std::size_t>(std::count_if(
      rows.begin(), rows.end(), [](std::uint8_t m) { return m != 0; }));
  const auto pv = pred.data();
  const auto tv = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows[i]) continue;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = pv[i * d + j] - tv[i * d + j];
      total += e * e;
    }
  }
  const double value = count == 0 ? 0.0 : total / static_cast<double>(count);
  const bool track = needs_grad({&pred, &target}) && count > 0;
  Tensor y = make_result({}, {value}, track);
  if (track) {
    std::vector<std::uint8_t> m(rows.begin(), rows.end());
    record({pred, target}, y, [pred, target, y, m, n, d, count]() mutable {
      const double g = y.grad_view()[0] * 2.0 / static_cast<double>(count);
      const auto pv = pred.data();
      const auto tv = target.data();
      std::span<double> gp, gt;
      if (pred.requires_grad()) gp = pred.grad();
      if (target.requires_grad()) gt = target.grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (!m[i]) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const double e = g * (pv[i * d + j] - tv[i * d + j]);
          if (!gp.empty()) gp[i * d + j] += e;
          if (!gt.empty()) gt[i * d + j] -= e;
        }
      }
    });
  }
  return y;
}

}  // namespace fatspeech::num
