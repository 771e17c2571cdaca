#include "fatspeech/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace fatspeech::num {

namespace {

double eval_scalar(const std::function<Tensor()>& fn) {
  NoGradScope no_grad;
  const Tensor out = fn();
  if (out.numel() != 1) {
    throw ShapeError("grad_check", "function must return a scalar, got " + shape_str(out.shape()));
  }
  return out.item();
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " coords=" << entries.size()
     << " max_rel_error=" << max_rel_error;
  return os.str();
}

GradCheckReport grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> points,
                           const GradCheckOptions& options) {
  std::vector<bool> previous(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) {
    previous[p] = points[p].requires_grad();
    points[p].set_requires_grad(true);
    points[p].zero_grad();
  }

  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor out = fn();
    if (out.numel() != 1) {
      throw ShapeError("grad_check", "function must return a scalar, got " + shape_str(out.shape()));
    }
    tape.backward(out);
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t p = 0; p < points.size(); ++p) {
    Tensor& t = points[p];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords != 0 && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto values = t.mutable_data();
    for (std::size_t c : coords) {
      const double original = values[c];
      values[c] = original + options.eps;
      const double up = eval_scalar(fn);
      values[c] = original - options.eps;
      const double down = eval_scalar(fn);
      values[c] = original;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), options.floor});
      const double rel = std::abs(analytic[c] - numeric) / denom;
      report.entries.push_back({p, c, analytic[c], numeric, rel});
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  for (std::size_t p = 0; p < points.size(); ++p) {
    points[p].zero_grad();
    points[p].set_requires_grad(previous[p]);
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor point,
                           const GradCheckOptions& options) {
  return grad_check([&]() { return fn(point); }, {point}, options);
}

}  // namespace fatspeech::num
