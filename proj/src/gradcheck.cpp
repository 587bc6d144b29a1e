#include "maskft/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace maskft::ad {
namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Tensor copy(x.shape(), x.values());
  const Var out = f(tape, tape.constant(std::move(copy)));
  if (out.size() != 1) throw ShapeError("finite-difference target must be scalar, got " + shape_str(out.shape()));
  return out.value()[0];
}

}  // namespace

Tensor central_difference(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  Tensor probe(x.shape(), x.values());
  Tensor numeric(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = evaluate(f, probe);
    probe[i] = orig - h;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    numeric[i] = (up - down) / (2.0 * h);
  }
  return numeric;
}

Tensor analytic_gradient(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Tensor copy(x.shape(), x.values());
  copy.set_requires_grad(true);
  const Var in = tape.leaf(std::move(copy));
  const Var out = f(tape, in);
  if (!std::isfinite(out.value()[0])) throw std::domain_error("function value is not finite");
  tape.backward(out);
  Tensor g(x.shape());
  const auto gs = tape.grad(in);
  if (!gs.empty()) std::copy(gs.begin(), gs.end(), g.data().begin());
  return g;
}

double finite_difference_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  if (!std::isfinite(evaluate(f, x))) throw std::domain_error("function value is not finite");
  const Tensor analytic = analytic_gradient(f, x);
  const Tensor numeric = central_difference(f, x, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace maskft::ad
