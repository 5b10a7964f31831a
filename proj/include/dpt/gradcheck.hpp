#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked_elements = 0;
  std::size_t refined_elements = 0;
  bool pass = false;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << " max_rel_err=" << max_rel_err << " (leaf " << worst_leaf
       << " elem " << worst_index << ": analytic=" << worst_analytic
       << " numeric=" << worst_numeric << ", " << checked_elements << " elements";
    if (refined_elements) os << ", " << refined_elements << " refined";
    os << ")";
    return os.str();
  }
};

// Central-difference check of a scalar-valued computation. `f` must evaluate
// the same function whether or not its inputs are tape-tracked; tracking rides
// on the tensors themselves. Double precision only.
//
// `sample_stride` > 1 checks every n-th element of each leaf (always including
// element 0); 1 checks everything.
//
// An element failing at the base step is re-estimated at h/10 and h/100 and
// judged by its best estimate: finite-difference truncation error (including
// ReLU-kink contamination) shrinks with h, while a wrong backward rule
// disagrees at every step size.
inline GradcheckReport gradcheck(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    const std::vector<Tensor<double>>& leaves, double h = 1e-5, double tol = 1e-4,
    std::size_t sample_stride = 1, double atol = 1e-9) {
  GradTape<double> tape;
  std::vector<Tensor<double>> tracked;
  tracked.reserve(leaves.size());
  for (const auto& t : leaves) tracked.push_back(tape.leaf(t));
  Tensor<double> loss = f(tracked);
  check_shape(loss.numel() == 1, "gradcheck: f must return a scalar");
  if (!std::isfinite(loss.at(0))) throw NumericError("gradcheck: non-finite loss");
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (const auto& t : tracked) analytic.push_back(tape.grad(t));

  GradcheckReport rep;
  if (sample_stride == 0) sample_stride = 1;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t e = 0; e < leaves[li].numel(); e += sample_stride) {
      auto estimate = [&](double step) {
        auto probe = leaves;  // payloads shared; mutation copies one leaf
        double* vals = probe[li].mutable_data();
        double orig = vals[e];
        vals[e] = orig + step;
        double lp = f(probe).at(0);
        vals[e] = orig - step;
        double lm = f(probe).at(0);
        vals[e] = orig;
        if (!std::isfinite(lp) || !std::isfinite(lm))
          throw NumericError("gradcheck: non-finite loss at perturbation");
        return (lp - lm) / (2.0 * step);
      };
      double a = analytic[li].at(e);
      auto rel_of = [&](double numeric) {
        double diff = std::abs(a - numeric);
        return diff <= atol ? 0.0 : diff / std::max(std::abs(a), std::abs(numeric));
      };
      double numeric = estimate(h);
      double rel = rel_of(numeric);
      if (rel > tol) {
        ++rep.refined_elements;
        for (double step : {h / 10.0, h / 100.0}) {
          double refined = estimate(step);
          if (rel_of(refined) < rel) {
            numeric = refined;
            rel = rel_of(refined);
          }
          if (rel <= tol) break;
        }
      }
      ++rep.checked_elements;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_leaf = li;
        rep.worst_index = e;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace dpt
