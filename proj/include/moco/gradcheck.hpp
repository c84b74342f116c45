#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "moco/errors.hpp"

namespace moco {

// Scalar function of a flat parameter vector. When `grad` is non-empty the
// function also writes its analytic gradient there.
using DifferentiableFunction = std::function<double(std::span<const double> params, std::span<double> grad)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-h probe changed the branch signature; central
  // differences straddle a kink there, so they are replaced by further samples.
  std::size_t skipped = 0;
};

// Value plus the branch signature of the evaluation (see Tape::branch_signature).
struct Evaluation {
  double value = 0.0;
  std::uint64_t branch = 0;
};
using PiecewiseFunction = std::function<Evaluation(std::span<const double> params, std::span<double> grad)>;

// Compares the analytic gradient with central differences
//   |g - (f(p+h) - f(p-h)) / 2h| / max(|g|, 1e-8)
// on `samples` coordinates drawn without replacement (all coordinates when
// samples >= params.size()). Coordinates whose probes land on a different
// smooth piece than p are counted in `skipped` and do not use up a sample.
inline GradCheckResult grad_check(const PiecewiseFunction& f, std::vector<double> params, double h,
                                  std::size_t samples, std::uint64_t seed = 0) {
  if (!(h > 0.0)) throw ConfigError("grad_check: step h must be positive");
  for (double p : params)
    if (!std::isfinite(p)) throw NumericError("grad_check: non-finite parameter");
  std::vector<double> analytic(params.size(), 0.0);
  const Evaluation e0 = f(params, analytic);
  if (!std::isfinite(e0.value)) throw NumericError("grad_check: non-finite function value");

  std::vector<std::size_t> idx(params.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (samples < idx.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
  }

  GradCheckResult r;
  for (std::size_t i : idx) {
    if (r.checked >= samples) break;
    const double p = params[i];
    params[i] = p + h;
    const Evaluation fp = f(params, {});
    Evaluation fm = fp;
    if (fp.branch == e0.branch) {
      params[i] = p - h;
      fm = f(params, {});
    }
    params[i] = p;
    if (!std::isfinite(fp.value) || !std::isfinite(fm.value))
      throw NumericError("grad_check: non-finite function value");
    if (fp.branch != e0.branch || fm.branch != e0.branch) {
      ++r.skipped;
      continue;
    }
    const double numeric = (fp.value - fm.value) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), 1e-8);
    if (err > r.max_rel_error || r.checked == 0) {
      r.max_rel_error = err;
      r.worst_index = i;
      r.worst_analytic = analytic[i];
      r.worst_numeric = numeric;
    }
    ++r.checked;
  }
  return r;
}

inline GradCheckResult grad_check(const DifferentiableFunction& f, std::vector<double> params, double h,
                                  std::size_t samples, std::uint64_t seed = 0) {
  PiecewiseFunction g = [&f](std::span<const double> p, std::span<double> grad) {
    return Evaluation{f(p, grad), 0};
  };
  return grad_check(g, std::move(params), h, samples, seed);
}

}  // namespace moco
