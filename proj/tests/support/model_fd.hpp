#pragma once

// Finite-difference checks of model outputs with respect to named parameters.

#include "idt/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace idt::testing {

using model::Binding;
using model::Model;
using model::ParamStore;
using nd::Tape;
using nd::Tensor;
using nd::Var;

using BlockFn = std::function<Var(const Binding&)>;

// Relative error of d(f)/d(params) restricted to `names` against central differences.
inline double param_fd_error(const Model& m, const std::vector<std::string>& names, const BlockFn& f,
                             std::size_t coords_per_tensor, double h = 1e-5) {
  Tape tape;
  const Binding b(tape, m.params, true);
  const Var out = f(b);
  std::vector<Var> vars;
  for (const auto& n : names) vars.push_back(b[n]);
  const auto analytic = tape.grad(out, vars);

  auto eval = [&](const ParamStore& ps) {
    Tape t;
    const Binding bb(t, ps, false);
    return f(bb).value().item();
  };
  std::mt19937_64 rng(99);
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const Tensor& base = m.params.get(names[k]);
    for (std::size_t s = 0; s < std::min(coords_per_tensor, base.size()); ++s) {
      const std::size_t j = rng() % base.size();
      auto at = [&](double delta) {
        ParamStore ps = m.params;
        auto d = base.to_vector();
        d[j] += delta;
        ps.set(names[k], Tensor(base.shape(), d));
        return eval(ps);
      };
      const double num = (at(h) - at(-h)) / (2 * h);
      const double ana = analytic[k][j];
      diff2 += (num - ana) * (num - ana);
      a2 += ana * ana;
      n2 += num * num;
    }
  }
  return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-10});
}

inline Var weighted_sum(Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> w(x.size());
  for (auto& v : w) v = u(rng);
  return nd::sum(nd::mul(x, x.tape->constant(Tensor(x.shape(), w))));
}

}  // namespace idt::testing
