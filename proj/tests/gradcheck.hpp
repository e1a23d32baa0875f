#pragma once

// Central finite-difference oracle for tape gradients. Lives in test code;
// it never touches the backward implementation it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "dpnav/tensor.hpp"

namespace dpnav::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// loss_fn must evaluate the same function on every call (re-seed any RNG it
// uses internally). Entries lists (tensor, flat index) pairs to probe; an
// empty list means every entry of every parameter.
inline GradCheckResult gradcheck(
    std::vector<Tensor> params, const std::function<Tensor(Tape&)>& loss_fn,
    double h = 1e-5,
    const std::vector<std::pair<std::size_t, std::size_t>>& entries = {}) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  Tensor loss = loss_fn(tape);
  tape.backward(loss);

  std::vector<std::pair<std::size_t, std::size_t>> todo = entries;
  if (todo.empty())
    for (std::size_t pi = 0; pi < params.size(); ++pi)
      for (std::size_t i = 0; i < params[pi].size(); ++i) todo.emplace_back(pi, i);

  GradCheckResult res;
  for (auto [pi, i] : todo) {
    Tensor& p = params[pi];
    double g_ad = p.grad()[i];
    double orig = p.values()[i];

    p.values()[i] = orig + h;
    Tape tp(false);
    double fp = loss_fn(tp).data()[0];
    p.values()[i] = orig - h;
    Tape tm(false);
    double fm = loss_fn(tm).data()[0];
    p.values()[i] = orig;

    double g_fd = (fp - fm) / (2.0 * h);
    double rel = std::fabs(g_ad - g_fd) / std::max(1.0, std::fabs(g_fd));
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace dpnav::testing
