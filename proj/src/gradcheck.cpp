#include "cimdd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cimdd/error.hpp"

namespace cimdd {

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

namespace {
double eval_loss(const LossFn& f) {
  Tape tape;
  Var loss = f(tape);
  if (loss.value().numel() != 1) throw ContractError("grad_check: loss must be scalar");
  return loss.value()[0];
}
}  // namespace

GradCheckReport grad_check(const LossFn& f, const std::vector<Parameter*>& params,
                           const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  for (auto* p : params) p->zero_grad();
  double base = 0.0;
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
    base = loss.value()[0];
  }
  if (eval_loss(f) != base) throw DeterminismError("grad_check: loss differs between two evaluations");

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  for (auto* p : params) {
    GradCheckEntry entry{p->name, 0.0, 0};
    std::vector<std::size_t> idx(p->value.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.max_entries_per_param && idx.size() > opts.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_entries_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (auto i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + opts.eps;
      const double up = eval_loss(f);
      p->value[i] = orig - opts.eps;
      const double down = eval_loss(f);
      p->value[i] = orig;
      const double fd = (up - down) / (2.0 * opts.eps);
      const double ad = p->grad[i];
      const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(ad - fd) / denom);
      ++entry.checked;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cimdd
