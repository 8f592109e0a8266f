#include "klgrade/optim.hpp"

#include "klgrade/error.hpp"

namespace klg {

Sgd::Sgd(double learning_rate, double momentum) : lr_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0)) throw ValueError("learning rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ValueError("momentum must be in [0, 1)");
}

void Sgd::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw ValueError("learning rate must be > 0");
  lr_ = lr;
}

void Sgd::step(std::vector<Tensor>& params) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.size(), 0.0);
  }
  if (velocity_.size() != params.size()) throw ValueError("optimizer bound to a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto g = params[i].grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      w[j] -= lr_ * v[j];
    }
  }
}

}  // namespace klg
