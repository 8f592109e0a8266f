#pragma once

#include <vector>

#include "klgrade/tensor.hpp"

namespace klg {

// SGD with heavy-ball momentum: v <- mu*v + grad; w <- w - lr*v.
class Sgd {
 public:
  Sgd(double learning_rate, double momentum = 0.9);

  void step(std::vector<Tensor>& params);
  void set_learning_rate(double lr);
  double learning_rate() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace klg
