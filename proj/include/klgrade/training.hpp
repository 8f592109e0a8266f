#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "klgrade/network.hpp"

namespace klg {

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainConfig {
  std::size_t epochs = 16;
  std::size_t batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double clip_norm = 5.0;  // global gradient-norm clip; 0 disables
  // "cosine": per-epoch half-cosine decay from learning_rate toward 0;
  // "constant": learning_rate throughout.
  std::string lr_schedule = "cosine";
  std::uint64_t seed = 1;
  std::function<void(const std::string&)> log;  // per-epoch progress lines
};

struct TrainResult {
  std::vector<EpochStats> history;  // entry 0 describes the initial weights
  std::size_t best_epoch = 0;
};

// Minibatch SGD over n_train items. batch_loss builds the loss for a set of
// item positions; val_loss (optional) scores the current weights. The
// parameters of `net` end at the best-validation epoch (or the last epoch
// when there is no validation function).
using BatchLoss = std::function<Tensor(const Network&, std::span<const std::size_t>)>;
using ValLoss = std::function<double(const Network&)>;

TrainResult run_training(Network& net, std::size_t n_train, const TrainConfig& config,
                         const BatchLoss& batch_loss, const ValLoss& val_loss,
                         const std::string& label);

void validate(const TrainConfig& config);

// Learning rate used during `epoch` (1-based).
double scheduled_learning_rate(const TrainConfig& config, std::size_t epoch);

}  // namespace klg
