#include "klgrade/training.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "klgrade/error.hpp"
#include "klgrade/optim.hpp"
#include "klgrade/rng.hpp"

namespace klg {

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw ValueError("batch_size must be positive");
  if (!(c.learning_rate > 0.0)) throw ValueError("learning_rate must be > 0");
  if (c.momentum < 0.0 || c.momentum >= 1.0) throw ValueError("momentum must be in [0,1)");
  if (c.clip_norm < 0.0) throw ValueError("clip_norm must be >= 0");
  if (c.lr_schedule != "cosine" && c.lr_schedule != "constant")
    throw ValueError("lr_schedule must be cosine or constant");
}

double scheduled_learning_rate(const TrainConfig& c, std::size_t epoch) {
  if (c.lr_schedule == "constant" || c.epochs == 0) return c.learning_rate;
  const double t = static_cast<double>(epoch - 1) / static_cast<double>(c.epochs);
  return c.learning_rate * 0.5 * (1.0 + std::cos(M_PI * t));
}

namespace {

void clip_gradients(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || !std::isfinite(norm)) return;
  const double s = max_norm / norm;
  for (auto& p : params)
    for (double& g : p.grad()) g *= s;
}

std::vector<std::vector<double>> snapshot(const Network& net) {
  std::vector<std::vector<double>> out;
  for (const auto& p : net.parameters()) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(Network& net, const std::vector<std::vector<double>>& state) {
  auto& params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(state[i].begin(), state[i].end(), params[i].data().begin());
}

}  // namespace

TrainResult run_training(Network& net, std::size_t n_train, const TrainConfig& config,
                         const BatchLoss& batch_loss, const ValLoss& val_loss,
                         const std::string& label) {
  validate(config);
  TrainResult result;
  if (config.epochs == 0) return result;
  if (n_train == 0) throw ValueError(label + ": empty training set");

  Sgd optimizer(config.learning_rate, config.momentum);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  double best = val_loss ? val_loss(net) : INFINITY;
  result.history.push_back({0, NAN, val_loss ? best : NAN});
  auto best_state = snapshot(net);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    optimizer.set_learning_rate(scheduled_learning_rate(config, epoch));
    Rng rng(derive_seed(config.seed, epoch, 0xE90C));
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    for (std::size_t start = 0; start < n_train; start += config.batch_size) {
      const std::size_t stop = std::min(n_train, start + config.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      net.zero_grad();
      Tensor loss = batch_loss(net, batch);
      loss.backward();
      clip_gradients(net.parameters(), config.clip_norm);
      optimizer.step(net.parameters());
      total += loss.item() * static_cast<double>(batch.size());
    }
    EpochStats stats{epoch, total / static_cast<double>(n_train), NAN};
    if (val_loss) {
      stats.val_loss = val_loss(net);
      if (stats.val_loss < best) {
        best = stats.val_loss;
        best_state = snapshot(net);
        result.best_epoch = epoch;
      }
    } else {
      best_state = snapshot(net);
      result.best_epoch = epoch;
    }
    result.history.push_back(stats);
    if (config.log) {
      char line[160];
      std::snprintf(line, sizeof line, "%s epoch %zu/%zu train_loss %.5f val_loss %.5f", label.c_str(),
                    epoch, config.epochs, stats.train_loss, stats.val_loss);
      config.log(line);
    }
  }
  restore(net, best_state);
  return result;
}

}  // namespace klg
