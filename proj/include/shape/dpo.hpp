#pragma once

// Direct preference optimisation on the toy policy.
//
//   r(x, y)  = beta * (log pi_theta(y|x) - log pi_ref(y|x))
//   m        = r(x, y_w) - r(x, y_l)
//   loss     = -log sigmoid(m)
//   dloss/dm = -sigmoid(-m)
//
// The gradient of log pi_theta(y|x) with respect to the logits of row
// (x, y_{k-1}) is onehot(y_k) - softmax(row), summed over positions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shape/core.hpp"
#include "shape/policy.hpp"
#include "shape/rng.hpp"

namespace shape {

struct TrainConfig {
  double beta = 0.1;
  double learning_rate = 0.5;
  int steps = 200;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (!(cfg.beta > 0.0)) throw ValidationError("train.beta must be > 0");
  if (!(cfg.learning_rate >= 0.0)) throw ValidationError("train.learning_rate must be >= 0");
  if (cfg.steps < 1) throw ValidationError("train.steps must be >= 1");
  if (cfg.batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
}

struct EncodedTriplet {
  std::uint64_t context_w = 0;
  std::uint64_t context_l = 0;
  TokenSequence y_w;
  TokenSequence y_l;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int step, const std::string& what)
      : Error("divergence", "training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Bradley-Terry preference probability exp(r_w) / (exp(r_w) + exp(r_l)).
inline double bt_prob(double r_w, double r_l) {
  if (!std::isfinite(r_w) || !std::isfinite(r_l)) {
    throw ValidationError("Bradley-Terry rewards must be finite");
  }
  return sigmoid(r_w - r_l);
}

inline double implicit_reward(double logprob_policy, double logprob_reference, double beta) {
  return beta * (logprob_policy - logprob_reference);
}

inline double implicit_reward(const Policy& policy, const Policy& reference, std::uint64_t context,
                              const TokenSequence& y, double beta) {
  const double r = implicit_reward(seq_logprob(policy, context, y).total,
                                   seq_logprob(reference, context, y).total, beta);
  if (!std::isfinite(r)) throw ValidationError("implicit reward is not finite");
  return r;
}

/// Reference log-probabilities of a triplet (winner, loser). The reference is
/// frozen during a training run, so these are computed once and reused.
struct ReferenceScores {
  double winner = 0.0;
  double loser = 0.0;
};

inline ReferenceScores score_reference(const Policy& reference, const EncodedTriplet& t) {
  return {seq_logprob(reference, t.context_w, t.y_w).total,
          seq_logprob(reference, t.context_l, t.y_l).total};
}

inline double dpo_margin(const Policy& policy, const EncodedTriplet& t, const ReferenceScores& ref,
                         double beta) {
  return implicit_reward(seq_logprob(policy, t.context_w, t.y_w).total, ref.winner, beta) -
         implicit_reward(seq_logprob(policy, t.context_l, t.y_l).total, ref.loser, beta);
}

inline double dpo_margin(const Policy& policy, const Policy& reference, const EncodedTriplet& t,
                         double beta) {
  return dpo_margin(policy, t, score_reference(reference, t), beta);
}

inline double dpo_loss_from_margin(double m) {
  const double loss = softplus(-m);
  if (!std::isfinite(loss)) throw ValidationError("DPO loss is not finite");
  return loss;
}

inline double dpo_loss(const Policy& policy, const Policy& reference, const EncodedTriplet& t,
                       double beta) {
  return dpo_loss_from_margin(dpo_margin(policy, reference, t, beta));
}

/// Adds coeff * d log pi(y|c) / d weights into `grad`.
inline void accumulate_logprob_grad(const Policy& policy, std::uint64_t context,
                                    const TokenSequence& y, double coeff, std::span<double> grad) {
  const auto V = static_cast<std::size_t>(policy.vocab_size());
  std::vector<double> probs(V);
  int prev = policy.bos();
  for (int tok : y.tokens) {
    softmax(policy.row(context, prev), probs);
    const std::size_t base = policy.index(context, prev, 0);
    for (std::size_t v = 0; v < V; ++v) grad[base + v] -= coeff * probs[v];
    grad[base + static_cast<std::size_t>(tok)] += coeff;
    prev = tok;
  }
}

/// Mean-over-batch gradient of the DPO loss. `ref` holds the reference
/// scores aligned with `batch`. Accumulation runs in batch order.
inline std::vector<double> dpo_grad(const Policy& policy, std::span<const EncodedTriplet> batch,
                                    std::span<const ReferenceScores> ref, double beta) {
  if (batch.empty()) throw ValidationError("DPO gradient needs a non-empty batch");
  std::vector<double> grad(policy.weights().size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    const double m = dpo_margin(policy, t, ref[i], beta);
    const double coeff = beta * sigmoid(-m) * inv_n;
    accumulate_logprob_grad(policy, t.context_w, t.y_w, -coeff, grad);
    accumulate_logprob_grad(policy, t.context_l, t.y_l, coeff, grad);
  }
  return grad;
}

inline std::vector<double> dpo_grad(const Policy& policy, const Policy& reference,
                                    std::span<const EncodedTriplet> batch, double beta) {
  std::vector<ReferenceScores> ref;
  ref.reserve(batch.size());
  for (const auto& t : batch) ref.push_back(score_reference(reference, t));
  return dpo_grad(policy, batch, ref, beta);
}

inline double mean_loss(const Policy& policy, const Policy& reference,
                        std::span<const EncodedTriplet> batch, double beta) {
  if (batch.empty()) throw ValidationError("mean loss needs a non-empty batch");
  double sum = 0.0;
  for (const auto& t : batch) sum += dpo_loss(policy, reference, t, beta);
  return sum / static_cast<double>(batch.size());
}

inline double mean_margin(const Policy& policy, const Policy& reference,
                          std::span<const EncodedTriplet> data, double beta) {
  if (data.empty()) throw ValidationError("mean margin needs a non-empty dataset");
  double sum = 0.0;
  for (const auto& t : data) sum += dpo_margin(policy, reference, t, beta);
  return sum / static_cast<double>(data.size());
}

struct TrainResult {
  Policy policy;
  std::vector<double> trajectory;  // mean batch loss before each step's update
};

/// Plain gradient descent. Batches are consecutive slices of a seeded
/// permutation that is redrawn each epoch; with batch_size >= N every step
/// sees the whole dataset.
inline TrainResult train(const Policy& init, const Policy& reference,
                         std::span<const EncodedTriplet> data, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (data.empty()) throw ValidationError("training needs a non-empty dataset");
  if (init.vocab_size() != reference.vocab_size() || init.contexts() != reference.contexts()) {
    throw ValidationError("policy and reference shapes differ");
  }

  std::vector<ReferenceScores> ref_cache;
  ref_cache.reserve(data.size());
  for (const auto& t : data) ref_cache.push_back(score_reference(reference, t));

  TrainResult out{init, {}};
  out.trajectory.reserve(static_cast<std::size_t>(cfg.steps));
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = data.size();  // forces a shuffle on the first step
  const std::size_t batch_n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), data.size());

  std::vector<EncodedTriplet> batch;
  std::vector<ReferenceScores> batch_ref;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    batch_ref.clear();
    while (batch.size() < batch_n) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size() - 1; i > 0; --i) {
          std::swap(order[i], order[rng.below(i + 1)]);
        }
        cursor = 0;
      }
      batch.push_back(data[order[cursor]]);
      batch_ref.push_back(ref_cache[order[cursor]]);
      ++cursor;
    }

    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      loss += softplus(-dpo_margin(out.policy, batch[i], batch_ref[i], cfg.beta));
    }
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss)) throw TrainingDiverged(step, "non-finite mean loss");
    out.trajectory.push_back(loss);

    const auto grad = dpo_grad(out.policy, batch, batch_ref, cfg.beta);
    auto& w = out.policy.mutable_weights();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.learning_rate * grad[i];
    if (!std::all_of(w.begin(), w.end(), [](double v) { return std::isfinite(v); })) {
      throw TrainingDiverged(step, "non-finite weights after update");
    }
  }
  return out;
}

/// pi_ref bookkeeping across iterations: the reference starts at the
/// initial model and becomes each newly trained policy in turn.
class ReferenceChain {
 public:
  explicit ReferenceChain(Policy initial)
      : reference_(std::move(initial)), ids_{reference_.checkpoint_id()} {}

  const Policy& reference() const noexcept { return reference_; }
  const std::string& reference_id() const noexcept { return ids_.back(); }
  /// Reference ids in the order they were installed, initial model first.
  const std::vector<std::string>& history() const noexcept { return ids_; }

  void set_trained(Policy trained) { trained_ = std::move(trained); }
  bool has_trained() const noexcept { return trained_.has_value(); }

  const std::string& update_reference() {
    if (!trained_) throw ValidationError("update_reference called before any training completed");
    reference_ = std::move(*trained_);
    trained_.reset();
    ids_.push_back(reference_.checkpoint_id());
    return ids_.back();
  }

 private:
  Policy reference_;
  std::vector<std::string> ids_;
  std::optional<Policy> trained_;
};

}  // namespace shape
