#pragma once

// Tabular autoregressive toy policy: logits indexed by
// [context][previous token][next token], with previous-token index V used for
// begin-of-sequence. There is no end token; generation runs to max_tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shape/core.hpp"
#include "shape/digest.hpp"
#include "shape/rng.hpp"

namespace shape {

class Policy {
 public:
  Policy() = default;
  Policy(int vocab_size, int contexts) : vocab_(vocab_size), contexts_(contexts) {
    if (vocab_size < 1) throw ValidationError("policy vocabulary size must be >= 1");
    if (contexts < 1) throw ValidationError("policy context count must be >= 1");
    weights_.assign(static_cast<std::size_t>(contexts) * (vocab_size + 1) * vocab_size, 0.0);
  }

  Policy(int vocab_size, int contexts, std::vector<double> weights)
      : Policy(vocab_size, contexts) {
    if (weights.size() != weights_.size()) {
      throw ValidationError("policy weight array has " + std::to_string(weights.size()) +
                            " entries, expected " + std::to_string(weights_.size()));
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (!std::isfinite(weights[i])) {
        throw ValidationError("policy weight " + std::to_string(i) + " is not finite");
      }
    }
    weights_ = std::move(weights);
  }

  /// Weights drawn i.i.d. from N(0, scale^2).
  static Policy random(int vocab_size, int contexts, double scale, Rng& rng) {
    Policy p(vocab_size, contexts);
    for (double& w : p.weights_) w = scale * rng.normal();
    return p;
  }

  int vocab_size() const noexcept { return vocab_; }
  int contexts() const noexcept { return contexts_; }
  int bos() const noexcept { return vocab_; }

  std::size_t index(std::uint64_t context, int prev, int next) const noexcept {
    return (static_cast<std::size_t>(context) * (vocab_ + 1) + prev) * vocab_ + next;
  }
  std::span<const double> row(std::uint64_t context, int prev) const {
    return {weights_.data() + index(context, prev, 0), static_cast<std::size_t>(vocab_)};
  }

  std::span<const double> weights() const noexcept { return weights_; }
  std::vector<double>& mutable_weights() noexcept { return weights_; }

  /// SHA-256 over shape and weights.
  std::string checkpoint_id() const {
    Sha256 h;
    h.update("shape-toy-policy/1");
    h.update_u64(static_cast<std::uint64_t>(vocab_)).update_u64(static_cast<std::uint64_t>(contexts_));
    for (double w : weights_) h.update_f64(w);
    return h.hex();
  }

  friend bool operator==(const Policy&, const Policy&) = default;

 private:
  int vocab_ = 0;
  int contexts_ = 0;
  std::vector<double> weights_;
};

/// Log-softmax of `logits` into `out`, as (l - max) - log1p(rest) so a
/// dominant logit keeps full precision.
inline void log_softmax(std::span<const double> logits, std::span<double> out) {
  const auto top = std::max_element(logits.begin(), logits.end());
  const double mx = *top;
  double rest = 0.0;
  for (auto it = logits.begin(); it != logits.end(); ++it) {
    if (it != top) rest += std::exp(*it - mx);
  }
  const double offset = std::log1p(rest);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - mx) - offset;
}

inline void softmax(std::span<const double> logits, std::span<double> out) {
  log_softmax(logits, out);
  for (double& v : out) v = std::exp(v);
}

struct SequenceScore {
  std::vector<double> per_token;
  double total = 0.0;  // left-to-right sum of per_token
};

inline void check_context(const Policy& policy, std::uint64_t context) {
  if (context >= static_cast<std::uint64_t>(policy.contexts())) {
    throw ValidationError("context " + std::to_string(context) + " outside [0, " +
                          std::to_string(policy.contexts()) + ")");
  }
}

/// log pi(y | c) = sum_k log softmax(w[c][y_{k-1}])[y_k] with y_0 = BOS.
/// `start_prev` lets a suffix be scored as the continuation of a prefix.
inline SequenceScore seq_logprob(const Policy& policy, std::uint64_t context,
                                 const TokenSequence& y, int start_prev = -1) {
  check_context(policy, context);
  validate_tokens(y);
  if (y.vocab_size != policy.vocab_size()) {
    throw ValidationError("sequence vocabulary " + std::to_string(y.vocab_size) +
                          " does not match policy vocabulary " +
                          std::to_string(policy.vocab_size()));
  }
  SequenceScore s;
  s.per_token.reserve(y.size());
  std::vector<double> lp(static_cast<std::size_t>(policy.vocab_size()));
  int prev = start_prev < 0 ? policy.bos() : start_prev;
  for (int tok : y.tokens) {
    log_softmax(policy.row(context, prev), lp);
    s.per_token.push_back(lp[static_cast<std::size_t>(tok)]);
    s.total += s.per_token.back();
    prev = tok;
  }
  return s;
}

/// Ancestral sampling. Logits are divided by `temperature`; temperature 0
/// takes the argmax with the lowest index winning ties.
inline TokenSequence toy_generate(const Policy& policy, std::uint64_t context, int max_tokens,
                                  double temperature, Rng& rng) {
  check_context(policy, context);
  if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
  if (!(temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
  const auto V = static_cast<std::size_t>(policy.vocab_size());
  TokenSequence out{{}, policy.vocab_size()};
  out.tokens.reserve(static_cast<std::size_t>(max_tokens));
  std::vector<double> scaled(V), probs(V);
  int prev = policy.bos();
  for (int k = 0; k < max_tokens; ++k) {
    const auto logits = policy.row(context, prev);
    int next = 0;
    if (temperature == 0.0) {
      next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      for (std::size_t v = 0; v < V; ++v) scaled[v] = logits[v] / temperature;
      softmax(scaled, probs);
      const double u = rng.uniform();
      double acc = 0.0;
      next = static_cast<int>(V) - 1;
      for (std::size_t v = 0; v < V; ++v) {
        acc += probs[v];
        if (u < acc) {
          next = static_cast<int>(v);
          break;
        }
      }
    }
    out.tokens.push_back(next);
    prev = next;
  }
  return out;
}

/// Context for the summary path: an order-sensitive 64-bit hash of the
/// concatenated candidate streams and the prompt tag, reduced modulo C.
inline std::uint64_t toy_context_for_summary(std::span<const TokenSequence> candidates,
                                             std::uint64_t prompt_tag, int contexts) {
  if (candidates.empty()) throw ValidationError("summary needs at least one candidate");
  if (contexts < 1) throw ValidationError("context count must be >= 1");
  constexpr std::uint64_t kSeparator = 0xfffffffffffffffeULL;
  std::uint64_t h = 0x5348415045ULL;
  for (const auto& cand : candidates) {
    for (int tok : cand.tokens) h = mix64(h, static_cast<std::uint64_t>(tok));
    h = mix64(h, kSeparator);
  }
  h = mix64(h, prompt_tag);
  return h % static_cast<std::uint64_t>(contexts);
}

// Toy answers travel through the text pipeline as "t<id>" words.

inline std::string tokens_to_text(const TokenSequence& seq) {
  std::string out;
  for (std::size_t k = 0; k < seq.tokens.size(); ++k) {
    if (k) out.push_back(' ');
    out += 't' + std::to_string(seq.tokens[k]);
  }
  return out;
}

inline TokenSequence text_to_tokens(std::string_view text, int vocab_size) {
  TokenSequence seq{{}, vocab_size};
  for (auto word : whitespace_tokens(text)) {
    bool ok = word.size() >= 2 && word[0] == 't';
    int value = 0;
    for (std::size_t i = 1; ok && i < word.size(); ++i) {
      if (word[i] < '0' || word[i] > '9' || value > 1'000'000) ok = false;
      else value = value * 10 + (word[i] - '0');
    }
    if (!ok) throw ValidationError("'" + std::string(word) + "' is not a toy token");
    seq.tokens.push_back(value);
  }
  validate_tokens(seq);
  return seq;
}

}  // namespace shape
