#pragma once

// Preference-data factory and the iterative alignment loop.
//
// shape mode, per sample x:
//   y_l  <- backend(x)
//   y_j  <- backend(f_j(x))            j = 1..M
//   y_w  <- summarize(y_1..y_M, prompt)
// sheva mode (baseline):
//   y_w  <- backend(x),  y_l <- backend(f(x))

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "shape/augment.hpp"
#include "shape/backend.hpp"
#include "shape/core.hpp"
#include "shape/digest.hpp"
#include "shape/dpo.hpp"
#include "shape/image_io.hpp"
#include "shape/policy.hpp"
#include "shape/remote.hpp"
#include "shape/rng.hpp"

namespace shape {

enum class ForgeMode { kSheva, kShape };

inline const char* to_string(ForgeMode m) { return m == ForgeMode::kShape ? "shape" : "sheva"; }

struct ForgeConfig {
  std::vector<AugmentationSpec> aug_specs = bank_preset("candidate-3");
  std::string prompt = kSummaryPrompt;
  ForgeMode mode = ForgeMode::kShape;
  int iteration = 1;
  bool drop_degenerate = false;
};

inline void validate_forge_config(const ForgeConfig& cfg) {
  if (cfg.iteration < 1) throw ValidationError("forge iteration must be >= 1");
  if (cfg.aug_specs.empty()) throw ValidationError("forge needs at least one augmentation");
  for (const auto& s : cfg.aug_specs) validate_spec(s);
  if (cfg.mode == ForgeMode::kShape && cfg.prompt.empty()) {
    throw ValidationError("forge prompt must be non-empty in shape mode");
  }
  if (cfg.mode == ForgeMode::kSheva && cfg.aug_specs.size() != 1) {
    throw ValidationError("sheva mode takes exactly one augmentation, got " +
                          std::to_string(cfg.aug_specs.size()));
  }
}

enum class FailurePolicy { kFailFast, kSkipAndRecord };

struct SampleFailure {
  std::size_t index = 0;
  std::string sample_id;
  std::string message;
};

struct PreferenceDataset {
  std::vector<PreferenceTriplet> triplets;
  std::string source_digest;
  int iteration = 1;
  std::size_t degenerate = 0;  // triplets with winner == loser
  std::vector<SampleFailure> failures;
};

inline ImageRef image_ref(const Sample& s) {
  if (const auto* c = std::get_if<ToyContext>(&s.image)) return c->id;
  if (const auto* p = std::get_if<ImagePath>(&s.image)) return p->path;
  return "sha256:" + image_digest(std::get<ImageTensor>(s.image));
}

inline std::string source_digest(std::span<const Sample> samples) {
  Sha256 h;
  for (const auto& s : samples) {
    h.update(s.id).update_u64(0);
    h.update(s.question).update_u64(0);
    const ImageRef ref = image_ref(s);
    if (const auto* c = std::get_if<std::uint64_t>(&ref)) h.update("ctx").update_u64(*c);
    else h.update(std::get<std::string>(ref)).update_u64(0);
  }
  return h.hex();
}

namespace detail {

inline std::string call_answer(Backend& backend, const ForgeInput& in, Rng rng,
                               const std::string& what) {
  try {
    return backend.answer(in, rng);
  } catch (const Error& e) {
    throw BackendError("sample " + in.sample->id + ", " + what + ": " + e.what());
  }
}

}  // namespace detail

/// Builds one triplet. Random streams: augmentation j uses
/// rng.derive("aug", j), its answer rng.derive("candidate", j), the original
/// answer rng.derive("original"), the summary rng.derive("summary").
inline PreferenceTriplet build_triplet(Backend& backend, const Sample& sample,
                                       const ForgeConfig& cfg, const Rng& rng) {
  validate_forge_config(cfg);
  validate_sample(sample);

  ForgeInput original{&sample, std::nullopt, std::nullopt, nullptr, 0};
  if (const auto* c = std::get_if<ToyContext>(&sample.image)) {
    original.context = c->id;
  } else if (const auto* p = std::get_if<ImagePath>(&sample.image)) {
    original.image = read_image(p->path);
  } else {
    original.image = std::get<ImageTensor>(sample.image);
  }

  std::vector<CandidateAnswer> candidates;
  candidates.reserve(cfg.aug_specs.size());
  for (std::size_t j = 0; j < cfg.aug_specs.size(); ++j) {
    const auto& spec = cfg.aug_specs[j];
    ForgeInput in{&sample, std::nullopt, original.context, &spec, j};
    if (original.image) {
      Rng aug_rng = rng.derive("aug", j);
      try {
        in.image = apply(*original.image, spec, aug_rng);
      } catch (const Error& e) {
        throw Error(e.kind(), "sample " + sample.id + ", augmentation " + std::to_string(j) +
                                  " (" + spec.name + "): " + e.what());
      }
    }
    const std::string what = "augmentation " + std::to_string(j) + " (" + spec.name + ")";
    candidates.push_back(CandidateAnswer::make(
        spec.name, detail::call_answer(backend, in, rng.derive("candidate", j), what)));
  }
  const std::string base = detail::call_answer(backend, original, rng.derive("original"),
                                               "original input");

  PreferenceTriplet t;
  t.sample_id = sample.id;
  t.iteration = cfg.iteration;
  t.question = sample.question;
  t.image = image_ref(sample);
  if (cfg.mode == ForgeMode::kShape) {
    std::vector<std::string> texts;
    texts.reserve(candidates.size());
    for (const auto& c : candidates) texts.push_back(c.text);
    Rng sum_rng = rng.derive("summary");
    try {
      t.winner = backend.summarize(texts, cfg.prompt, sum_rng);
    } catch (const Error& e) {
      throw BackendError("sample " + sample.id + ", summarize: " + e.what());
    }
    t.loser = base;
    t.prompt = cfg.prompt;
  } else {
    t.winner = base;
    t.loser = candidates.front().text;
  }
  t.candidates = std::move(candidates);
  validate_triplet(t);
  return t;
}

/// One triplet per sample in input order. Sample i draws from
/// rng.derive("sample", i), so neither the worker count nor skipped samples
/// change any other sample's result.
inline PreferenceDataset build_dataset(Backend& backend, std::span<const Sample> samples,
                                       const ForgeConfig& cfg, const Rng& rng, int max_in_flight,
                                       FailurePolicy policy = FailurePolicy::kFailFast) {
  if (samples.empty()) throw ValidationError("build_dataset needs at least one sample");
  if (max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
  validate_forge_config(cfg);

  const std::size_t n = samples.size();
  std::vector<std::optional<PreferenceTriplet>> results(n);
  std::vector<std::optional<std::pair<std::string, std::string>>> errors(n);  // kind, message
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};

  auto worker = [&] {
    for (;;) {
      if (stop.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        results[i] = build_triplet(backend, samples[i], cfg, rng.derive("sample", i));
      } catch (const Error& e) {
        errors[i] = {e.kind(), e.what()};
        if (policy == FailurePolicy::kFailFast) stop.store(true);
      } catch (const std::exception& e) {
        errors[i] = {"internal", e.what()};
        if (policy == FailurePolicy::kFailFast) stop.store(true);
      }
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(max_in_flight), n);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  PreferenceDataset ds;
  ds.iteration = cfg.iteration;
  ds.source_digest = source_digest(samples);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) {
      if (policy == FailurePolicy::kFailFast) throw Error(errors[i]->first, errors[i]->second);
      ds.failures.push_back({i, samples[i].id, errors[i]->second});
      continue;
    }
    if (!results[i]) continue;
    if (results[i]->winner == results[i]->loser) {
      ++ds.degenerate;
      if (cfg.drop_degenerate) continue;
    }
    ds.triplets.push_back(std::move(*results[i]));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Toy encoding and the iterative loop

/// Scores both answers under the sample's own context: pi(y_w|x), pi(y_l|x).
inline EncodedTriplet encode_triplet(const PreferenceTriplet& t, int vocab_size) {
  const auto* ctx = std::get_if<std::uint64_t>(&t.image);
  if (!ctx) throw ValidationError("triplet " + t.sample_id + " has no toy context to train on");
  try {
    return {*ctx, *ctx, text_to_tokens(t.winner, vocab_size), text_to_tokens(t.loser, vocab_size)};
  } catch (const ValidationError& e) {
    throw ValidationError("triplet " + t.sample_id + ": " + e.what());
  }
}

inline std::vector<EncodedTriplet> encode_dataset(std::span<const PreferenceTriplet> triplets,
                                                  int vocab_size) {
  std::vector<EncodedTriplet> out;
  out.reserve(triplets.size());
  for (const auto& t : triplets) out.push_back(encode_triplet(t, vocab_size));
  return out;
}

struct IterationArtifacts {
  std::string dataset_path;
  std::string checkpoint_path;
  std::string trajectory_path;
};

/// Persists what the loop produces. The CLI writes files; tests keep things
/// in memory.
class IterationSink {
 public:
  virtual ~IterationSink() = default;
  virtual std::string save_initial(const Policy& policy) = 0;
  virtual IterationArtifacts save_iteration(int t, const PreferenceDataset& data,
                                            const Policy& trained,
                                            std::span<const double> trajectory) = 0;
};

struct LoopOptions {
  std::uint64_t seed = 0;
  int max_tokens = 8;
  double temperature = 1.0;
  int max_in_flight = 1;
  FailurePolicy failure_policy = FailurePolicy::kFailFast;
  std::string config_digest;
  std::map<std::string, double> recorded_hparams;
};

struct LoopResult {
  Policy policy;
  RunManifest manifest;
  std::vector<std::vector<double>> trajectories;
};

/// for t = 1..T: forge D_p with pi_ref = pi_{t-1}, train pi_t from pi_{t-1}
/// by minimising L_t, persist, then pi_ref <- pi_t.
/// Stable run name: the first 12 hex digits of the config digest plus the seed.
inline std::string make_run_id(const std::string& config_digest, std::uint64_t seed) {
  const std::string d = config_digest.empty() ? sha256_hex(std::to_string(seed)) : config_digest;
  return "run-" + d.substr(0, 12) + "-" + std::to_string(seed);
}

inline LoopResult run_iterations(std::span<const Sample> samples, const ForgeConfig& cfg,
                                 const TrainConfig& train_cfg, const Policy& initial, int T,
                                 IterationSink& sink, const LoopOptions& opts) {
  if (T < 1) throw ValidationError("iterations must be >= 1");
  validate_train_config(train_cfg);
  for (const auto& s : samples) {
    if (!std::holds_alternative<ToyContext>(s.image)) {
      throw ValidationError("sample " + s.id + ": training runs need toy-context samples");
    }
  }

  ReferenceChain chain(initial);
  LoopResult out;
  auto& m = out.manifest;
  m.seed = opts.seed;
  m.config_digest = opts.config_digest;
  m.recorded_hparams = opts.recorded_hparams;
  m.initial_model_id = chain.reference_id();
  m.initial_model_path = sink.save_initial(initial);
  m.run_id = make_run_id(opts.config_digest, opts.seed);

  const Rng root(opts.seed);
  for (int t = 1; t <= T; ++t) {
    ForgeConfig iter_cfg = cfg;
    iter_cfg.iteration = t;
    ToyBackend backend(chain.reference(), opts.max_tokens, opts.temperature);
    PreferenceDataset data = build_dataset(backend, samples, iter_cfg, root.derive("forge", t),
                                           opts.max_in_flight, opts.failure_policy);
    if (data.triplets.empty()) {
      throw ValidationError("iteration " + std::to_string(t) + " produced no triplets");
    }
    const auto encoded = encode_dataset(data.triplets, chain.reference().vocab_size());

    TrainConfig tc = train_cfg;
    tc.seed = mix64(train_cfg.seed, static_cast<std::uint64_t>(t));
    TrainResult trained;
    try {
      trained = train(chain.reference(), chain.reference(), encoded, tc);
    } catch (const TrainingDiverged& e) {
      throw Error(e.kind(), "iteration " + std::to_string(t) + ": " + e.what());
    }

    const IterationArtifacts files = sink.save_iteration(t, data, trained.policy, trained.trajectory);
    ManifestIteration rec;
    rec.iteration = t;
    rec.dataset_path = files.dataset_path;
    rec.checkpoint_path = files.checkpoint_path;
    rec.trajectory_path = files.trajectory_path;
    rec.reference_checkpoint_id = chain.reference_id();
    rec.checkpoint_id = trained.policy.checkpoint_id();
    m.iterations.push_back(std::move(rec));
    out.trajectories.push_back(std::move(trained.trajectory));

    chain.set_trained(std::move(trained.policy));
    chain.update_reference();
  }
  validate_manifest(m);
  out.policy = chain.reference();
  return out;
}

}  // namespace shape
