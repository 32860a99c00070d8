#pragma once

// Answer generators used by the preference forge. A backend answers a
// (possibly augmented) input and summarises a list of candidate answers.
// Implementations must be safe to call from several worker threads.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "shape/augment.hpp"
#include "shape/core.hpp"
#include "shape/digest.hpp"
#include "shape/image_io.hpp"
#include "shape/policy.hpp"
#include "shape/remote.hpp"
#include "shape/rng.hpp"

namespace shape {

class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what) : Error("backend", what) {}
};

/// One generation input. Exactly one of `image` / `context` is set;
/// `augmentation` is null for the original, unaugmented input. For images the
/// augmentation has already been applied to `image`.
struct ForgeInput {
  const Sample* sample = nullptr;
  std::optional<ImageTensor> image;
  std::optional<std::uint64_t> context;
  const AugmentationSpec* augmentation = nullptr;
  std::size_t augmentation_index = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string name() const = 0;
  virtual std::string answer(const ForgeInput& input, Rng& rng) = 0;
  virtual std::string summarize(std::span<const std::string> candidates,
                                const std::string& prompt, Rng& rng) = 0;
};

inline bool is_identity(const AugmentationSpec* spec) {
  return spec == nullptr || std::holds_alternative<IdentitySpec>(spec->params);
}

/// Toy-context analogue of an image augmentation: identity keeps the
/// context, anything else moves it to a hashed context.
inline std::uint64_t augment_context(std::uint64_t context, const AugmentationSpec* spec,
                                     std::size_t index, std::uint64_t modulus) {
  if (is_identity(spec)) return context;
  const std::uint64_t h = mix64(mix64(context, fnv1a64(spec->name)), index);
  return modulus == 0 ? h : h % modulus;
}

// ---------------------------------------------------------------------------

/// Deterministic stand-in: answers are a function of the input digest and
/// summaries a function of the payload. `fail_ids` makes answer() throw for
/// the listed samples.
class MockBackend final : public Backend {
 public:
  MockBackend() = default;
  explicit MockBackend(std::set<std::string> fail_ids) : fail_ids_(std::move(fail_ids)) {}

  std::string name() const override { return "mock"; }

  static std::string input_key(const ForgeInput& in) {
    if (in.image) return "img:" + image_digest(*in.image);
    const std::uint64_t ctx = in.context.value_or(0);
    if (is_identity(in.augmentation)) return "ctx:" + std::to_string(ctx);
    return "ctx:" + std::to_string(ctx) + "/" + in.augmentation->name + "#" +
           std::to_string(in.augmentation_index);
  }

  std::string answer(const ForgeInput& in, Rng&) override {
    if (in.sample && fail_ids_.count(in.sample->id)) {
      throw BackendError("mock failure injected for sample " + in.sample->id);
    }
    const std::string question = in.sample ? in.sample->question : "";
    return "mock answer " + sha256_hex(input_key(in) + "|" + question).substr(0, 12) +
           " to: " + question;
  }

  std::string summarize(std::span<const std::string> candidates, const std::string& prompt,
                        Rng&) override {
    if (candidates.empty()) throw ValidationError("summary needs at least one candidate");
    const std::string payload = build_summary_payload(candidates, prompt);
    std::string out = "mock summary " + sha256_hex(payload).substr(0, 12) + " of " +
                      std::to_string(candidates.size()) + " answers:";
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      out += (i ? " | " : " ") + candidates[i];
    }
    return out;
  }

 private:
  std::set<std::string> fail_ids_;
};

// ---------------------------------------------------------------------------

/// Samples answers from a frozen toy policy (the iteration's reference).
class ToyBackend final : public Backend {
 public:
  ToyBackend(const Policy& policy, int max_tokens, double temperature)
      : policy_(policy), max_tokens_(max_tokens), temperature_(temperature) {
    if (max_tokens < 1) throw ValidationError("toy max_tokens must be >= 1");
    if (!(temperature >= 0.0)) throw ValidationError("toy temperature must be >= 0");
  }

  std::string name() const override { return "toy"; }
  const Policy& policy() const noexcept { return policy_; }

  std::uint64_t context_of(const ForgeInput& in) const {
    const auto C = static_cast<std::uint64_t>(policy_.contexts());
    if (in.context) return augment_context(*in.context, in.augmentation, in.augmentation_index, C);
    if (in.image) return std::stoull(image_digest(*in.image).substr(0, 15), nullptr, 16) % C;
    throw BackendError("toy backend input carries neither a context nor an image");
  }

  std::string answer(const ForgeInput& in, Rng& rng) override {
    return tokens_to_text(toy_generate(policy_, context_of(in), max_tokens_, temperature_, rng));
  }

  std::string summarize(std::span<const std::string> candidates, const std::string& prompt,
                        Rng& rng) override {
    std::vector<TokenSequence> seqs;
    seqs.reserve(candidates.size());
    for (const auto& c : candidates) seqs.push_back(text_to_tokens(c, policy_.vocab_size()));
    const std::uint64_t ctx = toy_context_for_summary(seqs, fnv1a64(prompt), policy_.contexts());
    return tokens_to_text(toy_generate(policy_, ctx, max_tokens_, temperature_, rng));
  }

 private:
  const Policy& policy_;
  int max_tokens_;
  double temperature_;
};

// ---------------------------------------------------------------------------

/// Real LVLM behind a chat-completions endpoint. Images are sent as PNG.
class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(RemoteClient& client) : client_(client) {}

  std::string name() const override { return "remote"; }

  std::string answer(const ForgeInput& in, Rng&) override {
    if (!in.image) throw BackendError("remote backend needs image samples, got a toy context");
    const std::string png = encode_png(*in.image);
    const auto* bytes = reinterpret_cast<const unsigned char*>(png.data());
    return client_.generate({bytes, png.size()}, in.sample ? in.sample->question : "").text;
  }

  std::string summarize(std::span<const std::string> candidates, const std::string& prompt,
                        Rng&) override {
    return client_.summarize(candidates, prompt).text;
  }

 private:
  RemoteClient& client_;
};

}  // namespace shape
