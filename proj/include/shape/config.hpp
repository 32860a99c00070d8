#pragma once

// Application configuration: one JSON document, strict about unknown keys.
// Relative paths are resolved against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "shape/augment.hpp"
#include "shape/digest.hpp"
#include "shape/dpo.hpp"
#include "shape/forge.hpp"
#include "shape/image_io.hpp"
#include "shape/io.hpp"
#include "shape/policy.hpp"
#include "shape/remote.hpp"

namespace shape {

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

enum class BackendKind { kToy, kRemote, kMock };

struct ToyConfig {
  int vocab_size = 16;
  int contexts = 64;
  int max_tokens = 8;
  double temperature = 1.0;
  std::string init = "random";  // random | zeros
  double init_scale = 1.0;
  std::string init_checkpoint;  // overrides `init` when set
};

struct MockConfig {
  std::set<std::string> fail_ids;
};

struct PathsConfig {
  std::string output_dir = "out";
  std::string samples_file;
  std::string vocab_file;
};

struct AppConfig {
  std::uint64_t seed = 0;
  BackendKind backend = BackendKind::kMock;
  ToyConfig toy;
  RemoteConfig remote;
  MockConfig mock;
  ForgeConfig forge;
  TrainConfig train;
  int lora_rank = 1024;  // recorded in manifests only
  int iterations = 1;
  PathsConfig paths;
  int max_in_flight = 1;
  FailurePolicy failure_policy = FailurePolicy::kFailFast;
  bool judge_debias = true;
  std::string digest;  // hex SHA-256 of the canonical document
};

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> max_in_flight;
  std::optional<std::string> output_dir;
};

namespace detail {

/// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }
  ObjectReader(const ObjectReader&) = delete;

  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + qualify(k) + "'");
    }
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("field '" + qualify(key) + "' has the wrong type");
    }
  }

  template <class T>
  void get(const std::string& key, std::optional<T>& out) {
    T value{};
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    get(key, value);
    out = value;
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("field '" + field + "' " + what);
}

inline AugmentationSpec spec_from_json(const nlohmann::json& j, const std::string& path) {
  ObjectReader r(j, path);
  std::string kind, name;
  r.get("kind", kind);
  r.get("name", name);
  AugmentationSpec spec;
  if (kind == "crop") {
    CropSpec p;
    r.get("s_min", p.s_min);
    r.get("s_max", p.s_max);
    spec.params = p;
  } else if (kind == "diffusion") {
    DiffusionNoiseSpec p;
    r.get("t", p.t);
    r.get("T", p.T);
    r.get("beta_start", p.beta_start);
    r.get("beta_end", p.beta_end);
    spec.params = p;
  } else if (kind == "contrast") {
    ContrastSpec p;
    r.get("factor", p.factor);
    spec.params = p;
  } else if (kind == "gamma") {
    GammaSpec p;
    r.get("g", p.g);
    spec.params = p;
  } else if (kind == "hflip") {
    spec.params = HFlipSpec{};
  } else if (kind == "identity") {
    spec.params = IdentitySpec{};
  } else {
    throw ConfigError("field '" + path + ".kind' must be one of crop, diffusion, contrast, gamma, hflip, identity");
  }
  spec.name = name.empty() ? kind : name;
  try {
    validate_spec(spec);
  } catch (const ValidationError& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return spec;
}

inline nlohmann::json spec_to_json(const AugmentationSpec& spec) {
  nlohmann::json j = {{"name", spec.name}, {"kind", kind_name(spec.params)}};
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, CropSpec>) {
          j["s_min"] = p.s_min;
          j["s_max"] = p.s_max;
        } else if constexpr (std::is_same_v<T, DiffusionNoiseSpec>) {
          j["t"] = p.t;
          j["T"] = p.T;
          j["beta_start"] = p.beta_start;
          j["beta_end"] = p.beta_end;
        } else if constexpr (std::is_same_v<T, ContrastSpec>) {
          j["factor"] = p.factor;
        } else if constexpr (std::is_same_v<T, GammaSpec>) {
          j["g"] = p.g;
        }
      },
      spec.params);
  return j;
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal().string();
}

}  // namespace detail

/// Full configuration with defaults filled in. Keys that only affect
/// scheduling (max_in_flight, paths.output_dir) are left out so they never
/// change the digest.
inline nlohmann::json canonical_config(const AppConfig& c) {
  nlohmann::json backend;
  switch (c.backend) {
    case BackendKind::kToy:
      backend = {{"kind", "toy"},
                 {"vocab_size", c.toy.vocab_size},
                 {"contexts", c.toy.contexts},
                 {"max_tokens", c.toy.max_tokens},
                 {"temperature", c.toy.temperature},
                 {"init", c.toy.init},
                 {"init_scale", c.toy.init_scale},
                 {"init_checkpoint", c.toy.init_checkpoint}};
      break;
    case BackendKind::kRemote:
      backend = {{"kind", "remote"},
                 {"base_url", c.remote.base_url},
                 {"model", c.remote.model},
                 {"timeout_ms", c.remote.timeout_ms},
                 {"max_retries", c.remote.max_retries},
                 {"max_in_flight", c.remote.max_in_flight},
                 {"backoff_base_ms", c.remote.backoff_base_ms},
                 {"temperature", c.remote.temperature ? nlohmann::json(*c.remote.temperature) : nlohmann::json()},
                 {"max_tokens", c.remote.max_tokens ? nlohmann::json(*c.remote.max_tokens) : nlohmann::json()}};
      break;
    case BackendKind::kMock:
      backend = {{"kind", "mock"}, {"fail_ids", c.mock.fail_ids}};
      break;
  }
  nlohmann::json augs = nlohmann::json::array();
  for (const auto& s : c.forge.aug_specs) augs.push_back(detail::spec_to_json(s));
  return {
      {"seed", c.seed},
      {"backend", backend},
      {"forge",
       {{"mode", to_string(c.forge.mode)},
        {"augmentations", augs},
        {"prompt", c.forge.prompt},
        {"drop_degenerate", c.forge.drop_degenerate}}},
      {"train",
       {{"beta", c.train.beta},
        {"learning_rate", c.train.learning_rate},
        {"steps", c.train.steps},
        {"batch_size", c.train.batch_size},
        {"lora_rank", c.lora_rank}}},
      {"iterations", c.iterations},
      {"paths", {{"samples_file", c.paths.samples_file}, {"vocab_file", c.paths.vocab_file}}},
      {"failure_policy", c.failure_policy == FailurePolicy::kFailFast ? "fail-fast" : "skip-and-record"},
      {"judge", {{"debias", c.judge_debias}}},
  };
}

inline AppConfig parse_config(const std::string& text, const std::string& source = "config",
                              const std::filesystem::path& base_dir = {},
                              const ConfigOverrides& overrides = {}) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": parse error: " + e.what());
  }

  AppConfig c;
  {
    detail::ObjectReader root(doc, "");
    root.get("seed", c.seed);
    root.get("iterations", c.iterations);
    root.get("max_in_flight", c.max_in_flight);

    std::string failure = "fail-fast";
    root.get("failure_policy", failure);
    if (failure == "fail-fast") c.failure_policy = FailurePolicy::kFailFast;
    else if (failure == "skip-and-record") c.failure_policy = FailurePolicy::kSkipAndRecord;
    else throw ConfigError("field 'failure_policy' must be fail-fast or skip-and-record");

    if (const auto* b = root.child("backend")) {
      detail::ObjectReader r(*b, "backend");
      std::string kind = "mock";
      r.get("kind", kind);
      if (kind == "toy") {
        c.backend = BackendKind::kToy;
        r.get("vocab_size", c.toy.vocab_size);
        r.get("contexts", c.toy.contexts);
        r.get("max_tokens", c.toy.max_tokens);
        r.get("temperature", c.toy.temperature);
        r.get("init", c.toy.init);
        r.get("init_scale", c.toy.init_scale);
        r.get("init_checkpoint", c.toy.init_checkpoint);
      } else if (kind == "remote") {
        c.backend = BackendKind::kRemote;
        r.get("base_url", c.remote.base_url);
        r.get("model", c.remote.model);
        r.get("timeout_ms", c.remote.timeout_ms);
        r.get("max_retries", c.remote.max_retries);
        r.get("max_in_flight", c.remote.max_in_flight);
        r.get("backoff_base_ms", c.remote.backoff_base_ms);
        r.get("temperature", c.remote.temperature);
        r.get("max_tokens", c.remote.max_tokens);
      } else if (kind == "mock") {
        c.backend = BackendKind::kMock;
        r.get("fail_ids", c.mock.fail_ids);
      } else {
        throw ConfigError("field 'backend.kind' must be toy, remote or mock");
      }
    }

    if (const auto* f = root.child("forge")) {
      detail::ObjectReader r(*f, "forge");
      std::string mode = "shape";
      r.get("mode", mode);
      if (mode == "shape") c.forge.mode = ForgeMode::kShape;
      else if (mode == "sheva") c.forge.mode = ForgeMode::kSheva;
      else throw ConfigError("field 'forge.mode' must be shape or sheva");
      r.get("prompt", c.forge.prompt);
      r.get("drop_degenerate", c.forge.drop_degenerate);
      if (const auto* augs = r.child("augmentations")) {
        if (!augs->is_array()) throw ConfigError("field 'forge.augmentations' must be an array");
        c.forge.aug_specs.clear();
        for (std::size_t i = 0; i < augs->size(); ++i) {
          const auto& a = (*augs)[i];
          const std::string path = "forge.augmentations[" + std::to_string(i) + "]";
          if (a.is_string()) {
            const auto name = a.get<std::string>();
            try {
              if (name.rfind("candidate-", 0) == 0) {
                for (auto& s : bank_preset(name)) c.forge.aug_specs.push_back(std::move(s));
              } else {
                c.forge.aug_specs.push_back(preset(name));
              }
            } catch (const ValidationError& e) {
              throw ConfigError("field '" + path + "': " + e.what());
            }
          } else {
            c.forge.aug_specs.push_back(detail::spec_from_json(a, path));
          }
        }
      }
    }

    if (const auto* t = root.child("train")) {
      detail::ObjectReader r(*t, "train");
      r.get("beta", c.train.beta);
      r.get("learning_rate", c.train.learning_rate);
      r.get("steps", c.train.steps);
      r.get("batch_size", c.train.batch_size);
      r.get("lora_rank", c.lora_rank);
    }

    if (const auto* p = root.child("paths")) {
      detail::ObjectReader r(*p, "paths");
      r.get("output_dir", c.paths.output_dir);
      r.get("samples_file", c.paths.samples_file);
      r.get("vocab_file", c.paths.vocab_file);
    }

    if (const auto* j = root.child("judge")) {
      detail::ObjectReader r(*j, "judge");
      r.get("debias", c.judge_debias);
    }
  }

  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.max_in_flight) c.max_in_flight = *overrides.max_in_flight;
  c.paths.samples_file = detail::resolve(base_dir, c.paths.samples_file);
  c.paths.vocab_file = detail::resolve(base_dir, c.paths.vocab_file);
  c.toy.init_checkpoint = detail::resolve(base_dir, c.toy.init_checkpoint);
  c.paths.output_dir = overrides.output_dir ? *overrides.output_dir
                                            : detail::resolve(base_dir, c.paths.output_dir);
  c.train.seed = mix64(c.seed, fnv1a64("train"));
  c.remote.jitter_seed = mix64(c.seed, fnv1a64("jitter"));

  using detail::require;
  require(c.iterations >= 1, "iterations", "must be >= 1");
  require(c.max_in_flight >= 1, "max_in_flight", "must be >= 1");
  require(c.train.beta > 0, "train.beta", "must be > 0");
  require(c.train.learning_rate >= 0, "train.learning_rate", "must be >= 0");
  require(c.train.steps >= 1, "train.steps", "must be >= 1");
  require(c.train.batch_size >= 1, "train.batch_size", "must be >= 1");
  require(!c.forge.aug_specs.empty(), "forge.augmentations", "must be non-empty");
  if (c.forge.mode == ForgeMode::kShape) require(!c.forge.prompt.empty(), "forge.prompt", "must be non-empty in shape mode");
  if (c.forge.mode == ForgeMode::kSheva) {
    require(c.forge.aug_specs.size() == 1, "forge.augmentations", "must hold exactly one entry in sheva mode");
  }
  switch (c.backend) {
    case BackendKind::kToy:
      require(c.toy.vocab_size >= 1, "backend.vocab_size", "must be >= 1");
      require(c.toy.contexts >= 1, "backend.contexts", "must be >= 1");
      require(c.toy.max_tokens >= 1, "backend.max_tokens", "must be >= 1");
      require(c.toy.temperature >= 0, "backend.temperature", "must be >= 0");
      require(c.toy.init == "random" || c.toy.init == "zeros", "backend.init", "must be random or zeros");
      break;
    case BackendKind::kRemote:
      require(!c.remote.base_url.empty(), "backend.base_url", "is required for the remote backend");
      require(c.remote.timeout_ms >= 1, "backend.timeout_ms", "must be positive");
      require(c.remote.max_retries >= 0, "backend.max_retries", "must be >= 0");
      require(c.remote.max_in_flight >= 1, "backend.max_in_flight", "must be >= 1");
      require(c.remote.backoff_base_ms >= 0, "backend.backoff_base_ms", "must be >= 0");
      break;
    case BackendKind::kMock:
      break;
  }

  c.digest = sha256_hex(canonical_config(c).dump());
  return c;
}

inline AppConfig load_config(const std::string& path, const ConfigOverrides& overrides = {}) {
  return parse_config(read_file_bytes(path), path, std::filesystem::path(path).parent_path(), overrides);
}

/// Initial toy policy: an explicit checkpoint, the configured one, zeros,
/// or N(0, scale^2) weights drawn from the config seed.
inline Policy initial_policy(const AppConfig& c, const std::string& checkpoint = "") {
  const std::string& path = checkpoint.empty() ? c.toy.init_checkpoint : checkpoint;
  if (!path.empty()) return read_checkpoint(path);
  if (c.toy.init == "zeros") return Policy(c.toy.vocab_size, c.toy.contexts);
  Rng rng = Rng(c.seed).derive("init");
  return Policy::random(c.toy.vocab_size, c.toy.contexts, c.toy.init_scale, rng);
}

}  // namespace shape
