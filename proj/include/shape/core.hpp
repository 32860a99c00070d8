#pragma once

// Domain types shared by every part of the library. All types are plain
// values; once built they are not mutated, so they can be shared freely
// across worker threads.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace shape {

/// Base error for everything raised by the library. `kind` is a short
/// machine-readable tag ("validation", "io", "http", ...) used by the CLI
/// when emitting JSON errors.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;  // row-major, [y][x][c]

  std::size_t size() const noexcept { return data.size(); }
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double at(int y, int x, int c) const { return data[index(y, x, c)]; }
  double& at(int y, int x, int c) { return data[index(y, x, c)]; }

  static ImageTensor filled(int h, int w, int c, double v) {
    return ImageTensor{h, w, c, std::vector<double>(static_cast<std::size_t>(h) * w * c, v)};
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Checks the ImageTensor invariants and returns the image unchanged.
/// Throws ValidationError naming the first offending element.
inline const ImageTensor& validate_image(const ImageTensor& img) {
  if (img.height <= 0 || img.width <= 0) {
    throw ValidationError("image dimensions must be positive, got " +
                          std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  if (img.channels != 1 && img.channels != 3) {
    throw ValidationError("image channels must be 1 or 3, got " + std::to_string(img.channels));
  }
  const std::size_t expected =
      static_cast<std::size_t>(img.height) * img.width * img.channels;
  if (img.data.size() != expected) {
    throw ValidationError("image length mismatch: expected " + std::to_string(expected) +
                          " elements, got " + std::to_string(img.data.size()));
  }
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double v = img.data[i];
    if (!std::isfinite(v)) {
      throw ValidationError("image element " + std::to_string(i) + " is not finite");
    }
    if (v < 0.0 || v > 1.0) {
      throw ValidationError("image element " + std::to_string(i) + " out of range [0,1]");
    }
  }
  return img;
}

/// Non-negative integer standing in for an image on the toy backend.
struct ToyContext {
  std::uint64_t id = 0;
  friend bool operator==(const ToyContext&, const ToyContext&) = default;
};

/// Path to a PNG or PPM file on disk.
struct ImagePath {
  std::string path;
  friend bool operator==(const ImagePath&, const ImagePath&) = default;
};

using ImageSource = std::variant<ImageTensor, ImagePath, ToyContext>;

struct Sample {
  std::string id;
  ImageSource image;
  std::string question;

  friend bool operator==(const Sample&, const Sample&) = default;
};

inline void validate_sample(const Sample& s) {
  if (s.id.empty()) throw ValidationError("sample id must be non-empty");
  if (const auto* img = std::get_if<ImageTensor>(&s.image)) validate_image(*img);
  if (const auto* p = std::get_if<ImagePath>(&s.image); p && p->path.empty()) {
    throw ValidationError("sample " + s.id + ": image path is empty");
  }
}

/// Whitespace-delimited segments of `text` after trimming.
inline std::vector<std::string_view> whitespace_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  auto is_space = [](char ch) {
    return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v';
  };
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

inline std::size_t token_count(std::string_view text) { return whitespace_tokens(text).size(); }

struct CandidateAnswer {
  std::string augmentation_name;
  std::string text;
  std::size_t token_count = 0;

  static CandidateAnswer make(std::string augmentation, std::string text) {
    const std::size_t n = shape::token_count(text);
    return CandidateAnswer{std::move(augmentation), std::move(text), n};
  }

  friend bool operator==(const CandidateAnswer&, const CandidateAnswer&) = default;
};

/// How the image of a triplet is referenced once persisted: a toy context
/// id, a file path, or a content digest for in-memory tensors.
using ImageRef = std::variant<std::uint64_t, std::string>;

struct PreferenceTriplet {
  std::string sample_id;
  int iteration = 1;
  std::string question;
  ImageRef image;
  std::string winner;
  std::string loser;
  std::vector<CandidateAnswer> candidates;
  std::string prompt;

  friend bool operator==(const PreferenceTriplet&, const PreferenceTriplet&) = default;
};

inline void validate_triplet(const PreferenceTriplet& t) {
  const std::string where = "triplet " + t.sample_id + ": ";
  if (t.sample_id.empty()) throw ValidationError("triplet sample id must be non-empty");
  if (t.iteration < 1) throw ValidationError(where + "iteration must be >= 1");
  if (t.candidates.empty()) throw ValidationError(where + "candidates must be non-empty");
  if (t.winner.empty()) throw ValidationError(where + "winner must be non-empty");
  if (t.loser.empty()) throw ValidationError(where + "loser must be non-empty");
  for (const auto& c : t.candidates) {
    if (c.token_count != token_count(c.text)) {
      throw ValidationError(where + "candidate token_count does not match its text");
    }
  }
}

struct TokenSequence {
  std::vector<int> tokens;
  int vocab_size = 0;

  std::size_t size() const noexcept { return tokens.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline void validate_tokens(const TokenSequence& seq) {
  if (seq.vocab_size <= 0) throw ValidationError("vocabulary size must be positive");
  if (seq.tokens.empty()) throw ValidationError("token sequence must be non-empty");
  for (std::size_t k = 0; k < seq.tokens.size(); ++k) {
    if (seq.tokens[k] < 0 || seq.tokens[k] >= seq.vocab_size) {
      throw ValidationError("token " + std::to_string(k) + " = " +
                            std::to_string(seq.tokens[k]) + " outside vocabulary [0, " +
                            std::to_string(seq.vocab_size) + ")");
    }
  }
}

struct ManifestIteration {
  int iteration = 0;
  std::string dataset_path;
  std::string checkpoint_id;
  std::string checkpoint_path;
  std::string reference_checkpoint_id;
  std::string trajectory_path;

  friend bool operator==(const ManifestIteration&, const ManifestIteration&) = default;
};

struct RunManifest {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string initial_model_id;
  std::string initial_model_path;
  std::vector<ManifestIteration> iterations;
  // Informational only (beta, learning_rate, steps, batch_size, lora_rank).
  std::map<std::string, double> recorded_hparams;

  friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

/// Iterations numbered 1, 2, ... and each reference id equal to the
/// previous checkpoint id (the initial model for iteration 1).
inline void validate_manifest(const RunManifest& m) {
  std::string expected_ref = m.initial_model_id;
  int expected_index = 1;
  for (const auto& it : m.iterations) {
    if (it.iteration != expected_index) {
      throw ValidationError("manifest iteration index " + std::to_string(it.iteration) +
                            " out of sequence, expected " + std::to_string(expected_index));
    }
    if (it.reference_checkpoint_id != expected_ref) {
      throw ValidationError("manifest iteration " + std::to_string(it.iteration) +
                            ": reference checkpoint " + it.reference_checkpoint_id +
                            " does not match previous checkpoint " + expected_ref);
    }
    expected_ref = it.checkpoint_id;
    ++expected_index;
  }
}

}  // namespace shape
