#pragma once

// Shared fixtures for the unit and acceptance binaries.

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "shape/core.hpp"
#include "shape/dpo.hpp"
#include "shape/eval.hpp"
#include "shape/policy.hpp"
#include "shape/rng.hpp"

namespace testing_support {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "shape-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct CommandResult {
  int exit_code = -1;
  std::string out;  // stdout only; stderr goes to /dev/null unless redirected in `cmd`
};

inline CommandResult run(const std::string& cmd) {
  CommandResult r;
  FILE* pipe = popen((cmd + " 2>/dev/null").c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed: " + cmd);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

inline shape::TokenSequence random_tokens(shape::Rng& rng, int V, int min_len, int max_len) {
  shape::TokenSequence s{{}, V};
  const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
  for (int k = 0; k < len; ++k) s.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(V))));
  return s;
}

inline shape::EncodedTriplet random_triplet(shape::Rng& rng, int V, int C, int min_len = 1, int max_len = 6) {
  const auto c = rng.below(static_cast<std::uint64_t>(C));
  return {c, c, random_tokens(rng, V, min_len, max_len), random_tokens(rng, V, min_len, max_len)};
}

inline shape::Policy random_policy(shape::Rng& rng, int V, int C, double scale = 1.0) {
  return shape::Policy::random(V, C, scale, rng);
}

// Synthetic caption corpus whose CHAIR counts are known by construction:
// the generator records which objects it wrote, so the expected counts never
// go through the extractor.
struct ChairCorpus {
  shape::ObjectVocabulary vocab;
  std::vector<shape::CaptionRecord> records;
  std::size_t mentioned = 0;
  std::size_t hallucinated = 0;
  std::size_t captions_with_hallucination = 0;
};

inline ChairCorpus make_chair_corpus(shape::Rng& rng, std::size_t n) {
  const std::vector<std::string> objects{"dog",  "cat",   "person", "car",          "cup",
                                         "bird", "horse", "chair",  "dining table", "bicycle"};
  // surface forms per object: canonical, synonyms, plural
  const std::map<std::string, std::vector<std::string>> surfaces{
      {"dog", {"dog", "puppy", "dogs"}},       {"cat", {"cat", "cats"}},
      {"person", {"person", "man", "woman"}},  {"car", {"car", "cars"}},
      {"cup", {"cup", "mug", "cups"}},         {"bird", {"bird", "birds"}},
      {"horse", {"horse", "horses"}},          {"chair", {"chair", "chairs"}},
      {"dining table", {"dining table", "table"}}, {"bicycle", {"bicycle", "bike", "bicycles"}}};
  const std::vector<std::string> fillers{"a", "the", "near", "with", "and", "photo", "of", "on", "sunny", "red"};

  ChairCorpus c;
  c.vocab = shape::ObjectVocabulary(
      {objects.begin(), objects.end()},
      {{"puppy", "dog"}, {"man", "person"}, {"woman", "person"}, {"mug", "cup"}, {"bike", "bicycle"},
       {"table", "dining table"}});
  for (std::size_t r = 0; r < n; ++r) {
    std::set<std::string> truth, mentioned;
    const auto n_truth = 1 + rng.below(4);
    while (truth.size() < n_truth) truth.insert(objects[rng.below(objects.size())]);
    const auto n_mention = rng.below(5);
    while (mentioned.size() < n_mention) mentioned.insert(objects[rng.below(objects.size())]);

    std::vector<std::string> pieces;
    for (const auto& m : mentioned) {
      const auto& forms = surfaces.at(m);
      pieces.push_back(forms[rng.below(forms.size())]);
      if (rng.below(3) == 0) pieces.push_back(forms[rng.below(forms.size())]);  // repeats count once
    }
    for (auto k = rng.below(6); k > 0; --k) pieces.push_back(fillers[rng.below(fillers.size())]);
    for (std::size_t i = pieces.size(); i > 1; --i) std::swap(pieces[i - 1], pieces[rng.below(i)]);

    std::string caption;
    for (const auto& p : pieces) caption += (caption.empty() ? "" : (rng.below(4) ? " " : ", ")) + p;
    if (rng.below(2)) caption += ".";
    if (!caption.empty() && rng.below(2)) caption[0] = static_cast<char>(std::toupper(caption[0]));

    std::size_t halluc = 0;
    for (const auto& m : mentioned) halluc += truth.count(m) ? 0 : 1;
    c.mentioned += mentioned.size();
    c.hallucinated += halluc;
    c.captions_with_hallucination += halluc ? 1 : 0;
    c.records.push_back({"img-" + std::to_string(r), caption, truth});
  }
  return c;
}

}  // namespace testing_support
