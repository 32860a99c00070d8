#pragma once

// Output metrics: CHAIR hallucination ratios, yes/no probe accuracy,
// response-length statistics and a pairwise judge win-rate harness.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shape/core.hpp"
#include "shape/remote.hpp"

namespace shape {

// ---------------------------------------------------------------------------
// Object vocabulary and extraction

/// Lowercases, turns every non-alphanumeric byte into a space, and splits.
inline std::vector<std::string> normalize_words(std::string_view text) {
  std::string cleaned(text);
  for (char& ch : cleaned) {
    const auto u = static_cast<unsigned char>(ch);
    ch = std::isalnum(u) ? static_cast<char>(std::tolower(u)) : ' ';
  }
  std::vector<std::string> out;
  for (auto w : whitespace_tokens(cleaned)) out.emplace_back(w);
  return out;
}

inline std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

class ObjectVocabulary {
 public:
  ObjectVocabulary() = default;
  ObjectVocabulary(std::set<std::string> canonical, std::map<std::string, std::string> synonyms)
      : canonical_(std::move(canonical)), synonyms_(std::move(synonyms)) {
    validate();
    build_index();
  }

  /// File format: one canonical name per line, synonym lines
  /// `surface=>canonical`. Blank lines and lines starting with '#' are
  /// skipped. Synonyms may precede their canonical line.
  static ObjectVocabulary parse(std::string_view text) {
    std::set<std::string> canonical;
    std::map<std::string, std::string> synonyms;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string line(text.substr(pos, end - pos));
      pos = end + 1;
      ++line_no;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      if (const auto arrow = line.find("=>"); arrow != std::string::npos) {
        const std::string surface = trim(line.substr(0, arrow));
        const std::string target = trim(line.substr(arrow + 2));
        if (surface.empty() || target.empty()) {
          throw ValidationError("vocabulary line " + std::to_string(line_no) +
                                ": synonym needs both sides of '=>'");
        }
        synonyms[surface] = target;
      } else {
        canonical.insert(line);
      }
    }
    try {
      return ObjectVocabulary(std::move(canonical), std::move(synonyms));
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("vocabulary: ") + e.what());
    }
  }

  const std::set<std::string>& canonical() const noexcept { return canonical_; }
  const std::map<std::string, std::string>& synonyms() const noexcept { return synonyms_; }
  std::size_t max_phrase_words() const noexcept { return max_words_; }

  /// Canonical name for a normalised surface phrase, if any.
  const std::string* lookup(const std::string& phrase) const {
    const auto it = surface_.find(phrase);
    return it == surface_.end() ? nullptr : &it->second;
  }

 private:
  void validate() const {
    auto clean = [](const std::string& s) {
      if (s.empty()) return false;
      if (std::isspace(static_cast<unsigned char>(s.front())) ||
          std::isspace(static_cast<unsigned char>(s.back()))) {
        return false;
      }
      return std::none_of(s.begin(), s.end(),
                          [](char c) { return std::isupper(static_cast<unsigned char>(c)); });
    };
    for (const auto& c : canonical_) {
      if (!clean(c)) throw ValidationError("canonical name '" + c + "' must be lowercase and trimmed");
    }
    for (const auto& [surface, target] : synonyms_) {
      if (!clean(surface)) throw ValidationError("synonym '" + surface + "' must be lowercase and trimmed");
      if (!canonical_.count(target)) {
        throw ValidationError("synonym '" + surface + "' targets unknown canonical name '" + target + "'");
      }
    }
  }

  void build_index() {
    auto add = [&](const std::string& surface, const std::string& target) {
      const auto words = normalize_words(surface);
      if (words.empty()) return;
      max_words_ = std::max(max_words_, words.size());
      surface_[join_words(words)] = target;
    };
    for (const auto& [surface, target] : synonyms_) add(surface, target);
    for (const auto& c : canonical_) add(c, c);  // canonical spelling wins over a synonym
  }

  std::set<std::string> canonical_;
  std::map<std::string, std::string> synonyms_;
  std::map<std::string, std::string> surface_;
  std::size_t max_words_ = 0;
};

/// Canonical objects mentioned in a caption. Longest phrase first (bigrams
/// before unigrams for two-word vocabularies); a trailing 's' on the last
/// word is stripped as a plural fallback. Matched words are consumed, so a
/// compound is never also counted as its parts.
inline std::set<std::string> extract_objects(std::string_view caption, const ObjectVocabulary& vocab) {
  const auto words = normalize_words(caption);
  std::set<std::string> found;
  std::size_t i = 0;
  while (i < words.size()) {
    std::size_t consumed = 0;
    const std::size_t longest = std::min(vocab.max_phrase_words(), words.size() - i);
    for (std::size_t len = longest; len >= 1 && consumed == 0; --len) {
      std::string phrase = join_words(std::span(words).subspan(i, len));
      const std::string* hit = vocab.lookup(phrase);
      if (!hit && words[i + len - 1].size() > 1 && phrase.back() == 's') {
        phrase.pop_back();
        hit = vocab.lookup(phrase);
      }
      if (hit) {
        found.insert(*hit);
        consumed = len;
      }
    }
    i += consumed ? consumed : 1;
  }
  return found;
}

// ---------------------------------------------------------------------------
// CHAIR

struct CaptionRecord {
  std::string image_id;
  std::string caption;
  std::set<std::string> ground_truth;
};

struct RecordChair {
  std::string image_id;
  std::set<std::string> mentioned;
  std::set<std::string> hallucinated;
};

struct ChairResult {
  double chair_i = 0.0;
  double chair_s = 0.0;
  std::size_t mentioned = 0;
  std::size_t hallucinated = 0;
  std::size_t captions = 0;
  std::size_t captions_with_hallucination = 0;
  bool degenerate_i = false;  // no mentioned objects anywhere
  bool degenerate_s = false;
  std::vector<RecordChair> records;
};

/// CHAIR_I = hallucinated / mentioned objects, pooled over records;
/// CHAIR_S = captions with a hallucination / captions. A zero denominator
/// gives 0 and sets the matching degenerate flag.
inline ChairResult chair_scores(std::span<const CaptionRecord> records, const ObjectVocabulary& vocab) {
  if (records.empty()) throw ValidationError("CHAIR needs at least one caption record");
  ChairResult r;
  r.records.reserve(records.size());
  for (const auto& rec : records) {
    for (const auto& g : rec.ground_truth) {
      if (!vocab.canonical().count(g)) {
        throw ValidationError("record " + rec.image_id + ": ground-truth object '" + g +
                              "' is not in the vocabulary");
      }
    }
    RecordChair rc{rec.image_id, extract_objects(rec.caption, vocab), {}};
    std::set_difference(rc.mentioned.begin(), rc.mentioned.end(), rec.ground_truth.begin(),
                        rec.ground_truth.end(), std::inserter(rc.hallucinated, rc.hallucinated.end()));
    r.mentioned += rc.mentioned.size();
    r.hallucinated += rc.hallucinated.size();
    r.captions_with_hallucination += rc.hallucinated.empty() ? 0 : 1;
    r.records.push_back(std::move(rc));
  }
  r.captions = records.size();
  r.degenerate_i = r.mentioned == 0;
  r.degenerate_s = r.captions == 0;
  r.chair_i = r.degenerate_i ? 0.0 : double(r.hallucinated) / double(r.mentioned);
  r.chair_s = r.degenerate_s ? 0.0 : double(r.captions_with_hallucination) / double(r.captions);
  return r;
}

// ---------------------------------------------------------------------------
// Yes/no probes

enum class YesNo { kYes, kNo };

struct YesNoRecord {
  std::string image_id;
  std::string question;
  YesNo label = YesNo::kYes;
  std::string split;  // rand | pop | adv
  std::string prediction;
};

inline bool valid_split(const std::string& s) { return s == "rand" || s == "pop" || s == "adv"; }

/// First alphabetic word, case-insensitive; only "yes" and "no" parse.
inline std::optional<YesNo> parse_yes_no(std::string_view prediction) {
  std::size_t i = 0;
  while (i < prediction.size() && !std::isalpha(static_cast<unsigned char>(prediction[i]))) ++i;
  std::string word;
  while (i < prediction.size() && std::isalpha(static_cast<unsigned char>(prediction[i]))) {
    word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(prediction[i++]))));
  }
  if (word == "yes") return YesNo::kYes;
  if (word == "no") return YesNo::kNo;
  return std::nullopt;
}

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t unparseable = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

struct YesNoMetrics {
  Accuracy overall;
  std::map<std::string, Accuracy> per_split;
};

inline YesNoMetrics yesno_metrics(std::span<const YesNoRecord> records) {
  if (records.empty()) throw ValidationError("yes/no metrics need at least one record");
  YesNoMetrics m;
  for (const auto& r : records) {
    if (!valid_split(r.split)) {
      throw ValidationError("record " + r.image_id + ": split '" + r.split +
                            "' is not one of rand, pop, adv");
    }
    const auto pred = parse_yes_no(r.prediction);
    auto& s = m.per_split[r.split];
    for (Accuracy* a : {&m.overall, &s}) {
      ++a->total;
      if (!pred) ++a->unparseable;
      else if (*pred == r.label) ++a->correct;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Length statistics

struct LengthStats {
  double mean_tokens = 0.0;
  std::size_t bucket_width = 8;
  std::vector<std::size_t> histogram;  // histogram[k] counts lengths in [8k, 8k+7]
};

inline LengthStats length_stats(std::span<const std::string> texts) {
  if (texts.empty()) throw ValidationError("length statistics need at least one text");
  LengthStats s;
  std::size_t sum = 0;
  for (const auto& t : texts) {
    const std::size_t n = token_count(t);
    sum += n;
    const std::size_t bucket = n / s.bucket_width;
    if (s.histogram.size() <= bucket) s.histogram.resize(bucket + 1, 0);
    ++s.histogram[bucket];
  }
  s.mean_tokens = double(sum) / double(texts.size());
  return s;
}

// ---------------------------------------------------------------------------
// Pairwise judging

enum class Verdict { kA, kB, kTie, kUnparseable };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::kA: return "A";
    case Verdict::kB: return "B";
    case Verdict::kTie: return "TIE";
    default: return "UNPARSEABLE";
  }
}

/// Judging prompt. Labels stay attached to their answers; `a_first` only
/// changes which one is shown first.
inline std::string judge_prompt(const std::string& question, const std::string& answer_a,
                                const std::string& answer_b, bool a_first = true) {
  std::string out =
      "You are an impartial judge of answers about an image. Decide which answer is more "
      "accurate, detailed and helpful for the question.\n\nQuestion: " +
      question + "\n\n";
  const std::string block_a = "[A]\n" + answer_a + "\n\n";
  const std::string block_b = "[B]\n" + answer_b + "\n\n";
  out += a_first ? block_a + block_b : block_b + block_a;
  out += "Reply with exactly one of: A, B, TIE.";
  return out;
}

/// First standalone token among A, B (upper case) and TIE (any case).
inline Verdict parse_verdict(std::string_view reply) {
  std::size_t i = 0;
  while (i < reply.size()) {
    while (i < reply.size() && !std::isalnum(static_cast<unsigned char>(reply[i]))) ++i;
    const std::size_t start = i;
    while (i < reply.size() && std::isalnum(static_cast<unsigned char>(reply[i]))) ++i;
    const std::string_view tok = reply.substr(start, i - start);
    if (tok == "A") return Verdict::kA;
    if (tok == "B") return Verdict::kB;
    if (tok.size() == 3) {
      std::string up;
      for (char c : tok) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
      if (up == "TIE") return Verdict::kTie;
    }
  }
  return Verdict::kUnparseable;
}

using JudgeFn = std::function<std::string(const std::string& prompt)>;

/// With `debias`, asks again with the answers shown in the other order and
/// keeps the verdict only if both passes agree (otherwise TIE).
inline Verdict judge_pair(const JudgeFn& ask, const std::string& question, const std::string& answer_a,
                          const std::string& answer_b, bool debias = true) {
  const Verdict first = parse_verdict(ask(judge_prompt(question, answer_a, answer_b, true)));
  if (!debias || first == Verdict::kUnparseable) return first;
  const Verdict second = parse_verdict(ask(judge_prompt(question, answer_a, answer_b, false)));
  if (second == Verdict::kUnparseable) return Verdict::kUnparseable;
  return first == second ? first : Verdict::kTie;
}

inline Verdict judge_pair(RemoteClient& client, const std::string& question, const std::string& answer_a,
                          const std::string& answer_b, bool debias = true) {
  return judge_pair([&](const std::string& p) { return client.chat(p).text; }, question, answer_a,
                    answer_b, debias);
}

struct WinRate {
  double win = 0.0;
  double tie = 0.0;
  double loss = 0.0;
  std::size_t counted = 0;
  std::size_t unparseable = 0;
};

/// Fractions over parseable verdicts, judged for answer A.
inline WinRate win_rate(std::span<const Verdict> verdicts) {
  WinRate w;
  std::size_t a = 0, b = 0, t = 0;
  for (Verdict v : verdicts) {
    switch (v) {
      case Verdict::kA: ++a; break;
      case Verdict::kB: ++b; break;
      case Verdict::kTie: ++t; break;
      default: ++w.unparseable;
    }
  }
  w.counted = a + b + t;
  if (w.counted == 0) throw ValidationError("win rate needs at least one parseable verdict");
  const double n = double(w.counted);
  w.win = double(a) / n;
  w.tie = double(t) / n;
  w.loss = double(b) / n;
  return w;
}

}  // namespace shape
