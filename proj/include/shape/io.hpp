#pragma once

// File formats: triplet/sample/record JSON-lines, policy checkpoints, loss
// trajectories (CSV) and run manifests.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "shape/core.hpp"
#include "shape/eval.hpp"
#include "shape/forge.hpp"
#include "shape/image_io.hpp"
#include "shape/policy.hpp"

namespace shape {

using ojson = nlohmann::ordered_json;

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline std::string dump_json(const ojson& j, int indent = -1) {
  try {
    return j.dump(indent);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("cannot serialise JSON: ") + e.what());
  }
}

/// Calls `fn(json, line_number)` for every non-blank line. Parse failures
/// and exceptions from `fn` are reported with the 1-based line number.
inline void for_each_jsonl(const std::string& text, const std::string& source,
                           const std::function<void(const nlohmann::json&, std::size_t)>& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      fn(nlohmann::json::parse(line), line_no);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(source + ": line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), source + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Triplets

/// Keys in fixed order: id, iteration, question, image, winner, loser,
/// candidates [{augmentation, text}], prompt.
inline ojson triplet_to_json(const PreferenceTriplet& t) {
  ojson j;
  j["id"] = t.sample_id;
  j["iteration"] = t.iteration;
  j["question"] = t.question;
  if (const auto* c = std::get_if<std::uint64_t>(&t.image)) j["image"] = *c;
  else j["image"] = std::get<std::string>(t.image);
  j["winner"] = t.winner;
  j["loser"] = t.loser;
  ojson cands = ojson::array();
  for (const auto& c : t.candidates) {
    ojson cj;
    cj["augmentation"] = c.augmentation_name;
    cj["text"] = c.text;
    cands.push_back(std::move(cj));
  }
  j["candidates"] = std::move(cands);
  j["prompt"] = t.prompt;
  return j;
}

inline PreferenceTriplet triplet_from_json(const nlohmann::json& j) {
  PreferenceTriplet t;
  t.sample_id = j.at("id").get<std::string>();
  t.iteration = j.at("iteration").get<int>();
  t.question = j.at("question").get<std::string>();
  const auto& img = j.at("image");
  if (img.is_number_unsigned() || img.is_number_integer()) t.image = img.get<std::uint64_t>();
  else t.image = img.get<std::string>();
  t.winner = j.at("winner").get<std::string>();
  t.loser = j.at("loser").get<std::string>();
  for (const auto& c : j.at("candidates")) {
    t.candidates.push_back(
        CandidateAnswer::make(c.at("augmentation").get<std::string>(), c.at("text").get<std::string>()));
  }
  t.prompt = j.at("prompt").get<std::string>();
  validate_triplet(t);
  return t;
}

inline std::string triplets_to_jsonl(std::span<const PreferenceTriplet> triplets) {
  std::string out;
  for (const auto& t : triplets) {
    out += dump_json(triplet_to_json(t));
    out.push_back('\n');
  }
  return out;
}

inline void write_jsonl(const std::string& path, std::span<const PreferenceTriplet> triplets) {
  write_text_file(path, triplets_to_jsonl(triplets));
}

inline std::vector<PreferenceTriplet> parse_jsonl(const std::string& text, const std::string& source) {
  std::vector<PreferenceTriplet> out;
  for_each_jsonl(text, source, [&](const nlohmann::json& j, std::size_t) {
    out.push_back(triplet_from_json(j));
  });
  return out;
}

inline std::vector<PreferenceTriplet> read_jsonl(const std::string& path) {
  return parse_jsonl(read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// Samples: {"id", "question", "image"} where image is a toy context (integer),
// a file path (string, relative to the samples file) or an inline tensor
// {"height", "width", "channels", "data"}.

inline Sample sample_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  Sample s;
  s.id = j.at("id").get<std::string>();
  s.question = j.value("question", "");
  const auto& img = j.at("image");
  if (img.is_number_integer() || img.is_number_unsigned()) {
    if (img.is_number_integer() && img.get<std::int64_t>() < 0) {
      throw ValidationError("sample " + s.id + ": toy context must be non-negative");
    }
    s.image = ToyContext{img.get<std::uint64_t>()};
  } else if (img.is_string()) {
    std::filesystem::path p = img.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    s.image = ImagePath{p.lexically_normal().string()};
  } else {
    s.image = ImageTensor{img.at("height").get<int>(), img.at("width").get<int>(),
                          img.at("channels").get<int>(), img.at("data").get<std::vector<double>>()};
  }
  validate_sample(s);
  return s;
}

inline std::vector<Sample> read_samples(const std::string& path) {
  std::vector<Sample> out;
  std::set<std::string> seen;
  const auto base = std::filesystem::path(path).parent_path();
  for_each_jsonl(read_file_bytes(path), path, [&](const nlohmann::json& j, std::size_t) {
    Sample s = sample_from_json(j, base);
    if (!seen.insert(s.id).second) throw ValidationError("duplicate sample id '" + s.id + "'");
    out.push_back(std::move(s));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Eval records

inline std::vector<CaptionRecord> read_caption_records(const std::string& path) {
  std::vector<CaptionRecord> out;
  for_each_jsonl(read_file_bytes(path), path, [&](const nlohmann::json& j, std::size_t) {
    CaptionRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    for (const auto& g : j.at("ground_truth")) r.ground_truth.insert(g.get<std::string>());
    out.push_back(std::move(r));
  });
  return out;
}

inline std::vector<YesNoRecord> read_yesno_records(const std::string& path) {
  std::vector<YesNoRecord> out;
  for_each_jsonl(read_file_bytes(path), path, [&](const nlohmann::json& j, std::size_t) {
    YesNoRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.question = j.value("question", "");
    const std::string label = j.at("label").get<std::string>();
    if (label == "yes") r.label = YesNo::kYes;
    else if (label == "no") r.label = YesNo::kNo;
    else throw ValidationError("label must be \"yes\" or \"no\", got \"" + label + "\"");
    r.split = j.at("split").get<std::string>();
    if (!valid_split(r.split)) throw ValidationError("split must be rand, pop or adv");
    r.prediction = j.at("prediction").get<std::string>();
    out.push_back(std::move(r));
  });
  return out;
}

struct JudgeItem {
  std::string question;
  std::string answer_a;
  std::string answer_b;
  std::optional<Verdict> verdict;  // pre-recorded judgement, if any
};

inline Verdict verdict_from_string(const std::string& s) {
  if (s == "A") return Verdict::kA;
  if (s == "B") return Verdict::kB;
  if (s == "TIE" || s == "tie") return Verdict::kTie;
  if (s == "UNPARSEABLE" || s == "unparseable") return Verdict::kUnparseable;
  throw ValidationError("verdict must be A, B, TIE or UNPARSEABLE, got '" + s + "'");
}

inline std::vector<JudgeItem> read_judge_items(const std::string& path) {
  std::vector<JudgeItem> out;
  for_each_jsonl(read_file_bytes(path), path, [&](const nlohmann::json& j, std::size_t) {
    JudgeItem item{j.at("question").get<std::string>(), j.at("answer_a").get<std::string>(),
                   j.at("answer_b").get<std::string>(), std::nullopt};
    if (j.contains("verdict")) item.verdict = verdict_from_string(j.at("verdict").get<std::string>());
    out.push_back(std::move(item));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "shape-toy-policy/1";

inline std::string checkpoint_to_text(const Policy& p) {
  ojson j;
  j["format"] = kCheckpointFormat;
  j["vocab_size"] = p.vocab_size();
  j["contexts"] = p.contexts();
  j["checkpoint_id"] = p.checkpoint_id();
  j["weights"] = std::vector<double>(p.weights().begin(), p.weights().end());
  return dump_json(j) + "\n";
}

inline void write_checkpoint(const std::string& path, const Policy& p) {
  write_text_file(path, checkpoint_to_text(p));
}

inline Policy read_checkpoint(const std::string& path) {
  try {
    const auto j = nlohmann::json::parse(read_file_bytes(path));
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw IoError(path + ": unsupported checkpoint format");
    }
    Policy p(j.at("vocab_size").get<int>(), j.at("contexts").get<int>(),
             j.at("weights").get<std::vector<double>>());
    if (p.checkpoint_id() != j.at("checkpoint_id").get<std::string>()) {
      throw IoError(path + ": checkpoint_id does not match the stored weights");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loss trajectories

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// `step,mean_loss` with 1-based steps.
inline std::string trajectory_to_csv(std::span<const double> losses, std::size_t first_step = 1) {
  std::string out = "step,mean_loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) {
    out += std::to_string(first_step + i) + "," + format_double(losses[i]) + "\n";
  }
  return out;
}

inline std::vector<double> read_trajectory_csv(const std::string& path) {
  std::istringstream in(read_file_bytes(path));
  std::string line;
  if (!std::getline(in, line) || line != "step,mean_loss") {
    throw IoError(path + ": expected header 'step,mean_loss'");
  }
  std::vector<double> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      out.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw IoError(path + ": line " + std::to_string(line_no) + ": malformed row");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

inline ojson manifest_to_json(const RunManifest& m) {
  ojson j;
  j["run_id"] = m.run_id;
  j["seed"] = m.seed;
  j["config_digest"] = m.config_digest;
  j["initial_model"] = ojson{{"checkpoint_id", m.initial_model_id}, {"path", m.initial_model_path}};
  ojson hp = ojson::object();
  for (const auto& [k, v] : m.recorded_hparams) hp[k] = v;
  j["recorded_hparams"] = std::move(hp);
  ojson its = ojson::array();
  for (const auto& it : m.iterations) {
    ojson e;
    e["iteration"] = it.iteration;
    e["dataset"] = it.dataset_path;
    e["checkpoint_id"] = it.checkpoint_id;
    e["checkpoint"] = it.checkpoint_path;
    e["reference_checkpoint_id"] = it.reference_checkpoint_id;
    e["trajectory"] = it.trajectory_path;
    its.push_back(std::move(e));
  }
  j["iterations"] = std::move(its);
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_digest = j.at("config_digest").get<std::string>();
  m.initial_model_id = j.at("initial_model").at("checkpoint_id").get<std::string>();
  m.initial_model_path = j.at("initial_model").at("path").get<std::string>();
  for (const auto& [k, v] : j.at("recorded_hparams").items()) m.recorded_hparams[k] = v.get<double>();
  for (const auto& e : j.at("iterations")) {
    ManifestIteration it;
    it.iteration = e.at("iteration").get<int>();
    it.dataset_path = e.at("dataset").get<std::string>();
    it.checkpoint_id = e.at("checkpoint_id").get<std::string>();
    it.checkpoint_path = e.at("checkpoint").get<std::string>();
    it.reference_checkpoint_id = e.at("reference_checkpoint_id").get<std::string>();
    it.trajectory_path = e.at("trajectory").get<std::string>();
    m.iterations.push_back(std::move(it));
  }
  validate_manifest(m);
  return m;
}

inline void write_manifest(const std::string& path, const RunManifest& m) {
  write_text_file(path, dump_json(manifest_to_json(m), 2) + "\n");
}

inline RunManifest read_manifest(const std::string& path) {
  try {
    return manifest_from_json(nlohmann::json::parse(read_file_bytes(path)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

/// Writes each iteration under `dir` as iter-<t>/{triplets.jsonl,
/// checkpoint.json, loss.csv}; paths recorded in the manifest are relative
/// to `dir`.
class DirectorySink final : public IterationSink {
 public:
  explicit DirectorySink(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::string save_initial(const Policy& policy) override {
    write_checkpoint((dir_ / "initial.checkpoint.json").string(), policy);
    return "initial.checkpoint.json";
  }

  IterationArtifacts save_iteration(int t, const PreferenceDataset& data, const Policy& trained,
                                    std::span<const double> trajectory) override {
    const std::string sub = "iter-" + std::to_string(t);
    std::filesystem::create_directories(dir_ / sub);
    IterationArtifacts a{sub + "/triplets.jsonl", sub + "/checkpoint.json", sub + "/loss.csv"};
    write_jsonl((dir_ / a.dataset_path).string(), data.triplets);
    write_checkpoint((dir_ / a.checkpoint_path).string(), trained);
    write_text_file((dir_ / a.trajectory_path).string(), trajectory_to_csv(trajectory));
    return a;
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace shape
