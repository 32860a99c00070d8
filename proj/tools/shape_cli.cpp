// shape: build preference triplets, train the toy policy, score outputs.
//
// Exit codes: 0 success, 1 operational error, 2 usage error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shape/augment.hpp"
#include "shape/backend.hpp"
#include "shape/config.hpp"
#include "shape/dpo.hpp"
#include "shape/eval.hpp"
#include "shape/forge.hpp"
#include "shape/image_io.hpp"
#include "shape/io.hpp"
#include "shape/policy.hpp"
#include "shape/remote.hpp"

namespace fs = std::filesystem;
using shape::ojson;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_in_flight;
  std::string out;
  bool json = false;
};

shape::AppConfig load(const Globals& g, bool required) {
  const shape::ConfigOverrides ov{g.seed, g.max_in_flight, std::nullopt};
  if (g.config.empty()) {
    if (required) throw UsageError("--config is required for this command");
    return shape::parse_config("{}", "defaults", {}, ov);
  }
  return shape::load_config(g.config, ov);
}

std::string out_dir(const Globals& g, const shape::AppConfig& c) {
  return g.out.empty() ? c.paths.output_dir : g.out;
}

std::string pick(const std::string& flag, const std::string& from_config, const char* name) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  throw UsageError(std::string("missing input: pass ") + name + " or set it in the config");
}

// Holds whatever a backend borrows (policy, HTTP client). Not movable.
class BackendHolder {
 public:
  BackendHolder(const shape::AppConfig& c, const std::string& init_checkpoint) {
    switch (c.backend) {
      case shape::BackendKind::kMock:
        backend_ = std::make_unique<shape::MockBackend>(c.mock.fail_ids);
        model_id_ = "mock";
        break;
      case shape::BackendKind::kToy:
        policy_.emplace(shape::initial_policy(c, init_checkpoint));
        backend_ = std::make_unique<shape::ToyBackend>(*policy_, c.toy.max_tokens, c.toy.temperature);
        model_id_ = policy_->checkpoint_id();
        break;
      case shape::BackendKind::kRemote:
        client_ = std::make_unique<shape::RemoteClient>(c.remote);
        backend_ = std::make_unique<shape::RemoteBackend>(*client_);
        model_id_ = "remote:" + c.remote.model;
        break;
    }
  }
  BackendHolder(const BackendHolder&) = delete;
  BackendHolder& operator=(const BackendHolder&) = delete;

  shape::Backend& backend() { return *backend_; }
  const std::optional<shape::Policy>& policy() const { return policy_; }
  const std::string& model_id() const { return model_id_; }

 private:
  std::optional<shape::Policy> policy_;
  std::unique_ptr<shape::RemoteClient> client_;
  std::unique_ptr<shape::Backend> backend_;
  std::string model_id_;
};

std::map<std::string, double> hparams(const shape::AppConfig& c) {
  return {{"beta", c.train.beta},
          {"learning_rate", c.train.learning_rate},
          {"steps", double(c.train.steps)},
          {"batch_size", double(c.train.batch_size)},
          {"lora_rank", double(c.lora_rank)}};
}

void print(const Globals& g, const ojson& doc, const std::string& human) {
  if (g.json) {
    std::cout << doc.dump(2) << "\n";
  } else {
    std::cout << human;
  }
}

void write_metrics(const std::string& dir, const ojson& doc, const std::string& csv) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  shape::write_text_file((fs::path(dir) / "metrics.json").string(), doc.dump(2) + "\n");
  shape::write_text_file((fs::path(dir) / "metrics.csv").string(), csv);
}

std::string f17(double v) { return shape::format_double(v); }

// ---------------------------------------------------------------------------

int cmd_forge_build(const Globals& g, const std::string& samples_flag) {
  const auto c = load(g, true);
  const auto samples = shape::read_samples(pick(samples_flag, c.paths.samples_file, "--samples"));
  BackendHolder holder(c, "");
  shape::ForgeConfig fc = c.forge;
  fc.iteration = 1;
  const shape::Rng root(c.seed);
  const auto data = shape::build_dataset(holder.backend(), samples, fc, root.derive("forge", 1),
                                         c.max_in_flight, c.failure_policy);

  const fs::path dir = out_dir(g, c);
  fs::create_directories(dir);
  shape::write_jsonl((dir / "triplets.jsonl").string(), data.triplets);

  shape::RunManifest m;
  m.run_id = shape::make_run_id(c.digest, c.seed);
  m.seed = c.seed;
  m.config_digest = c.digest;
  m.initial_model_id = holder.model_id();
  if (holder.policy()) {
    shape::write_checkpoint((dir / "initial.checkpoint.json").string(), *holder.policy());
    m.initial_model_path = "initial.checkpoint.json";
  }
  m.recorded_hparams = hparams(c);
  shape::ManifestIteration it;
  it.iteration = 1;
  it.dataset_path = "triplets.jsonl";
  it.reference_checkpoint_id = holder.model_id();
  m.iterations.push_back(it);
  shape::write_manifest((dir / "manifest.json").string(), m);

  ojson failures = ojson::array();
  for (const auto& f : data.failures) {
    failures.push_back({{"index", f.index}, {"id", f.sample_id}, {"message", f.message}});
  }
  const ojson doc = {{"command", "forge build"},
                     {"triplets", data.triplets.size()},
                     {"degenerate", data.degenerate},
                     {"failures", failures},
                     {"dataset", (dir / "triplets.jsonl").string()},
                     {"manifest", (dir / "manifest.json").string()}};
  std::ostringstream human;
  human << "wrote " << data.triplets.size() << " triplets to " << (dir / "triplets.jsonl").string() << "\n";
  if (data.degenerate) human << data.degenerate << " triplets have winner == loser\n";
  for (const auto& f : data.failures) human << "skipped " << f.sample_id << ": " << f.message << "\n";
  print(g, doc, human.str());
  return 0;
}

int cmd_forge_run(const Globals& g, const std::string& samples_flag, const std::string& init) {
  const auto c = load(g, true);
  if (c.backend != shape::BackendKind::kToy) {
    throw shape::ConfigError("forge run trains the generator, so backend.kind must be toy");
  }
  const auto samples = shape::read_samples(pick(samples_flag, c.paths.samples_file, "--samples"));
  const fs::path dir = out_dir(g, c);
  shape::DirectorySink sink(dir);

  shape::LoopOptions opts;
  opts.seed = c.seed;
  opts.max_tokens = c.toy.max_tokens;
  opts.temperature = c.toy.temperature;
  opts.max_in_flight = c.max_in_flight;
  opts.failure_policy = c.failure_policy;
  opts.config_digest = c.digest;
  opts.recorded_hparams = hparams(c);
  const auto res = shape::run_iterations(samples, c.forge, c.train, shape::initial_policy(c, init),
                                         c.iterations, sink, opts);
  shape::write_manifest((dir / "manifest.json").string(), res.manifest);

  ojson iters = ojson::array();
  std::ostringstream human;
  for (std::size_t i = 0; i < res.manifest.iterations.size(); ++i) {
    const auto& it = res.manifest.iterations[i];
    const auto& traj = res.trajectories[i];
    iters.push_back({{"iteration", it.iteration},
                     {"checkpoint_id", it.checkpoint_id},
                     {"reference_checkpoint_id", it.reference_checkpoint_id},
                     {"first_loss", traj.front()},
                     {"final_loss", traj.back()}});
    human << "iteration " << it.iteration << ": loss " << f17(traj.front()) << " -> "
          << f17(traj.back()) << ", checkpoint " << it.checkpoint_id.substr(0, 12) << "\n";
  }
  human << "manifest: " << (dir / "manifest.json").string() << "\n";
  print(g, {{"command", "forge run"}, {"run_id", res.manifest.run_id}, {"iterations", iters},
            {"manifest", (dir / "manifest.json").string()}},
        human.str());
  return 0;
}

int cmd_train(const Globals& g, const std::string& data_path, const std::string& init) {
  const auto c = load(g, true);
  shape::PreferenceDataset data;
  data.triplets = shape::read_jsonl(data_path);
  if (data.triplets.empty()) throw shape::ValidationError(data_path + ": dataset is empty");
  const shape::Policy start = shape::initial_policy(c, init);
  const auto encoded = shape::encode_dataset(data.triplets, start.vocab_size());
  const auto res = shape::train(start, start, encoded, c.train);

  const fs::path dir = out_dir(g, c);
  shape::DirectorySink sink(dir);
  shape::RunManifest m;
  m.run_id = shape::make_run_id(c.digest, c.seed);
  m.seed = c.seed;
  m.config_digest = c.digest;
  m.initial_model_id = start.checkpoint_id();
  m.initial_model_path = sink.save_initial(start);
  m.recorded_hparams = hparams(c);
  const auto files = sink.save_iteration(1, data, res.policy, res.trajectory);
  m.iterations.push_back({1, files.dataset_path, res.policy.checkpoint_id(), files.checkpoint_path,
                          start.checkpoint_id(), files.trajectory_path});
  shape::write_manifest((dir / "manifest.json").string(), m);

  const double margin = shape::mean_margin(res.policy, start, encoded, c.train.beta);
  const ojson doc = {{"command", "train"},
                     {"triplets", encoded.size()},
                     {"first_loss", res.trajectory.front()},
                     {"final_loss", res.trajectory.back()},
                     {"mean_margin", margin},
                     {"checkpoint_id", res.policy.checkpoint_id()},
                     {"manifest", (dir / "manifest.json").string()}};
  print(g, doc,
        "loss " + f17(res.trajectory.front()) + " -> " + f17(res.trajectory.back()) +
            ", mean margin " + f17(margin) + "\nmanifest: " + (dir / "manifest.json").string() + "\n");
  return 0;
}

int cmd_eval_chair(const Globals& g, const std::string& records_path, const std::string& vocab_flag) {
  const auto c = load(g, false);
  const auto vocab = shape::ObjectVocabulary::parse(
      shape::read_file_bytes(pick(vocab_flag, c.paths.vocab_file, "--vocab")));
  const auto records = shape::read_caption_records(records_path);
  const auto r = shape::chair_scores(records, vocab);

  ojson per = ojson::array();
  for (const auto& rc : r.records) {
    per.push_back({{"image_id", rc.image_id}, {"mentioned", rc.mentioned}, {"hallucinated", rc.hallucinated}});
  }
  const ojson doc = {{"metric", "chair"},
                     {"chair_i", r.chair_i},
                     {"chair_s", r.chair_s},
                     {"mentioned", r.mentioned},
                     {"hallucinated", r.hallucinated},
                     {"captions", r.captions},
                     {"captions_with_hallucination", r.captions_with_hallucination},
                     {"degenerate_i", r.degenerate_i},
                     {"degenerate_s", r.degenerate_s},
                     {"records", per}};
  const std::string csv = "metric,value\nchair_i," + f17(r.chair_i) + "\nchair_s," + f17(r.chair_s) +
                          "\nmentioned," + std::to_string(r.mentioned) + "\nhallucinated," +
                          std::to_string(r.hallucinated) + "\ncaptions," + std::to_string(r.captions) +
                          "\n";
  write_metrics(g.out, doc, csv);
  std::cout << doc.dump(2) << "\n";
  return 0;
}

ojson accuracy_json(const shape::Accuracy& a) {
  return {{"accuracy", a.accuracy()}, {"correct", a.correct}, {"total", a.total}, {"unparseable", a.unparseable}};
}

int cmd_eval_pope(const Globals& g, const std::string& records_path) {
  const auto records = shape::read_yesno_records(records_path);
  const auto m = shape::yesno_metrics(records);
  std::vector<std::string> predictions;
  predictions.reserve(records.size());
  for (const auto& r : records) predictions.push_back(r.prediction);
  const auto len = shape::length_stats(predictions);

  ojson splits = ojson::object();
  std::string csv = "split,accuracy,correct,total,unparseable\n";
  auto row = [&](const std::string& name, const shape::Accuracy& a) {
    csv += name + "," + f17(a.accuracy()) + "," + std::to_string(a.correct) + "," + std::to_string(a.total) +
           "," + std::to_string(a.unparseable) + "\n";
  };
  row("all", m.overall);
  for (const auto& [name, a] : m.per_split) {
    splits[name] = accuracy_json(a);
    row(name, a);
  }
  const ojson doc = {{"metric", "yes-no"},
                     {"overall", accuracy_json(m.overall)},
                     {"per_split", splits},
                     {"length", {{"mean_tokens", len.mean_tokens},
                                 {"bucket_width", len.bucket_width},
                                 {"histogram", len.histogram}}}};
  write_metrics(g.out, doc, csv);
  std::cout << doc.dump(2) << "\n";
  return 0;
}

int cmd_eval_winrate(const Globals& g, const std::string& records_path) {
  const auto c = load(g, false);
  const auto items = shape::read_judge_items(records_path);
  std::unique_ptr<shape::RemoteClient> judge;
  std::vector<shape::Verdict> verdicts;
  verdicts.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.verdict) {
      verdicts.push_back(*it.verdict);
      continue;
    }
    if (c.backend != shape::BackendKind::kRemote) {
      throw shape::ValidationError(records_path + ": item " + std::to_string(i + 1) +
                                   " has no verdict and no remote judge is configured");
    }
    if (!judge) judge = std::make_unique<shape::RemoteClient>(c.remote);
    verdicts.push_back(shape::judge_pair(*judge, it.question, it.answer_a, it.answer_b, c.judge_debias));
  }
  const auto w = shape::win_rate(verdicts);
  ojson vs = ojson::array();
  for (auto v : verdicts) vs.push_back(shape::to_string(v));
  const ojson doc = {{"metric", "win-rate"},
                     {"win", w.win},
                     {"tie", w.tie},
                     {"loss", w.loss},
                     {"counted", w.counted},
                     {"unparseable", w.unparseable},
                     {"verdicts", vs}};
  const std::string csv = "metric,value\nwin," + f17(w.win) + "\ntie," + f17(w.tie) + "\nloss," +
                          f17(w.loss) + "\ncounted," + std::to_string(w.counted) + "\nunparseable," +
                          std::to_string(w.unparseable) + "\n";
  write_metrics(g.out, doc, csv);
  std::cout << doc.dump(2) << "\n";
  return 0;
}

int cmd_augment_preview(const Globals& g, const std::string& in, const std::string& preset_name) {
  if (g.out.empty()) throw UsageError("augment preview needs --out <image.png|image.ppm>");
  const auto c = load(g, false);
  const auto spec = shape::preset(preset_name);
  const auto img = shape::read_image(in);
  shape::Rng rng = shape::Rng(c.seed).derive("preview");
  const auto out = shape::apply(img, spec, rng);
  shape::write_image(g.out, out);
  print(g,
        {{"command", "augment preview"},
         {"preset", spec.name},
         {"kind", shape::kind_name(spec.params)},
         {"width", out.width},
         {"height", out.height},
         {"output", g.out}},
        "wrote " + g.out + " (" + spec.name + ", " + std::to_string(out.width) + "x" +
            std::to_string(out.height) + ")\n");
  return 0;
}

int cmd_report(const Globals& g, const std::string& manifest_path) {
  const auto m = shape::read_manifest(manifest_path);
  shape::validate_manifest(m);
  const fs::path base = fs::path(manifest_path).parent_path();

  std::string csv = "step,mean_loss\n";
  ojson iters = ojson::array();
  std::size_t step = 0;
  for (const auto& it : m.iterations) {
    ojson entry = {{"iteration", it.iteration},
                   {"checkpoint_id", it.checkpoint_id},
                   {"reference_checkpoint_id", it.reference_checkpoint_id}};
    if (!it.trajectory_path.empty()) {
      const auto traj = shape::read_trajectory_csv((base / it.trajectory_path).string());
      entry["first_step"] = step + 1;
      for (double v : traj) csv += std::to_string(++step) + "," + f17(v) + "\n";
      entry["last_step"] = step;
      if (!traj.empty()) {
        entry["first_loss"] = traj.front();
        entry["final_loss"] = traj.back();
      }
    }
    iters.push_back(std::move(entry));
  }
  const ojson doc = {{"run_id", m.run_id},
                     {"seed", m.seed},
                     {"config_digest", m.config_digest},
                     {"initial_model_id", m.initial_model_id},
                     {"reference_chain_valid", true},
                     {"steps", step},
                     {"iterations", iters}};
  if (g.out.empty()) {
    std::cout << csv;
    std::cerr << "run " << m.run_id << ": " << m.iterations.size() << " iterations, " << step << " steps\n";
    return 0;
  }
  fs::create_directories(g.out);
  shape::write_text_file((fs::path(g.out) / "loss.csv").string(), csv);
  shape::write_text_file((fs::path(g.out) / "summary.json").string(), doc.dump(2) + "\n");
  print(g, doc,
        "run " + m.run_id + ": " + std::to_string(m.iterations.size()) + " iterations, " +
            std::to_string(step) + " steps\nwrote " + (fs::path(g.out) / "loss.csv").string() + "\n");
  return 0;
}

int fail(const Globals& g, int code, const std::string& kind, const std::string& message) {
  if (g.json) {
    std::cout << ojson{{"error", {{"kind", kind}, {"message", message}}}, {"exit_code", code}}.dump(2) << "\n";
  } else {
    std::cerr << "error: " << message << "\n";
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-data forge, toy DPO trainer and evaluators.", "shape"};
  app.fallthrough();
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "Configuration file (JSON)");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--max-in-flight", g.max_in_flight, "Override max_in_flight")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory (output file for augment preview)");
  app.add_flag("--json", g.json, "Machine-readable output and errors");

  std::string samples, init, data, records, vocab, in, preset, manifest;
  std::function<int()> run;

  auto* forge = app.add_subcommand("forge", "Build preference triplets");
  forge->require_subcommand(1);
  auto* build = forge->add_subcommand("build", "One pass over the samples with the configured backend");
  build->add_option("--samples", samples, "Samples JSONL (default: paths.samples_file)");
  build->callback([&] { run = [&] { return cmd_forge_build(g, samples); }; });
  auto* frun = forge->add_subcommand("run", "Forge, train and update the reference for each iteration");
  frun->add_option("--samples", samples, "Samples JSONL (default: paths.samples_file)");
  frun->add_option("--init", init, "Initial checkpoint");
  frun->callback([&] { run = [&] { return cmd_forge_run(g, samples, init); }; });

  auto* train = app.add_subcommand("train", "DPO on an existing triplet file");
  train->add_option("--data", data, "Triplets JSONL")->required();
  train->add_option("--init", init, "Initial checkpoint (also the reference)");
  train->callback([&] { run = [&] { return cmd_train(g, data, init); }; });

  auto* eval = app.add_subcommand("eval", "Score model outputs");
  eval->require_subcommand(1);
  auto* chair = eval->add_subcommand("chair", "Caption hallucination rates");
  chair->add_option("--records", records, "Caption records JSONL")->required();
  chair->add_option("--vocab", vocab, "Object vocabulary (default: paths.vocab_file)");
  chair->callback([&] { run = [&] { return cmd_eval_chair(g, records, vocab); }; });
  auto* pope = eval->add_subcommand("pope", "Yes/no probe accuracy");
  pope->add_option("--records", records, "Yes/no records JSONL")->required();
  pope->callback([&] { run = [&] { return cmd_eval_pope(g, records); }; });
  auto* winrate = eval->add_subcommand("winrate", "Pairwise judge win rate");
  winrate->add_option("--records", records, "Judge items JSONL")->required();
  winrate->callback([&] { run = [&] { return cmd_eval_winrate(g, records); }; });

  auto* augment = app.add_subcommand("augment", "Image augmentations");
  augment->require_subcommand(1);
  auto* preview = augment->add_subcommand("preview", "Apply a preset to one image");
  preview->add_option("--in", in, "Input PNG or PPM")->required();
  preview->add_option("--preset", preset, "Preset name")->required();
  preview->callback([&] { run = [&] { return cmd_augment_preview(g, in, preset); }; });

  auto* report = app.add_subcommand("report", "Loss CSV and run summary from a manifest");
  report->add_option("--manifest", manifest, "Run manifest")->required();
  report->callback([&] { run = [&] { return cmd_report(g, manifest); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    return fail(g, 2, "usage", e.what());
  }

  try {
    return run();
  } catch (const UsageError& e) {
    return fail(g, 2, "usage", e.what());
  } catch (const shape::Error& e) {
    return fail(g, 1, e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail(g, 1, "internal", e.what());
  }
}
