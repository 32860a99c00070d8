#include <gtest/gtest.h>

#include <atomic>
#include <mutex>

#include "shape/backend.hpp"
#include "shape/forge.hpp"
#include "support.hpp"

using namespace shape;

namespace {

std::vector<Sample> toy_samples(int n, int offset = 0) {
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({"s" + std::to_string(i), ToyContext{std::uint64_t(i + offset)}, "q" + std::to_string(i % 3)});
  }
  return out;
}

// Records what the forge hands to summarize().
class RecordingBackend final : public Backend {
 public:
  std::string name() const override { return "recording"; }
  std::string answer(const ForgeInput& in, Rng&) override {
    return in.augmentation ? "aug-" + in.augmentation->name : "plain";
  }
  std::string summarize(std::span<const std::string> candidates, const std::string& prompt, Rng&) override {
    std::lock_guard lock(mu_);
    seen_candidates.assign(candidates.begin(), candidates.end());
    seen_prompt = prompt;
    return "summary";
  }
  std::vector<std::string> seen_candidates;
  std::string seen_prompt;

 private:
  std::mutex mu_;
};

// Always answers the same text, so winner == loser in sheva mode.
class ConstantBackend final : public Backend {
 public:
  std::string name() const override { return "constant"; }
  std::string answer(const ForgeInput&, Rng&) override { return "same"; }
  std::string summarize(std::span<const std::string>, const std::string&, Rng&) override { return "same"; }
};

class MemorySink final : public IterationSink {
 public:
  std::string save_initial(const Policy&) override { return "mem://initial"; }
  IterationArtifacts save_iteration(int t, const PreferenceDataset& data, const Policy&,
                                    std::span<const double> traj) override {
    datasets.push_back(data);
    trajectories.emplace_back(traj.begin(), traj.end());
    const std::string p = "mem://" + std::to_string(t);
    return {p + "/d", p + "/c", p + "/l"};
  }
  std::vector<PreferenceDataset> datasets;
  std::vector<std::vector<double>> trajectories;
};

}  // namespace

TEST(BuildTriplet, ShapeModeSummarisesCandidates) {
  RecordingBackend backend;
  ForgeConfig cfg;
  const Sample s{"x", ToyContext{3}, "what?"};
  const auto t = build_triplet(backend, s, cfg, Rng(1));
  EXPECT_EQ(t.winner, "summary");
  EXPECT_EQ(t.loser, "plain");
  EXPECT_EQ(t.prompt, "Please provide a comprehensive summary based on the following candidate answers.");
  ASSERT_EQ(t.candidates.size(), 3u);
  EXPECT_EQ(t.candidates[0].augmentation_name, "contrast");
  EXPECT_EQ(t.candidates[2].text, "aug-gamma");
  EXPECT_EQ(backend.seen_candidates, (std::vector<std::string>{"aug-contrast", "aug-diffusion-w", "aug-gamma"}));
  EXPECT_EQ(backend.seen_prompt, cfg.prompt);
  EXPECT_EQ(std::get<std::uint64_t>(t.image), 3u);
}

TEST(BuildTriplet, ShevaModeUsesAugmentedAnswerAsLoser) {
  RecordingBackend backend;
  ForgeConfig cfg;
  cfg.mode = ForgeMode::kSheva;
  cfg.aug_specs = {preset("diffusion-s")};
  const auto t = build_triplet(backend, {"x", ToyContext{0}, "q"}, cfg, Rng(1));
  EXPECT_EQ(t.winner, "plain");
  EXPECT_EQ(t.loser, "aug-diffusion-s");
  EXPECT_TRUE(t.prompt.empty());
  EXPECT_TRUE(backend.seen_candidates.empty());

  cfg.aug_specs = bank_preset("candidate-3");
  EXPECT_THROW(build_triplet(backend, {"x", ToyContext{0}, "q"}, cfg, Rng(1)), ValidationError);
}

TEST(BuildTriplet, MockIsDeterministicAndSeesAugmentedImages) {
  MockBackend mock;
  ImageTensor img = ImageTensor::filled(6, 6, 3, 0.3);
  img.at(1, 2, 0) = 0.9;
  const Sample s{"img", img, "describe"};
  const auto a = build_triplet(mock, s, ForgeConfig{}, Rng(4));
  const auto b = build_triplet(mock, s, ForgeConfig{}, Rng(4));
  EXPECT_EQ(a, b);
  std::set<std::string> texts;
  for (const auto& c : a.candidates) texts.insert(c.text);
  texts.insert(a.loser);
  EXPECT_EQ(texts.size(), 4u);
  EXPECT_EQ(std::get<std::string>(a.image).rfind("sha256:", 0), 0u);
  EXPECT_NE(a.winner.find("of 3 answers"), std::string::npos);
}

TEST(BuildDataset, IndependentOfWorkerCount) {
  MockBackend mock;
  const auto samples = toy_samples(40);
  const Rng rng(99);
  const auto one = build_dataset(mock, samples, ForgeConfig{}, rng, 1);
  for (int workers : {2, 3, 8, 64}) {
    const auto many = build_dataset(mock, samples, ForgeConfig{}, rng, workers);
    EXPECT_EQ(many.triplets, one.triplets) << workers;
  }
  ASSERT_EQ(one.triplets.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(one.triplets[i].sample_id, samples[i].id);
  EXPECT_EQ(one.source_digest, source_digest(samples));
}

TEST(BuildDataset, ToyBackendIndependentOfWorkerCount) {
  Rng init(5);
  const Policy p = Policy::random(16, 64, 1.0, init);
  ToyBackend toy(p, 8, 1.0);
  const auto samples = toy_samples(30);
  const auto a = build_dataset(toy, samples, ForgeConfig{}, Rng(3), 1);
  const auto b = build_dataset(toy, samples, ForgeConfig{}, Rng(3), 8);
  EXPECT_EQ(a.triplets, b.triplets);
  const auto enc = encode_dataset(a.triplets, 16);
  ASSERT_EQ(enc.size(), 30u);
  EXPECT_EQ(enc[7].context_w, 7u);
  EXPECT_EQ(enc[7].y_w.size(), 8u);
}

TEST(BuildDataset, FailFastAndSkipAndRecord) {
  MockBackend mock({"s3", "s5"});
  const auto samples = toy_samples(8);
  try {
    build_dataset(mock, samples, ForgeConfig{}, Rng(1), 4);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("s3"), std::string::npos);
  }
  const auto ds = build_dataset(mock, samples, ForgeConfig{}, Rng(1), 4, FailurePolicy::kSkipAndRecord);
  EXPECT_EQ(ds.triplets.size(), 6u);
  ASSERT_EQ(ds.failures.size(), 2u);
  EXPECT_EQ(ds.failures[0].sample_id, "s3");
  EXPECT_EQ(ds.failures[1].index, 5u);

  // Surviving triplets are unchanged by their neighbours failing.
  MockBackend clean;
  const auto full = build_dataset(clean, samples, ForgeConfig{}, Rng(1), 1);
  EXPECT_EQ(ds.triplets[3], full.triplets[4]);
}

TEST(BuildDataset, DegenerateCountedAndOptionallyDropped) {
  ConstantBackend constant;
  ForgeConfig cfg;
  const auto samples = toy_samples(5);
  auto ds = build_dataset(constant, samples, cfg, Rng(1), 2);
  EXPECT_EQ(ds.degenerate, 5u);
  EXPECT_EQ(ds.triplets.size(), 5u);
  cfg.drop_degenerate = true;
  ds = build_dataset(constant, samples, cfg, Rng(1), 2);
  EXPECT_EQ(ds.degenerate, 5u);
  EXPECT_TRUE(ds.triplets.empty());
}

TEST(BuildDataset, RejectsBadArguments) {
  MockBackend mock;
  EXPECT_THROW(build_dataset(mock, std::vector<Sample>{}, ForgeConfig{}, Rng(1), 1), ValidationError);
  EXPECT_THROW(build_dataset(mock, toy_samples(1), ForgeConfig{}, Rng(1), 0), ValidationError);
  ForgeConfig cfg;
  cfg.aug_specs.clear();
  EXPECT_THROW(build_dataset(mock, toy_samples(1), cfg, Rng(1), 1), ValidationError);
}

TEST(RemoteBackend, RejectsToyContextsWithoutNetwork) {
  RemoteConfig rc;
  rc.base_url = "http://127.0.0.1:9";
  RemoteClient client(rc);
  RemoteBackend backend(client);
  try {
    build_triplet(backend, {"x", ToyContext{1}, "q"}, ForgeConfig{}, Rng(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "backend");
  }
}

TEST(RunIterations, ReferenceChainAndDeterminism) {
  Rng init_rng(8);
  const Policy init = Policy::random(16, 64, 1.0, init_rng);
  const auto samples = toy_samples(32);
  TrainConfig tc;
  tc.steps = 40;
  LoopOptions opts;
  opts.seed = 5;
  opts.config_digest = "abcdef0123456789";

  MemorySink sink;
  const auto res = run_iterations(samples, ForgeConfig{}, tc, init, 3, sink, opts);
  const auto& m = res.manifest;
  ASSERT_EQ(m.iterations.size(), 3u);
  EXPECT_EQ(m.initial_model_id, init.checkpoint_id());
  EXPECT_EQ(m.initial_model_path, "mem://initial");
  EXPECT_EQ(m.iterations[0].reference_checkpoint_id, init.checkpoint_id());
  EXPECT_EQ(m.iterations[1].reference_checkpoint_id, m.iterations[0].checkpoint_id);
  EXPECT_EQ(m.iterations[2].reference_checkpoint_id, m.iterations[1].checkpoint_id);
  EXPECT_EQ(res.policy.checkpoint_id(), m.iterations[2].checkpoint_id);
  EXPECT_EQ(m.run_id, "run-abcdef012345-5");
  for (const auto& d : sink.datasets) {
    for (const auto& t : d.triplets) EXPECT_EQ(t.iteration, d.iteration);
  }
  // each iteration starts at its reference, so the first loss is ln 2
  for (const auto& traj : res.trajectories) EXPECT_NEAR(traj.front(), std::log(2.0), 1e-12);

  opts.max_in_flight = 6;
  MemorySink sink2;
  const auto again = run_iterations(samples, ForgeConfig{}, tc, init, 3, sink2, opts);
  EXPECT_EQ(again.manifest, m);
  EXPECT_EQ(again.policy, res.policy);

  MemorySink sink3;
  EXPECT_THROW(run_iterations(samples, ForgeConfig{}, tc, init, 0, sink3, opts), ValidationError);
  std::vector<Sample> with_image = samples;
  with_image[0].image = ImageTensor::filled(2, 2, 1, 0.5);
  EXPECT_THROW(run_iterations(with_image, ForgeConfig{}, tc, init, 1, sink3, opts), ValidationError);
}
