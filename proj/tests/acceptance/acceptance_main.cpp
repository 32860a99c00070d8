// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mock_server.hpp"
#include "shape/augment.hpp"
#include "shape/dpo.hpp"
#include "shape/eval.hpp"
#include "shape/io.hpp"
#include "shape/remote.hpp"
#include "support.hpp"

using namespace shape;
namespace ts = testing_support;

namespace {

struct Failure {
  std::string what;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw Failure{what};
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// Each check returns a short detail string for the PASS line.
struct Criterion {
  std::string name;
  double budget_s;
  std::function<std::string()> check;
};

const double kLn2 = std::log(2.0);

std::string dpo_identity() {
  Rng rng(101);
  double worst = 0.0;
  Policy p(16, 64);
  for (int i = 0; i < 1000; ++i) {
    if (i % 10 == 0) p = ts::random_policy(rng, 16, 64, rng.uniform(0.1, 3.0));
    const auto t = ts::random_triplet(rng, 16, 64, 1, 8);
    worst = std::max(worst, std::abs(dpo_loss(p, p, t, rng.uniform(0.01, 5.0)) - kLn2));
  }
  expect(worst <= 1e-9, "max |L - ln2| = " + num(worst));
  return "max |L - ln2| = " + num(worst) + " over 1000 triplets";
}

std::string sigma_complement() {
  Rng rng(102);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = ts::random_policy(rng, 8, 8, 2.0);
    const auto ref = ts::random_policy(rng, 8, 8, 2.0);
    auto t = ts::random_triplet(rng, 8, 8, 1, 6);
    const double beta = rng.uniform(0.01, 2.0);
    const double l1 = dpo_loss(p, ref, t, beta);
    std::swap(t.y_w, t.y_l);
    std::swap(t.context_w, t.context_l);
    const double l2 = dpo_loss(p, ref, t, beta);
    worst = std::max(worst, std::abs(std::exp(-l1) + std::exp(-l2) - 1.0));
  }
  expect(worst <= 1e-9, "max deviation " + num(worst));
  return "max |e^-L(w,l) + e^-L(l,w) - 1| = " + num(worst) + " over 1000 states";
}

std::string gradient_check() {
  Rng rng(103);
  const double h = 1e-4;
  double worst = 0.0;
  std::size_t coords = 0;
  for (int state = 0; state < 10; ++state) {
    const int V = 8, C = 2;  // 2 * 9 * 8 = 144 coordinates, all checked
    const auto ref = ts::random_policy(rng, V, C, 1.0);
    auto p = ts::random_policy(rng, V, C, 1.0);
    std::vector<EncodedTriplet> batch;
    for (int i = 0; i < 24; ++i) batch.push_back(ts::random_triplet(rng, V, C, 1, 5));
    const double beta = rng.uniform(0.05, 1.0);
    const auto grad = dpo_grad(p, ref, batch, beta);
    for (std::size_t i = 0; i < p.weights().size(); ++i, ++coords) {
      const double w0 = p.weights()[i];
      p.mutable_weights()[i] = w0 + h;
      const double up = mean_loss(p, ref, batch, beta);
      p.mutable_weights()[i] = w0 - h;
      const double down = mean_loss(p, ref, batch, beta);
      p.mutable_weights()[i] = w0;
      const double fd = (up - down) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - grad[i]) / scale);
    }
  }
  expect(coords >= 1000, "too few coordinates");
  expect(worst <= 1e-4, "max relative error " + num(worst));
  return "max relative error " + num(worst) + " over " + std::to_string(coords) + " coordinates, 10 states";
}

std::string toy_training() {
  Rng rng(104);
  const auto init = ts::random_policy(rng, 16, 64);
  std::vector<EncodedTriplet> data;
  for (int i = 0; i < 256; ++i) data.push_back(ts::random_triplet(rng, 16, 64, 2, 8));
  TrainConfig cfg;
  cfg.beta = 0.1;
  cfg.learning_rate = 0.5;
  cfg.steps = 200;
  cfg.batch_size = 256;  // full-batch gradient descent
  cfg.seed = 1;
  const auto res = train(init, init, data, cfg);
  const auto& traj = res.trajectory;
  expect(traj.size() == 200, "trajectory length " + std::to_string(traj.size()));
  const double final_loss = mean_loss(res.policy, init, data, cfg.beta);
  const double margin = mean_margin(res.policy, init, data, cfg.beta);
  expect(final_loss < kLn2, "final loss " + num(final_loss));
  expect(margin > 0.0, "mean margin " + num(margin));
  // consecutive 50-step window means differ by (loss[s+50] - loss[s]) / 50
  double prev = 0.0;
  for (std::size_t s = 0; s < 50; ++s) prev += traj[s];
  prev /= 50.0;
  for (std::size_t s = 1; s + 50 <= traj.size(); ++s) {
    double cur = 0.0;
    for (std::size_t k = s; k < s + 50; ++k) cur += traj[k];
    cur /= 50.0;
    expect(cur <= prev + 1e-15, "window mean rose at step " + std::to_string(s));
    prev = cur;
  }
  return "final loss " + num(final_loss) + " < ln2, margin " + num(margin) + ", window means non-increasing";
}

std::string iterative_loop() {
  ts::TempDir dir;
  const std::string cmd = ts::quote(SHAPE_CLI) + " --config " + ts::quote(std::string(SHAPE_DEMO_DIR) + "/toy.json") +
                          " --out " + ts::quote(dir / "run") + " forge run";
  const auto r = ts::run(cmd);
  expect(r.exit_code == 0, "forge run exited " + std::to_string(r.exit_code));
  const auto m = read_manifest(dir / "run/manifest.json");  // validates the chain too
  expect(m.iterations.size() == 3, "expected 3 iterations");
  const auto initial = read_checkpoint(dir / ("run/" + m.initial_model_path));
  expect(initial.checkpoint_id() == m.initial_model_id, "initial checkpoint id mismatch");
  std::string prev = m.initial_model_id;
  for (const auto& it : m.iterations) {
    expect(it.reference_checkpoint_id == prev, "iteration " + std::to_string(it.iteration) + " reference mismatch");
    const auto ck = read_checkpoint(dir / ("run/" + it.checkpoint_path));
    expect(ck.checkpoint_id() == it.checkpoint_id, "checkpoint file id mismatch");
    expect(it.checkpoint_id != prev, "iteration " + std::to_string(it.iteration) + " did not train");
    for (const auto& t : read_jsonl(dir / ("run/" + it.dataset_path))) {
      expect(t.iteration == it.iteration, "triplet iteration tag mismatch");
    }
    prev = it.checkpoint_id;
  }
  return "3 iterations, ref(t) = checkpoint(t-1) for t = 1..3";
}

std::string augmentation_suite() {
  Rng rng(105);
  // t = 0 is the identity
  for (int i = 0; i < 20; ++i) {
    ImageTensor img = ImageTensor::filled(5, 7, 3, 0.0);
    for (double& v : img.data) v = rng.uniform();
    Rng r2(i);
    expect(diffuse(img, {0, 1000, 1e-4, 0.02}, r2) == img, "t=0 changed the image");
  }

  // Monte Carlo mean of a mid-gray image at t = 200
  const DiffusionNoiseSpec spec{200, 1000, 1e-4, 0.02};
  const double ab = build_schedule(1000, 1e-4, 0.02).alpha_bar[200];
  const double mu = std::sqrt(ab) * 0.5;
  const double sigma = std::sqrt(1.0 - ab);
  const ImageTensor gray = ImageTensor::filled(32, 32, 1, 0.5);
  const int draws = 10000;
  std::vector<double> sums(gray.data.size(), 0.0);
  Rng noise(106);
  for (int d = 0; d < draws; ++d) {
    const auto x = diffuse_unclamped(gray, spec, noise);
    for (std::size_t i = 0; i < x.size(); ++i) sums[i] += x[i];
  }
  const double pixel_bound = 3.0 * sigma / std::sqrt(double(draws));
  int outside = 0;
  double grand = 0.0;
  for (double s : sums) {
    outside += std::abs(s / draws - mu) > pixel_bound ? 1 : 0;
    grand += s;
  }
  grand /= double(draws) * double(sums.size());
  const double grand_bound = 3.0 * sigma / std::sqrt(double(draws) * double(sums.size()));
  expect(std::abs(grand - mu) <= grand_bound, "image mean " + num(grand) + " vs " + num(mu));
  // 9 is the 0.999 binomial quantile of 1024 pixels each outside 3 sigma w.p. 0.0027
  expect(outside <= 9, std::to_string(outside) + " pixels outside 3 sigma");

  // gamma and contrast: fixed points and order preservation
  ImageTensor ramp = ImageTensor::filled(1, 101, 1, 0.0);
  for (int x = 0; x <= 100; ++x) ramp.at(0, x, 0) = x / 100.0;
  for (double g : {0.8, 1.25, 0.3, 2.5}) {
    const auto out = gamma(ramp, g);
    expect(out.at(0, 0, 0) == 0.0 && out.at(0, 100, 0) == 1.0, "gamma moved 0 or 1");
    for (int x = 1; x <= 100; ++x) expect(out.at(0, x, 0) >= out.at(0, x - 1, 0), "gamma broke order");
  }
  for (double f : {2.0, 0.5, 1.7}) {
    const auto flat = ImageTensor::filled(4, 4, 3, 0.37);
    for (double v : contrast(flat, f).data) expect(std::abs(v - 0.37) < 1e-15, "contrast moved a flat image");
    const auto out = contrast(ramp, f);
    expect(std::abs(out.at(0, 50, 0) - 0.5) < 1e-12, "contrast moved the mean pixel");
    for (int x = 1; x <= 100; ++x) expect(out.at(0, x, 0) >= out.at(0, x - 1, 0), "contrast broke order");
  }

  // hflip is an involution
  for (int i = 0; i < 20; ++i) {
    ImageTensor img = ImageTensor::filled(1 + i % 4, 1 + i, 3, 0.0);
    for (double& v : img.data) v = rng.uniform();
    expect(hflip(hflip(img)) == img, "hflip is not an involution");
  }

  // crop preset: area fraction in [0.2, 0.5]
  const auto crop_spec = std::get<CropSpec>(preset("crop").params);
  double lo = 1.0, hi = 0.0;
  Rng crop_rng(107);
  for (int i = 0; i < 1000; ++i) {
    const auto rect = sample_crop_rect(64, 48, crop_spec, crop_rng);
    const double frac = rect.w * rect.h / (64.0 * 48.0);
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  expect(lo >= 0.2 - 1e-12 && hi <= 0.5 + 1e-12, "crop area fraction in [" + num(lo) + ", " + num(hi) + "]");
  return "MC mean " + num(grand) + " vs " + num(mu) + " (" + std::to_string(outside) +
         "/1024 pixels beyond 3 sigma), crop area in [" + num(lo) + ", " + num(hi) + "]";
}

std::string chair_oracle() {
  Rng rng(108);
  const auto corpus = ts::make_chair_corpus(rng, 200);
  const auto r = chair_scores(corpus.records, corpus.vocab);
  expect(r.mentioned == corpus.mentioned && r.hallucinated == corpus.hallucinated &&
             r.captions_with_hallucination == corpus.captions_with_hallucination,
         "counts differ from the construction");
  expect(r.chair_i == double(corpus.hallucinated) / double(corpus.mentioned), "CHAIR_I differs");
  expect(r.chair_s == double(corpus.captions_with_hallucination) / 200.0, "CHAIR_S differs");

  const ObjectVocabulary v(std::set<std::string>{"dog", "cat", "car", "tree"}, {});
  const std::vector<CaptionRecord> hand{{"h", "a dog, a cat, a car and a tree", {"dog", "cat", "car"}}};
  const auto hr = chair_scores(hand, v);
  expect(hr.chair_i == 0.25, "hand case CHAIR_I " + num(hr.chair_i));
  expect(hr.chair_s == 1.0, "hand case CHAIR_S " + num(hr.chair_s));
  return "CHAIR_I " + num(r.chair_i) + ", CHAIR_S " + num(r.chair_s) + " match the recount; hand case 0.25 / 1";
}

std::string determinism() {
  ts::TempDir dir;
  const std::string base = ts::quote(SHAPE_CLI) + " --config " + ts::quote(std::string(SHAPE_DEMO_DIR) + "/mock.json");
  for (const char* n : {"1", "8"}) {
    const auto r = ts::run(base + " --max-in-flight " + n + " --out " + ts::quote(dir / n) + " forge build");
    expect(r.exit_code == 0, "forge build exited " + std::to_string(r.exit_code));
  }
  const auto a = ts::read_file(dir / "1/triplets.jsonl");
  const auto b = ts::read_file(dir / "8/triplets.jsonl");
  expect(!a.empty(), "empty dataset");
  expect(a == b, "JSONL differs between max_in_flight 1 and 8");
  expect(ts::read_file(dir / "1/manifest.json") == ts::read_file(dir / "8/manifest.json"), "manifests differ");
  return std::to_string(a.size()) + " bytes identical for max_in_flight 1 and 8";
}

std::string remote_contract() {
  RemoteConfig rc;
  rc.model = "m";
  rc.api_key = "k";
  rc.backoff_base_ms = 5;

  {
    ts::MockChatServer server([](const nlohmann::json&, int call, std::string& reply) {
      if (call <= 2) return 429;
      reply = ts::chat_body("ok");
      return 200;
    });
    rc.base_url = server.url();
    RemoteClient client(rc);
    const auto r = client.chat("x");
    expect(r.text == "ok" && r.attempts == 3, "retry: attempts " + std::to_string(r.attempts));
  }
  {
    ts::MockChatServer server([](const nlohmann::json&, int, std::string& reply) {
      std::this_thread::sleep_for(std::chrono::milliseconds(1200));
      reply = ts::chat_body("late");
      return 200;
    });
    auto trc = rc;
    trc.base_url = server.url();
    trc.timeout_ms = 300;
    trc.max_retries = 0;
    RemoteClient client(trc);
    const auto start = std::chrono::steady_clock::now();
    bool timed_out = false;
    try {
      client.chat("x");
    } catch (const RemoteError& e) {
      timed_out = e.kind() == "timeout";
    }
    const auto ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
    expect(timed_out, "no timeout error");
    expect(ms >= 250 && ms < 1100, "timeout surfaced after " + std::to_string(ms) + " ms");
  }
  int peak = 0;
  {
    ts::MockChatServer server([](const nlohmann::json&, int, std::string& reply) {
      std::this_thread::sleep_for(std::chrono::milliseconds(30));
      reply = ts::chat_body("ok");
      return 200;
    });
    auto crc = rc;
    crc.base_url = server.url();
    crc.max_in_flight = 3;
    RemoteClient client(crc);
    std::vector<std::thread> threads;
    for (int i = 0; i < 16; ++i) threads.emplace_back([&] { client.chat("x"); });
    for (auto& t : threads) t.join();
    peak = server.peak_in_flight();
    expect(peak <= 3, "in-flight peak " + std::to_string(peak));
  }
  {
    ts::MockChatServer server([](const nlohmann::json&, int, std::string& reply) {
      reply = ts::chat_body("summary");
      return 200;
    });
    rc.base_url = server.url();
    RemoteClient client(rc);
    const std::vector<std::string> cands{"a", "b", "c"};
    client.summarize(cands, kSummaryPrompt);
    const auto body = nlohmann::json::parse(server.seen().at(0).body);
    const std::string prompt = "Please provide a comprehensive summary based on the following candidate answers.";
    expect(ts::user_text(body).find(prompt) != std::string::npos, "prompt missing from payload");
  }
  return "429x2 then 200 in 3 attempts, timeout at deadline, in-flight peak " + std::to_string(peak) +
         " <= 3, prompt verbatim";
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"dpo-identity", 1, dpo_identity},
      {"sigma-complement", 1, sigma_complement},
      {"gradient-check", 10, gradient_check},
      {"toy-training", 30, toy_training},
      {"iterative-loop", 60, iterative_loop},
      {"augmentation-suite", 30, augmentation_suite},
      {"chair-oracle", 1, chair_oracle},
      {"determinism", 10, determinism},
      {"remote-contract", 10, remote_contract},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = c.check();
    } catch (const Failure& f) {
      ok = false;
      detail = f.what;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ok && secs > c.budget_s) {
      ok = false;
      detail += "; took " + num(secs) + " s, budget " + num(c.budget_s) + " s";
    }
    failed += ok ? 0 : 1;
    std::printf("%s %s (%.2f s): %s\n", ok ? "PASS" : "FAIL", c.name.c_str(), secs, detail.c_str());
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
