#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "rainkit/reweight.hpp"
#include "rainkit/rng.hpp"

using namespace rainkit;
using namespace rainkit::reweight;

namespace {

void check_simplex(const std::vector<double>& w) {
  double sum = 0.0;
  for (double v : w) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    sum += v;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

std::vector<LossObservation> make_entries(const std::vector<double>& ys) {
  std::vector<LossObservation> out;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    out.push_back({static_cast<std::int64_t>(i), ys[i]});
  }
  return out;
}

}  // namespace

TEST_CASE("ols slope matches closed form") {
  const auto entries = make_entries({1.0, 0.93, 0.81, 0.70, 0.54});
  const SlopeEstimate est = estimate_slope(entries);
  CHECK(est.alpha == doctest::Approx(-0.11499999999999999).epsilon(1e-12));
  CHECK(est.beta == doctest::Approx(1.026).epsilon(1e-12));
}

TEST_CASE("ols recovers exact linear series") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const double a = rng.uniform(-2.0, 2.0);
    const double b = rng.uniform(-5.0, 5.0);
    std::vector<LossObservation> entries;
    const std::int64_t offset = rng.uniform_int(0, 1000);
    for (int i = 0; i < 12; ++i) {
      const std::int64_t k = offset + i;
      entries.push_back({k, a * static_cast<double>(k) + b});
    }
    const SlopeEstimate est = estimate_slope(entries);
    CHECK(est.alpha == doctest::Approx(a).epsilon(1e-10));
    CHECK(est.beta == doctest::Approx(b).epsilon(1e-10));
  }
}

TEST_CASE("ols rejects degenerate input") {
  CHECK_THROWS_AS(estimate_slope(std::vector<LossObservation>{}), std::invalid_argument);
  CHECK_THROWS_AS(estimate_slope(std::vector<LossObservation>{{0, 1.0}}), std::invalid_argument);
  const std::vector<LossObservation> same{{5, 1.0}, {5, 2.0}};
  CHECK_THROWS_AS(estimate_slope(same), std::invalid_argument);
}

TEST_CASE("tbs pinned values and uniform fallback") {
  const std::vector<double> slopes{-0.40, -0.20, -0.05, 0.15};
  const WeightVector tbs = compute_tbs(slopes);
  REQUIRE(tbs.weights.size() == 4);
  CHECK(tbs.weights[0] == doctest::Approx(0.039816023868487718).epsilon(1e-12));
  CHECK(tbs.weights[1] == doctest::Approx(0.10823117416320178).epsilon(1e-12));
  CHECK(tbs.weights[2] == doctest::Approx(0.22912539750150743).epsilon(1e-12));
  CHECK(tbs.weights[3] == doctest::Approx(0.62282740446680307).epsilon(1e-12));
  check_simplex(tbs.weights);

  const std::vector<double> zeros{0.0, 0.0, 0.0};
  const WeightVector uniform = compute_tbs(zeros);
  for (double w : uniform.weights) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("tbs permutation equivariance") {
  const std::vector<double> slopes{-0.3, 0.1, -0.7, 0.05};
  const std::vector<double> permuted{0.05, -0.7, 0.1, -0.3};
  const WeightVector a = compute_tbs(slopes);
  const WeightVector b = compute_tbs(permuted);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.weights[i] == doctest::Approx(b.weights[3 - i]).epsilon(1e-15));
  }
}

TEST_CASE("tbs scale invariance") {
  const std::vector<double> slopes{-0.25, -0.125, 0.5, 0.0625};
  const WeightVector base = compute_tbs(slopes);

  // Powers of two rescale exactly in floating point.
  std::vector<double> doubled(slopes);
  for (double& s : doubled) s *= 2.0;
  const WeightVector two = compute_tbs(doubled);
  for (std::size_t i = 0; i < 4; ++i) CHECK(two.weights[i] == base.weights[i]);

  std::vector<double> tripled(slopes);
  for (double& s : tripled) s *= 3.0;
  const WeightVector three = compute_tbs(tripled);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(three.weights[i] == doctest::Approx(base.weights[i]).epsilon(1e-12));
  }
}

TEST_CASE("tbs favors the slowest-converging type among converging slopes") {
  // All negative: closer to zero means slower convergence, larger weight.
  const std::vector<double> slopes{-0.50, -0.35, -0.20, -0.01};
  const WeightVector tbs = compute_tbs(slopes);
  for (std::size_t i = 1; i < slopes.size(); ++i) {
    CHECK(tbs.weights[i] > tbs.weights[i - 1]);
  }
}

TEST_CASE("tss pinned values") {
  const std::vector<double> slopes{-0.1, 0.1};
  const std::vector<std::vector<double>> hist{{-0.9, -0.1}, {0.9, 0.1}};
  const WeightVector tss = compute_tss(slopes, hist, 10);
  REQUIRE(tss.weights.size() == 2);
  CHECK(tss.weights[0] == doctest::Approx(0.88079707797788231).epsilon(1e-12));
  CHECK(tss.weights[1] == doctest::Approx(0.11920292202211755).epsilon(1e-12));
}

TEST_CASE("tss zero history contributes a zero score") {
  const std::vector<double> slopes{-0.2, 0.0, 0.1, -0.05};
  const std::vector<std::vector<double>> hist{
      {-0.3, -0.2}, {0.0, 0.0}, {0.2, 0.1}, {-0.15, -0.05}};
  const WeightVector tss = compute_tss(slopes, hist, 10);
  CHECK(tss.weights[0] == doctest::Approx(0.80508868150956558).epsilon(1e-12));
  CHECK(tss.weights[1] == doctest::Approx(0.014745713563936325).epsilon(1e-12));
  CHECK(tss.weights[2] == doctest::Approx(0.00052603848758035407).epsilon(1e-12));
  CHECK(tss.weights[3] == doctest::Approx(0.17963956643891757).epsilon(1e-12));
  check_simplex(tss.weights);
}

TEST_CASE("tss all-zero histories give uniform weights") {
  const std::vector<double> slopes{0.0, 0.0, 0.0};
  const std::vector<std::vector<double>> hist{{0.0}, {0.0}, {0.0}};
  const WeightVector tss = compute_tss(slopes, hist, 10);
  for (double w : tss.weights) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("adaptivity factor trace with a divergence flip") {
  AdaptivityTracker af(5.0);
  std::vector<double> trace;
  for (int i = 0; i < 20; ++i) trace.push_back(af.observe(-0.1));
  for (int i = 0; i < 5; ++i) trace.push_back(af.observe(0.1));
  CHECK(trace[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(trace[19] == doctest::Approx(0.99999999999999933).epsilon(1e-12));
  CHECK(trace[20] == doctest::Approx(4.7669818040289601e-05).epsilon(1e-9));
  CHECK(trace[24] == doctest::Approx(5.6749268099909652e-05).epsilon(1e-9));
  // A sharp drop right at the flip, never exceeding 1.
  CHECK(trace[20] < 0.001);
  for (double v : trace) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("adaptivity factor is exactly 1 under a constant slope") {
  // -0.125 is a power of two, so the running |slope| sum is exact and every
  // score is bitwise identical.
  AdaptivityTracker af(5.0);
  for (int i = 0; i < 50; ++i) {
    CHECK(af.observe(-0.125) == 1.0);
  }
}

TEST_CASE("adaptivity factor is 1 while no slope has been seen") {
  AdaptivityTracker af(5.0);
  CHECK(af.observe(0.0) == 1.0);
  CHECK(af.observe(0.0) == 1.0);
}

TEST_CASE("weight blending and loss aggregation") {
  WeightVector tbs{{0.7, 0.3}, 0};
  WeightVector tss{{0.2, 0.8}, 0};
  const WeightVector w = compute_weights(tbs, tss, 0.25);
  CHECK(w.weights[0] == doctest::Approx(0.25 * 0.7 + 0.75 * 0.2).epsilon(1e-15));
  CHECK(w.weights[1] == doctest::Approx(0.25 * 0.3 + 0.75 * 0.8).epsilon(1e-15));

  const std::vector<double> losses{1.0, 2.0, 3.0, 4.0};
  WeightVector weights{{0.4, 0.3, 0.2, 0.1}, 0};
  CHECK(combine_loss(losses, weights) == doctest::Approx(8.0).epsilon(1e-15));
}

TEST_CASE("loss window normalizes against the first observation") {
  TypeLossWindow win(0, 10);
  win.push_raw(2.0);
  win.push_raw(1.8);
  win.push_raw(1.5);
  win.push_raw(1.2);
  const auto entries = win.entries();
  REQUIRE(entries.size() == 4);
  CHECK(entries[0].value == 1.0);  // baseline stores exactly 1
  CHECK(entries[1].value == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(entries[2].value == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(entries[3].value == doctest::Approx(0.6).epsilon(1e-15));
  for (std::size_t i = 1; i < entries.size(); ++i) {
    CHECK(entries[i].index == entries[i - 1].index + 1);
  }
}

TEST_CASE("loss window carry repeats the last normalized value") {
  TypeLossWindow win(0, 10);
  win.push_raw(4.0);
  win.push_raw(2.0);
  win.push_carry();
  const auto entries = win.entries();
  REQUIRE(entries.size() == 3);
  CHECK(entries[2].value == entries[1].value);
  CHECK(entries[2].index == entries[1].index + 1);
  CHECK(win.observation_count() == 3);
}

TEST_CASE("loss window drops the oldest entry at capacity") {
  TypeLossWindow win(0, 3);
  for (int i = 0; i < 5; ++i) win.push_raw(1.0 + i);
  const auto entries = win.entries();
  REQUIRE(entries.size() == 3);
  CHECK(entries.front().index == 2);
  CHECK(entries.back().index == 4);
}

TEST_CASE("scheduler warms up with uniform weights") {
  Scheduler sched(SchedulerConfig{2, 10, 5.0, 2});
  const std::vector<double> losses{2.0, 4.0};
  const StepResult r1 = sched.step(losses);
  CHECK_FALSE(r1.warmed_up);
  CHECK(r1.af == 1.0);
  CHECK(r1.weights.weights[0] == 0.5);
  CHECK(r1.weights.weights[1] == 0.5);
}

TEST_CASE("scheduler second step matches the hand-computed oracle") {
  Scheduler sched(SchedulerConfig{2, 10, 5.0, 2});
  sched.step(std::vector<double>{2.0, 4.0});
  const StepResult r = sched.step(std::vector<double>{1.0, 4.0});
  REQUIRE(r.warmed_up);
  // Normalized windows: type0 [1.0, 0.5] slope -0.5; type1 [1.0, 1.0] slope 0.
  CHECK(r.slopes[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(r.slopes[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.tbs.weights[0] == doctest::Approx(0.11920292202211755).epsilon(1e-12));
  CHECK(r.tbs.weights[1] == doctest::Approx(0.88079707797788231).epsilon(1e-12));
  CHECK(r.tss.weights[0] == doctest::Approx(0.99995460213129761).epsilon(1e-12));
  CHECK(r.tss.weights[1] == doctest::Approx(4.5397868702434395e-05).epsilon(1e-9));
  // alpha_max is 0 here, so the divergence tracker still reports 1.
  CHECK(r.af == 1.0);
  CHECK(r.weights.weights[0] == doctest::Approx(0.11920292202211755).epsilon(1e-12));
  CHECK(r.weights.weights[1] == doctest::Approx(0.88079707797788231).epsilon(1e-12));
}

TEST_CASE("scheduler carries missing observations forward") {
  Scheduler sched(SchedulerConfig{2, 10, 5.0, 2});
  sched.step(std::vector<double>{2.0, 4.0});
  std::vector<std::optional<double>> partial{std::nullopt, 3.0};
  const StepResult r = sched.step(partial);
  CHECK(r.warmed_up);
  CHECK(sched.window(0).observation_count() == 2);
  const auto entries = sched.window(0).entries();
  CHECK(entries[1].value == entries[0].value);
}

TEST_CASE("scheduler stays in warm-up while a type is unobserved") {
  Scheduler sched(SchedulerConfig{2, 10, 5.0, 2});
  std::vector<std::optional<double>> only_first{1.0, std::nullopt};
  CHECK_FALSE(sched.step(only_first).warmed_up);
  CHECK_FALSE(sched.step(only_first).warmed_up);  // type1 never seen, no carry
  CHECK(sched.window(1).observation_count() == 0);
}

TEST_CASE("bare pushes count toward warm-up") {
  Scheduler sched(SchedulerConfig{2, 10, 5.0, 2});
  sched.push_loss(0, 2.0);
  sched.push_loss(1, 3.0);
  const StepResult r = sched.step(std::vector<double>{1.5, 2.5});
  CHECK(r.warmed_up);
}

TEST_CASE("scheduler validates configuration and losses") {
  CHECK_THROWS_AS(Scheduler(SchedulerConfig{0, 10, 5.0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Scheduler(SchedulerConfig{4, 1, 5.0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Scheduler(SchedulerConfig{4, 10, 0.0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Scheduler(SchedulerConfig{4, 10, 5.0, 12}), std::invalid_argument);

  Scheduler sched(SchedulerConfig{2, 10, 5.0, 2});
  CHECK_THROWS_AS(sched.push_loss(0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sched.push_loss(0, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(sched.push_loss(5, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(sched.step(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("randomized streams always emit simplex weights") {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const int k = 2 + rng.uniform_int(0, 3);
    Scheduler sched(SchedulerConfig{k, 10, 5.0, 2});
    const int steps = 5 + rng.uniform_int(0, 40);
    for (int s = 0; s < steps; ++s) {
      std::vector<double> losses;
      for (int t = 0; t < k; ++t) losses.push_back(rng.uniform(0.05, 5.0));
      const StepResult r = sched.step(losses);
      check_simplex(r.weights.weights);
      if (r.warmed_up) {
        check_simplex(r.tbs.weights);
        check_simplex(r.tss.weights);
        CHECK(r.af >= 0.0);
        CHECK(r.af <= 1.0);
      }
    }
  }
}
