#pragma once

/**
 * Multi-objective loss reweighting.
 *
 * Each degradation type keeps a sliding window of normalized losses. Every
 * step we fit an OLS trend line per type; the slopes drive two softmax
 * weightings (a cross-type balance score and a per-type stall score) that are
 * blended by an adaptivity factor tracking how the steepest slope evolves
 * over time. The blended weights rescale the per-type losses before they are
 * summed into the training objective.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rainkit::reweight {

struct LossObservation {
  std::int64_t index = 0;  // global step at which the loss was recorded
  double value = 0.0;      // normalized loss
};

struct SlopeEstimate {
  double alpha = 0.0;  // trend per step
  double beta = 0.0;   // intercept
};

// Ordinary least squares over (index, value) pairs. Requires >= 2 entries
// with at least two distinct indices.
SlopeEstimate estimate_slope(std::span<const LossObservation> entries);

struct WeightVector {
  std::vector<double> weights;  // non-negative, sums to 1
  std::int64_t step = 0;
};

// Balance score: softmax_i(K * a_i / sum_j |a_j|). All-zero slopes yield the
// uniform vector.
WeightVector compute_tbs(std::span<const double> slopes);

// Stall score: per type, -N * a_i / sum over that type's recent slope
// history of |a|, then softmax across types. A type whose history is all
// zeros contributes a raw score of 0.
WeightVector compute_tss(std::span<const double> slopes,
                         std::span<const std::vector<double>> slope_histories,
                         std::size_t window_size);

// Convex blend: w_i = af * tbs_i + (1 - af) * tss_i.
WeightVector compute_weights(const WeightVector& tbs, const WeightVector& tss, double af);

// K * sum_i w_i * loss_i.
double combine_loss(std::span<const double> losses, const WeightVector& weights);

// Tracks the steepest slope over the whole run and turns it into the
// adaptivity factor in (0, 1]. Internally keeps a softmax over the full score
// history using a streaming log-sum-exp, so each observation is O(1).
class AdaptivityTracker {
 public:
  explicit AdaptivityTracker(double tau) : tau_(tau) {}

  // Feed the current steepest (max) slope; returns the adaptivity factor.
  double observe(double alpha_max);

  double last() const { return last_af_; }
  std::int64_t steps() const { return static_cast<std::int64_t>(count_); }

 private:
  double tau_;
  std::size_t count_ = 0;        // number of scores observed
  double abs_slope_sum_ = 0.0;   // running sum of |alpha_max|
  double score_max_ = 0.0;       // running max of scores (log-sum-exp pivot)
  double exp_sum_ = 0.0;         // sum of exp(score - score_max_)
  double last_score_ = 0.0;
  double last_af_ = 1.0;
};

// Per-type sliding window plus slope history.
class TypeLossWindow {
 public:
  TypeLossWindow() = default;
  TypeLossWindow(int type_id, std::size_t capacity);

  // Record a raw loss. The first recorded loss becomes the normalization
  // baseline (so it is stored as exactly 1.0). Observation indices increase
  // by one per push.
  void push_raw(double raw_loss);

  // Repeat the last normalized loss at the next index (used when a step has
  // no fresh observation for this type). Requires a prior observation.
  void push_carry();

  void record_slope(double alpha);

  bool has_baseline() const { return baseline_.has_value(); }
  double baseline() const { return *baseline_; }
  std::size_t observation_count() const { return observation_count_; }
  int type_id() const { return type_id_; }
  std::span<const LossObservation> entries() const { return entries_; }
  std::span<const double> slope_history() const { return slope_history_; }
  const std::vector<double>& slope_history_vec() const { return slope_history_; }

 private:
  int type_id_ = 0;
  std::size_t capacity_ = 10;
  std::optional<double> baseline_;
  std::size_t observation_count_ = 0;
  std::vector<LossObservation> entries_;       // at most capacity_, oldest first
  std::vector<double> slope_history_;          // at most capacity_, oldest first
};

struct SchedulerConfig {
  int num_types = 4;
  std::size_t window_size = 10;    // N
  double tau = 5.0;                // adaptivity sensitivity
  int warmup_min_points = 2;       // observations per type before slopes exist
};

struct StepResult {
  WeightVector weights;  // blended weights actually emitted
  WeightVector tbs;
  WeightVector tss;
  std::vector<double> slopes;
  double af = 1.0;
  bool warmed_up = false;  // false while any type lacks warmup_min_points
};

class Scheduler {
 public:
  explicit Scheduler(const SchedulerConfig& config);

  // Record one loss for one type without advancing the step counter. Throws
  // std::invalid_argument on non-finite or non-positive loss.
  void push_loss(int type_id, double raw_loss);

  // Record losses for all types at once and produce the weights for this
  // step. A nullopt means "no fresh observation": the last normalized value
  // is carried forward if one exists, otherwise the type stays unobserved.
  StepResult step(std::span<const std::optional<double>> raw_losses);
  StepResult step(std::span<const double> raw_losses);

  const SchedulerConfig& config() const { return config_; }
  const TypeLossWindow& window(int type_id) const;
  std::int64_t step_count() const { return step_count_; }
  const AdaptivityTracker& adaptivity() const { return af_; }

 private:
  void check_type(int type_id) const;
  void check_loss(int type_id, double raw_loss) const;

  SchedulerConfig config_;
  std::vector<TypeLossWindow> windows_;
  AdaptivityTracker af_;
  std::int64_t step_count_ = 0;
};

}  // namespace rainkit::reweight
