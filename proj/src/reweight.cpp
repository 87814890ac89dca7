#include "rainkit/reweight.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rainkit::reweight {

namespace {

std::vector<double> stable_softmax(std::span<const double> logits) {
  double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> uniform_vector(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

}  // namespace

SlopeEstimate estimate_slope(std::span<const LossObservation> entries) {
  if (entries.size() < 2) {
    throw std::invalid_argument("estimate_slope: need at least 2 observations, got " +
                                std::to_string(entries.size()));
  }
  double kbar = 0.0, ybar = 0.0;
  for (const auto& e : entries) {
    kbar += static_cast<double>(e.index);
    ybar += e.value;
  }
  const double n = static_cast<double>(entries.size());
  kbar /= n;
  ybar /= n;

  double sxx = 0.0, sxy = 0.0;
  for (const auto& e : entries) {
    const double dk = static_cast<double>(e.index) - kbar;
    sxx += dk * dk;
    sxy += dk * (e.value - ybar);
  }
  if (sxx == 0.0) {
    throw std::invalid_argument("estimate_slope: all observation indices are identical");
  }
  SlopeEstimate est;
  est.alpha = sxy / sxx;
  est.beta = ybar - est.alpha * kbar;
  return est;
}

WeightVector compute_tbs(std::span<const double> slopes) {
  if (slopes.empty()) throw std::invalid_argument("compute_tbs: empty slope vector");
  double abs_sum = 0.0;
  for (double a : slopes) {
    if (!std::isfinite(a)) throw std::invalid_argument("compute_tbs: non-finite slope");
    abs_sum += std::abs(a);
  }
  WeightVector out;
  if (abs_sum == 0.0) {
    out.weights = uniform_vector(slopes.size());
    return out;
  }
  const double k = static_cast<double>(slopes.size());
  std::vector<double> logits(slopes.size());
  for (std::size_t i = 0; i < slopes.size(); ++i) logits[i] = k * slopes[i] / abs_sum;
  out.weights = stable_softmax(logits);
  return out;
}

WeightVector compute_tss(std::span<const double> slopes,
                         std::span<const std::vector<double>> slope_histories,
                         std::size_t window_size) {
  if (slopes.empty()) throw std::invalid_argument("compute_tss: empty slope vector");
  if (slopes.size() != slope_histories.size()) {
    throw std::invalid_argument("compute_tss: slope/history count mismatch");
  }
  if (window_size == 0) throw std::invalid_argument("compute_tss: window_size must be > 0");

  std::vector<double> scores(slopes.size(), 0.0);
  for (std::size_t i = 0; i < slopes.size(); ++i) {
    double hist_abs = 0.0;
    for (double a : slope_histories[i]) hist_abs += std::abs(a);
    if (hist_abs != 0.0) {
      scores[i] = -static_cast<double>(window_size) * slopes[i] / hist_abs;
    }
  }
  WeightVector out;
  out.weights = stable_softmax(scores);
  return out;
}

WeightVector compute_weights(const WeightVector& tbs, const WeightVector& tss, double af) {
  if (tbs.weights.size() != tss.weights.size()) {
    throw std::invalid_argument("compute_weights: component size mismatch");
  }
  if (!(af >= 0.0 && af <= 1.0)) {
    throw std::invalid_argument("compute_weights: adaptivity factor outside [0, 1]");
  }
  WeightVector out;
  out.step = tbs.step;
  out.weights.resize(tbs.weights.size());
  for (std::size_t i = 0; i < out.weights.size(); ++i) {
    out.weights[i] = af * tbs.weights[i] + (1.0 - af) * tss.weights[i];
  }
  return out;
}

double combine_loss(std::span<const double> losses, const WeightVector& weights) {
  if (losses.size() != weights.weights.size()) {
    throw std::invalid_argument("combine_loss: loss/weight count mismatch");
  }
  const double k = static_cast<double>(losses.size());
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) total += weights.weights[i] * losses[i];
  return k * total;
}

double AdaptivityTracker::observe(double alpha_max) {
  if (!std::isfinite(alpha_max)) {
    throw std::invalid_argument("AdaptivityTracker: non-finite slope");
  }
  count_ += 1;
  abs_slope_sum_ += std::abs(alpha_max);
  const double t = static_cast<double>(count_);

  double score = 0.0;
  if (abs_slope_sum_ != 0.0) score = -tau_ * t * alpha_max / abs_slope_sum_;

  if (count_ == 1) {
    score_max_ = score;
    exp_sum_ = 1.0;
  } else if (score > score_max_) {
    exp_sum_ = exp_sum_ * std::exp(score_max_ - score) + 1.0;
    score_max_ = score;
  } else {
    exp_sum_ += std::exp(score - score_max_);
  }
  last_score_ = score;

  if (abs_slope_sum_ == 0.0) {
    last_af_ = 1.0;
  } else {
    // t is multiplied in before the division so that a history of identical
    // scores yields exactly 1.0.
    last_af_ = std::min(t * std::exp(score - score_max_) / exp_sum_, 1.0);
  }
  return last_af_;
}

TypeLossWindow::TypeLossWindow(int type_id, std::size_t capacity)
    : type_id_(type_id), capacity_(capacity) {
  if (capacity < 2) throw std::invalid_argument("TypeLossWindow: capacity must be >= 2");
  entries_.reserve(capacity);
  slope_history_.reserve(capacity);
}

void TypeLossWindow::push_raw(double raw_loss) {
  const auto index = static_cast<std::int64_t>(observation_count_);
  if (!baseline_.has_value()) {
    baseline_ = raw_loss;
    entries_.push_back({index, 1.0});
  } else {
    entries_.push_back({index, raw_loss / *baseline_});
  }
  if (entries_.size() > capacity_) entries_.erase(entries_.begin());
  observation_count_ += 1;
}

void TypeLossWindow::push_carry() {
  if (entries_.empty()) {
    throw std::logic_error("TypeLossWindow: carry-forward requires a prior observation");
  }
  entries_.push_back({static_cast<std::int64_t>(observation_count_), entries_.back().value});
  if (entries_.size() > capacity_) entries_.erase(entries_.begin());
  observation_count_ += 1;
}

void TypeLossWindow::record_slope(double alpha) {
  slope_history_.push_back(alpha);
  if (slope_history_.size() > capacity_) slope_history_.erase(slope_history_.begin());
}

Scheduler::Scheduler(const SchedulerConfig& config) : config_(config), af_(config.tau) {
  if (config.num_types < 1) throw std::invalid_argument("Scheduler: num_types must be >= 1");
  if (config.window_size < 2) throw std::invalid_argument("Scheduler: window_size must be >= 2");
  if (config.tau <= 0.0) throw std::invalid_argument("Scheduler: tau must be > 0");
  if (config.warmup_min_points < 2) {
    throw std::invalid_argument("Scheduler: warmup_min_points must be >= 2");
  }
  if (static_cast<std::size_t>(config.warmup_min_points) > config.window_size) {
    throw std::invalid_argument("Scheduler: warmup_min_points cannot exceed window_size");
  }
  windows_.reserve(config.num_types);
  for (int i = 0; i < config.num_types; ++i) {
    windows_.emplace_back(i, config.window_size);
  }
}

void Scheduler::check_type(int type_id) const {
  if (type_id < 0 || type_id >= config_.num_types) {
    throw std::invalid_argument("Scheduler: unknown type id " + std::to_string(type_id));
  }
}

void Scheduler::check_loss(int type_id, double raw_loss) const {
  if (!std::isfinite(raw_loss) || raw_loss <= 0.0) {
    throw std::invalid_argument("Scheduler: rejected loss for type " + std::to_string(type_id) +
                                " at step " + std::to_string(step_count_) +
                                ": must be finite and > 0, got " + std::to_string(raw_loss));
  }
}

void Scheduler::push_loss(int type_id, double raw_loss) {
  check_type(type_id);
  check_loss(type_id, raw_loss);
  windows_[type_id].push_raw(raw_loss);
}

const TypeLossWindow& Scheduler::window(int type_id) const {
  check_type(type_id);
  return windows_[type_id];
}

StepResult Scheduler::step(std::span<const double> raw_losses) {
  std::vector<std::optional<double>> opt(raw_losses.begin(), raw_losses.end());
  return step(std::span<const std::optional<double>>(opt));
}

StepResult Scheduler::step(std::span<const std::optional<double>> raw_losses) {
  if (raw_losses.size() != static_cast<std::size_t>(config_.num_types)) {
    throw std::invalid_argument("Scheduler::step: expected " +
                                std::to_string(config_.num_types) + " losses, got " +
                                std::to_string(raw_losses.size()));
  }
  const std::int64_t cur = step_count_;
  for (int i = 0; i < config_.num_types; ++i) {
    if (raw_losses[i].has_value()) {
      check_loss(i, *raw_losses[i]);
      windows_[i].push_raw(*raw_losses[i]);
    } else if (windows_[i].has_baseline()) {
      windows_[i].push_carry();
    }
  }
  step_count_ += 1;

  StepResult res;
  const auto k = static_cast<std::size_t>(config_.num_types);
  bool warmed = true;
  for (const auto& w : windows_) {
    if (w.observation_count() < static_cast<std::size_t>(config_.warmup_min_points)) {
      warmed = false;
      break;
    }
  }
  if (!warmed) {
    res.weights.weights.assign(k, 1.0 / static_cast<double>(k));
    res.weights.step = cur;
    res.tbs = res.weights;
    res.tss = res.weights;
    res.af = 1.0;
    res.warmed_up = false;
    return res;
  }

  res.slopes.resize(k);
  std::vector<std::vector<double>> histories(k);
  for (std::size_t i = 0; i < k; ++i) {
    res.slopes[i] = estimate_slope(windows_[i].entries()).alpha;
    windows_[i].record_slope(res.slopes[i]);
    histories[i] = windows_[i].slope_history_vec();
  }

  res.tbs = compute_tbs(res.slopes);
  res.tbs.step = cur;
  res.tss = compute_tss(res.slopes, histories, config_.window_size);
  res.tss.step = cur;
  res.af = af_.observe(*std::max_element(res.slopes.begin(), res.slopes.end()));
  res.weights = compute_weights(res.tbs, res.tss, res.af);
  res.weights.step = cur;
  res.warmed_up = true;
  return res;
}

}  // namespace rainkit::reweight
