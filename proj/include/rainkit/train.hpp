#pragma once

/**
 * Training loop for the toy mixture network on the synthetic corpus.
 *
 * Each iteration draws one degraded/clean pair per type, runs the model,
 * feeds the per-type L1 losses to the reweighting scheduler and applies one
 * SGD step on the weighted sum. Several weighting modes support ablations.
 */

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rainkit/moe.hpp"
#include "rainkit/reweight.hpp"

namespace rainkit::train {

enum class WeightingMode { uniform, reweighted, fixed_af, no_tss, no_tbs };
const char* to_string(WeightingMode mode);
WeightingMode weighting_mode_from_string(const std::string& name);

struct ImagePair {
  nn::Tensor clean;     // [C, H, W]
  nn::Tensor degraded;  // [C, H, W]
};

struct Corpus {
  std::array<std::vector<ImagePair>, 4> by_type;
  int image_size = 0;
  int channels = 0;
};

// Loads a corpus manifest; image paths resolve relative to the manifest.
Corpus load_corpus(const std::string& manifest_path);

struct TrainConfig {
  int iterations = 2000;
  double learning_rate = 0.05;
  WeightingMode mode = WeightingMode::reweighted;
  reweight::SchedulerConfig sched{4, 10, 5.0, 2};
  moe::ModelConfig model;
  int eval_interval = 250;  // 0 disables held-out evaluation
  int eval_count = 4;       // held-out images per type
  int final_window = 100;   // iterations averaged into final_loss
  std::uint64_t seed = 0;
};

struct LogRow {
  int iter = 0;
  int type_id = 0;
  double loss = 0.0;
  double psnr = 0.0;   // NaN when the iteration had no evaluation
  double omega = 0.0;  // weight applied to the type this iteration
  double af = 0.0;
};

struct TrainResult {
  std::vector<LogRow> rows;
  std::array<double, 4> final_loss{};  // trailing-window mean per type
  std::array<double, 4> final_psnr{};  // held-out PSNR at the last eval
  moe::ToyModel model;
};

// Thrown when a loss goes non-finite; carries the rows logged so far so
// callers can preserve partial output.
struct TrainDivergence : std::runtime_error {
  TrainDivergence(const std::string& what, std::vector<LogRow> partial)
      : std::runtime_error(what), rows(std::move(partial)) {}
  std::vector<LogRow> rows;
};

TrainResult train_toy(const TrainConfig& config, const Corpus& corpus);

// CSV with header iter,type_id,loss,psnr,omega,af. NaN serializes as "nan",
// infinity as "inf".
void write_log_csv(const std::string& path, std::span<const LogRow> rows);
std::vector<LogRow> read_log_csv(const std::string& path);

}  // namespace rainkit::train
