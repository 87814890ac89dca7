#pragma once

/**
 * Asymmetric mixture-of-experts toy network.
 *
 * Encoder stages route softly (every expert runs, outputs are blended by the
 * router's softmax; Gaussian feature noise regularizes routing during
 * training). Decoder stages route hard: only the top-k experts by router
 * weight execute, and the surviving weights are renormalized. Experts are
 * residual two-layer channel mixers with heterogeneous hidden widths.
 */

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rainkit/autodiff.hpp"

namespace rainkit::moe {

using nn::Tape;
using nn::Tensor;
using nn::Value;

struct RouterOutput {
  std::vector<double> weights;   // length = expert count, sums to 1
  std::vector<int> active_set;   // ascending indices of experts to evaluate
};

struct RouterParams {
  Tensor w;  // [num_experts, channels]
  Tensor b;  // [num_experts]
  double noise_std = 0.1;
};

// Adds Gaussian feature noise (training only), pools spatially, applies the
// router affine map and softmax. Every expert is active.
RouterOutput soft_route(const Tensor& features_chw, const RouterParams& params,
                        bool training, std::uint64_t noise_seed);

// Soft routing followed by top-k selection: zero non-survivors, renormalize
// the rest. Ties go to the lower expert index.
RouterOutput hard_route(const Tensor& features_chw, const RouterParams& params, int k,
                        bool training, std::uint64_t noise_seed);

// Blend expert outputs by router weights; only active experts are read.
Tensor combine_experts(std::span<const Tensor> expert_outputs, const RouterOutput& router);

struct ExpertParams {
  Tensor w1, b1;  // [width, channels], [width]
  Tensor w2, b2;  // [channels, width], [channels]
};

struct StageParams {
  RouterParams router;
  std::vector<ExpertParams> experts;
  bool hard = false;
  int top_k = 0;           // used when hard
  double noise_std = 0.0;  // used when soft
};

struct ModelConfig {
  int image_size = 32;
  int channels = 3;
  int encoder_stages = 2;
  int decoder_stages = 2;
  int num_experts = 4;
  std::vector<int> expert_widths = {4, 8, 12, 16};  // one per expert
  int top_k = 2;
  double noise_std = 0.1;
};

struct ForwardStats {
  // Evaluations per expert, indexed stage * num_experts + expert.
  std::vector<std::int64_t> expert_evals;
};

class ToyModel {
 public:
  ToyModel() : ToyModel(ModelConfig{}, 0) {}
  ToyModel(const ModelConfig& config, std::uint64_t init_seed);

  struct StageLeaves {
    Value router_w, router_b;
    std::vector<std::array<Value, 4>> experts;  // w1, b1, w2, b2
  };
  struct Binding {
    std::vector<StageLeaves> stages;
  };

  // Creates tape leaves for every parameter; reuse across samples on the
  // same tape so gradients accumulate.
  Binding bind(Tape& tape) const;

  // Single-sample forward pass building tape nodes; image is [C, H, W].
  Value forward_sample(Tape& tape, const Binding& binding, const Tensor& image_chw,
                       bool training, std::uint64_t noise_seed,
                       ForwardStats* stats = nullptr) const;

  // Value-only forward on scratch tapes. Accepts [C, H, W] or [B, C, H, W];
  // sample b uses noise substream b.
  Tensor forward(const Tensor& batch, bool training, std::uint64_t noise_seed,
                 ForwardStats* stats = nullptr) const;

  // Gradient descent step from the gradients accumulated on the tape.
  void apply_gradients(Tape& tape, const Binding& binding, double learning_rate);

  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;

  const ModelConfig& config() const { return config_; }
  int stage_count() const { return static_cast<int>(stages_.size()); }
  const StageParams& stage(int i) const { return stages_[static_cast<std::size_t>(i)]; }
  StageParams& stage(int i) { return stages_[static_cast<std::size_t>(i)]; }
  ForwardStats make_stats() const;

 private:
  ModelConfig config_;
  std::vector<StageParams> stages_;  // encoders first, then decoders
};

// Binary checkpoint: magic "CKP1", u16 version, then one record per
// parameter (u32 name length, name bytes, u32 rank, u32 dims, f32 data),
// all little-endian.
void save_checkpoint(const std::string& path, const ToyModel& model);
// Strict: names, order and shapes must match the model exactly.
void load_checkpoint(const std::string& path, ToyModel& model);

}  // namespace rainkit::moe
