#include "rainkit/moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "rainkit/rng.hpp"

namespace rainkit::moe {

namespace {

Tensor gaussian_noise(const std::vector<int>& shape, double std_dev, std::uint64_t seed) {
  Tensor noise = Tensor::zeros(shape);
  Rng rng(seed);
  for (double& v : noise.data) v = rng.normal(0.0, std_dev);
  return noise;
}

void check_features(const Tensor& features, const RouterParams& params) {
  if (features.rank() != 3) {
    throw std::invalid_argument("route: features must be [C,H,W]");
  }
  if (params.w.rank() != 2 || params.b.rank() != 1 || params.w.dim(0) != params.b.dim(0) ||
      params.w.dim(1) != features.dim(0)) {
    throw std::invalid_argument("route: router parameters do not match feature channels");
  }
  if (params.noise_std < 0.0) {
    throw std::invalid_argument("route: noise_std must be nonnegative");
  }
}

// Shared tape construction for routing: noise (training only), pool, affine,
// softmax. Both the pure entry points and the model forward use this.
Value route_logits_node(Tape& tape, Value features, Value rw, Value rb, double noise_std,
                        bool training, std::uint64_t noise_seed) {
  Value x = features;
  if (training && noise_std > 0.0) {
    x = nn::add_const(x, gaussian_noise(tape.value(features).shape, noise_std, noise_seed));
  }
  const Value pooled = nn::global_avg_pool(x);
  const Value logits = nn::affine_vec(pooled, rw, rb);
  return nn::softmax_vec(logits);
}

}  // namespace

RouterOutput soft_route(const Tensor& features_chw, const RouterParams& params, bool training,
                        std::uint64_t noise_seed) {
  check_features(features_chw, params);
  Tape tape;
  const Value f = tape.leaf(features_chw);
  const Value w = tape.leaf(params.w);
  const Value b = tape.leaf(params.b);
  const Value soft = route_logits_node(tape, f, w, b, params.noise_std, training, noise_seed);
  RouterOutput out;
  out.weights = tape.value(soft).data;
  out.active_set.resize(out.weights.size());
  for (std::size_t i = 0; i < out.active_set.size(); ++i) out.active_set[i] = static_cast<int>(i);
  return out;
}

RouterOutput hard_route(const Tensor& features_chw, const RouterParams& params, int k,
                        bool training, std::uint64_t noise_seed) {
  RouterOutput soft = soft_route(features_chw, params, training, noise_seed);
  const int n = static_cast<int>(soft.weights.size());
  if (k < 1 || k > n) {
    throw std::invalid_argument("hard_route: k must be in [1, " + std::to_string(n) + "]");
  }
  RouterOutput out;
  out.active_set = nn::topk_indices(std::span<const double>(soft.weights), k);
  out.weights.assign(soft.weights.size(), 0.0);
  double total = 0.0;
  for (int i : out.active_set) total += soft.weights[static_cast<std::size_t>(i)];
  for (int i : out.active_set) {
    out.weights[static_cast<std::size_t>(i)] = soft.weights[static_cast<std::size_t>(i)] / total;
  }
  return out;
}

Tensor combine_experts(std::span<const Tensor> expert_outputs, const RouterOutput& router) {
  if (router.active_set.empty()) throw std::invalid_argument("combine_experts: empty active set");
  const Tensor* first = nullptr;
  for (int i : router.active_set) {
    if (i < 0 || static_cast<std::size_t>(i) >= expert_outputs.size()) {
      throw std::invalid_argument("combine_experts: active index out of range");
    }
    const Tensor& y = expert_outputs[static_cast<std::size_t>(i)];
    if (first == nullptr) first = &y;
    else if (!y.same_shape(*first)) {
      throw std::invalid_argument("combine_experts: expert output shapes differ");
    }
  }
  Tensor out = Tensor::zeros(first->shape);
  for (int i : router.active_set) {
    const double w = router.weights[static_cast<std::size_t>(i)];
    const Tensor& y = expert_outputs[static_cast<std::size_t>(i)];
    for (std::size_t p = 0; p < out.data.size(); ++p) out.data[p] += w * y.data[p];
  }
  return out;
}

ToyModel::ToyModel(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  if (config.channels <= 0 || config.image_size <= 0) {
    throw std::invalid_argument("ToyModel: channels and image_size must be positive");
  }
  if (config.encoder_stages < 0 || config.decoder_stages < 0 ||
      config.encoder_stages + config.decoder_stages == 0) {
    throw std::invalid_argument("ToyModel: need at least one stage");
  }
  if (config.num_experts < 1) throw std::invalid_argument("ToyModel: need at least one expert");
  if (static_cast<int>(config.expert_widths.size()) != config.num_experts) {
    throw std::invalid_argument("ToyModel: expert_widths must list one width per expert");
  }
  if (config.top_k < 1 || config.top_k > config.num_experts) {
    throw std::invalid_argument("ToyModel: top_k must be in [1, num_experts]");
  }
  if (config.noise_std < 0.0) throw std::invalid_argument("ToyModel: noise_std must be >= 0");

  Rng rng(derive_seed(init_seed, 0x307));
  const int c = config.channels;
  const int total_stages = config.encoder_stages + config.decoder_stages;
  stages_.reserve(static_cast<std::size_t>(total_stages));
  for (int s = 0; s < total_stages; ++s) {
    StageParams stage;
    stage.hard = s >= config.encoder_stages;
    stage.top_k = config.top_k;
    stage.noise_std = config.noise_std;
    stage.router.noise_std = config.noise_std;
    stage.router.w = Tensor::zeros({config.num_experts, c});
    stage.router.b = Tensor::zeros({config.num_experts});
    const double router_scale = 1.0 / std::sqrt(static_cast<double>(c));
    for (double& v : stage.router.w.data) v = rng.normal(0.0, router_scale);

    for (int e = 0; e < config.num_experts; ++e) {
      const int width = config.expert_widths[static_cast<std::size_t>(e)];
      if (width <= 0) throw std::invalid_argument("ToyModel: expert widths must be positive");
      ExpertParams p;
      p.w1 = Tensor::zeros({width, c});
      p.b1 = Tensor::zeros({width});
      // Residual branch starts at zero so the initial network is an identity.
      p.w2 = Tensor::zeros({c, width});
      p.b2 = Tensor::zeros({c});
      const double in_scale = 1.0 / std::sqrt(static_cast<double>(c));
      for (double& v : p.w1.data) v = rng.normal(0.0, in_scale);
      stage.experts.push_back(std::move(p));
    }
    stages_.push_back(std::move(stage));
  }
}

ToyModel::Binding ToyModel::bind(Tape& tape) const {
  Binding binding;
  binding.stages.reserve(stages_.size());
  for (const StageParams& s : stages_) {
    StageLeaves leaves;
    leaves.router_w = tape.leaf(s.router.w);
    leaves.router_b = tape.leaf(s.router.b);
    leaves.experts.reserve(s.experts.size());
    for (const ExpertParams& e : s.experts) {
      leaves.experts.push_back(
          {tape.leaf(e.w1), tape.leaf(e.b1), tape.leaf(e.w2), tape.leaf(e.b2)});
    }
    binding.stages.push_back(std::move(leaves));
  }
  return binding;
}

ForwardStats ToyModel::make_stats() const {
  ForwardStats stats;
  stats.expert_evals.assign(stages_.size() * static_cast<std::size_t>(config_.num_experts), 0);
  return stats;
}

Value ToyModel::forward_sample(Tape& tape, const Binding& binding, const Tensor& image_chw,
                               bool training, std::uint64_t noise_seed,
                               ForwardStats* stats) const {
  if (image_chw.rank() != 3 || image_chw.dim(0) != config_.channels) {
    throw std::invalid_argument("forward: image must be [channels, H, W]");
  }
  if (binding.stages.size() != stages_.size()) {
    throw std::invalid_argument("forward: binding does not match the model");
  }
  Value x = tape.leaf(image_chw);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const StageParams& stage = stages_[s];
    const StageLeaves& leaves = binding.stages[s];
    const Value soft = route_logits_node(tape, x, leaves.router_w, leaves.router_b,
                                         stage.noise_std, training,
                                         derive_seed(noise_seed, 0xA0 + s));

    std::vector<int> active;
    Value weights = soft;
    if (stage.hard) {
      weights = nn::topk_renorm(soft, stage.top_k, active);
    } else {
      active.resize(stage.experts.size());
      for (std::size_t i = 0; i < active.size(); ++i) active[i] = static_cast<int>(i);
    }

    std::vector<Value> outputs;
    outputs.reserve(active.size());
    for (int e : active) {
      const auto& ep = leaves.experts[static_cast<std::size_t>(e)];
      const Value hidden = nn::softsign_act(nn::affine_chw(x, ep[0], ep[1]));
      const Value branch = nn::add(nn::affine_chw(hidden, ep[2], ep[3]), x);
      outputs.push_back(branch);
      if (stats != nullptr) {
        stats->expert_evals[s * static_cast<std::size_t>(config_.num_experts) +
                            static_cast<std::size_t>(e)] += 1;
      }
    }
    x = nn::weighted_blend(outputs, active, weights);
  }
  return x;
}

Tensor ToyModel::forward(const Tensor& batch, bool training, std::uint64_t noise_seed,
                         ForwardStats* stats) const {
  if (batch.rank() == 3) {
    Tape tape;
    const Binding binding = bind(tape);
    const Value out = forward_sample(tape, binding, batch, training, noise_seed, stats);
    return tape.value(out);
  }
  if (batch.rank() != 4) throw std::invalid_argument("forward: expected [C,H,W] or [B,C,H,W]");
  const int b = batch.dim(0);
  Tensor out = Tensor::zeros(batch.shape);
  const std::size_t sample_elems = batch.numel() / static_cast<std::size_t>(b);
  for (int i = 0; i < b; ++i) {
    Tensor sample = Tensor::zeros({batch.dim(1), batch.dim(2), batch.dim(3)});
    std::copy_n(batch.data.begin() + static_cast<std::ptrdiff_t>(i * sample_elems), sample_elems,
                sample.data.begin());
    Tape tape;
    const Binding binding = bind(tape);
    const Value y =
        forward_sample(tape, binding, sample, training, derive_seed(noise_seed, 0xB000 + static_cast<std::uint64_t>(i)), stats);
    const Tensor& vy = tape.value(y);
    std::copy(vy.data.begin(), vy.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(i * sample_elems));
  }
  return out;
}

void ToyModel::apply_gradients(Tape& tape, const Binding& binding, double learning_rate) {
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    StageParams& stage = stages_[s];
    const StageLeaves& leaves = binding.stages[s];
    const auto apply = [&](Tensor& param, const Value& leaf) {
      if (!tape.has_grad(leaf)) return;  // expert skipped on every sample
      const Tensor& g = tape.grad(leaf);
      for (std::size_t i = 0; i < param.data.size(); ++i) {
        param.data[i] -= learning_rate * g.data[i];
      }
    };
    apply(stage.router.w, leaves.router_w);
    apply(stage.router.b, leaves.router_b);
    for (std::size_t e = 0; e < stage.experts.size(); ++e) {
      apply(stage.experts[e].w1, leaves.experts[e][0]);
      apply(stage.experts[e].b1, leaves.experts[e][1]);
      apply(stage.experts[e].w2, leaves.experts[e][2]);
      apply(stage.experts[e].b2, leaves.experts[e][3]);
    }
  }
}

std::vector<std::pair<std::string, Tensor*>> ToyModel::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    StageParams& stage = stages_[s];
    const std::string prefix =
        (static_cast<int>(s) < config_.encoder_stages ? "enc" : "dec") +
        std::to_string(static_cast<int>(s) < config_.encoder_stages
                           ? s
                           : s - static_cast<std::size_t>(config_.encoder_stages));
    out.emplace_back(prefix + ".router.w", &stage.router.w);
    out.emplace_back(prefix + ".router.b", &stage.router.b);
    for (std::size_t e = 0; e < stage.experts.size(); ++e) {
      const std::string ep = prefix + ".expert" + std::to_string(e);
      out.emplace_back(ep + ".w1", &stage.experts[e].w1);
      out.emplace_back(ep + ".b1", &stage.experts[e].b1);
      out.emplace_back(ep + ".w2", &stage.experts[e].w2);
      out.emplace_back(ep + ".b2", &stage.experts[e].b2);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ToyModel::named_params() const {
  auto mutable_view = const_cast<ToyModel*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_view.size());
  for (auto& [name, ptr] : mutable_view) out.emplace_back(name, ptr);
  return out;
}

namespace {

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xFF));
  buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u32(buf, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& path, std::string bytes) : path_(path), bytes_(std::move(bytes)) {}

  bool eof() const { return pos_ >= bytes_.size(); }

  std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | (byte() << 8)); }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  unsigned byte() {
    need(1);
    return static_cast<unsigned char>(bytes_[pos_++]);
  }
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw std::runtime_error("checkpoint truncated: " + path_);
    }
  }
  std::string path_;
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const ToyModel& model) {
  std::string buf;
  buf += "CKP1";
  put_u16(buf, 1);
  for (const auto& [name, tensor] : model.named_params()) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(tensor->shape.size()));
    for (int d : tensor->shape) put_u32(buf, static_cast<std::uint32_t>(d));
    for (double v : tensor->data) put_f32(buf, static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, ToyModel& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(path, std::move(bytes));
  if (r.str(4) != "CKP1") throw std::runtime_error("bad checkpoint magic: " + path);
  const std::uint16_t version = r.u16();
  if (version != 1) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }

  auto params = model.named_params();
  std::size_t next = 0;
  while (!r.eof()) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    std::vector<int> dims(rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      dims[i] = static_cast<int>(r.u32());
      count *= static_cast<std::size_t>(dims[i]);
    }
    if (next >= params.size()) {
      throw std::runtime_error("checkpoint has extra parameter '" + name + "': " + path);
    }
    auto& [expected_name, tensor] = params[next];
    if (name != expected_name) {
      throw std::runtime_error("checkpoint parameter order mismatch: expected '" + expected_name +
                               "', found '" + name + "'");
    }
    if (dims != tensor->shape) {
      throw std::runtime_error("checkpoint shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < count; ++i) tensor->data[i] = static_cast<double>(r.f32());
    next += 1;
  }
  if (next != params.size()) {
    throw std::runtime_error("checkpoint is missing parameters: " + path);
  }
}

}  // namespace rainkit::moe
