#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

#include "rainkit/autodiff.hpp"
#include "rainkit/moe.hpp"
#include "rainkit/rng.hpp"

using namespace rainkit;
using namespace rainkit::nn;

namespace {

using Builder = std::function<Value(Tape&, const std::vector<Value>&)>;

// Smooth scalar reduction: mean(x + 10), valid while every entry stays above
// -10 so the absolute value never kinks.
Value reduce(Tape& tape, Value v) {
  return l1_loss(v, Tensor::full(tape.value(v).shape, -10.0));
}

double eval_builder(const Builder& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  return tape.value(f(tape, leaves)).data[0];
}

void gradcheck(const Builder& f, const std::vector<Tensor>& inputs, double h = 1e-3,
               double tol = 2e-4) {
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const Value loss = f(tape, leaves);
  tape.backward(loss);

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const bool has = tape.has_grad(leaves[i]);
    for (std::size_t j = 0; j < inputs[i].data.size(); ++j) {
      const double analytic = has ? tape.grad(leaves[i]).data[j] : 0.0;
      std::vector<Tensor> plus = inputs;
      std::vector<Tensor> minus = inputs;
      plus[i].data[j] += h;
      minus[i].data[j] -= h;
      const double fd = (eval_builder(f, plus) - eval_builder(f, minus)) / (2.0 * h);
      const double rel =
          std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
      INFO("input ", i, " elem ", j, " analytic ", analytic, " fd ", fd);
      CHECK(rel <= tol);
    }
  }
}

Tensor random_tensor(Rng& rng, const std::vector<int>& shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(101);
  const Tensor a = random_tensor(rng, {2, 3});
  const Tensor b = random_tensor(rng, {2, 3});

  gradcheck([](Tape& t, const std::vector<Value>& in) { return reduce(t, add(in[0], in[1])); },
            {a, b});
  gradcheck([](Tape& t, const std::vector<Value>& in) { return reduce(t, mul(in[0], in[1])); },
            {a, b});
  gradcheck([](Tape& t, const std::vector<Value>& in) { return reduce(t, scale(in[0], -1.7)); },
            {a});
  const Tensor shift = random_tensor(rng, {2, 3});
  gradcheck(
      [&shift](Tape& t, const std::vector<Value>& in) {
        return reduce(t, add_const(in[0], shift));
      },
      {a});
  gradcheck([](Tape& t, const std::vector<Value>& in) { return reduce(t, softsign_act(in[0])); },
            {a});
}

TEST_CASE("affine and pooling gradients match finite differences") {
  Rng rng(102);
  const Tensor x = random_tensor(rng, {2, 3, 3});
  const Tensor w = random_tensor(rng, {4, 2}, -0.7, 0.7);
  const Tensor b = random_tensor(rng, {4}, -0.3, 0.3);
  gradcheck(
      [](Tape& t, const std::vector<Value>& in) {
        return reduce(t, affine_chw(in[0], in[1], in[2]));
      },
      {x, w, b});

  const Tensor xv = random_tensor(rng, {5});
  const Tensor wv = random_tensor(rng, {3, 5}, -0.7, 0.7);
  const Tensor bv = random_tensor(rng, {3}, -0.3, 0.3);
  gradcheck(
      [](Tape& t, const std::vector<Value>& in) {
        return reduce(t, affine_vec(in[0], in[1], in[2]));
      },
      {xv, wv, bv});

  gradcheck(
      [](Tape& t, const std::vector<Value>& in) { return reduce(t, global_avg_pool(in[0])); },
      {random_tensor(rng, {3, 4, 4})});
}

TEST_CASE("softmax and top-k renormalization gradients match finite differences") {
  const Tensor logits = Tensor::from({4}, {0.9, -0.4, 0.3, -1.1});
  gradcheck(
      [](Tape& t, const std::vector<Value>& in) { return reduce(t, softmax_vec(in[0])); },
      {logits});

  gradcheck(
      [](Tape& t, const std::vector<Value>& in) {
        std::vector<int> active;
        return reduce(t, topk_renorm(softmax_vec(in[0]), 2, active));
      },
      {logits});
}

TEST_CASE("blend, losses and reuse gradients match finite differences") {
  Rng rng(103);
  const Tensor x = random_tensor(rng, {2, 2, 2});
  const Tensor logits = Tensor::from({3}, {0.6, -0.2, 0.1});
  gradcheck(
      [](Tape& t, const std::vector<Value>& in) {
        const Value w = softmax_vec(in[1]);
        const std::vector<Value> branches{softsign_act(in[0]), scale(in[0], 2.0), in[0]};
        const std::vector<int> idx{0, 1, 2};
        return reduce(t, weighted_blend(branches, idx, w));
      },
      {x, logits});

  const Tensor target = random_tensor(rng, {2, 2, 2}, 2.0, 3.0);
  gradcheck(
      [&target](Tape& t, const std::vector<Value>& in) { return l1_loss(in[0], target); }, {x});

  gradcheck(
      [](Tape& t, const std::vector<Value>& in) {
        const Value l1 = reduce(t, softsign_act(in[0]));
        const Value l2 = reduce(t, mul(in[0], in[0]));
        const std::vector<Value> parts{l1, l2};
        const std::vector<double> coeffs{0.7, 1.3};
        return scalar_combine(parts, coeffs);
      },
      {x});

  // Diamond reuse: the same leaf feeds two paths.
  gradcheck(
      [](Tape& t, const std::vector<Value>& in) {
        return reduce(t, add(mul(in[0], in[0]), softsign_act(in[0])));
      },
      {x});
}

TEST_CASE("l1 loss value and sign convention") {
  Tape tape;
  const Value pred = tape.leaf(Tensor::from({3}, {1.0, -2.0, 0.5}));
  const Value loss = l1_loss(pred, Tensor::from({3}, {0.0, 0.0, 0.5}));
  CHECK(tape.value(loss).data[0] == doctest::Approx(1.0).epsilon(1e-15));
  tape.backward(loss);
  const Tensor& g = tape.grad(pred);
  CHECK(g.data[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(g.data[1] == doctest::Approx(-1.0 / 3.0).epsilon(1e-15));
  CHECK(g.data[2] == 0.0);  // sign(0) contributes nothing
}

TEST_CASE("topk keeps the largest entries, ties to the lower index") {
  const std::vector<double> w{0.4, 0.1, 0.4, 0.1};
  const std::vector<int> top2 = topk_indices(w, 2);
  CHECK(top2 == std::vector<int>{0, 2});
  const std::vector<int> top3 = topk_indices(w, 3);
  CHECK(top3 == std::vector<int>{0, 1, 2});

  Tape tape;
  const Value v = tape.leaf(Tensor::from({4}, w));
  std::vector<int> active;
  const Value out = topk_renorm(v, 2, active);
  CHECK(active == std::vector<int>{0, 2});
  const Tensor& y = tape.value(out);
  CHECK(y.data[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.data[1] == 0.0);
  CHECK(y.data[2] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.data[3] == 0.0);
}

TEST_CASE("top-k with k equal to the width reproduces the soft weights") {
  Tape tape;
  const Value logits = tape.leaf(Tensor::from({4}, {0.3, -0.8, 1.2, 0.05}));
  const Value soft = softmax_vec(logits);
  std::vector<int> active;
  const Value renorm = topk_renorm(soft, 4, active);
  CHECK(active == std::vector<int>{0, 1, 2, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(tape.value(renorm).data[i] ==
          doctest::Approx(tape.value(soft).data[i]).epsilon(1e-12));
  }
}

TEST_CASE("soft routing emits a simplex and responds to training noise") {
  Rng rng(104);
  moe::RouterParams params;
  params.w = random_tensor(rng, {4, 3}, -0.5, 0.5);
  params.b = random_tensor(rng, {4}, -0.1, 0.1);
  params.noise_std = 0.1;

  for (int trial = 0; trial < 100; ++trial) {
    const Tensor features = random_tensor(rng, {3, 4, 4});
    const moe::RouterOutput out = moe::soft_route(features, params, false, 0);
    REQUIRE(out.weights.size() == 4);
    double sum = 0.0;
    for (double w : out.weights) {
      CHECK(w >= 0.0);
      sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(out.active_set == std::vector<int>{0, 1, 2, 3});
  }

  const Tensor features = random_tensor(rng, {3, 4, 4});
  const auto eval1 = moe::soft_route(features, params, false, 1);
  const auto eval2 = moe::soft_route(features, params, false, 2);
  CHECK(eval1.weights == eval2.weights);  // eval ignores the noise stream
  const auto train1 = moe::soft_route(features, params, true, 7);
  const auto train1b = moe::soft_route(features, params, true, 7);
  const auto train2 = moe::soft_route(features, params, true, 8);
  CHECK(train1.weights == train1b.weights);
  CHECK(train1.weights != train2.weights);
}

TEST_CASE("hard routing activates exactly k renormalized experts") {
  Rng rng(105);
  moe::RouterParams params;
  params.w = random_tensor(rng, {4, 3}, -0.5, 0.5);
  params.b = random_tensor(rng, {4}, -0.1, 0.1);

  for (int trial = 0; trial < 50; ++trial) {
    const Tensor features = random_tensor(rng, {3, 4, 4});
    const moe::RouterOutput out = moe::hard_route(features, params, 2, false, 0);
    CHECK(out.active_set.size() == 2);
    CHECK(std::is_sorted(out.active_set.begin(), out.active_set.end()));
    double sum = 0.0;
    std::size_t nonzero = 0;
    for (double w : out.weights) {
      if (w != 0.0) nonzero += 1;
      sum += w;
    }
    CHECK(nonzero == 2);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

    const moe::RouterOutput soft = moe::soft_route(features, params, false, 0);
    const moe::RouterOutput full = moe::hard_route(features, params, 4, false, 0);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(full.weights[i] == doctest::Approx(soft.weights[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("hard routing breaks ties toward lower expert indices") {
  moe::RouterParams params;
  params.w = Tensor::zeros({4, 2});  // all logits identical regardless of input
  params.b = Tensor::zeros({4});
  const Tensor features = Tensor::full({2, 3, 3}, 0.4);
  const moe::RouterOutput out = moe::hard_route(features, params, 2, false, 0);
  CHECK(out.active_set == std::vector<int>{0, 1});
  CHECK(out.weights[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out.weights[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("combine_experts mixes only the active branches") {
  const Tensor y0 = Tensor::full({2, 2, 2}, 1.0);
  const Tensor y1 = Tensor::full({2, 2, 2}, 3.0);
  const Tensor unused = Tensor::full({2, 2, 2}, 100.0);
  moe::RouterOutput router;
  router.weights = {0.25, 0.75, 0.0};
  router.active_set = {0, 1};
  const std::vector<Tensor> outputs{y0, y1, unused};
  const Tensor mixed = moe::combine_experts(outputs, router);
  for (double v : mixed.data) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("freshly initialized model is the identity map") {
  moe::ModelConfig config;
  config.image_size = 8;
  config.channels = 3;
  moe::ToyModel model(config, 9);
  Rng rng(106);
  const Tensor x = random_tensor(rng, {3, 8, 8}, 0.0, 1.0);
  const Tensor y = model.forward(x, false, 0, nullptr);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    CHECK(y.data[i] == doctest::Approx(x.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("eval-mode forward is deterministic; training noise is seeded") {
  moe::ModelConfig config;
  config.image_size = 6;
  config.channels = 3;
  moe::ToyModel model(config, 10);
  // Nudge parameters away from the identity so routing actually matters.
  Rng rng(107);
  for (auto& [name, tensor] : model.named_params()) {
    for (double& v : tensor->data) v += rng.uniform(-0.05, 0.05);
  }
  const Tensor x = random_tensor(rng, {3, 6, 6}, 0.0, 1.0);
  const Tensor a = model.forward(x, false, 11, nullptr);
  const Tensor b = model.forward(x, false, 22, nullptr);
  CHECK(a.data == b.data);
  const Tensor t1 = model.forward(x, true, 33, nullptr);
  const Tensor t1b = model.forward(x, true, 33, nullptr);
  const Tensor t2 = model.forward(x, true, 34, nullptr);
  CHECK(t1.data == t1b.data);
  CHECK(t1.data != t2.data);
}

TEST_CASE("decoder stages evaluate exactly top_k experts per sample") {
  moe::ModelConfig config;
  config.image_size = 6;
  config.channels = 3;
  config.top_k = 2;
  moe::ToyModel model(config, 12);
  moe::ForwardStats stats = model.make_stats();
  Rng rng(108);
  const int batch = 5;
  Tensor images = Tensor::zeros({batch, 3, 6, 6});
  for (double& v : images.data) v = rng.uniform();
  model.forward(images, false, 0, &stats);

  const int experts = config.num_experts;
  for (int s = 0; s < config.encoder_stages + config.decoder_stages; ++s) {
    std::int64_t evals = 0;
    for (int e = 0; e < experts; ++e) {
      evals += stats.expert_evals[static_cast<std::size_t>(s * experts + e)];
    }
    if (s < config.encoder_stages) {
      CHECK(evals == batch * experts);  // soft stages run every expert
    } else {
      CHECK(evals == batch * config.top_k);
    }
  }
}

TEST_CASE("gradient updates skip experts that were never routed") {
  moe::ModelConfig config;
  config.image_size = 5;
  config.channels = 2;
  config.num_experts = 3;
  config.expert_widths = {3, 3, 3};
  config.encoder_stages = 0;
  config.decoder_stages = 1;
  config.top_k = 1;
  moe::ToyModel model(config, 13);
  Rng rng(109);
  const Tensor x = random_tensor(rng, {2, 5, 5}, 0.0, 1.0);

  Tape tape;
  const auto binding = model.bind(tape);
  moe::ForwardStats stats = model.make_stats();
  const Value pred = model.forward_sample(tape, binding, x, false, 0, &stats);
  const Value loss = l1_loss(pred, Tensor::full({2, 5, 5}, 2.0));
  tape.backward(loss);

  int active_expert = -1;
  for (int e = 0; e < 3; ++e) {
    if (stats.expert_evals[static_cast<std::size_t>(e)] > 0) active_expert = e;
  }
  REQUIRE(active_expert >= 0);

  const auto before = model.named_params();
  std::vector<Tensor> snapshot;
  for (const auto& [name, tensor] : before) snapshot.push_back(*tensor);
  model.apply_gradients(tape, binding, 0.1);  // must not throw on skipped experts

  const auto after = model.named_params();
  for (std::size_t i = 0; i < after.size(); ++i) {
    const std::string& name = after[i].first;
    const bool inactive_expert =
        name.find("expert") != std::string::npos &&
        name.find("expert" + std::to_string(active_expert)) == std::string::npos;
    if (inactive_expert) {
      CHECK(after[i].second->data == snapshot[i].data);
    }
  }
}

TEST_CASE("checkpoint round-trip restores every parameter") {
  moe::ModelConfig config;
  config.image_size = 6;
  config.channels = 3;
  moe::ToyModel a(config, 14);
  Rng rng(110);
  for (auto& [name, tensor] : a.named_params()) {
    for (double& v : tensor->data) v = rng.uniform(-0.5, 0.5);
  }
  const auto path = temp_file("rainkit_ckpt_test.bin");
  moe::save_checkpoint(path.string(), a);

  moe::ToyModel b(config, 999);
  moe::load_checkpoint(path.string(), b);
  const auto path2 = temp_file("rainkit_ckpt_test2.bin");
  moe::save_checkpoint(path2.string(), b);

  // Serialized bytes are identical, and forward passes agree to f32 precision.
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  const Tensor x = random_tensor(rng, {3, 6, 6}, 0.0, 1.0);
  const Tensor ya = a.forward(x, false, 0, nullptr);
  const Tensor yb = b.forward(x, false, 0, nullptr);
  for (std::size_t i = 0; i < ya.data.size(); ++i) {
    CHECK(yb.data[i] == doctest::Approx(ya.data[i]).epsilon(1e-5));
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path2);

  moe::ModelConfig other = config;
  other.expert_widths = {8, 16, 24, 30};
  moe::ToyModel c(other, 15);
  const auto path3 = temp_file("rainkit_ckpt_test3.bin");
  moe::save_checkpoint(path3.string(), c);
  moe::ToyModel d(config, 16);
  CHECK_THROWS_AS(moe::load_checkpoint(path3.string(), d), std::runtime_error);
  std::filesystem::remove(path3);
}

TEST_CASE("named parameters follow the stage naming scheme") {
  moe::ModelConfig config;
  config.image_size = 6;
  config.channels = 3;
  moe::ToyModel model(config, 17);
  const auto params = model.named_params();
  REQUIRE(params.size() == 4 * (2 + 4 * 4));
  CHECK(params[0].first == "enc0.router.w");
  CHECK(params[1].first == "enc0.router.b");
  CHECK(params[2].first == "enc0.expert0.w1");
  CHECK(params[5].first == "enc0.expert0.b2");
  const auto& last = params.back();
  CHECK(last.first == "dec1.expert3.b2");
}

TEST_CASE("model gradcheck across every parameter") {
  moe::ModelConfig config;
  config.image_size = 5;
  config.channels = 2;
  config.encoder_stages = 1;
  config.decoder_stages = 1;
  config.num_experts = 3;
  config.expert_widths = {3, 4, 3};
  config.top_k = 2;
  moe::ToyModel model(config, 18);
  Rng rng(111);
  // Randomize the zero-initialized output layers so gradients reach w1/b1.
  for (auto& [name, tensor] : model.named_params()) {
    if (name.find(".w2") != std::string::npos || name.find(".b2") != std::string::npos) {
      for (double& v : tensor->data) v = rng.uniform(-0.3, 0.3);
    }
  }
  const Tensor x = random_tensor(rng, {2, 5, 5}, 0.0, 1.0);

  // Target offset keeps every |pred - target| away from the kink.
  Tensor target;
  {
    target = model.forward(x, false, 0, nullptr);
    for (double& v : target.data) v += 0.5;
  }

  Tape tape;
  const auto binding = model.bind(tape);
  const Value pred = model.forward_sample(tape, binding, x, false, 0, nullptr);
  const Value loss = l1_loss(pred, target);
  tape.backward(loss);

  std::vector<Tensor> analytic;
  for (std::size_t s = 0; s < binding.stages.size(); ++s) {
    const auto& leaves = binding.stages[s];
    const auto grab = [&](const Value& v, const std::vector<int>& shape) {
      analytic.push_back(tape.has_grad(v) ? tape.grad(v) : Tensor::zeros(shape));
    };
    grab(leaves.router_w, model.stage(s).router.w.shape);
    grab(leaves.router_b, model.stage(s).router.b.shape);
    for (std::size_t e = 0; e < leaves.experts.size(); ++e) {
      grab(leaves.experts[e][0], model.stage(s).experts[e].w1.shape);
      grab(leaves.experts[e][1], model.stage(s).experts[e].b1.shape);
      grab(leaves.experts[e][2], model.stage(s).experts[e].w2.shape);
      grab(leaves.experts[e][3], model.stage(s).experts[e].b2.shape);
    }
  }

  const auto eval_loss = [&]() {
    Tape t2;
    const auto b2 = model.bind(t2);
    const Value p2 = model.forward_sample(t2, b2, x, false, 0, nullptr);
    const Value l2 = l1_loss(p2, target);
    return t2.value(l2).data[0];
  };

  const double h = 1e-3;
  std::size_t param_index = 0;
  int checked = 0;
  for (auto& [name, tensor] : model.named_params()) {
    const Tensor& grad = analytic[param_index];
    for (std::size_t j = 0; j < tensor->data.size(); ++j) {
      const double saved = tensor->data[j];
      tensor->data[j] = saved + h;
      const double fp = eval_loss();
      tensor->data[j] = saved - h;
      const double fm = eval_loss();
      tensor->data[j] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double rel =
          std::abs(grad.data[j] - fd) / std::max({std::abs(grad.data[j]), std::abs(fd), 1e-8});
      INFO("param ", name, " elem ", j);
      CHECK(rel <= 1e-4);
      checked += 1;
    }
    param_index += 1;
  }
  CHECK(checked > 100);
}

TEST_CASE("tensor helpers validate shapes") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);

  Tape tape;
  const Value a = tape.leaf(Tensor::zeros({2, 2}));
  const Value b = tape.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(l1_loss(a, Tensor::zeros({4})), std::invalid_argument);
  const Value nonscalar = tape.leaf(Tensor::zeros({2}));
  CHECK_THROWS_AS(tape.backward(nonscalar), std::invalid_argument);
}
