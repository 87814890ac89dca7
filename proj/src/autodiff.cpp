#include "rainkit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rainkit::nn {

Tensor Tensor::zeros(std::vector<int> shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t;
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  t.shape = std::move(shape);
  t.data.assign(n, v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  Tensor t = zeros(shape);
  if (t.data.size() != values.size()) {
    throw std::invalid_argument("Tensor: data length does not match shape");
  }
  t.data = std::move(values);
  t.shape = std::move(shape);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape = {1};
  t.data = {v};
  return t;
}

Value Tape::leaf(Tensor v) {
  const int id = add_node(std::move(v), {}, nullptr);
  return Value{this, id};
}

int Tape::add_node(Tensor value, std::vector<int> parents,
                   std::function<void(Tape&, Node&)> pull) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(Value v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::invalid_argument("Tape: value does not belong to this tape");
  }
}

const Tensor& Tape::value(Value v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)].value;
}

const Tensor& Tape::grad(Value v) const {
  check(v);
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.data.empty()) {
    throw std::logic_error("Tape: gradient not computed for this node; run backward first");
  }
  return n.grad;
}

bool Tape::has_grad(Value v) const {
  check(v);
  return !nodes_[static_cast<std::size_t>(v.id)].grad.data.empty();
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.data.empty()) {
    n.grad = Tensor::zeros(n.value.shape);
  }
  return n.grad;
}

void Tape::backward(Value loss) {
  check(loss);
  const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
  if (ln.value.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar");
  }
  for (auto& n : nodes_) {
    n.grad.shape.clear();
    n.grad.data.clear();
  }
  grad_buffer(loss.id).data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty() || !n.pull) continue;
    n.pull(*this, n);
  }
}

namespace {

Tape* common_tape(Value a, Value b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument("op: values must share one tape");
  }
  return a.tape;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Value add(Value a, Value b) {
  Tape* t = common_tape(a, b);
  const Tensor& va = t->value(a);
  const Tensor& vb = t->value(b);
  check_same_shape(va, vb, "add");
  Tensor out = va;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
  const int pa = a.id, pb = b.id;
  const int id = t->add_node(std::move(out), {pa, pb}, [pa, pb](Tape& tape, Tape::Node& n) {
    Tensor& ga = tape.grad_buffer(pa);
    Tensor& gb = tape.grad_buffer(pb);
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      ga.data[i] += n.grad.data[i];
      gb.data[i] += n.grad.data[i];
    }
  });
  return Value{t, id};
}

Value mul(Value a, Value b) {
  Tape* t = common_tape(a, b);
  const Tensor& va = t->value(a);
  const Tensor& vb = t->value(b);
  check_same_shape(va, vb, "mul");
  Tensor out = va;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
  const int pa = a.id, pb = b.id;
  const int id = t->add_node(std::move(out), {pa, pb}, [pa, pb](Tape& tape, Tape::Node& n) {
    const Tensor& va2 = tape.node(pa).value;
    const Tensor& vb2 = tape.node(pb).value;
    Tensor& ga = tape.grad_buffer(pa);
    Tensor& gb = tape.grad_buffer(pb);
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      ga.data[i] += n.grad.data[i] * vb2.data[i];
      gb.data[i] += n.grad.data[i] * va2.data[i];
    }
  });
  return Value{t, id};
}

Value scale(Value a, double c) {
  Tape* t = a.tape;
  if (t == nullptr) throw std::invalid_argument("scale: null tape");
  Tensor out = t->value(a);
  for (double& v : out.data) v *= c;
  const int pa = a.id;
  const int id = t->add_node(std::move(out), {pa}, [pa, c](Tape& tape, Tape::Node& n) {
    Tensor& ga = tape.grad_buffer(pa);
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) ga.data[i] += c * n.grad.data[i];
  });
  return Value{t, id};
}

Value add_const(Value a, const Tensor& c) {
  Tape* t = a.tape;
  if (t == nullptr) throw std::invalid_argument("add_const: null tape");
  const Tensor& va = t->value(a);
  check_same_shape(va, c, "add_const");
  Tensor out = va;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.data[i];
  const int pa = a.id;
  const int id = t->add_node(std::move(out), {pa}, [pa](Tape& tape, Tape::Node& n) {
    Tensor& ga = tape.grad_buffer(pa);
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) ga.data[i] += n.grad.data[i];
  });
  return Value{t, id};
}

Value softsign_act(Value a) {
  Tape* t = a.tape;
  if (t == nullptr) throw std::invalid_argument("softsign_act: null tape");
  Tensor out = t->value(a);
  for (double& v : out.data) v = v / (1.0 + std::abs(v));
  const int pa = a.id;
  const int id = t->add_node(std::move(out), {pa}, [pa](Tape& tape, Tape::Node& n) {
    Tensor& ga = tape.grad_buffer(pa);
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      // d/dx [x / (1 + |x|)] = 1 / (1 + |x|)^2 = (1 - |y|)^2.
      const double d = 1.0 - std::abs(n.value.data[i]);
      ga.data[i] += n.grad.data[i] * d * d;
    }
  });
  return Value{t, id};
}

Value affine_chw(Value x, Value w, Value b) {
  Tape* t = common_tape(x, w);
  common_tape(w, b);
  const Tensor& vx = t->value(x);
  const Tensor& vw = t->value(w);
  const Tensor& vb = t->value(b);
  if (vx.rank() != 3 || vw.rank() != 2 || vb.rank() != 1) {
    throw std::invalid_argument("affine_chw: expected x:[C,H,W], w:[O,C], b:[O]");
  }
  const int c_in = vx.dim(0), h = vx.dim(1), wd = vx.dim(2);
  const int c_out = vw.dim(0);
  if (vw.dim(1) != c_in || vb.dim(0) != c_out) {
    throw std::invalid_argument("affine_chw: parameter shapes do not match input channels");
  }
  const std::size_t pixels = static_cast<std::size_t>(h) * wd;
  Tensor out = Tensor::zeros({c_out, h, wd});
  for (int o = 0; o < c_out; ++o) {
    double* op = &out.data[static_cast<std::size_t>(o) * pixels];
    const double bias = vb.data[static_cast<std::size_t>(o)];
    for (std::size_t p = 0; p < pixels; ++p) op[p] = bias;
    for (int ci = 0; ci < c_in; ++ci) {
      const double wv = vw.data[static_cast<std::size_t>(o) * c_in + ci];
      const double* xp = &vx.data[static_cast<std::size_t>(ci) * pixels];
      for (std::size_t p = 0; p < pixels; ++p) op[p] += wv * xp[p];
    }
  }
  const int px = x.id, pw = w.id, pb = b.id;
  const int id = t->add_node(
      std::move(out), {px, pw, pb}, [px, pw, pb, c_in, c_out, pixels](Tape& tape, Tape::Node& n) {
        const Tensor& vx2 = tape.node(px).value;
        const Tensor& vw2 = tape.node(pw).value;
        Tensor& gx = tape.grad_buffer(px);
        Tensor& gw = tape.grad_buffer(pw);
        Tensor& gb = tape.grad_buffer(pb);
        for (int o = 0; o < c_out; ++o) {
          const double* gp = &n.grad.data[static_cast<std::size_t>(o) * pixels];
          double gsum = 0.0;
          for (std::size_t p = 0; p < pixels; ++p) gsum += gp[p];
          gb.data[static_cast<std::size_t>(o)] += gsum;
          for (int ci = 0; ci < c_in; ++ci) {
            const double wv = vw2.data[static_cast<std::size_t>(o) * c_in + ci];
            const double* xp = &vx2.data[static_cast<std::size_t>(ci) * pixels];
            double* gxp = &gx.data[static_cast<std::size_t>(ci) * pixels];
            double dot = 0.0;
            for (std::size_t p = 0; p < pixels; ++p) {
              gxp[p] += wv * gp[p];
              dot += gp[p] * xp[p];
            }
            gw.data[static_cast<std::size_t>(o) * c_in + ci] += dot;
          }
        }
      });
  return Value{t, id};
}

Value affine_vec(Value x, Value w, Value b) {
  Tape* t = common_tape(x, w);
  common_tape(w, b);
  const Tensor& vx = t->value(x);
  const Tensor& vw = t->value(w);
  const Tensor& vb = t->value(b);
  if (vx.rank() != 1 || vw.rank() != 2 || vb.rank() != 1) {
    throw std::invalid_argument("affine_vec: expected x:[C], w:[O,C], b:[O]");
  }
  const int c_in = vx.dim(0), c_out = vw.dim(0);
  if (vw.dim(1) != c_in || vb.dim(0) != c_out) {
    throw std::invalid_argument("affine_vec: parameter shapes do not match input length");
  }
  Tensor out = Tensor::zeros({c_out});
  for (int o = 0; o < c_out; ++o) {
    double acc = vb.data[static_cast<std::size_t>(o)];
    for (int ci = 0; ci < c_in; ++ci) {
      acc += vw.data[static_cast<std::size_t>(o) * c_in + ci] * vx.data[static_cast<std::size_t>(ci)];
    }
    out.data[static_cast<std::size_t>(o)] = acc;
  }
  const int px = x.id, pw = w.id, pb = b.id;
  const int id = t->add_node(
      std::move(out), {px, pw, pb}, [px, pw, pb, c_in, c_out](Tape& tape, Tape::Node& n) {
        const Tensor& vx2 = tape.node(px).value;
        const Tensor& vw2 = tape.node(pw).value;
        Tensor& gx = tape.grad_buffer(px);
        Tensor& gw = tape.grad_buffer(pw);
        Tensor& gb = tape.grad_buffer(pb);
        for (int o = 0; o < c_out; ++o) {
          const double g = n.grad.data[static_cast<std::size_t>(o)];
          gb.data[static_cast<std::size_t>(o)] += g;
          for (int ci = 0; ci < c_in; ++ci) {
            gx.data[static_cast<std::size_t>(ci)] += g * vw2.data[static_cast<std::size_t>(o) * c_in + ci];
            gw.data[static_cast<std::size_t>(o) * c_in + ci] += g * vx2.data[static_cast<std::size_t>(ci)];
          }
        }
      });
  return Value{t, id};
}

Value global_avg_pool(Value x) {
  Tape* t = x.tape;
  if (t == nullptr) throw std::invalid_argument("global_avg_pool: null tape");
  const Tensor& vx = t->value(x);
  if (vx.rank() != 3) throw std::invalid_argument("global_avg_pool: expected [C,H,W]");
  const int c = vx.dim(0);
  const std::size_t pixels = static_cast<std::size_t>(vx.dim(1)) * vx.dim(2);
  Tensor out = Tensor::zeros({c});
  for (int ci = 0; ci < c; ++ci) {
    const double* xp = &vx.data[static_cast<std::size_t>(ci) * pixels];
    double acc = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) acc += xp[p];
    out.data[static_cast<std::size_t>(ci)] = acc / static_cast<double>(pixels);
  }
  const int px = x.id;
  const int id = t->add_node(std::move(out), {px}, [px, c, pixels](Tape& tape, Tape::Node& n) {
    Tensor& gx = tape.grad_buffer(px);
    for (int ci = 0; ci < c; ++ci) {
      const double g = n.grad.data[static_cast<std::size_t>(ci)] / static_cast<double>(pixels);
      double* gxp = &gx.data[static_cast<std::size_t>(ci) * pixels];
      for (std::size_t p = 0; p < pixels; ++p) gxp[p] += g;
    }
  });
  return Value{t, id};
}

Value softmax_vec(Value x) {
  Tape* t = x.tape;
  if (t == nullptr) throw std::invalid_argument("softmax_vec: null tape");
  const Tensor& vx = t->value(x);
  if (vx.rank() != 1) throw std::invalid_argument("softmax_vec: expected a vector");
  Tensor out = vx;
  const double m = *std::max_element(out.data.begin(), out.data.end());
  double sum = 0.0;
  for (double& v : out.data) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : out.data) v /= sum;
  const int px = x.id;
  const int id = t->add_node(std::move(out), {px}, [px](Tape& tape, Tape::Node& n) {
    Tensor& gx = tape.grad_buffer(px);
    double dot = 0.0;
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) dot += n.grad.data[i] * n.value.data[i];
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      gx.data[i] += n.value.data[i] * (n.grad.data[i] - dot);
    }
  });
  return Value{t, id};
}

std::vector<int> topk_indices(std::span<const double> weights, int k) {
  std::vector<int> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (weights[static_cast<std::size_t>(a)] != weights[static_cast<std::size_t>(b)]) {
      return weights[static_cast<std::size_t>(a)] > weights[static_cast<std::size_t>(b)];
    }
    return a < b;  // ties: lower index wins
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

Value topk_renorm(Value weights, int k, std::vector<int>& active_out) {
  Tape* t = weights.tape;
  if (t == nullptr) throw std::invalid_argument("topk_renorm: null tape");
  const Tensor& vw = t->value(weights);
  if (vw.rank() != 1) throw std::invalid_argument("topk_renorm: expected a vector");
  const int n = vw.dim(0);
  if (k < 1 || k > n) {
    throw std::invalid_argument("topk_renorm: k must be in [1, " + std::to_string(n) + "]");
  }
  active_out = topk_indices(std::span<const double>(vw.data), k);

  double total = 0.0;
  for (int i : active_out) total += vw.data[static_cast<std::size_t>(i)];
  if (total <= 0.0) throw std::runtime_error("topk_renorm: surviving weights sum to zero");

  Tensor out = Tensor::zeros({n});
  std::vector<char> mask(static_cast<std::size_t>(n), 0);
  for (int i : active_out) {
    mask[static_cast<std::size_t>(i)] = 1;
    out.data[static_cast<std::size_t>(i)] = vw.data[static_cast<std::size_t>(i)] / total;
  }
  const int pw = weights.id;
  const int id = t->add_node(std::move(out), {pw},
                             [pw, mask = std::move(mask), total](Tape& tape, Tape::Node& n2) {
                               const Tensor& vw2 = tape.node(pw).value;
                               Tensor& gw = tape.grad_buffer(pw);
                               double a = 0.0;
                               for (std::size_t i = 0; i < vw2.data.size(); ++i) {
                                 if (mask[i]) a += n2.grad.data[i] * vw2.data[i];
                               }
                               for (std::size_t i = 0; i < vw2.data.size(); ++i) {
                                 if (!mask[i]) continue;
                                 gw.data[i] += (n2.grad.data[i] * total - a) / (total * total);
                               }
                             });
  return Value{t, id};
}

Value weighted_blend(std::span<const Value> branch_outputs,
                     std::span<const int> branch_indices, Value weights) {
  if (branch_outputs.empty() || branch_outputs.size() != branch_indices.size()) {
    throw std::invalid_argument("weighted_blend: branch/index count mismatch");
  }
  Tape* t = weights.tape;
  if (t == nullptr) throw std::invalid_argument("weighted_blend: null tape");
  const Tensor& vw = t->value(weights);
  const Tensor& first = t->value(branch_outputs[0]);
  for (const Value& v : branch_outputs) {
    common_tape(v, weights);
    check_same_shape(t->value(v), first, "weighted_blend");
  }
  for (int idx : branch_indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= vw.data.size()) {
      throw std::invalid_argument("weighted_blend: branch index out of range");
    }
  }

  Tensor out = Tensor::zeros(first.shape);
  for (std::size_t j = 0; j < branch_outputs.size(); ++j) {
    const double wj = vw.data[static_cast<std::size_t>(branch_indices[j])];
    const Tensor& y = t->value(branch_outputs[j]);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += wj * y.data[i];
  }

  std::vector<int> parents;
  parents.reserve(branch_outputs.size() + 1);
  for (const Value& v : branch_outputs) parents.push_back(v.id);
  parents.push_back(weights.id);
  std::vector<int> indices(branch_indices.begin(), branch_indices.end());

  const int pw = weights.id;
  const int id = t->add_node(
      std::move(out), parents,
      [parents, indices, pw](Tape& tape, Tape::Node& n) {
        const Tensor& vw2 = tape.node(pw).value;
        Tensor& gw = tape.grad_buffer(pw);
        for (std::size_t j = 0; j + 1 < parents.size(); ++j) {
          const int pj = parents[j];
          const double wj = vw2.data[static_cast<std::size_t>(indices[j])];
          const Tensor& yj = tape.node(pj).value;
          Tensor& gj = tape.grad_buffer(pj);
          double dot = 0.0;
          for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
            gj.data[i] += wj * n.grad.data[i];
            dot += n.grad.data[i] * yj.data[i];
          }
          gw.data[static_cast<std::size_t>(indices[j])] += dot;
        }
      });
  return Value{t, id};
}

Value l1_loss(Value pred, const Tensor& target) {
  Tape* t = pred.tape;
  if (t == nullptr) throw std::invalid_argument("l1_loss: null tape");
  const Tensor& vp = t->value(pred);
  check_same_shape(vp, target, "l1_loss");
  const std::size_t m = vp.data.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) acc += std::abs(vp.data[i] - target.data[i]);
  Tensor out = Tensor::scalar(acc / static_cast<double>(m));
  const int pp = pred.id;
  const int id = t->add_node(std::move(out), {pp},
                             [pp, target](Tape& tape, Tape::Node& n) {
                               const Tensor& vp2 = tape.node(pp).value;
                               Tensor& gp = tape.grad_buffer(pp);
                               const double g = n.grad.data[0] / static_cast<double>(vp2.data.size());
                               for (std::size_t i = 0; i < vp2.data.size(); ++i) {
                                 const double d = vp2.data[i] - target.data[i];
                                 if (d > 0.0) gp.data[i] += g;
                                 else if (d < 0.0) gp.data[i] -= g;
                               }
                             });
  return Value{t, id};
}

Value scalar_combine(std::span<const Value> scalars, std::span<const double> coeffs) {
  if (scalars.empty() || scalars.size() != coeffs.size()) {
    throw std::invalid_argument("scalar_combine: scalar/coefficient count mismatch");
  }
  Tape* t = scalars[0].tape;
  double acc = 0.0;
  std::vector<int> parents;
  parents.reserve(scalars.size());
  for (std::size_t j = 0; j < scalars.size(); ++j) {
    common_tape(scalars[j], scalars[0]);
    const Tensor& v = t->value(scalars[j]);
    if (v.numel() != 1) throw std::invalid_argument("scalar_combine: inputs must be scalars");
    acc += coeffs[j] * v.data[0];
    parents.push_back(scalars[j].id);
  }
  std::vector<double> cs(coeffs.begin(), coeffs.end());
  const int id = t->add_node(Tensor::scalar(acc), parents,
                             [parents, cs](Tape& tape, Tape::Node& n) {
                               for (std::size_t j = 0; j < parents.size(); ++j) {
                                 tape.grad_buffer(parents[j]).data[0] += cs[j] * n.grad.data[0];
                               }
                             });
  return Value{t, id};
}

}  // namespace rainkit::nn
