#include "nptm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace nptm {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Gradients::wrt(const Var& v) const {
  const auto i = static_cast<std::size_t>(v.id());
  if (i < present_.size() && present_[i]) return grads_[i];
  return Tensor(v.shape());
}

bool Gradients::reached(const Var& v) const {
  const auto i = static_cast<std::size_t>(v.id());
  return i < present_.size() && present_[i];
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, current_network_});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, current_network_});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward) {
  value.require_finite("autodiff op");
  bool needs = false;
  for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
  nodes_.push_back(Node{std::move(value), std::move(parents), needs ? std::move(backward) : BackwardFn{},
                        needs, current_network_});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Gradients Tape::backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_string(root.shape()));
  }
  return backward(root, Tensor(root.shape(), 1.0));
}

Gradients Tape::backward(const Var& output, const Tensor& seed) {
  if (output.tape() != this) throw std::invalid_argument("backward: variable from another tape");
  require_same_shape(output.value(), seed, "backward seed");

  const auto n = static_cast<std::size_t>(output.id()) + 1;
  Gradients g;
  g.grads_.resize(n);
  g.present_.assign(n, false);
  std::set<int> visited_networks;

  auto slot = [&](std::size_t i) -> Tensor* {
    if (!nodes_[i].requires_grad) return nullptr;
    if (!g.present_[i]) {
      g.grads_[i] = Tensor(nodes_[i].value.shape());
      g.present_[i] = true;
    }
    return &g.grads_[i];
  };

  if (nodes_[n - 1].requires_grad) {
    g.grads_[n - 1] = seed;
    g.present_[n - 1] = true;
  }

  std::vector<const Tensor*> parent_values;
  std::vector<Tensor*> parent_grads;
  for (std::size_t i = n; i-- > 0;) {
    if (!g.present_[i]) continue;
    Node& node = nodes_[i];
    if (node.network >= 0) visited_networks.insert(node.network);
    if (!node.backward) continue;
    parent_values.clear();
    parent_grads.clear();
    for (int p : node.parents) {
      const auto pi = static_cast<std::size_t>(p);
      parent_values.push_back(&nodes_[pi].value);
      parent_grads.push_back(slot(pi));
    }
    node.backward(g.grads_[i], node.value, parent_values, parent_grads);
  }

  for (int net : visited_networks) {
    if (PassCounter* c = networks_[static_cast<std::size_t>(net)]) ++c->backward;
  }
  return g;
}

Tape::NetworkScope::NetworkScope(Tape& tape, PassCounter* counter) : tape_(tape), previous_(tape.current_network_) {
  if (counter) ++counter->forward;
  tape_.networks_.push_back(counter);
  tape_.current_network_ = static_cast<int>(tape_.networks_.size() - 1);
}

Tape::NetworkScope::~NetworkScope() { tape_.current_network_ = previous_; }

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw std::invalid_argument("autodiff: operands on different tapes");
  return *a.tape();
}

void accumulate(Tensor* dst, const Tensor& src, double scale = 1.0) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  return t.record(a.value() + b.value(), {a.id(), b.id()},
                  [](const Tensor& go, const Tensor&, auto, auto pg) {
                    accumulate(pg[0], go);
                    accumulate(pg[1], go);
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  return t.record(a.value() - b.value(), {a.id(), b.id()},
                  [](const Tensor& go, const Tensor&, auto, auto pg) {
                    accumulate(pg[0], go);
                    accumulate(pg[1], go, -1.0);
                  });
}

Var scale(const Var& a, double s) {
  return a.tape()->record(s * a.value(), {a.id()},
                          [s](const Tensor& go, const Tensor&, auto, auto pg) { accumulate(pg[0], go, s); });
}

Var add_scalar(const Var& a, double s) {
  Tensor v = a.value();
  for (auto& x : v.data()) x += s;
  return a.tape()->record(std::move(v), {a.id()},
                          [](const Tensor& go, const Tensor&, auto, auto pg) { accumulate(pg[0], go); });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  return t.record(hadamard(a.value(), b.value()), {a.id(), b.id()},
                  [](const Tensor& go, const Tensor&, auto pv, auto pg) {
                    if (pg[0]) accumulate(pg[0], hadamard(go, *pv[1]));
                    if (pg[1]) accumulate(pg[1], hadamard(go, *pv[0]));
                  });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  return t.record(ops::matmul(a.value(), b.value()), {a.id(), b.id()},
                  [](const Tensor& go, const Tensor&, auto pv, auto pg) {
                    const Tensor& A = *pv[0];
                    const Tensor& B = *pv[1];
                    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
                    if (pg[0]) {
                      // dA = G B^T
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          double s = 0.0;
                          for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * B[p * n + j];
                          (*pg[0])[i * k + p] += s;
                        }
                    }
                    if (pg[1]) {
                      // dB = A^T G
                      for (std::size_t p = 0; p < k; ++p)
                        for (std::size_t j = 0; j < n; ++j) {
                          double s = 0.0;
                          for (std::size_t i = 0; i < m; ++i) s += A[i * k + p] * go[i * n + j];
                          (*pg[1])[p * n + j] += s;
                        }
                    }
                  });
}

Var affine(const Var& weight, const Var& x, const Var& bias) {
  Tape& t = same_tape(weight, x);
  same_tape(x, bias);
  return t.record(ops::affine(weight.value(), x.value(), bias.value()), {weight.id(), x.id(), bias.id()},
                  [](const Tensor& go, const Tensor&, auto pv, auto pg) {
                    const Tensor& W = *pv[0];
                    const Tensor& xv = *pv[1];
                    const std::size_t o = W.dim(0), n = W.dim(1);
                    if (pg[0]) {
                      for (std::size_t i = 0; i < o; ++i)
                        for (std::size_t j = 0; j < n; ++j) (*pg[0])[i * n + j] += go[i] * xv[j];
                    }
                    if (pg[1]) {
                      for (std::size_t i = 0; i < o; ++i) {
                        const double gi = go[i];
                        for (std::size_t j = 0; j < n; ++j) (*pg[1])[j] += gi * W[i * n + j];
                      }
                    }
                    accumulate(pg[2], go);
                  });
}

Var conv2d(const Var& input, const Var& weight, const Var& bias, ops::Conv2dGeometry g) {
  Tape& t = same_tape(input, weight);
  same_tape(weight, bias);
  return t.record(ops::conv2d(input.value(), weight.value(), bias.value(), g), {input.id(), weight.id(), bias.id()},
                  [g](const Tensor& go, const Tensor&, auto pv, auto pg) {
                    if (pg[0]) accumulate(pg[0], ops::conv2d_grad_input(go, *pv[1], pv[0]->shape(), g));
                    if (pg[1]) accumulate(pg[1], ops::conv2d_grad_weight(go, *pv[0], pv[1]->shape(), g));
                    if (pg[2]) accumulate(pg[2], ops::conv2d_grad_bias(go));
                  });
}

Var relu(const Var& x) {
  return x.tape()->record(ops::relu(x.value()), {x.id()},
                          [](const Tensor& go, const Tensor& out, auto, auto pg) {
                            auto d = pg[0]->data();
                            for (std::size_t i = 0; i < d.size(); ++i)
                              if (out[i] > 0.0) d[i] += go[i];
                          });
}

Var max_pool2d(const Var& x, std::size_t k) {
  std::vector<std::size_t> argmax;
  Tensor out = ops::max_pool2d(x.value(), k, &argmax);
  return x.tape()->record(std::move(out), {x.id()},
                          [argmax = std::move(argmax)](const Tensor& go, const Tensor&, auto, auto pg) {
                            for (std::size_t i = 0; i < argmax.size(); ++i) (*pg[0])[argmax[i]] += go[i];
                          });
}

Var sum(const Var& x) {
  return x.tape()->record(Tensor::scalar(nptm::sum(x.value())), {x.id()},
                          [](const Tensor& go, const Tensor&, auto, auto pg) {
                            const double g = go[0];
                            for (auto& v : pg[0]->data()) v += g;
                          });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return x.tape()->record(Tensor::scalar(nptm::sum(x.value()) / n), {x.id()},
                          [n](const Tensor& go, const Tensor&, auto, auto pg) {
                            const double g = go[0] / n;
                            for (auto& v : pg[0]->data()) v += g;
                          });
}

Var l2_norm(const Var& x) {
  return x.tape()->record(Tensor::scalar(norm2(x.value())), {x.id()},
                          [](const Tensor& go, const Tensor& out, auto pv, auto pg) {
                            const double nrm = out[0];
                            if (nrm == 0.0) return;
                            accumulate(pg[0], *pv[0], go[0] / nrm);
                          });
}

Var reshape(const Var& x, Shape shape) {
  return x.tape()->record(x.value().reshaped(std::move(shape)), {x.id()},
                          [](const Tensor& go, const Tensor&, auto, auto pg) {
                            auto d = pg[0]->data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
                          });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Tape* t = parts[0].tape();
  std::vector<int> ids;
  std::vector<double> data;
  for (const Var& p : parts) {
    if (p.tape() != t) throw std::invalid_argument("concat: operands on different tapes");
    ids.push_back(p.id());
    data.insert(data.end(), p.value().values().begin(), p.value().values().end());
  }
  const std::size_t total = data.size();
  return t->record(Tensor(Shape{total}, std::move(data)), std::move(ids),
                   [](const Tensor& go, const Tensor&, auto pv, auto pg) {
                     std::size_t off = 0;
                     for (std::size_t k = 0; k < pv.size(); ++k) {
                       const std::size_t len = pv[k]->size();
                       if (pg[k]) {
                         auto d = pg[k]->data();
                         for (std::size_t i = 0; i < len; ++i) d[i] += go[off + i];
                       }
                       off += len;
                     }
                   });
}

Var max_all(const Var& x) {
  const auto& v = x.value().values();
  if (v.empty()) throw ShapeError("max_all: empty tensor");
  const auto idx = static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
  return x.tape()->record(Tensor::scalar(v[idx]), {x.id()},
                          [idx](const Tensor& go, const Tensor&, auto, auto pg) { (*pg[0])[idx] += go[0]; });
}

Var index_select(const Var& x, std::vector<std::size_t> indices) {
  const Tensor& v = x.value();
  Tensor out(Shape{indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v.size()) throw ShapeError("index_select: index out of range");
    out[i] = v[indices[i]];
  }
  return x.tape()->record(std::move(out), {x.id()},
                          [indices = std::move(indices)](const Tensor& go, const Tensor&, auto, auto pg) {
                            for (std::size_t i = 0; i < indices.size(); ++i) (*pg[0])[indices[i]] += go[i];
                          });
}

Var log_softmax(const Var& x) {
  return x.tape()->record(ops::log_softmax(x.value()), {x.id()},
                          [](const Tensor& go, const Tensor& out, auto, auto pg) {
                            const double gs = nptm::sum(go);
                            auto d = pg[0]->data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] - std::exp(out[i]) * gs;
                          });
}

Var channel_normalize(const Var& x) {
  return x.tape()->record(ops::channel_normalize(x.value()), {x.id()},
                          [](const Tensor& go, const Tensor& out, auto pv, auto pg) {
                            accumulate(pg[0], ops::channel_normalize_grad(go, *pv[0], out));
                          });
}

}  // namespace nptm
