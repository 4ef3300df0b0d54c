#include "nptm/lpips.hpp"

#include <cmath>
#include <stdexcept>

#include "nptm/ops.hpp"

namespace nptm {

Tensor channel_normalize(const Tensor& activation) { return ops::channel_normalize(activation); }

LpipsFeatureMap::LpipsFeatureMap(const ClassifierModel& network) : network_(&network) {
  if (network.spec().feature_layers.empty()) {
    throw std::invalid_argument("LPIPS extractor has no designated feature layers");
  }
}

Tensor LpipsFeatureMap::embed_features(std::span<const Tensor> features) {
  std::vector<double> flat;
  for (const Tensor& f : features) {
    if (f.rank() != 3) throw ShapeError("LPIPS feature must be c x h x w, got " + shape_string(f.shape()));
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.dim(1) * f.dim(2)));
    const Tensor n = ops::channel_normalize(f);
    for (double v : n.data()) flat.push_back(v * scale);
  }
  const std::size_t m = flat.size();
  return Tensor(Shape{m}, std::move(flat));
}

Var LpipsFeatureMap::embed_features(std::span<const Var> features) {
  std::vector<Var> parts;
  for (const Var& f : features) {
    if (f.value().rank() != 3) throw ShapeError("LPIPS feature must be c x h x w, got " + shape_string(f.shape()));
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.value().dim(1) * f.value().dim(2)));
    parts.push_back(nptm::scale(nptm::channel_normalize(f), scale));
  }
  return concat(parts);
}

Tensor LpipsFeatureMap::embed(const Tensor& x, PassCounter* counter) const {
  return embed_features(network_->evaluate(x, counter, true).features);
}

Var LpipsFeatureMap::embed(Tape& tape, const Var& x, PassCounter* counter) const {
  return embed_features(network_->forward(tape, x, counter).features);
}

LinearFeatureMap::LinearFeatureMap(Tensor matrix, Shape input_shape)
    : matrix_(std::move(matrix)), input_shape_(std::move(input_shape)) {
  if (matrix_.rank() != 2 || matrix_.dim(1) != shape_size(input_shape_)) {
    throw ShapeError("LinearFeatureMap: matrix columns must equal input size");
  }
}

Tensor LinearFeatureMap::embed(const Tensor& x, PassCounter* counter) const {
  if (x.shape() != input_shape_) throw ShapeError("LinearFeatureMap: input shape mismatch");
  if (counter) ++counter->forward;
  const Tensor zero(Shape{matrix_.dim(0)});
  return ops::affine(matrix_, x, zero);
}

Var LinearFeatureMap::embed(Tape& tape, const Var& x, PassCounter* counter) const {
  if (x.shape() != input_shape_) throw ShapeError("LinearFeatureMap: input shape mismatch");
  Tape::NetworkScope scope(tape, counter);
  return affine(tape.constant(matrix_), reshape(x, Shape{x.value().size()}), tape.constant(Tensor(Shape{matrix_.dim(0)})));
}

FeatureEmbedding embed(const ClassifierModel& extractor, const Tensor& x) {
  const auto features = forward_activations(extractor, x);
  if (features.empty()) throw std::invalid_argument("embed: extractor has no designated feature layers");
  FeatureEmbedding e;
  e.flat = LpipsFeatureMap::embed_features(features);
  std::size_t offset = 0;
  for (const Tensor& f : features) {
    EmbeddingSegment s{offset, f.size(), f.dim(0), f.dim(1), f.dim(2)};
    e.segments.push_back(s);
    offset += s.length;
  }
  return e;
}

double lpips_distance(const ClassifierModel& extractor, const Tensor& x1, const Tensor& x2) {
  return norm2(embed(extractor, x1).flat - embed(extractor, x2).flat);
}

Var embedding_distance(const Var& a, const Tensor& b) {
  return l2_norm(sub(a, a.tape()->constant(b)));
}

LpipsBall::LpipsBall(const FeatureMap& phi, Tensor reference_embedding, PassCounter* counter)
    : phi_(phi), ref_(std::move(reference_embedding)), counter_(counter) {}

LpipsBall LpipsBall::around(const FeatureMap& phi, const Tensor& reference, PassCounter* counter) {
  return LpipsBall(phi, phi.embed(reference, counter), counter);
}

double LpipsBall::value(const Tensor& p) const { return norm2(phi_.embed(p, counter_) - ref_); }

double LpipsBall::value_and_grad(const Tensor& p, Tensor& grad) const {
  Tape tape;
  const Var pv = tape.variable(p);
  const Var d = embedding_distance(phi_.embed(tape, pv, counter_), ref_);
  grad = tape.backward(d).wrt(pv);
  return d.value().item();
}

double L2Ball::value(const Tensor& p) const {
  ++evaluations_;
  return norm2(p - ref_);
}

double L2Ball::value_and_grad(const Tensor& p, Tensor& grad) const {
  ++evaluations_;
  const Tensor diff = p - ref_;
  const double d = norm2(diff);
  grad = d > 0.0 ? (1.0 / d) * diff : Tensor(p.shape());
  return d;
}

}  // namespace nptm
