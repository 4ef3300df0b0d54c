#pragma once

// LPIPS distance over the designated internal activations of a classifier:
// each feature layer is normalized to unit channel norm at every pixel, scaled
// by 1/sqrt(h*w), flattened and concatenated. The distance is the L2 norm of
// the difference of two embeddings. No learned per-channel weights.

#include <cstddef>
#include <span>
#include <vector>

#include "nptm/autodiff.hpp"
#include "nptm/model.hpp"
#include "nptm/tensor.hpp"

namespace nptm {

struct EmbeddingSegment {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct FeatureEmbedding {
  Tensor flat;
  std::vector<EmbeddingSegment> segments;
};

Tensor channel_normalize(const Tensor& activation);

// A differentiable map x -> phi(x). Every call to embed() is one network
// evaluation and is reported to `counter`.
class FeatureMap {
 public:
  virtual ~FeatureMap() = default;
  virtual Tensor embed(const Tensor& x, PassCounter* counter) const = 0;
  virtual Var embed(Tape& tape, const Var& x, PassCounter* counter) const = 0;
};

class LpipsFeatureMap final : public FeatureMap {
 public:
  // Keeps a reference; the network must outlive the map.
  explicit LpipsFeatureMap(const ClassifierModel& network);

  const ClassifierModel& network() const { return *network_; }

  Tensor embed(const Tensor& x, PassCounter* counter) const override;
  Var embed(Tape& tape, const Var& x, PassCounter* counter) const override;

  // Embedding of activations already produced by a forward pass.
  static Tensor embed_features(std::span<const Tensor> features);
  static Var embed_features(std::span<const Var> features);

 private:
  const ClassifierModel* network_;
};

// phi(x) = A vec(x).
class LinearFeatureMap final : public FeatureMap {
 public:
  LinearFeatureMap(Tensor matrix, Shape input_shape);
  Tensor embed(const Tensor& x, PassCounter* counter) const override;
  Var embed(Tape& tape, const Var& x, PassCounter* counter) const override;
  const Tensor& matrix() const { return matrix_; }

 private:
  Tensor matrix_;
  Shape input_shape_;
};

FeatureEmbedding embed(const ClassifierModel& extractor, const Tensor& x);
double lpips_distance(const ClassifierModel& extractor, const Tensor& x1, const Tensor& x2);

// ||a - b|| as a differentiable node, with `b` fixed.
Var embedding_distance(const Var& a, const Tensor& b);

// Distance from a fixed reference point, d(., x). Used by the projections.
class DistanceToReference {
 public:
  virtual ~DistanceToReference() = default;
  virtual double value(const Tensor& p) const = 0;
  virtual double value_and_grad(const Tensor& p, Tensor& grad) const = 0;
};

class LpipsBall final : public DistanceToReference {
 public:
  LpipsBall(const FeatureMap& phi, Tensor reference_embedding, PassCounter* counter);
  // Computes phi(reference) (one forward pass).
  static LpipsBall around(const FeatureMap& phi, const Tensor& reference, PassCounter* counter);

  double value(const Tensor& p) const override;
  double value_and_grad(const Tensor& p, Tensor& grad) const override;
  const Tensor& reference_embedding() const { return ref_; }

 private:
  const FeatureMap& phi_;
  Tensor ref_;
  PassCounter* counter_;
};

class L2Ball final : public DistanceToReference {
 public:
  explicit L2Ball(Tensor reference) : ref_(std::move(reference)) {}
  double value(const Tensor& p) const override;
  double value_and_grad(const Tensor& p, Tensor& grad) const override;
  std::size_t evaluations() const { return evaluations_; }

 private:
  Tensor ref_;
  mutable std::size_t evaluations_ = 0;
};

}  // namespace nptm
