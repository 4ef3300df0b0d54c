#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "nptm/autodiff.hpp"
#include "nptm/tensor.hpp"

namespace nptm {

struct ConvLayer {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};
struct ReluLayer {
  friend bool operator==(const ReluLayer&, const ReluLayer&) = default;
};
struct MaxPoolLayer {
  std::size_t window = 2;
  friend bool operator==(const MaxPoolLayer&, const MaxPoolLayer&) = default;
};
struct FlattenLayer {
  friend bool operator==(const FlattenLayer&, const FlattenLayer&) = default;
};
struct DenseLayer {
  std::size_t out_features = 0;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

using Layer = std::variant<ConvLayer, ReluLayer, MaxPoolLayer, FlattenLayer, DenseLayer>;

// Feature index that designates the network input itself.
inline constexpr int kInputFeature = -1;

struct ModelSpec {
  Shape input_shape;          // channels x height x width
  std::size_t classes = 0;
  std::vector<Layer> layers;
  std::vector<int> feature_layers;  // post-ReLU layer indices (or kInputFeature), increasing

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;

  // Output shape after each layer (index i = after layers[i]).
  std::vector<Shape> layer_shapes() const;
  // Shape of each designated feature (c x h x w).
  std::vector<Shape> feature_shapes() const;
  // Shapes of the parameter tensors in storage order.
  std::vector<Shape> parameter_shapes() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// conv(8,3x3,pad 1)-relu-pool2-conv(16,3x3,pad 1)-relu-pool2-flatten-dense,
// with both post-ReLU outputs as LPIPS features.
ModelSpec tiny_cnn_spec(std::size_t channels, std::size_t size, std::size_t classes);

// flatten-dense: logits are affine in the input.
ModelSpec linear_spec(const Shape& input_shape, std::size_t classes);

class ClassifierModel {
 public:
  ClassifierModel(ModelSpec spec, std::vector<Tensor> parameters);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<Tensor>& mutable_parameters() { return params_; }
  std::vector<std::string> parameter_names() const;

  struct Trace {
    Var logits;
    std::vector<Var> features;
  };

  // Records one network evaluation on `tape`. `params`, when given, are the
  // tape variables to use for the parameters (training); otherwise they are
  // recorded as constants.
  Trace forward(Tape& tape, const Var& x, PassCounter* counter = nullptr,
                const std::vector<Var>* params = nullptr) const;

  struct Output {
    Tensor logits;
    std::vector<Tensor> features;
  };
  // Graph-free evaluation. `pattern`, when given, receives the ReLU on/off
  // states and max-pool selections (see activation_pattern).
  Output evaluate(const Tensor& x, PassCounter* counter = nullptr, bool want_features = true,
                  std::vector<std::size_t>* pattern = nullptr) const;

 private:
  ModelSpec spec_;
  std::vector<Tensor> params_;
};

ClassifierModel init_model(const ModelSpec& spec, std::uint64_t seed);

Tensor forward_logits(const ClassifierModel& model, const Tensor& x, PassCounter* counter = nullptr);
// x: N x c x h x w -> N x classes
Tensor forward_logits_batch(const ClassifierModel& model, const Tensor& batch, PassCounter* counter = nullptr);
std::vector<Tensor> forward_activations(const ClassifierModel& model, const Tensor& x,
                                        PassCounter* counter = nullptr);

// ReLU on/off states and max-pool selections along the forward pass. Two
// inputs with equal patterns lie in the same linear region of the network.
std::vector<std::size_t> activation_pattern(const ClassifierModel& model, const Tensor& x);

// Smallest index among maxima.
std::size_t argmax(const Tensor& logits);

// max_{i != y} z_i - z_y; positive iff the prediction differs from y.
double margin_loss(const Tensor& logits, std::size_t label);
Var margin_loss(const Var& logits, std::size_t label);
double cross_entropy_loss(const Tensor& logits, std::size_t label);
Var cross_entropy_loss(const Var& logits, std::size_t label);

enum class LossKind { kMargin, kCrossEntropy };
Var attack_loss(LossKind kind, const Var& logits, std::size_t label);

void save_model(const ClassifierModel& model, const std::string& path);
std::string serialize_model(const ClassifierModel& model);
ClassifierModel load_model(const std::string& path);
ClassifierModel deserialize_model(const std::string& bytes);

inline constexpr std::uint32_t kModelArchiveVersion = 1;

}  // namespace nptm
