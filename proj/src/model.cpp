#include "nptm/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "nptm/binary_io.hpp"
#include "nptm/ops.hpp"
#include "nptm/rng.hpp"

namespace nptm {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void fail(const std::string& msg) { throw std::invalid_argument("model spec: " + msg); }

ops::Conv2dGeometry geometry(const ConvLayer& c) { return {c.stride, c.padding}; }

}  // namespace

std::vector<Shape> ModelSpec::layer_shapes() const {
  if (input_shape.size() != 3) fail("input shape must be channels x height x width");
  for (auto d : input_shape)
    if (d == 0) fail("input shape has a zero extent");
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + ": ";
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     if (cur.size() != 3) fail(where + "conv2d needs a c x h x w input");
                     if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) fail(where + "zero conv parameter");
                     if (cur[1] + 2 * c.padding < c.kernel || cur[2] + 2 * c.padding < c.kernel)
                       fail(where + "kernel larger than padded input");
                     cur = Shape{c.out_channels, ops::conv_out_extent(cur[1], c.kernel, geometry(c)),
                                 ops::conv_out_extent(cur[2], c.kernel, geometry(c))};
                   },
                   [&](const ReluLayer&) {},
                   [&](const MaxPoolLayer& p) {
                     if (cur.size() != 3) fail(where + "max-pool needs a c x h x w input");
                     if (p.window == 0 || cur[1] < p.window || cur[2] < p.window) fail(where + "bad pooling window");
                     cur = Shape{cur[0], cur[1] / p.window, cur[2] / p.window};
                   },
                   [&](const FlattenLayer&) { cur = Shape{shape_size(cur)}; },
                   [&](const DenseLayer& d) {
                     if (cur.size() != 1) fail(where + "dense needs a flattened input");
                     if (d.out_features == 0) fail(where + "dense with zero outputs");
                     cur = Shape{d.out_features};
                   },
               },
               layers[i]);
    shapes.push_back(cur);
  }
  return shapes;
}

void ModelSpec::validate() const {
  if (classes < 2) fail("need at least two classes");
  const auto shapes = layer_shapes();
  if (shapes.empty() || shapes.back() != Shape{classes}) fail("final layer output must have length equal to class count");
  int prev = kInputFeature - 1;
  for (int f : feature_layers) {
    if (f <= prev) fail("feature layer indices must be strictly increasing");
    prev = f;
    if (f == kInputFeature) continue;
    if (f < 0 || static_cast<std::size_t>(f) >= layers.size()) fail("feature layer index out of range");
    if (!std::holds_alternative<ReluLayer>(layers[static_cast<std::size_t>(f)]))
      fail("feature layer " + std::to_string(f) + " is not a post-activation (ReLU) layer");
    if (shapes[static_cast<std::size_t>(f)].size() != 3) fail("feature layer " + std::to_string(f) + " is not spatial");
  }
}

std::vector<Shape> ModelSpec::feature_shapes() const {
  const auto shapes = layer_shapes();
  std::vector<Shape> out;
  for (int f : feature_layers) out.push_back(f == kInputFeature ? input_shape : shapes[static_cast<std::size_t>(f)]);
  return out;
}

std::vector<Shape> ModelSpec::parameter_shapes() const {
  std::vector<Shape> out;
  Shape cur = input_shape;
  const auto shapes = layer_shapes();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (const auto* c = std::get_if<ConvLayer>(&layers[i])) {
      out.push_back(Shape{c->out_channels, cur[0], c->kernel, c->kernel});
      out.push_back(Shape{c->out_channels});
    } else if (const auto* d = std::get_if<DenseLayer>(&layers[i])) {
      out.push_back(Shape{d->out_features, cur[0]});
      out.push_back(Shape{d->out_features});
    }
    cur = shapes[i];
  }
  return out;
}

ModelSpec tiny_cnn_spec(std::size_t channels, std::size_t size, std::size_t classes) {
  ModelSpec s;
  s.input_shape = Shape{channels, size, size};
  s.classes = classes;
  s.layers = {ConvLayer{8, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{2}, ConvLayer{16, 3, 1, 1}, ReluLayer{},
              MaxPoolLayer{2}, FlattenLayer{}, DenseLayer{classes}};
  s.feature_layers = {1, 4};
  return s;
}

ModelSpec linear_spec(const Shape& input_shape, std::size_t classes) {
  ModelSpec s;
  s.input_shape = input_shape;
  s.classes = classes;
  s.layers = {FlattenLayer{}, DenseLayer{classes}};
  return s;
}

ClassifierModel::ClassifierModel(ModelSpec spec, std::vector<Tensor> parameters)
    : spec_(std::move(spec)), params_(std::move(parameters)) {
  spec_.validate();
  const auto shapes = spec_.parameter_shapes();
  if (shapes.size() != params_.size()) throw std::invalid_argument("model: wrong number of parameter tensors");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params_[i].shape() != shapes[i]) {
      throw std::invalid_argument("model: parameter " + std::to_string(i) + " has shape " +
                                  shape_string(params_[i].shape()) + ", expected " + shape_string(shapes[i]));
    }
  }
}

std::vector<std::string> ClassifierModel::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const char* kind = std::holds_alternative<ConvLayer>(spec_.layers[i])    ? "conv"
                       : std::holds_alternative<DenseLayer>(spec_.layers[i]) ? "dense"
                                                                              : nullptr;
    if (!kind) continue;
    names.push_back(std::string(kind) + std::to_string(i) + ".weight");
    names.push_back(std::string(kind) + std::to_string(i) + ".bias");
  }
  return names;
}

ClassifierModel::Trace ClassifierModel::forward(Tape& tape, const Var& x, PassCounter* counter,
                                                const std::vector<Var>* params) const {
  if (x.shape() != spec_.input_shape) {
    throw ShapeError("forward: input shape " + shape_string(x.shape()) + " does not match " +
                     shape_string(spec_.input_shape));
  }
  Tape::NetworkScope scope(tape, counter);
  std::vector<Var> p;
  if (params) {
    if (params->size() != params_.size()) throw std::invalid_argument("forward: parameter variable count mismatch");
    p = *params;
  } else {
    for (const auto& t : params_) p.push_back(tape.constant(t));
  }

  Trace trace;
  std::size_t feature_cursor = 0;
  const auto& feats = spec_.feature_layers;
  if (feature_cursor < feats.size() && feats[feature_cursor] == kInputFeature) {
    trace.features.push_back(x);
    ++feature_cursor;
  }
  Var cur = x;
  std::size_t pi = 0;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     cur = conv2d(cur, p[pi], p[pi + 1], geometry(c));
                     pi += 2;
                   },
                   [&](const ReluLayer&) { cur = relu(cur); },
                   [&](const MaxPoolLayer& m) { cur = max_pool2d(cur, m.window); },
                   [&](const FlattenLayer&) { cur = reshape(cur, Shape{cur.value().size()}); },
                   [&](const DenseLayer&) {
                     cur = affine(p[pi], cur, p[pi + 1]);
                     pi += 2;
                   },
               },
               spec_.layers[i]);
    if (feature_cursor < feats.size() && feats[feature_cursor] == static_cast<int>(i)) {
      trace.features.push_back(cur);
      ++feature_cursor;
    }
  }
  trace.logits = cur;
  return trace;
}

ClassifierModel::Output ClassifierModel::evaluate(const Tensor& x, PassCounter* counter, bool want_features,
                                                  std::vector<std::size_t>* pattern) const {
  if (x.shape() != spec_.input_shape) {
    throw ShapeError("forward: input shape " + shape_string(x.shape()) + " does not match " +
                     shape_string(spec_.input_shape));
  }
  if (pattern) pattern->clear();
  if (counter) ++counter->forward;
  Output out;
  std::size_t feature_cursor = 0;
  const auto& feats = spec_.feature_layers;
  if (want_features && feature_cursor < feats.size() && feats[feature_cursor] == kInputFeature) {
    out.features.push_back(x);
    ++feature_cursor;
  }
  Tensor cur = x;
  std::size_t pi = 0;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     cur = ops::conv2d(cur, params_[pi], params_[pi + 1], geometry(c));
                     pi += 2;
                   },
                   [&](const ReluLayer&) {
                     if (pattern) {
                       for (double v : cur.data()) pattern->push_back(v > 0.0 ? 1 : 0);
                     }
                     cur = ops::relu(cur);
                   },
                   [&](const MaxPoolLayer& m) {
                     std::vector<std::size_t> arg;
                     cur = ops::max_pool2d(cur, m.window, pattern ? &arg : nullptr);
                     if (pattern) pattern->insert(pattern->end(), arg.begin(), arg.end());
                   },
                   [&](const FlattenLayer&) { cur = cur.reshaped(Shape{cur.size()}); },
                   [&](const DenseLayer&) {
                     cur = ops::affine(params_[pi], cur, params_[pi + 1]);
                     pi += 2;
                   },
               },
               spec_.layers[i]);
    if (want_features && feature_cursor < feats.size() && feats[feature_cursor] == static_cast<int>(i)) {
      out.features.push_back(cur);
      ++feature_cursor;
    }
  }
  cur.require_finite("forward");
  out.logits = std::move(cur);
  return out;
}

ClassifierModel init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::vector<Tensor> params;
  for (const Shape& s : spec.parameter_shapes()) {
    // Bias tensors follow their weight and share its fan-in.
    std::size_t fan_in = 1;
    if (s.size() > 1) {
      fan_in = shape_size(s) / s[0];
    } else if (!params.empty()) {
      fan_in = shape_size(params.back().shape()) / params.back().dim(0);
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(s);
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    params.push_back(std::move(t));
  }
  return ClassifierModel(spec, std::move(params));
}

Tensor forward_logits(const ClassifierModel& model, const Tensor& x, PassCounter* counter) {
  return model.evaluate(x, counter, false).logits;
}

Tensor forward_logits_batch(const ClassifierModel& model, const Tensor& batch, PassCounter* counter) {
  const Shape& in = model.spec().input_shape;
  if (batch.rank() != 4 || Shape{batch.dim(1), batch.dim(2), batch.dim(3)} != in) {
    throw ShapeError("forward_logits_batch: expected N x " + shape_string(in) + ", got " + shape_string(batch.shape()));
  }
  const std::size_t n = batch.dim(0), per = shape_size(in), k = model.spec().classes;
  Tensor out(Shape{n, k});
  if (counter) ++counter->forward;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> xi(batch.values().begin() + static_cast<long>(i * per),
                           batch.values().begin() + static_cast<long>((i + 1) * per));
    const Tensor logits = forward_logits(model, Tensor(in, std::move(xi)));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = logits[j];
  }
  return out;
}

std::vector<std::size_t> activation_pattern(const ClassifierModel& model, const Tensor& x) {
  std::vector<std::size_t> pattern;
  model.evaluate(x, nullptr, false, &pattern);
  return pattern;
}

std::vector<Tensor> forward_activations(const ClassifierModel& model, const Tensor& x, PassCounter* counter) {
  return model.evaluate(x, counter, true).features;
}

std::size_t argmax(const Tensor& logits) {
  if (logits.size() == 0) throw ShapeError("argmax: empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

namespace {

void check_label(std::size_t classes, std::size_t label) {
  if (classes < 2) throw std::invalid_argument("loss: need at least two classes");
  if (label >= classes) {
    throw std::invalid_argument("loss: label " + std::to_string(label) + " out of range for " +
                                std::to_string(classes) + " classes");
  }
}

}  // namespace

double margin_loss(const Tensor& logits, std::size_t label) {
  check_label(logits.size(), label);
  double best = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (i != label) best = std::max(best, logits[i]);
  return best - logits[label];
}

Var margin_loss(const Var& logits, std::size_t label) {
  const std::size_t k = logits.value().size();
  check_label(k, label);
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < k; ++i)
    if (i != label) others.push_back(i);
  return sub(max_all(index_select(logits, std::move(others))), sum(index_select(logits, {label})));
}

double cross_entropy_loss(const Tensor& logits, std::size_t label) {
  check_label(logits.size(), label);
  return -ops::log_softmax(logits)[label];
}

Var cross_entropy_loss(const Var& logits, std::size_t label) {
  check_label(logits.value().size(), label);
  return scale(sum(index_select(log_softmax(logits), {label})), -1.0);
}

Var attack_loss(LossKind kind, const Var& logits, std::size_t label) {
  return kind == LossKind::kMargin ? margin_loss(logits, label) : cross_entropy_loss(logits, label);
}

// Archive layout (all little-endian):
//   "PRKM" | u32 version | u32 rank | u32 dims[rank] | u32 classes
//   u32 layer_count | per layer: u8 tag, u32 fields...
//     tag 1 conv: out_channels, kernel, stride, padding
//     tag 2 relu | tag 3 max-pool: window | tag 4 flatten | tag 5 dense: out_features
//   u32 feature_count | i32 feature indices
//   u64 value_count | f64 parameter values, tensors in storage order
std::string serialize_model(const ClassifierModel& model) {
  std::ostringstream os(std::ios::binary);
  const ModelSpec& s = model.spec();
  io::write_magic(os, "PRKM");
  io::write_le<std::uint32_t>(os, kModelArchiveVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.input_shape.size()));
  for (auto d : s.input_shape) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.classes));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.layers.size()));
  auto u32 = [&](std::size_t v) { io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v)); };
  for (const Layer& l : s.layers) {
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     io::write_le<std::uint8_t>(os, 1);
                     u32(c.out_channels);
                     u32(c.kernel);
                     u32(c.stride);
                     u32(c.padding);
                   },
                   [&](const ReluLayer&) { io::write_le<std::uint8_t>(os, 2); },
                   [&](const MaxPoolLayer& m) {
                     io::write_le<std::uint8_t>(os, 3);
                     u32(m.window);
                   },
                   [&](const FlattenLayer&) { io::write_le<std::uint8_t>(os, 4); },
                   [&](const DenseLayer& d) {
                     io::write_le<std::uint8_t>(os, 5);
                     u32(d.out_features);
                   },
               },
               l);
  }
  u32(s.feature_layers.size());
  for (int f : s.feature_layers) io::write_le<std::int32_t>(os, f);
  std::uint64_t count = 0;
  for (const auto& p : model.parameters()) count += p.size();
  io::write_le<std::uint64_t>(os, count);
  for (const auto& p : model.parameters())
    for (double v : p.data()) io::write_le<double>(os, v);
  return os.str();
}

ClassifierModel deserialize_model(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  io::expect_magic(is, "PRKM", "model archive");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kModelArchiveVersion) {
    throw io::FormatError("model archive version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kModelArchiveVersion) + ")");
  }
  ModelSpec s;
  const auto rank = io::read_le<std::uint32_t>(is, "input rank");
  if (rank != 3) throw io::FormatError("model archive: input rank must be 3");
  for (std::uint32_t i = 0; i < rank; ++i) s.input_shape.push_back(io::read_le<std::uint32_t>(is, "input shape"));
  s.classes = io::read_le<std::uint32_t>(is, "class count");
  const auto layer_count = io::read_le<std::uint32_t>(is, "layer count");
  auto u32 = [&](const char* what) { return static_cast<std::size_t>(io::read_le<std::uint32_t>(is, what)); };
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const auto tag = io::read_le<std::uint8_t>(is, "layer tag");
    switch (tag) {
      case 1: {
        ConvLayer c;
        c.out_channels = u32("conv channels");
        c.kernel = u32("conv kernel");
        c.stride = u32("conv stride");
        c.padding = u32("conv padding");
        s.layers.emplace_back(c);
        break;
      }
      case 2: s.layers.emplace_back(ReluLayer{}); break;
      case 3: s.layers.emplace_back(MaxPoolLayer{u32("pool window")}); break;
      case 4: s.layers.emplace_back(FlattenLayer{}); break;
      case 5: s.layers.emplace_back(DenseLayer{u32("dense width")}); break;
      default: throw io::FormatError("model archive: unknown layer tag " + std::to_string(tag));
    }
  }
  const auto feature_count = io::read_le<std::uint32_t>(is, "feature count");
  for (std::uint32_t i = 0; i < feature_count; ++i) s.feature_layers.push_back(io::read_le<std::int32_t>(is, "feature index"));
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(std::string("model archive: invalid spec: ") + e.what());
  }
  const auto count = io::read_le<std::uint64_t>(is, "parameter count");
  std::vector<Tensor> params;
  std::uint64_t expected = 0;
  for (const Shape& sh : s.parameter_shapes()) expected += shape_size(sh);
  if (count != expected) throw io::FormatError("model archive: parameter count does not match spec");
  for (const Shape& sh : s.parameter_shapes()) {
    std::vector<double> v(shape_size(sh));
    for (auto& x : v) x = io::read_le<double>(is, "parameters");
    params.push_back(Tensor::from_external(sh, std::move(v)));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw io::FormatError("model archive: trailing bytes");
  return ClassifierModel(std::move(s), std::move(params));
}

void save_model(const ClassifierModel& model, const std::string& path) {
  io::write_atomically(path, serialize_model(model));
}

ClassifierModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model archive " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return deserialize_model(buf.str());
}

}  // namespace nptm
