#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "nptm/binary_io.hpp"
#include "nptm/model.hpp"
#include "nptm/ops.hpp"
#include "test_support.hpp"

using namespace nptm;
using test::random_tensor;

namespace {

// Little-endian bytes spelled out by hand, independent of the io helpers.
struct Bytes {
  std::string s;
  void u8(unsigned v) { s.push_back(static_cast<char>(v & 0xff)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8((v >> (8 * i)) & 0xff);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<unsigned>((v >> (8 * i)) & 0xff));
  }
  void f64(double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    u64(bits);
  }
};

}  // namespace

TEST_CASE("spec validation") {
  CHECK_NOTHROW(tiny_cnn_spec(3, 16, 4).validate());
  ModelSpec s = tiny_cnn_spec(1, 8, 3);
  s.feature_layers = {4, 1};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.feature_layers = {0};  // conv output, not post-ReLU
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.feature_layers = {7};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = tiny_cnn_spec(1, 8, 3);
  s.classes = 5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("shape propagation") {
  const ModelSpec s = tiny_cnn_spec(3, 16, 4);
  const auto fs = s.feature_shapes();
  REQUIRE(fs.size() == 2);
  CHECK(fs[0] == Shape{8, 16, 16});
  CHECK(fs[1] == Shape{16, 8, 8});
  CHECK(s.layer_shapes().back() == Shape{4});
  const auto ps = s.parameter_shapes();
  REQUIRE(ps.size() == 6);
  CHECK(ps[0] == Shape{8, 3, 3, 3});
  CHECK(ps[2] == Shape{16, 8, 3, 3});
  CHECK(ps[4] == Shape{4, 16 * 4 * 4});

  const ClassifierModel m = init_model(s, 1);
  Rng rng(2);
  const auto acts = forward_activations(m, random_tensor(s.input_shape, rng, 0, 1));
  REQUIRE(acts.size() == 2);
  CHECK(acts[0].shape() == fs[0]);
  CHECK(acts[1].shape() == fs[1]);
  for (const auto& a : acts)
    for (double v : a.data()) CHECK(v >= 0.0);
}

TEST_CASE("initialization is reproducible") {
  const ModelSpec s = tiny_cnn_spec(1, 8, 3);
  const ClassifierModel a = init_model(s, 42), b = init_model(s, 42), c = init_model(s, 43);
  CHECK(a.parameters() == b.parameters());
  CHECK_FALSE(a.parameters() == c.parameters());
  const auto shapes = s.parameter_shapes();
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const Shape& sh = shapes[i];
    if (sh.size() < 2) continue;
    const double fan_in = static_cast<double>(shape_size(sh) / sh[0]);
    CHECK(norm_inf(a.parameters()[i]) <= 1.0 / std::sqrt(fan_in));
  }
  CHECK(a.parameter_names().size() == a.parameters().size());
}

TEST_CASE("linear model logits are W x + b") {
  const ModelSpec s = linear_spec(Shape{1, 2, 2}, 3);
  Rng rng(4);
  const Tensor w = random_tensor(Shape{3, 4}, rng);
  const Tensor b = random_tensor(Shape{3}, rng);
  const ClassifierModel m(s, {w, b});
  const Tensor x = random_tensor(s.input_shape, rng);
  const Tensor z = forward_logits(m, x);
  for (std::size_t i = 0; i < 3; ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < 4; ++j) acc += w[i * 4 + j] * x[j];
    CHECK(z[i] == doctest::Approx(acc).epsilon(1e-15));
  }

  // Affine: f(a x1 + (1 - a) x2) = a f(x1) + (1 - a) f(x2).
  const ClassifierModel r = init_model(s, 9);
  const Tensor x2 = random_tensor(s.input_shape, rng);
  const Tensor mix = 0.3 * x + 0.7 * x2;
  CHECK(max_abs_diff(forward_logits(r, mix), 0.3 * forward_logits(r, x) + 0.7 * forward_logits(r, x2)) < 1e-14);

  const ClassifierModel zero(s, {Tensor(Shape{3, 4}), b});
  CHECK(forward_logits(zero, x) == b);
}

TEST_CASE("identity feature returns the input") {
  ModelSpec s = linear_spec(Shape{2, 3, 3}, 2);
  s.feature_layers = {kInputFeature};
  const ClassifierModel m = init_model(s, 1);
  Rng rng(3);
  const Tensor x = random_tensor(s.input_shape, rng);
  const auto f = forward_activations(m, x);
  REQUIRE(f.size() == 1);
  CHECK(f[0] == x);
}

TEST_CASE("tape forward agrees with graph-free evaluation") {
  const ModelSpec s = tiny_cnn_spec(2, 8, 3);
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const ClassifierModel m = init_model(s, static_cast<std::uint64_t>(trial));
    const Tensor x = random_tensor(s.input_shape, rng, 0, 1);
    Tape tape;
    PassCounter c;
    const auto trace = m.forward(tape, tape.variable(x), &c);
    const auto out = m.evaluate(x, &c);
    CHECK(c.forward == 2);
    CHECK(trace.logits.value() == out.logits);
    REQUIRE(trace.features.size() == out.features.size());
    for (std::size_t i = 0; i < out.features.size(); ++i) CHECK(trace.features[i].value() == out.features[i]);
  }
}

TEST_CASE("batched logits") {
  const ModelSpec s = tiny_cnn_spec(1, 8, 3);
  const ClassifierModel m = init_model(s, 3);
  Rng rng(6);
  const Tensor x = random_tensor(s.input_shape, rng, 0, 1);
  Tensor batch(Shape{3, 1, 8, 8});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < x.size(); ++i) batch[n * x.size() + i] = x[i];
  PassCounter c;
  const Tensor z = forward_logits_batch(m, batch, &c);
  CHECK(z.shape() == Shape{3, 3});
  const Tensor single = forward_logits(m, x);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t k = 0; k < 3; ++k) CHECK(z[n * 3 + k] == single[k]);
  CHECK(c.forward == 1);
  CHECK_THROWS_AS(forward_logits(m, Tensor(Shape{1, 7, 8})), ShapeError);
}

TEST_CASE("margin loss") {
  CHECK(margin_loss(Tensor::vector({2, 0, -1}), 0) == -2.0);
  CHECK(margin_loss(Tensor::vector({1, 1, 1}), 2) == 0.0);
  CHECK(margin_loss(Tensor::vector({0, 5}), 0) == 5.0);
  CHECK_THROWS(margin_loss(Tensor::vector({0, 5}), 2));
  CHECK_THROWS(margin_loss(Tensor::vector({3}), 0));
  CHECK(argmax(Tensor::vector({1, 3, 3})) == 1);

  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const Tensor z = random_tensor(Shape{4}, rng);
    const std::size_t y = rng.below(4);
    const double m = margin_loss(z, y);
    CHECK((m > 0) == (argmax(z) != y));
    Tape tape;
    CHECK(margin_loss(tape.variable(z), y).value().item() == m);
  }
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy_loss(Tensor::vector({2, 2, 2, 2}), 1) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  const double big = cross_entropy_loss(Tensor::vector({1000, 0}), 0);
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(0.0));
  const double direct = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(std::abs(cross_entropy_loss(Tensor::vector({1, 2, 3}), 2) - direct) < 1e-12);
  Rng rng(1);
  for (int t = 0; t < 50; ++t) CHECK(cross_entropy_loss(random_tensor(Shape{5}, rng, -10, 10), 3) >= 0.0);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const Tensor z = random_tensor(Shape{5}, rng);
    CHECK(test::gradcheck([](const Var& v) { return cross_entropy_loss(v, 2); }, z) < 1e-6);
    CHECK(test::gradcheck([](const Var& v) { return margin_loss(v, 1); }, z) < 1e-6);
  }
}

TEST_CASE("model archive round trip") {
  const ClassifierModel m = init_model(tiny_cnn_spec(3, 8, 4), 11);
  const std::string bytes = serialize_model(m);
  const ClassifierModel back = deserialize_model(bytes);
  CHECK(back.spec() == m.spec());
  CHECK(back.parameters() == m.parameters());
  CHECK(serialize_model(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "nptm_test_model.prkm";
  save_model(m, path.string());
  const ClassifierModel loaded = load_model(path.string());
  Rng rng(2);
  const Tensor x = random_tensor(m.spec().input_shape, rng);
  CHECK(forward_logits(loaded, x) == forward_logits(m, x));
  std::filesystem::remove(path);
}

TEST_CASE("model archive errors") {
  const std::string good = serialize_model(init_model(tiny_cnn_spec(1, 8, 3), 1));
  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_model(bad), doctest::Contains("bad magic"), io::FormatError);
  bad = good;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(deserialize_model(bad), doctest::Contains("version"), io::FormatError);
  CHECK_THROWS_AS(deserialize_model(good.substr(0, good.size() - 3)), io::TruncatedError);
  CHECK_THROWS_AS(deserialize_model(good.substr(0, 10)), io::TruncatedError);
  CHECK_THROWS_WITH_AS(deserialize_model(good + "x"), doctest::Contains("trailing"), io::FormatError);
  CHECK_THROWS(load_model("/nonexistent/model.prkm"));
}

TEST_CASE("hand-written model archive loads") {
  // 1x1x2 input, flatten, dense(2), weights [[1, 2], [3, 4]], bias [0.5, -0.5].
  Bytes b;
  b.s = "PRKM";
  b.u32(1);
  b.u32(3);
  b.u32(1);
  b.u32(1);
  b.u32(2);
  b.u32(2);  // classes
  b.u32(2);  // layers
  b.u8(4);
  b.u8(5);
  b.u32(2);
  b.u32(1);  // one feature: the input
  b.s.append("\xff\xff\xff\xff", 4);
  b.u64(6);
  for (double v : {1.0, 2.0, 3.0, 4.0, 0.5, -0.5}) b.f64(v);

  const ClassifierModel m = deserialize_model(b.s);
  CHECK(m.spec().input_shape == Shape{1, 1, 2});
  CHECK(m.spec().feature_layers == std::vector<int>{kInputFeature});
  const Tensor z = forward_logits(m, Tensor(Shape{1, 1, 2}, std::vector<double>{1, -1}));
  CHECK(z == Tensor::vector({-0.5, -1.5}));
  CHECK(serialize_model(m) == b.s);
}
