#include "nptm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "nptm/binary_io.hpp"
#include "nptm/rng.hpp"

namespace nptm {

Shape Dataset::example_shape() const {
  if (images.rank() != 4) throw ShapeError("dataset images must be N x c x h x w");
  return Shape(images.shape().begin() + 1, images.shape().end());
}

Tensor Dataset::example(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
  const Shape sh = example_shape();
  const std::size_t n = shape_size(sh);
  const auto src = images.data().subspan(i * n, n);
  return Tensor(sh, std::vector<double>(src.begin(), src.end()));
}

void Dataset::validate() const {
  if (images.rank() != 4) throw std::invalid_argument("dataset: images must be N x c x h x w");
  if (images.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset: " + std::to_string(images.dim(0)) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= classes) throw std::invalid_argument("dataset: label " + std::to_string(y) + " >= class count");
  }
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: pixel value outside [0, 1]");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const Shape sh = example_shape();
  const std::size_t n = shape_size(sh);
  Shape full{indices.size()};
  full.insert(full.end(), sh.begin(), sh.end());
  std::vector<double> values;
  values.reserve(indices.size() * n);
  Dataset out;
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
    const auto src = images.data().subspan(i * n, n);
    values.insert(values.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
  }
  out.images = Tensor(full, std::move(values));
  out.classes = classes;
  out.split = split;
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

void check_synthetic(const SyntheticConfig& c) {
  if (c.classes < 2) throw std::invalid_argument("synthetic dataset: need at least two classes");
  if (c.size < 4) throw std::invalid_argument("synthetic dataset: image size must be >= 4");
  if (c.channels < 1) throw std::invalid_argument("synthetic dataset: need at least one channel");
  if (!(c.noise >= 0.0)) throw std::invalid_argument("synthetic dataset: noise must be >= 0");
}

}  // namespace

std::vector<Tensor> synthetic_templates(const SyntheticConfig& config) {
  check_synthetic(config);
  Rng rng(config.seed);
  const std::size_t s = config.size;
  const double sz = static_cast<double>(s);
  std::vector<Tensor> templates;
  for (std::size_t k = 0; k < config.classes; ++k) {
    Tensor t(Shape{config.channels, s, s}, 0.5);
    for (std::size_t c = 0; c < config.channels; ++c) {
      for (std::size_t b = 0; b < config.blobs; ++b) {
        const double cy = rng.uniform(0.0, sz), cx = rng.uniform(0.0, sz);
        const double radius = rng.uniform(sz / 6.0, sz / 3.0);
        const double amp = rng.uniform(-0.35, 0.35);
        for (std::size_t i = 0; i < s; ++i) {
          for (std::size_t j = 0; j < s; ++j) {
            const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
            t[(c * s + i) * s + j] += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
          }
        }
      }
    }
    for (auto& v : t.data()) v = std::clamp(v, 0.0, 1.0);
    templates.push_back(std::move(t));
  }
  return templates;
}

namespace {

Dataset sample_from(const std::vector<Tensor>& templates, const SyntheticConfig& c, std::size_t per_class,
                    Rng& rng, const std::string& split) {
  const std::size_t n = per_class * c.classes;
  const std::size_t m = templates.front().size();
  Dataset d;
  d.classes = c.classes;
  d.split = split;
  std::vector<double> values;
  values.reserve(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % c.classes;
    for (double v : templates[y].data()) values.push_back(std::clamp(v + c.noise * rng.normal(), 0.0, 1.0));
    d.labels.push_back(y);
  }
  Shape sh{n};
  const Shape& ex = templates.front().shape();
  sh.insert(sh.end(), ex.begin(), ex.end());
  d.images = Tensor(sh, std::move(values));
  return d;
}

}  // namespace

Dataset generate_synthetic_dataset(const SyntheticConfig& config, const std::string& split) {
  const auto templates = synthetic_templates(config);
  Rng rng(config.seed ^ 0x5EEDF00DULL);
  return sample_from(templates, config, config.per_class, rng, split);
}

SyntheticSplits generate_synthetic_splits(SyntheticConfig config, std::size_t train_per_class,
                                          std::size_t test_per_class) {
  const auto templates = synthetic_templates(config);
  Rng rng(config.seed ^ 0x5EEDF00DULL);
  SyntheticSplits out;
  out.train = sample_from(templates, config, train_per_class, rng, "train");
  out.test = sample_from(templates, config, test_per_class, rng, "test");
  return out;
}

// ---------------------------------------------------------------------------
// Archives
//
// Tensor: "PRKT" | u32 version | u8 dtype (0 f32, 1 f64) | u8 rank | u64 dims[rank] | payload
// Labels: "PRKL" | u64 count | u32 labels[count]
// All integers and floats little-endian.

std::string serialize_tensor(const Tensor& t, ArchiveDtype dtype) {
  if (t.rank() > 255) throw ShapeError("tensor archive: rank too large");
  std::ostringstream os(std::ios::binary);
  io::write_magic(os, "PRKT");
  io::write_le<std::uint32_t>(os, kTensorArchiveVersion);
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) io::write_le<std::uint64_t>(os, d);
  for (double v : t.data()) {
    if (dtype == ArchiveDtype::kF32) {
      io::write_le<float>(os, static_cast<float>(v));
    } else {
      io::write_le<double>(os, v);
    }
  }
  return os.str();
}

Tensor deserialize_tensor(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  io::expect_magic(is, "PRKT", "tensor archive");
  const auto version = io::read_le<std::uint32_t>(is, "tensor archive version");
  if (version != kTensorArchiveVersion) {
    throw io::FormatError("tensor archive version " + std::to_string(version) + " is not supported");
  }
  const auto dtype = io::read_le<std::uint8_t>(is, "tensor archive dtype");
  if (dtype > 1) throw io::FormatError("tensor archive: unknown dtype code " + std::to_string(dtype));
  const auto rank = io::read_le<std::uint8_t>(is, "tensor archive rank");
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const auto d = io::read_le<std::uint64_t>(is, "tensor archive shape");
    shape.push_back(static_cast<std::size_t>(d));
    count *= d;
  }
  const std::uint64_t width = dtype == 0 ? 4 : 8;
  const std::uint64_t remaining = bytes.size() - static_cast<std::uint64_t>(is.tellg());
  if (count > remaining / width) throw io::TruncatedError("truncated file while reading tensor archive payload");
  if (remaining != count * width) throw io::FormatError("tensor archive: trailing bytes");
  std::vector<double> values(static_cast<std::size_t>(count));
  for (auto& v : values) {
    v = dtype == 0 ? static_cast<double>(io::read_le<float>(is, "tensor archive payload"))
                   : io::read_le<double>(is, "tensor archive payload");
  }
  return Tensor::from_external(std::move(shape), std::move(values));
}

std::string serialize_labels(std::span<const std::size_t> labels) {
  std::ostringstream os(std::ios::binary);
  io::write_magic(os, "PRKL");
  io::write_le<std::uint64_t>(os, labels.size());
  for (std::size_t y : labels) {
    if (y > 0xFFFFFFFFu) throw std::invalid_argument("label archive: label does not fit in u32");
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(y));
  }
  return os.str();
}

std::vector<std::size_t> deserialize_labels(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  io::expect_magic(is, "PRKL", "label archive");
  const auto count = io::read_le<std::uint64_t>(is, "label count");
  if (count > (bytes.size() - 12) / 4) throw io::TruncatedError("truncated file while reading labels");
  if (bytes.size() != 12 + count * 4) throw io::FormatError("label archive: trailing bytes");
  std::vector<std::size_t> labels(static_cast<std::size_t>(count));
  for (auto& y : labels) y = io::read_le<std::uint32_t>(is, "labels");
  return labels;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void save_tensor_archive(const Tensor& t, const std::string& path, ArchiveDtype dtype) {
  io::write_atomically(path, serialize_tensor(t, dtype));
}

Tensor load_tensor_archive(const std::string& path) { return deserialize_tensor(read_file(path)); }

void save_label_archive(std::span<const std::size_t> labels, const std::string& path) {
  io::write_atomically(path, serialize_labels(labels));
}

std::vector<std::size_t> load_label_archive(const std::string& path) { return deserialize_labels(read_file(path)); }

Dataset load_dataset(const std::string& images_path, const std::string& labels_path, std::size_t classes) {
  Dataset d;
  d.images = load_tensor_archive(images_path);
  d.labels = load_label_archive(labels_path);
  d.classes = classes;
  if (d.classes == 0 && !d.labels.empty()) d.classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.split = images_path;
  d.validate();
  return d;
}

void save_dataset(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
  save_tensor_archive(data.images, images_path);
  save_label_archive(data.labels, labels_path);
}

}  // namespace nptm
