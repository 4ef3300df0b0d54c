#pragma once

// Labelled image sets, the synthetic desk-scale generator, and the tensor /
// label archive formats.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nptm/tensor.hpp"

namespace nptm {

struct Dataset {
  Tensor images;  // N x c x h x w, values in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape example_shape() const;
  Tensor example(std::size_t i) const;
  // Throws std::invalid_argument on the first violated invariant.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset head(std::size_t n) const;
};

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t classes = 4;
  std::size_t channels = 3;
  std::size_t size = 16;
  std::size_t per_class = 500;
  double noise = 0.1;
  std::size_t blobs = 4;  // Gaussian bumps per template and channel
};

// k fixed smooth templates (sums of Gaussian blobs) plus per-pixel Gaussian
// noise, clamped to [0, 1]. Examples are interleaved by class.
Dataset generate_synthetic_dataset(const SyntheticConfig& config, const std::string& split = "train");

// Train / test pair drawn from the same templates.
struct SyntheticSplits {
  Dataset train;
  Dataset test;
};
SyntheticSplits generate_synthetic_splits(SyntheticConfig config, std::size_t train_per_class,
                                          std::size_t test_per_class);

// Class templates for a configuration (noise-free examples).
std::vector<Tensor> synthetic_templates(const SyntheticConfig& config);

enum class ArchiveDtype : std::uint8_t { kF32 = 0, kF64 = 1 };
inline constexpr std::uint32_t kTensorArchiveVersion = 1;

std::string serialize_tensor(const Tensor& t, ArchiveDtype dtype = ArchiveDtype::kF64);
Tensor deserialize_tensor(const std::string& bytes);
void save_tensor_archive(const Tensor& t, const std::string& path, ArchiveDtype dtype = ArchiveDtype::kF64);
Tensor load_tensor_archive(const std::string& path);

std::string serialize_labels(std::span<const std::size_t> labels);
std::vector<std::size_t> deserialize_labels(const std::string& bytes);
void save_label_archive(std::span<const std::size_t> labels, const std::string& path);
std::vector<std::size_t> load_label_archive(const std::string& path);

// Images plus labels; `classes` defaults to max label + 1.
Dataset load_dataset(const std::string& images_path, const std::string& labels_path, std::size_t classes = 0);
void save_dataset(const Dataset& data, const std::string& images_path, const std::string& labels_path);

std::string read_file(const std::string& path);

}  // namespace nptm
