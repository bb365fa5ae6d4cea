#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "nsns/tensor.hpp"

namespace nsns {

/// Images [N,C,H,W] in [0,1] with per-sample class labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int class_count = 0;
  std::string split = "all";

  int size() const { return labels.empty() ? 0 : images.dim(0); }
  std::vector<int> sample_shape() const;  // [C,H,W]
  Tensor sample(int i) const;
  /// Gathers the given sample indices into a contiguous batch tensor.
  Tensor batch(const std::vector<int>& indices) const;
  std::vector<int> batch_labels(const std::vector<int>& indices) const;
  void validate() const;
};

/// Big-endian IDX pair (0x803 image file + 0x801 label file); bytes scaled by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: 3073-byte records, 1 label byte + 3072 RGB plane bytes.
Dataset load_cifar_binary(const std::vector<std::string>& paths);

enum class SynthKind { Blobs, Stripes };

/// Class-conditional synthetic images: per-class blob position or stripe
/// frequency plus Gaussian pixel noise. Balanced classes, deterministic per seed.
Dataset synth_dataset(SynthKind kind, int classes, int n, int image_size, double noise,
                      uint64_t seed);

/// Stratified, disjoint, exhaustive split; fractions must sum to 1.
std::tuple<Dataset, Dataset, Dataset> split(const Dataset& dataset, double train_frac,
                                            double val_frac, double test_frac, uint64_t seed);

}  // namespace nsns
