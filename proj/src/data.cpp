#include "nsns/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "nsns/rng.hpp"

namespace nsns {

std::vector<int> Dataset::sample_shape() const {
  if (size() == 0) throw std::runtime_error("dataset: empty, no sample shape");
  return {images.dim(1), images.dim(2), images.dim(3)};
}

Tensor Dataset::sample(int i) const {
  return batch({i});
}

Tensor Dataset::batch(const std::vector<int>& indices) const {
  if (size() == 0) throw std::runtime_error("dataset: empty");
  const size_t stride = images.numel() / static_cast<size_t>(images.dim(0));
  std::vector<int> shape = images.shape;
  shape[0] = static_cast<int>(indices.size());
  Tensor out(shape);
  for (size_t r = 0; r < indices.size(); ++r) {
    int i = indices[r];
    if (i < 0 || i >= size())
      throw std::invalid_argument("dataset: index " + std::to_string(i) + " out of range");
    std::copy(images.data.begin() + static_cast<long>(stride * static_cast<size_t>(i)),
              images.data.begin() + static_cast<long>(stride * (static_cast<size_t>(i) + 1)),
              out.data.begin() + static_cast<long>(stride * r));
  }
  return out;
}

std::vector<int> Dataset::batch_labels(const std::vector<int>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(labels.at(static_cast<size_t>(i)));
  return out;
}

void Dataset::validate() const {
  if (class_count < 1) throw std::runtime_error("dataset: class_count must be >= 1");
  if (labels.empty()) return;  // empty dataset is valid (degenerate input)
  if (images.rank() != 4)
    throw std::runtime_error("dataset: images must be [N,C,H,W], got " + images.shape_str());
  if (images.dim(0) != static_cast<int>(labels.size()))
    throw std::runtime_error("dataset: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(images.dim(0)) + " images");
  for (int y : labels)
    if (y < 0 || y >= class_count)
      throw std::runtime_error("dataset: label " + std::to_string(y) + " out of range [0," +
                               std::to_string(class_count) + ")");
  for (double v : images.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::runtime_error("dataset: pixel value " + std::to_string(v) + " outside [0,1]");
}

namespace {

uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw std::runtime_error("truncated IDX header in '" + path + "'");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot open IDX image file '" + images_path + "'");
  uint32_t magic = read_be32(img, images_path);
  if (magic != 0x00000803u)
    throw std::runtime_error("bad IDX image magic in '" + images_path + "' (expected 0x803)");
  const uint32_t n = read_be32(img, images_path);
  const uint32_t rows = read_be32(img, images_path);
  const uint32_t cols = read_be32(img, images_path);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot open IDX label file '" + labels_path + "'");
  uint32_t lmagic = read_be32(lab, labels_path);
  if (lmagic != 0x00000801u)
    throw std::runtime_error("bad IDX label magic in '" + labels_path + "' (expected 0x801)");
  const uint32_t ln = read_be32(lab, labels_path);
  if (ln != n)
    throw std::runtime_error("IDX count mismatch: " + std::to_string(n) + " images vs " +
                             std::to_string(ln) + " labels");

  Dataset ds;
  ds.class_count = 10;
  if (n == 0) return ds;

  const size_t pixels = size_t(n) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  if (static_cast<size_t>(img.gcount()) != pixels)
    throw std::runtime_error("truncated IDX image payload in '" + images_path + "'");
  ds.images = Tensor({static_cast<int>(n), 1, static_cast<int>(rows), static_cast<int>(cols)});
  for (size_t i = 0; i < pixels; ++i) ds.images[i] = raw[i] / 255.0;

  std::vector<unsigned char> lraw(n);
  lab.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(lab.gcount()) != n)
    throw std::runtime_error("truncated IDX label payload in '" + labels_path + "'");
  ds.labels.assign(lraw.begin(), lraw.end());
  ds.validate();
  return ds;
}

Dataset load_cifar_binary(const std::vector<std::string>& paths) {
  constexpr size_t kRecord = 3073;  // 1 label byte + 3x1024 plane bytes
  std::vector<unsigned char> raw;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open CIFAR file '" + path + "'");
    const auto len = static_cast<size_t>(in.tellg());
    if (len % kRecord != 0)
      throw std::runtime_error("CIFAR file '" + path + "' length " + std::to_string(len) +
                               " is not a multiple of 3073");
    if (len == 0) {
      std::cerr << "warning: CIFAR file '" << path << "' is empty\n";
      continue;
    }
    in.seekg(0);
    size_t offset = raw.size();
    raw.resize(offset + len);
    in.read(reinterpret_cast<char*>(raw.data() + offset), static_cast<std::streamsize>(len));
    if (static_cast<size_t>(in.gcount()) != len)
      throw std::runtime_error("truncated CIFAR file '" + path + "'");
  }
  Dataset ds;
  ds.class_count = 10;
  const size_t n = raw.size() / kRecord;
  if (n == 0) return ds;
  ds.images = Tensor({static_cast<int>(n), 3, 32, 32});
  ds.labels.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const unsigned char* rec = raw.data() + i * kRecord;
    ds.labels[i] = rec[0];
    for (size_t p = 0; p < 3072; ++p) ds.images[i * 3072 + p] = rec[1 + p] / 255.0;
  }
  ds.validate();
  return ds;
}

Dataset synth_dataset(SynthKind kind, int classes, int n, int image_size, double noise,
                      uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("synth_dataset: classes must be >= 2");
  if (n < 1 || image_size < 4) throw std::invalid_argument("synth_dataset: bad n or image size");
  if (noise < 0.0) throw std::invalid_argument("synth_dataset: noise must be >= 0");
  if (kind == SynthKind::Stripes && classes > image_size / 2)
    throw std::invalid_argument("synth_dataset: too many stripe classes for image size");

  const int hw = image_size;
  Dataset ds;
  ds.class_count = classes;
  ds.images = Tensor({n, 1, hw, hw});
  ds.labels.resize(static_cast<size_t>(n));
  Rng rng(seed);

  const double radius = 0.32 * hw;
  const double cx = 0.5 * (hw - 1), cy = 0.5 * (hw - 1);
  const double blob_sigma = std::max(1.0, 0.10 * hw);
  constexpr double kTau = 6.283185307179586476925286766559;

  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    ds.labels[static_cast<size_t>(i)] = label;
    double* img = ds.images.data.data() + size_t(i) * hw * hw;
    if (kind == SynthKind::Blobs) {
      const double theta = kTau * label / classes;
      const double by = cy + radius * std::sin(theta);
      const double bx = cx + radius * std::cos(theta);
      const double amp = rng.uniform(0.75, 1.0);
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          const double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
          img[size_t(y) * hw + x] = amp * std::exp(-d2 / (2.0 * blob_sigma * blob_sigma));
        }
    } else {
      const double freq = label + 1;
      const double phase = rng.uniform(0.0, kTau);
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x)
          img[size_t(y) * hw + x] = 0.5 + 0.45 * std::sin(kTau * freq * x / hw + phase);
    }
    if (noise > 0.0)
      for (int p = 0; p < hw * hw; ++p) img[p] += rng.normal(0.0, noise);
    for (int p = 0; p < hw * hw; ++p) img[p] = std::min(1.0, std::max(0.0, img[p]));
  }
  ds.validate();
  return ds;
}

std::tuple<Dataset, Dataset, Dataset> split(const Dataset& dataset, double train_frac,
                                            double val_frac, double test_frac, uint64_t seed) {
  const double total = train_frac + val_frac + test_frac;
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions sum to " + std::to_string(total) +
                                ", expected 1");
  if (train_frac < 0 || val_frac < 0 || test_frac < 0)
    throw std::invalid_argument("split: fractions must be non-negative");

  std::vector<int> train_idx, val_idx, test_idx;
  for (int c = 0; c < dataset.class_count; ++c) {
    std::vector<int> members;
    for (int i = 0; i < dataset.size(); ++i)
      if (dataset.labels[static_cast<size_t>(i)] == c) members.push_back(i);
    Rng rng(derive_seed(seed, static_cast<uint64_t>(c)));
    rng.shuffle(members);
    const double nc = static_cast<double>(members.size());
    const size_t b1 = static_cast<size_t>(std::llround(nc * train_frac));
    const size_t b2 = static_cast<size_t>(std::llround(nc * (train_frac + val_frac)));
    for (size_t i = 0; i < members.size(); ++i) {
      if (i < b1)
        train_idx.push_back(members[i]);
      else if (i < b2)
        val_idx.push_back(members[i]);
      else
        test_idx.push_back(members[i]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  auto take = [&](const std::vector<int>& idx, const char* tag) {
    Dataset out;
    out.class_count = dataset.class_count;
    out.split = tag;
    if (!idx.empty()) {
      out.images = dataset.batch(idx);
      out.labels = dataset.batch_labels(idx);
    }
    return out;
  };
  return {take(train_idx, "train"), take(val_idx, "val"), take(test_idx, "test")};
}

}  // namespace nsns
