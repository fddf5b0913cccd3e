#ifndef MSAT_SYNTH_HPP
#define MSAT_SYNTH_HPP

#include "msat/labels.hpp"
#include "msat/tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace msat {

/// Synthetic multi-scale shapes. Class 0 is background; the remaining classes
/// are split into "large" (first half, rounded up) and "small" classes. Large
/// shapes are drawn first and small ones on top of them.
struct SynthSpec {
  Index height = 64;
  Index width = 64;
  int n_class = 5;
  int min_large = 1;
  int max_large = 2;
  int min_small = 2;
  int max_small = 4;
  double large_min_frac = 0.40;  // minimum side of a large shape, fraction of image side
  double large_max_frac = 0.75;
  double small_min_frac = 0.06;
  double small_max_frac = 0.12;  // maximum side of a small shape
  double noise = 0.05;           // per-pixel Gaussian sigma
  std::uint64_t seed = 1234;

  void validate() const;
  int large_classes() const { return n_class / 2; }
  bool is_small_class(int c) const { return c > large_classes(); }
};

struct Box {
  Index x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
};

struct ShapeDesc {
  int class_id = 0;
  Box bbox;
  bool ellipse = false;
  bool small = false;
};

struct SynthSample {
  TensorF image;    // 3 x H x W in [0, 1]
  LabelMap labels;  // 1 x H x W
  std::vector<ShapeDesc> shapes;
};

/// Base RGB color per class.
std::vector<Eigen::Vector3f> class_palette(int n_class);

/// Pure function of (spec, index).
SynthSample generate(const SynthSpec& spec, std::uint64_t index);

/// Per-pixel palette lookup; throws if a label has no palette entry.
TensorF colorize_mask(const LabelMap& labels, const std::vector<Eigen::Vector3f>& palette);

/// Even indices train, odd indices validate.
inline bool is_train_index(std::uint64_t index) { return index % 2 == 0; }

struct DatasetMeta {
  Index size = 64;  // square image side
  int n_class = 5;
  std::uint64_t seed = 0;
  std::uint64_t count = 0;
};

/// Writes img_%06d.ppm, lab_%06d.pgm and dataset.meta into `dir`.
void write_dataset(const SynthSpec& spec, std::uint64_t count, const std::filesystem::path& dir);

DatasetMeta read_dataset_meta(const std::filesystem::path& dir);

struct Dataset {
  DatasetMeta meta;
  std::vector<TensorF> images;
  std::vector<LabelMap> labels;

  std::vector<std::uint64_t> split(bool train) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace msat

#endif  // MSAT_SYNTH_HPP
