#include "msat/synth.hpp"

#include "msat/pnm.hpp"
#include "msat/rng.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace msat {

void SynthSpec::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("synth: image must be at least 8x8");
  if (n_class < 3 || n_class > 13) throw std::invalid_argument("synth: n_class must be in [3, 13]");
  if (min_large < 1 || max_large < min_large || min_small < 1 || max_small < min_small) {
    throw std::invalid_argument("synth: shape counts need 1 <= min <= max");
  }
  if (!(large_min_frac > 0 && large_min_frac <= large_max_frac && large_max_frac <= 1)) {
    throw std::invalid_argument("synth: large shape fractions out of range");
  }
  if (!(small_min_frac > 0 && small_min_frac <= small_max_frac && small_max_frac < large_min_frac)) {
    throw std::invalid_argument("synth: small shape fractions out of range");
  }
  if (noise < 0) throw std::invalid_argument("synth: noise must be >= 0");
}

std::vector<Eigen::Vector3f> class_palette(int n_class) {
  // Each small class sits near one large class in color space, so color alone
  // separates them only by a moderate margin.
  static const float base[][3] = {
      {0.50f, 0.50f, 0.50f},  // background
      {0.85f, 0.20f, 0.20f}, {0.20f, 0.30f, 0.85f}, {0.20f, 0.75f, 0.25f},
      {0.85f, 0.80f, 0.20f}, {0.70f, 0.25f, 0.75f}, {0.20f, 0.75f, 0.80f},
      {0.95f, 0.55f, 0.20f}, {0.30f, 0.60f, 0.95f}, {0.45f, 0.95f, 0.40f},
      {0.95f, 0.95f, 0.55f}, {0.95f, 0.45f, 0.90f}, {0.55f, 0.95f, 0.95f},
      {0.10f, 0.10f, 0.10f}, {0.95f, 0.95f, 0.95f}, {0.30f, 0.15f, 0.05f},
  };
  if (n_class < 1 || n_class > 13) throw std::invalid_argument("class_palette: n_class must be in [1, 13]");
  std::vector<Eigen::Vector3f> out;
  const int large = n_class / 2;
  out.emplace_back(base[0][0], base[0][1], base[0][2]);
  for (int c = 1; c < n_class; ++c) {
    // Large classes take slots 1..6, small classes slots 7.. paired with them.
    const int slot = c <= large ? c : 6 + (c - large);
    out.emplace_back(base[slot][0], base[slot][1], base[slot][2]);
  }
  return out;
}

namespace {

Index draw_side(CounterRng& rng, Index extent, double min_frac, double max_frac) {
  const auto lo = std::max<Index>(1, static_cast<Index>(std::ceil(min_frac * static_cast<double>(extent))));
  const auto hi = std::max<Index>(lo, static_cast<Index>(std::floor(max_frac * static_cast<double>(extent))));
  return rng.uniform_int(lo, hi);
}

// Pixel (x, y) lies inside the ellipse inscribed in the box when its center
// satisfies the ellipse inequality; evaluated on doubled integer coordinates.
bool inside(const ShapeDesc& s, Index x, Index y) {
  if (x < s.bbox.x0 || x >= s.bbox.x1 || y < s.bbox.y0 || y >= s.bbox.y1) return false;
  if (!s.ellipse) return true;
  const std::int64_t w = s.bbox.x1 - s.bbox.x0, h = s.bbox.y1 - s.bbox.y0;
  const std::int64_t dx = 2 * x + 1 - (2 * s.bbox.x0 + w);
  const std::int64_t dy = 2 * y + 1 - (2 * s.bbox.y0 + h);
  return dx * dx * h * h + dy * dy * w * w <= w * w * h * h;
}

}  // namespace

SynthSample generate(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  CounterRng rng(hash_combine(spec.seed, index));
  const Index h = spec.height, w = spec.width;
  const int large_classes = spec.large_classes();
  const int small_classes = spec.n_class - 1 - large_classes;

  SynthSample sample;
  auto add_shape = [&](bool small) {
    ShapeDesc s;
    s.small = small;
    s.ellipse = rng.uniform_int(0, 1) == 1;
    s.class_id = small ? static_cast<int>(rng.uniform_int(large_classes + 1, large_classes + small_classes))
                       : static_cast<int>(rng.uniform_int(1, large_classes));
    const double lo = small ? spec.small_min_frac : spec.large_min_frac;
    const double hi = small ? spec.small_max_frac : spec.large_max_frac;
    const Index bw = draw_side(rng, w, lo, hi), bh = draw_side(rng, h, lo, hi);
    s.bbox.x0 = rng.uniform_int(0, w - bw);
    s.bbox.y0 = rng.uniform_int(0, h - bh);
    s.bbox.x1 = s.bbox.x0 + bw;
    s.bbox.y1 = s.bbox.y0 + bh;
    sample.shapes.push_back(s);
  };
  const auto n_large = rng.uniform_int(spec.min_large, spec.max_large);
  const auto n_small = rng.uniform_int(spec.min_small, spec.max_small);
  for (std::int64_t i = 0; i < n_large; ++i) add_shape(false);
  for (std::int64_t i = 0; i < n_small; ++i) add_shape(true);

  sample.labels = LabelMap(1, h, w, 0);
  for (const auto& s : sample.shapes) {
    for (Index y = s.bbox.y0; y < s.bbox.y1; ++y) {
      for (Index x = s.bbox.x0; x < s.bbox.x1; ++x) {
        if (inside(s, x, y)) sample.labels(0, y, x) = static_cast<std::uint8_t>(s.class_id);
      }
    }
  }

  const auto palette = class_palette(spec.n_class);
  sample.image = TensorF({3, h, w});
  const Index hw = h * w;
  CounterRng noise_rng(hash_combine(hash_combine(spec.seed, index), 0x6e6f697365ULL));
  for (Index i = 0; i < hw; ++i) {
    const auto& color = palette[sample.labels.data[static_cast<std::size_t>(i)]];
    for (Index c = 0; c < 3; ++c) {
      const double v = static_cast<double>(color[c]) + (spec.noise > 0 ? spec.noise * noise_rng.normal() : 0.0);
      sample.image[c * hw + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return sample;
}

TensorF colorize_mask(const LabelMap& labels, const std::vector<Eigen::Vector3f>& palette) {
  if (labels.n != 1) throw ShapeError("colorize_mask: expects a single label map");
  const Index hw = labels.h * labels.w;
  TensorF image({3, labels.h, labels.w});
  for (Index i = 0; i < hw; ++i) {
    const auto c = labels.data[static_cast<std::size_t>(i)];
    if (c >= palette.size()) {
      throw std::invalid_argument("colorize_mask: class " + std::to_string(c) + " has no palette entry (palette size " +
                                  std::to_string(palette.size()) + ")");
    }
    for (Index k = 0; k < 3; ++k) image[k * hw + i] = palette[c][k];
  }
  return image;
}

namespace {
std::string numbered(const char* prefix, std::uint64_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06" PRIu64 ".%s", prefix, i, ext);
  return buf;
}
}  // namespace

void write_dataset(const SynthSpec& spec, std::uint64_t count, const std::filesystem::path& dir) {
  if (spec.height != spec.width) throw std::invalid_argument("write_dataset: only square images are supported");
  std::filesystem::create_directories(dir);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto s = generate(spec, i);
    write_file(dir / numbered("img", i, "ppm"), write_ppm(s.image));
    write_file(dir / numbered("lab", i, "pgm"), write_pgm(s.labels));
  }
  std::ostringstream meta;
  meta << "size=" << spec.height << "\nnClass=" << spec.n_class << "\nseed=" << spec.seed << "\ncount=" << count
       << "\n";
  write_file(dir / "dataset.meta", meta.str());
}

DatasetMeta read_dataset_meta(const std::filesystem::path& dir) {
  std::istringstream in(read_file(dir / "dataset.meta"));
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("dataset.meta: missing key '" + std::string(key) + "'");
    return it->second;
  };
  DatasetMeta m;
  m.size = std::stoll(get("size"));
  m.n_class = std::stoi(get("nClass"));
  m.seed = std::stoull(get("seed"));
  m.count = std::stoull(get("count"));
  return m;
}

std::vector<std::uint64_t> Dataset::split(bool train) const {
  std::vector<std::uint64_t> out;
  for (std::uint64_t i = 0; i < images.size(); ++i) {
    if (is_train_index(i) == train) out.push_back(i);
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.meta = read_dataset_meta(dir);
  for (std::uint64_t i = 0; i < ds.meta.count; ++i) {
    ds.images.push_back(read_ppm(read_file(dir / numbered("img", i, "ppm"))));
    ds.labels.push_back(read_pgm(read_file(dir / numbered("lab", i, "pgm"))));
    if (ds.images.back().dim(1) != ds.meta.size || ds.labels.back().h != ds.meta.size) {
      throw std::runtime_error("dataset: sample " + std::to_string(i) + " does not match size in dataset.meta");
    }
  }
  return ds;
}

}  // namespace msat
