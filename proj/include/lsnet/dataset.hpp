#pragma once

// Manifests, image loading, seeded epoch order and batching, and the
// procedural synthetic dataset.
//
// Manifest lines: `<split> <raw path> [<reference path>]`, split one of
// train/val/test, '#' starts a comment. Relative paths resolve against the
// manifest's directory.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lsnet/config.hpp"
#include "lsnet/image_io.hpp"
#include "lsnet/physics.hpp"

namespace lsnet {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string split;
  fs::path raw;
  std::optional<fs::path> reference;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> select(const std::string& split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (split.empty() || e.split == split) out.push_back(e);
    return out;
  }
};

inline bool valid_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

inline DatasetManifest parse_manifest(std::istream& in, const fs::path& base, const std::string& source) {
  DatasetManifest m;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string split, raw, ref, extra;
    if (!(ls >> split)) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (!valid_split(split)) throw DataError(where + ": unknown split '" + split + "'");
    if (!(ls >> raw)) throw DataError(where + ": missing raw image path");
    ManifestEntry e{split, base / raw, std::nullopt};
    if (ls >> ref) e.reference = base / ref;
    if (ls >> extra) throw DataError(where + ": too many fields");
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError(source + ": manifest has no entries");
  return m;
}

inline DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), path.string());
}

/// One decoded image, optionally paired with its reference.
struct Sample {
  std::string name;
  io::Image raw;
  std::optional<io::Image> reference;
};

/// Decodes the entries of one split (all entries for an empty split name).
/// height = width = 0 keeps native sizes; otherwise every image is resized.
/// Paired images must agree in size before resizing.
inline std::vector<Sample> load_samples(const DatasetManifest& m, const std::string& split, std::size_t height = 0,
                                        std::size_t width = 0) {
  const auto entries = m.select(split);
  if (entries.empty()) throw DataError("manifest has no '" + split + "' entries");
  std::vector<Sample> out;
  for (const auto& e : entries) {
    Sample s{e.raw.stem().string(), io::read_image(e.raw), std::nullopt};
    if (e.reference) {
      io::Image ref = io::read_image(*e.reference);
      if (!(ref.shape() == s.raw.shape()))
        throw DataError("size mismatch: " + e.raw.string() + " is " + s.raw.shape().str() + " but " +
                        e.reference->string() + " is " + ref.shape().str());
      s.reference = std::move(ref);
    }
    if (height && width) {
      s.raw = io::resize_bilinear(s.raw, height, width);
      if (s.reference) s.reference = io::resize_bilinear(*s.reference, height, width);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Permutation of [0, n) fixed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  // Fisher-Yates with plain modulo: portable across standard libraries.
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

/// Consecutive chunks of the epoch order; the last one may be short.
inline std::vector<std::vector<std::size_t>> plan_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                          std::uint64_t epoch) {
  require_shape(batch_size > 0, "plan_batches: batch size must be positive");
  const auto order = epoch_order(n, seed, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

struct Batch {
  Tensor<float> raw;
  Tensor<float> reference;
};

/// Stacks the chosen samples into (B, 3, H, W) float tensors.
inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  require_shape(!indices.empty(), "make_batch: empty batch");
  const Shape s = samples.at(indices[0]).raw.shape();
  const std::size_t per = s.numel();
  Batch b{Tensor<float>(Shape(indices.size(), 3, s[2], s[3])), Tensor<float>(Shape(indices.size(), 3, s[2], s[3]))};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& smp = samples.at(indices[k]);
    if (!smp.reference) throw DataError("training needs paired data; '" + smp.name + "' has no reference");
    require_shape(smp.raw.shape() == s, "make_batch: images differ in size; set a training resolution");
    for (std::size_t i = 0; i < per; ++i) {
      b.raw[k * per + i] = static_cast<float>(smp.raw[i]);
      b.reference[k * per + i] = static_cast<float>((*smp.reference)[i]);
    }
  }
  return b;
}

/// Decoded split plus the seeded batch schedule over it.
class BatchLoader {
 public:
  BatchLoader(std::vector<Sample> samples, std::size_t batch_size, std::uint64_t seed)
      : samples_(std::move(samples)), batch_size_(batch_size), seed_(seed) {
    if (samples_.empty()) throw DataError("no samples to batch");
  }

  std::size_t size() const { return samples_.size(); }
  const std::vector<Sample>& samples() const { return samples_; }

  std::vector<std::vector<std::size_t>> plan(std::uint64_t epoch) const {
    return plan_batches(samples_.size(), batch_size_, seed_, epoch);
  }
  std::vector<Batch> batches(std::uint64_t epoch) const {
    std::vector<Batch> out;
    for (const auto& idx : plan(epoch)) out.push_back(make_batch(samples_, idx));
    return out;
  }

 private:
  std::vector<Sample> samples_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

inline BatchLoader load_dataset(const DatasetManifest& m, const std::string& split, std::size_t height,
                                std::size_t width, std::size_t batch_size, std::uint64_t seed) {
  return BatchLoader(load_samples(m, split, height, width), batch_size, seed);
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Smooth procedural scene: a two-color gradient with soft-edged ellipses,
/// a few striped, and mild pixel noise. Values in [0, 1].
inline io::Image procedural_image(std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto color = [&] { return std::array<double, 3>{0.05 + 0.9 * u(rng), 0.05 + 0.9 * u(rng), 0.05 + 0.9 * u(rng)}; };
  const double S = static_cast<double>(size);
  const auto top = color(), bottom = color();
  io::Image img(Shape(1, 3, size, size));
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double f = static_cast<double>(i) / std::max(1.0, S - 1);
      for (std::size_t c = 0; c < 3; ++c) img(0, c, i, j) = top[c] * (1 - f) + bottom[c] * f;
    }
  const int shapes = 4 + static_cast<int>(rng() % 5);
  for (int k = 0; k < shapes; ++k) {
    const auto col = color();
    const double cy = u(rng) * S, cx = u(rng) * S;
    const double ry = (0.08 + 0.25 * u(rng)) * S, rx = (0.08 + 0.25 * u(rng)) * S;
    const bool striped = u(rng) < 0.3;
    const double period = 3.0 + 5.0 * u(rng);
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double dy = (static_cast<double>(i) - cy) / ry, dx = (static_cast<double>(j) - cx) / rx;
        const double r = std::sqrt(dy * dy + dx * dx);
        double a = std::clamp((1.15 - r) / 0.3, 0.0, 1.0);  // soft rim
        if (striped && std::fmod(static_cast<double>(i + j), period) < period / 2) a *= 0.6;
        for (std::size_t c = 0; c < 3; ++c) img(0, c, i, j) = img(0, c, i, j) * (1 - a) + col[c] * a;
      }
  }
  std::normal_distribution<double> noise(0.0, 0.01);
  for (auto& v : img.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return img;
}

struct SyntheticPair {
  io::Image clean;
  io::Image degraded;
  io::Image depth;
};

/// Image i draws from seed_seq{seed, i}, so the set is fixed by the seed.
inline std::vector<SyntheticPair> synthesize(const SyntheticConfig& cfg, std::size_t size, std::uint64_t seed) {
  cfg.validate();
  require_shape(size > 0, "synthesize: image size must be positive");
  std::vector<SyntheticPair> out;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    physics::SceneModel scene;
    scene.radiance = procedural_image(size, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (cfg.depth == "ramp")
      scene.depth = physics::depth_ramp(size, size, cfg.depth_near, cfg.depth_far, 2 * std::numbers::pi * u(rng));
    else if (cfg.depth == "radial")
      scene.depth = physics::depth_radial(size, size, cfg.depth_near, cfg.depth_far, u(rng), u(rng));
    else
      scene.depth = physics::random_depth(size, size, rng, cfg.depth_near, cfg.depth_far);
    scene.eta = cfg.eta;
    scene.ambient = cfg.ambient;
    scene.fs_gain = cfg.fs_gain;
    auto comp = physics::degrade(scene);
    out.push_back({scene.radiance, physics::clip01(std::move(comp.total)), scene.depth});
  }
  return out;
}

/// Writes clean/NNN.png, raw/NNN.png and manifest.txt under dir. The last
/// cfg.held_out pairs are tagged "val". Returns the manifest path.
inline fs::path write_synthetic(const fs::path& dir, const std::vector<SyntheticPair>& pairs, std::size_t held_out) {
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "raw");
  const fs::path manifest = dir / "manifest.txt";
  std::ofstream m(manifest);
  if (!m) throw DataError("cannot write " + manifest.string());
  m << "# split raw reference\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%03zu.png", i);
    io::write_image(dir / "clean" / stem, pairs[i].clean);
    io::write_image(dir / "raw" / stem, pairs[i].degraded);
    m << (i + held_out >= pairs.size() ? "val" : "train") << " raw/" << stem << " clean/" << stem << '\n';
  }
  return manifest;
}

}  // namespace lsnet
