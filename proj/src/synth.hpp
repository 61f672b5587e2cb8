#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace slkd {

enum class DegradeKind { Noise, Blur, Rain };

const char* degrade_kind_name(DegradeKind k);
DegradeKind degrade_kind_from_name(const std::string& s);

struct NoiseParams {
  float sigma = 25.0f / 255.0f;
};
struct BlurParams {
  int radius = 2;
  float sigma = 1.2f;
};
struct RainParams {
  int streaks = 14;
  int length = 12;
  float angle_min = -0.5f;  // radians from vertical
  float angle_max = 0.5f;
  float intensity = 0.7f;
};

struct DegradeParams {
  DegradeKind kind = DegradeKind::Noise;
  NoiseParams noise;
  BlurParams blur;
  RainParams rain;
  void validate() const;
};

// Seeded composite of a two-color gradient, 2..6 filled shapes and a faint
// sinusoidal texture. Deterministic per seed; values in [0,1].
Tensor generate_clean(uint64_t seed, int h, int w);

Tensor degrade(const Tensor& clean, const DegradeParams& p, uint64_t seed);

struct DatasetManifest {
  std::string root = "data";
  int count = 80;
  int height = 32;
  int width = 32;
  DegradeParams params;
  uint64_t seed = 1234;
  double split = 0.8;  // train fraction
  void validate() const;
};

// Directory layout: <root>/clean/NNNNNN.ppm, <root>/degraded/NNNNNN.ppm,
// <root>/manifest.json.
void generate_dataset(const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& root);
std::string manifest_json(const DatasetManifest& m);
// Strict parse; `where` prefixes error paths (also used for the run config's
// "data" section).
DatasetManifest manifest_from_json(const std::string& text, const std::string& where);

// Deterministic disjoint split derived from the master seed.
std::vector<int> split_indices(const DatasetManifest& m, bool train);

struct ImageSample {
  Tensor clean;
  Tensor degraded;
};

ImageSample load_sample(const DatasetManifest& m, int index);

struct LoadedDataset {
  std::vector<ImageSample> train;
  std::vector<ImageSample> heldout;
};

LoadedDataset load_dataset(const DatasetManifest& m);

}  // namespace slkd
