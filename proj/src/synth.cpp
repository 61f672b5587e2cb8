#include "synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "image_io.hpp"
#include "rng.hpp"

namespace slkd {

using nlohmann::json;

const char* degrade_kind_name(DegradeKind k) {
  switch (k) {
    case DegradeKind::Noise: return "noise";
    case DegradeKind::Blur: return "blur";
    case DegradeKind::Rain: return "rain";
  }
  return "?";
}

DegradeKind degrade_kind_from_name(const std::string& s) {
  if (s == "noise") return DegradeKind::Noise;
  if (s == "blur") return DegradeKind::Blur;
  if (s == "rain") return DegradeKind::Rain;
  throw ContractError("unknown degradation kind '" + s + "' (expected noise|blur|rain)");
}

void DegradeParams::validate() const {
  switch (kind) {
    case DegradeKind::Noise:
      require(noise.sigma >= 0.0f && noise.sigma < 1.0f,
              "degrade: noise sigma must lie in [0,1), got " + std::to_string(noise.sigma));
      break;
    case DegradeKind::Blur:
      require(blur.radius >= 1 && blur.radius <= 5,
              "degrade: blur radius must lie in [1,5], got " + std::to_string(blur.radius));
      require(blur.sigma > 0.0f, "degrade: blur sigma must be positive");
      break;
    case DegradeKind::Rain:
      require(rain.streaks >= 1 && rain.length >= 2,
              "degrade: rain needs streaks >= 1 and length >= 2");
      require(rain.angle_min <= rain.angle_max, "degrade: rain angle range inverted");
      require(rain.intensity > 0.0f && rain.intensity <= 1.0f,
              "degrade: rain intensity must lie in (0,1]");
      break;
  }
}

void DatasetManifest::validate() const {
  require(count >= 1, "dataset: count must be >= 1");
  require(height >= 16 && width >= 16, "dataset: image size must be >= 16x16");
  require(split > 0.0 && split < 1.0, "dataset: split fraction must lie in (0,1)");
  params.validate();
}

Tensor generate_clean(uint64_t seed, int h, int w) {
  require(h >= 16 && w >= 16,
          "generate_clean: size must be >= 16x16, got " + std::to_string(h) + "x" +
              std::to_string(w));
  Rng rng(seed);
  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<float> img(3 * plane);

  // two-color gradient background along a random direction
  float c0[3], c1[3];
  for (int c = 0; c < 3; ++c) c0[c] = static_cast<float>(rng.uniform());
  for (int c = 0; c < 3; ++c) c1[c] = static_cast<float>(rng.uniform());
  const double theta = rng.uniform(0.0, 3.141592653589793);
  const double dx = std::cos(theta), dy = std::sin(theta);
  double pmin = 0, pmax = 0;
  bool first = true;
  for (int cy = 0; cy <= 1; ++cy)
    for (int cx = 0; cx <= 1; ++cx) {
      const double p = dx * (cx * (w - 1)) + dy * (cy * (h - 1));
      if (first || p < pmin) pmin = p;
      if (first || p > pmax) pmax = p;
      first = false;
    }
  const double span = std::max(pmax - pmin, 1e-9);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float t = static_cast<float>((dx * x + dy * y - pmin) / span);
      for (int c = 0; c < 3; ++c)
        img[c * plane + y * static_cast<int64_t>(w) + x] = c0[c] + t * (c1[c] - c0[c]);
    }

  // 2..6 filled rectangles / ellipses
  const int nshapes = 2 + rng.uniform_int(5);
  for (int s = 0; s < nshapes; ++s) {
    const bool ellipse = rng.uniform() < 0.5;
    float col[3];
    for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(rng.uniform());
    const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
    const double rx = rng.uniform(w / 8.0, w / 3.0), ry = rng.uniform(h / 8.0, h / 3.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double ux = (x - cx) / rx, uy = (y - cy) / ry;
        const bool inside = ellipse ? (ux * ux + uy * uy <= 1.0)
                                    : (std::abs(ux) <= 1.0 && std::abs(uy) <= 1.0);
        if (inside)
          for (int c = 0; c < 3; ++c) img[c * plane + y * static_cast<int64_t>(w) + x] = col[c];
      }
  }

  // faint sinusoidal texture shared by all channels
  const double amp = rng.uniform(0.02, 0.05);
  const double kx = rng.uniform(0.1, 0.6), ky = rng.uniform(0.1, 0.6);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float tex = static_cast<float>(amp * std::sin(kx * x + ky * y + phase));
      for (int c = 0; c < 3; ++c) img[c * plane + y * static_cast<int64_t>(w) + x] += tex;
    }

  for (float& v : img) v = std::min(1.0f, std::max(0.0f, v));
  return Tensor::from_data({3, h, w}, std::move(img));
}

namespace {

Tensor gaussian_blur_reflect(const Tensor& x, int radius, float sigma) {
  const int k = 2 * radius + 1;
  const int c = x.shape()[0];
  std::vector<float> kern(static_cast<size_t>(k) * k);
  double sum = 0.0;
  for (int y = 0; y < k; ++y)
    for (int xx = 0; xx < k; ++xx) {
      const double dy = y - radius, dx = xx - radius;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      kern[y * k + xx] = static_cast<float>(v);
      sum += v;
    }
  for (float& v : kern) v = static_cast<float>(v / sum);
  std::vector<float> wdata;
  wdata.reserve(static_cast<size_t>(c) * k * k);
  for (int ch = 0; ch < c; ++ch) wdata.insert(wdata.end(), kern.begin(), kern.end());
  const Tensor weight = Tensor::from_data({c, 1, k, k}, std::move(wdata));
  return conv2d_nobias(x, weight, 1, radius, c, /*reflect=*/true);
}

void box_blur_3x3(const std::vector<float>& in, int h, int w, std::vector<float>& out) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int ddy = -1; ddy <= 1; ++ddy)
        for (int ddx = -1; ddx <= 1; ++ddx) {
          const int yy = y + ddy, xx = x + ddx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) acc += in[yy * w + xx];
        }
      out[y * static_cast<int64_t>(w) + x] = acc / 9.0f;
    }
}

}  // namespace

Tensor degrade(const Tensor& clean, const DegradeParams& p, uint64_t seed) {
  require(clean.rank() == 3 && clean.shape()[0] == 3,
          "degrade: input must be [3,H,W], got " + shape_str(clean.shape()));
  p.validate();
  const int h = clean.shape()[1], w = clean.shape()[2];
  const int64_t plane = static_cast<int64_t>(h) * w;
  Rng rng(seed);

  switch (p.kind) {
    case DegradeKind::Noise: {
      std::vector<float> out = clean.data();
      for (float& v : out) {
        v += p.noise.sigma * static_cast<float>(rng.normal());
        v = std::min(1.0f, std::max(0.0f, v));
      }
      return Tensor::from_data(clean.shape(), std::move(out));
    }
    case DegradeKind::Blur: {
      Tensor blurred = gaussian_blur_reflect(clean.detached(), p.blur.radius, p.blur.sigma);
      std::vector<float> out = blurred.data();
      for (float& v : out) v = std::min(1.0f, std::max(0.0f, v));
      return Tensor::from_data(clean.shape(), std::move(out));
    }
    case DegradeKind::Rain: {
      std::vector<float> out = clean.data();
      std::vector<float> mask(plane), soft(plane);
      for (int s = 0; s < p.rain.streaks; ++s) {
        std::fill(mask.begin(), mask.end(), 0.0f);
        const double x0 = rng.uniform(0.0, w), y0 = rng.uniform(0.0, h);
        const double ang = rng.uniform(p.rain.angle_min, p.rain.angle_max);
        const double sx = std::sin(ang), sy = std::cos(ang);
        for (double t = 0.0; t <= p.rain.length; t += 0.5) {
          const int px = static_cast<int>(std::lround(x0 + t * sx));
          const int py = static_cast<int>(std::lround(y0 + t * sy));
          if (px >= 0 && px < w && py >= 0 && py < h) mask[py * static_cast<int64_t>(w) + px] = 1.0f;
        }
        box_blur_3x3(mask, h, w, soft);
        for (int64_t i = 0; i < plane; ++i) {
          const float a = p.rain.intensity * soft[i];
          if (a <= 0.0f) continue;
          for (int c = 0; c < 3; ++c) {
            float& v = out[c * plane + i];
            v = v * (1.0f - a) + a;  // blend toward white
          }
        }
      }
      for (float& v : out) v = std::min(1.0f, std::max(0.0f, v));
      return Tensor::from_data(clean.shape(), std::move(out));
    }
  }
  throw ContractError("degrade: unknown kind");
}

// ---------------------------------------------------------------------------
// manifest + files

namespace {

json params_to_json(const DegradeParams& p) {
  switch (p.kind) {
    case DegradeKind::Noise: return {{"sigma", p.noise.sigma}};
    case DegradeKind::Blur: return {{"radius", p.blur.radius}, {"sigma", p.blur.sigma}};
    case DegradeKind::Rain:
      return {{"streaks", p.rain.streaks},
              {"length", p.rain.length},
              {"angle_min", p.rain.angle_min},
              {"angle_max", p.rain.angle_max},
              {"intensity", p.rain.intensity}};
  }
  return {};
}

void check_keys(const json& obj, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ContractError("config: unknown key '" + where + "." + it.key() + "'");
  }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ContractError("config: wrong type for '" + where + "." + key + "'");
  }
}

}  // namespace

std::string manifest_json(const DatasetManifest& m) {
  json j{{"root", m.root},    {"count", m.count}, {"height", m.height},
         {"width", m.width},  {"kind", degrade_kind_name(m.params.kind)},
         {"params", params_to_json(m.params)},    {"seed", m.seed},
         {"split", m.split}};
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text, const std::string& where) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(where + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ContractError(where + ": expected a JSON object");
  check_keys(j, {"root", "count", "height", "width", "kind", "params", "seed", "split"}, where);

  DatasetManifest m;
  read_field(j, "root", m.root, where);
  read_field(j, "count", m.count, where);
  read_field(j, "height", m.height, where);
  read_field(j, "width", m.width, where);
  read_field(j, "seed", m.seed, where);
  read_field(j, "split", m.split, where);
  std::string kind = degrade_kind_name(m.params.kind);
  read_field(j, "kind", kind, where);
  m.params.kind = degrade_kind_from_name(kind);
  if (j.contains("params")) {
    const json& p = j["params"];
    const std::string pw = where + ".params";
    if (!p.is_object()) throw ContractError(pw + ": expected a JSON object");
    switch (m.params.kind) {
      case DegradeKind::Noise:
        check_keys(p, {"sigma"}, pw);
        read_field(p, "sigma", m.params.noise.sigma, pw);
        break;
      case DegradeKind::Blur:
        check_keys(p, {"radius", "sigma"}, pw);
        read_field(p, "radius", m.params.blur.radius, pw);
        read_field(p, "sigma", m.params.blur.sigma, pw);
        break;
      case DegradeKind::Rain:
        check_keys(p, {"streaks", "length", "angle_min", "angle_max", "intensity"}, pw);
        read_field(p, "streaks", m.params.rain.streaks, pw);
        read_field(p, "length", m.params.rain.length, pw);
        read_field(p, "angle_min", m.params.rain.angle_min, pw);
        read_field(p, "angle_max", m.params.rain.angle_max, pw);
        read_field(p, "intensity", m.params.rain.intensity, pw);
        break;
    }
  }
  m.validate();
  return m;
}

namespace {
std::string sample_path(const std::string& root, const char* sub, int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06d.ppm", index);
  return root + "/" + sub + "/" + name;
}
}  // namespace

void generate_dataset(const DatasetManifest& m) {
  m.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(m.root + "/clean", ec);
  fs::create_directories(m.root + "/degraded", ec);
  if (ec) throw IoError("cannot create dataset directories under " + m.root);

  const Rng base(m.seed);
  for (int i = 0; i < m.count; ++i) {
    Rng cs = base.fork(2 * static_cast<uint64_t>(i));
    Rng ds = base.fork(2 * static_cast<uint64_t>(i) + 1);
    const Tensor clean = generate_clean(cs.next_u64(), m.height, m.width);
    const Tensor deg = degrade(clean, m.params, ds.next_u64());
    write_ppm_file(clean, sample_path(m.root, "clean", i));
    write_ppm_file(deg, sample_path(m.root, "degraded", i));
  }
  const std::string mj = manifest_json(m);
  write_file(m.root + "/manifest.json", mj.data(), mj.size());
}

DatasetManifest read_manifest(const std::string& root) {
  const std::string path = root + "/manifest.json";
  const std::vector<uint8_t> bytes = read_file(path);
  DatasetManifest m = manifest_from_json(std::string(bytes.begin(), bytes.end()), "manifest");
  m.root = root;  // trust the actual location over the recorded one
  return m;
}

std::vector<int> split_indices(const DatasetManifest& m, bool train) {
  std::vector<int> idx(m.count);
  for (int i = 0; i < m.count; ++i) idx[i] = i;
  Rng rng = Rng(m.seed).fork(0x51u);
  for (int i = m.count - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
  const int ntrain = static_cast<int>(std::llround(m.split * m.count));
  std::vector<int> out(train ? idx.begin() : idx.begin() + ntrain,
                       train ? idx.begin() + ntrain : idx.end());
  std::sort(out.begin(), out.end());
  return out;
}

ImageSample load_sample(const DatasetManifest& m, int index) {
  require(index >= 0 && index < m.count, "dataset: sample index out of range");
  ImageSample s;
  s.clean = read_ppm_file(sample_path(m.root, "clean", index));
  s.degraded = read_ppm_file(sample_path(m.root, "degraded", index));
  require(s.clean.shape() == s.degraded.shape(),
          "dataset: clean/degraded shape mismatch for sample " + std::to_string(index));
  return s;
}

LoadedDataset load_dataset(const DatasetManifest& m) {
  LoadedDataset d;
  for (int i : split_indices(m, true)) d.train.push_back(load_sample(m, i));
  for (int i : split_indices(m, false)) d.heldout.push_back(load_sample(m, i));
  return d;
}

}  // namespace slkd
