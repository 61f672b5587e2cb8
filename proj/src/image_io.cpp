#include "image_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace slkd {

std::vector<uint8_t> write_ppm(const Tensor& image) {
  require(image.rank() == 3 && image.shape()[0] == 3,
          "write_ppm: image must be [3,H,W], got " + shape_str(image.shape()));
  const int h = image.shape()[1], w = image.shape()[2];
  const std::vector<float>& v = image.data();
  for (float x : v)
    require(x >= -1e-6f && x <= 1.0f + 1e-6f, "write_ppm: values must lie in [0,1]");

  char header[64];
  const int hl = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", w, h);
  std::vector<uint8_t> out(static_cast<size_t>(hl) + 3u * h * w);
  std::memcpy(out.data(), header, static_cast<size_t>(hl));
  uint8_t* p = out.data() + hl;
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int64_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      float x = v[c * plane + i];
      x = x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x);
      *p++ = static_cast<uint8_t>(std::lround(x * 255.0f));
    }
  }
  return out;
}

namespace {

[[noreturn]] void parse_fail(size_t offset, const std::string& what) {
  throw IoError("read_ppm: " + what + " at byte offset " + std::to_string(offset));
}

// Parses a positive decimal integer, advancing `at`.
int parse_int(const std::vector<uint8_t>& b, size_t& at, const char* what) {
  size_t start = at;
  int64_t v = 0;
  while (at < b.size() && b[at] >= '0' && b[at] <= '9') {
    v = v * 10 + (b[at] - '0');
    if (v > 1 << 24) parse_fail(start, std::string("unreasonable ") + what);
    ++at;
  }
  if (at == start) parse_fail(at, std::string("expected ") + what);
  return static_cast<int>(v);
}

void expect(const std::vector<uint8_t>& b, size_t& at, char c, const char* what) {
  if (at >= b.size() || b[at] != c) parse_fail(at, std::string("expected ") + what);
  ++at;
}

}  // namespace

Tensor read_ppm(const std::vector<uint8_t>& b) {
  size_t at = 0;
  expect(b, at, 'P', "'P6' magic");
  expect(b, at, '6', "'P6' magic");
  expect(b, at, '\n', "newline after magic");
  const int w = parse_int(b, at, "width");
  expect(b, at, ' ', "space between width and height");
  const int h = parse_int(b, at, "height");
  expect(b, at, '\n', "newline after height");
  const size_t maxval_at = at;
  const int maxval = parse_int(b, at, "maxval");
  if (maxval != 255) parse_fail(maxval_at, "maxval must be 255");
  expect(b, at, '\n', "newline after maxval");
  if (w < 1 || h < 1) parse_fail(3, "degenerate image size");

  const size_t need = 3u * static_cast<size_t>(w) * h;
  if (b.size() - at < need)
    parse_fail(b.size(), "truncated pixel payload (need " + std::to_string(need) + " bytes)");

  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<float> v(3 * plane);
  for (int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) v[c * plane + i] = static_cast<float>(b[at + 3 * i + c]) / 255.0f;
  return Tensor::from_data({3, h, w}, std::move(v));
}

void write_ppm_file(const Tensor& image, const std::string& path) {
  const std::vector<uint8_t> bytes = write_ppm(image);
  write_file(path, bytes.data(), bytes.size());
}

Tensor read_ppm_file(const std::string& path) { return read_ppm(read_file(path)); }

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  std::vector<uint8_t> out(static_cast<size_t>(f.tellg()));
  f.seekg(0);
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed to read file: " + path);
  return out;
}

void write_file(const std::string& path, const void* data, size_t size) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!f) throw IoError("failed to write file: " + path);
}

}  // namespace slkd
