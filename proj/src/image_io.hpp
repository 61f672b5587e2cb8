#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace slkd {

// Binary PPM (P6, maxval 255). Header is exactly "P6\n<W> <H>\n255\n";
// pixel payload is interleaved RGB rows. Tensors are planar [3,H,W] in [0,1].
std::vector<uint8_t> write_ppm(const Tensor& image);
Tensor read_ppm(const std::vector<uint8_t>& bytes);

void write_ppm_file(const Tensor& image, const std::string& path);
Tensor read_ppm_file(const std::string& path);

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const void* data, size_t size);

}  // namespace slkd
