#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lab/tensor.hpp"

namespace lab {

// [-1,1] float -> 8-bit via (v+1)/2*255, rounded half-to-even.
uint8_t quantize_unit(float v);

// img is (3,H,W) in [-1,1]; written as 8-bit RGB PNG (filter 0 rows, fixed
// zlib level) so identical tensors produce identical bytes.
std::vector<uint8_t> encode_png(const Tensor<float>& img);
void write_png(const Tensor<float>& img, const std::string& path);

// Reads an 8-bit RGB non-interlaced PNG back to (3,H,W) in [-1,1].
Tensor<float> read_png(const std::string& path);

// Tiles images into rows x cols with a 2 px separator; images fill row-major.
Tensor<float> image_grid(const std::vector<Tensor<float>>& images, int cols);

}  // namespace lab
