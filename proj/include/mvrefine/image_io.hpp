#pragma once

#include <torch/torch.h>

#include <string>

namespace mvr {

// Images are float32 CHW tensors, C=3, values in [0,1].
// On-disk images are 8-bit RGB PNGs; in-memory values produced by the renderer
// sit on the 1/255 grid so disk round trips are bit-exact.

void validate_image(const torch::Tensor& image, const char* what = "image");

torch::Tensor quantize01(const torch::Tensor& image);

torch::Tensor read_png(const std::string& path);
void write_png(const torch::Tensor& image, const std::string& path);

}  // namespace mvr
