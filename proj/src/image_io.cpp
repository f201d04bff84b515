#include "mvrefine/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

#include "mvrefine/common.hpp"

namespace mvr {

void validate_image(const torch::Tensor& image, const char* what) {
    if (!image.defined() || image.dim() != 3 || image.size(0) != 3) {
        throw ValidationError(std::string(what) + ": expected a (3,H,W) tensor");
    }
    if (image.scalar_type() != torch::kFloat32) {
        throw ValidationError(std::string(what) + ": expected float32 values");
    }
    const double lo = image.min().item<double>();
    const double hi = image.max().item<double>();
    if (lo < 0.0 || hi > 1.0) {
        throw ValidationError(std::string(what) + ": values outside [0,1]");
    }
}

torch::Tensor quantize01(const torch::Tensor& image) {
    auto u8 = (image.clamp(0, 1) * 255.0f).round().to(torch::kUInt8);
    return u8.to(torch::kFloat32) / 255.0f;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

torch::Tensor read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IntegrityError("cannot open image file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError("corrupt PNG file: " + path);
    }

    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);

    // Normalize any input to 8-bit RGB.
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    png_read_update_info(png, info);

    std::vector<uint8_t> raw(static_cast<size_t>(width) * height * 3);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y) {
        rows[y] = raw.data() + static_cast<size_t>(y) * width * 3;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    auto hwc = torch::from_blob(raw.data(), {static_cast<int64_t>(height),
                                             static_cast<int64_t>(width), 3},
                                torch::kUInt8)
                   .clone();
    return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0f).contiguous();
}

void write_png(const torch::Tensor& image, const std::string& path) {
    validate_image(image, "write_png input");
    const int64_t h = image.size(1);
    const int64_t w = image.size(2);
    auto u8 = (image.clamp(0, 1) * 255.0f)
                  .round()
                  .to(torch::kUInt8)
                  .permute({1, 2, 0})
                  .contiguous();

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open file for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG write failed: " + path);
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const uint8_t* data = u8.data_ptr<uint8_t>();
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) {
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(data + y * w * 3);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace mvr
