#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dfformer/tensor.hpp"

namespace dff {

/// 8-bit RGB image, row-major interleaved.
struct ImageU8 {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint8_t> rgb;  // height * width * 3
};

ImageU8 read_png_rgb8(const std::filesystem::path& path);
void write_png_rgb8(const std::filesystem::path& path, const ImageU8& img);

/// (1, 3, H, W) tensor scaled to [0, 1].
Tensor<float> image_to_tensor(const ImageU8& img);
/// Clamps to [0, 1] and quantizes to 8 bits.
ImageU8 tensor_to_image(const Tensor<float>& t);

/// Bilinear resize with half-pixel centers and edge clamping. A resize to
/// the input size copies exactly; constant images stay constant exactly.
Tensor<float> resize_bilinear(const Tensor<float>& t, std::int64_t out_h, std::int64_t out_w);

// Exact pixel permutations. rot90 turns a quarter turn counter-clockwise;
// all operate on every channel of a (B, C, H, W) tensor.
Tensor<float> hflip(const Tensor<float>& t);
Tensor<float> vflip(const Tensor<float>& t);
Tensor<float> rot90(const Tensor<float>& t);
Tensor<float> rot180(const Tensor<float>& t);
Tensor<float> rot270(const Tensor<float>& t);

/// Central crop covering `fraction` of each spatial extent, resized back to
/// the original size.
Tensor<float> center_crop_resize(const Tensor<float>& t, double fraction);

}  // namespace dff
