#include "dfformer/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace dff {

ImageU8 read_png_rgb8(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
        throw std::runtime_error("cannot read PNG " + path.string() + ": " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    ImageU8 img;
    img.width = png.width;
    img.height = png.height;
    img.rgb.resize(static_cast<std::size_t>(PNG_IMAGE_SIZE(png)));
    if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
        png_image_free(&png);
        throw std::runtime_error("corrupt PNG " + path.string() + ": " + png.message);
    }
    return img;
}

void write_png_rgb8(const std::filesystem::path& path, const ImageU8& img) {
    if (img.rgb.size() != static_cast<std::size_t>(img.width * img.height * 3)) {
        throw std::invalid_argument("write_png_rgb8: buffer does not match dimensions");
    }
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.rgb.data(), 0, nullptr)) {
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + png.message);
    }
}

Tensor<float> image_to_tensor(const ImageU8& img) {
    Tensor<float> t(1, 3, img.height, img.width);
    for (std::int64_t y = 0; y < img.height; ++y) {
        for (std::int64_t x = 0; x < img.width; ++x) {
            const std::uint8_t* px = img.rgb.data() + (y * img.width + x) * 3;
            for (std::int64_t c = 0; c < 3; ++c) {
                t.at(0, c, y, x) = static_cast<float>(px[c]) / 255.0f;
            }
        }
    }
    return t;
}

ImageU8 tensor_to_image(const Tensor<float>& t) {
    if (t.b() != 1 || t.c() != 3) {
        throw std::invalid_argument("tensor_to_image: expected (1,3,H,W), got " + shape_str(t));
    }
    ImageU8 img;
    img.height = t.h();
    img.width = t.w();
    img.rgb.resize(static_cast<std::size_t>(img.height * img.width * 3));
    for (std::int64_t y = 0; y < img.height; ++y) {
        for (std::int64_t x = 0; x < img.width; ++x) {
            std::uint8_t* px = img.rgb.data() + (y * img.width + x) * 3;
            for (std::int64_t c = 0; c < 3; ++c) {
                const float v = std::clamp(t.at(0, c, y, x), 0.0f, 1.0f);
                px[c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
            }
        }
    }
    return img;
}

Tensor<float> resize_bilinear(const Tensor<float>& t, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) {
        throw std::invalid_argument("resize_bilinear: target must be positive");
    }
    const std::int64_t B = t.b(), C = t.c(), H = t.h(), W = t.w();
    if (out_h == H && out_w == W) {
        return t;
    }
    Tensor<float> out(B, C, out_h, out_w);
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
        const std::int64_t y0 = static_cast<std::int64_t>(fy);
        const std::int64_t y1 = std::min(y0 + 1, H - 1);
        const float wy = static_cast<float>(fy - static_cast<double>(y0));
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
            const std::int64_t x0 = static_cast<std::int64_t>(fx);
            const std::int64_t x1 = std::min(x0 + 1, W - 1);
            const float wx = static_cast<float>(fx - static_cast<double>(x0));
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const float v00 = t.at(n, c, y0, x0);
                    const float v01 = t.at(n, c, y0, x1);
                    const float v10 = t.at(n, c, y1, x0);
                    const float v11 = t.at(n, c, y1, x1);
                    const float top = v00 + wx * (v01 - v00);
                    const float bot = v10 + wx * (v11 - v10);
                    out.at(n, c, oy, ox) = top + wy * (bot - top);
                }
            }
        }
    }
    return out;
}

namespace {

template <class MapFn>
Tensor<float> remap(const Tensor<float>& t, std::int64_t out_h, std::int64_t out_w, MapFn map) {
    Tensor<float> out(t.b(), t.c(), out_h, out_w);
    for (std::int64_t n = 0; n < t.b(); ++n) {
        for (std::int64_t c = 0; c < t.c(); ++c) {
            for (std::int64_t y = 0; y < out_h; ++y) {
                for (std::int64_t x = 0; x < out_w; ++x) {
                    const auto [sy, sx] = map(y, x);
                    out.at(n, c, y, x) = t.at(n, c, sy, sx);
                }
            }
        }
    }
    return out;
}

}  // namespace

Tensor<float> hflip(const Tensor<float>& t) {
    const std::int64_t W = t.w();
    return remap(t, t.h(), W, [W](std::int64_t y, std::int64_t x) {
        return std::pair{y, W - 1 - x};
    });
}

Tensor<float> vflip(const Tensor<float>& t) {
    const std::int64_t H = t.h();
    return remap(t, H, t.w(), [H](std::int64_t y, std::int64_t x) {
        return std::pair{H - 1 - y, x};
    });
}

Tensor<float> rot90(const Tensor<float>& t) {
    // Counter-clockwise quarter turn: out(y, x) = in(x, W-1-y) for an HxW
    // input producing a WxH output.
    const std::int64_t W = t.w();
    return remap(t, W, t.h(), [W](std::int64_t y, std::int64_t x) {
        return std::pair{x, W - 1 - y};
    });
}

Tensor<float> rot180(const Tensor<float>& t) {
    const std::int64_t H = t.h(), W = t.w();
    return remap(t, H, W, [H, W](std::int64_t y, std::int64_t x) {
        return std::pair{H - 1 - y, W - 1 - x};
    });
}

Tensor<float> rot270(const Tensor<float>& t) {
    const std::int64_t H = t.h();
    return remap(t, t.w(), H, [H](std::int64_t y, std::int64_t x) {
        return std::pair{H - 1 - x, y};
    });
}

Tensor<float> center_crop_resize(const Tensor<float>& t, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw std::invalid_argument("center_crop_resize: fraction must be in (0, 1]");
    }
    const std::int64_t H = t.h(), W = t.w();
    const std::int64_t ch = std::max<std::int64_t>(1, static_cast<std::int64_t>(H * fraction));
    const std::int64_t cw = std::max<std::int64_t>(1, static_cast<std::int64_t>(W * fraction));
    const std::int64_t oy = (H - ch) / 2;
    const std::int64_t ox = (W - cw) / 2;
    Tensor<float> crop(t.b(), t.c(), ch, cw);
    for (std::int64_t n = 0; n < t.b(); ++n) {
        for (std::int64_t c = 0; c < t.c(); ++c) {
            for (std::int64_t y = 0; y < ch; ++y) {
                std::copy(t.row(n, c, oy + y) + ox, t.row(n, c, oy + y) + ox + cw,
                          crop.row(n, c, y));
            }
        }
    }
    return resize_bilinear(crop, H, W);
}

}  // namespace dff
