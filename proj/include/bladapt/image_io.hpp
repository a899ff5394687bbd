#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bladapt/errors.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

// 8-bit interleaved RGB, the on-disk currency. Tensors are planar [3,H,W].
struct RawImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // height*width*3, row-major, interleaved
};

RawImage read_raw_image(const std::string& path);        // PNG or binary PPM (P6)
void write_png(const std::string& path, const RawImage& img);
void write_ppm(const std::string& path, const RawImage& img);

template <typename T>
Tensor<T> image_to_tensor(const RawImage& img) {
    const Index H = img.height, W = img.width;
    auto t = zeros<T>({3, H, W});
    for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j)
            for (Index c = 0; c < 3; ++c)
                t->values[(c * H + i) * W + j] =
                    static_cast<T>(img.rgb[static_cast<std::size_t>((i * W + j) * 3 + c)]) /
                    T(255);
    return t;
}

template <typename T>
RawImage tensor_to_image(const Tensor<T>& t) {
    if (t->shape.size() != 3 || t->shape[0] != 3)
        throw DimensionError("tensor_to_image: expected [3,H,W], got " + shape_str(t->shape));
    RawImage img;
    img.height = static_cast<int>(t->shape[1]);
    img.width = static_cast<int>(t->shape[2]);
    img.rgb.resize(static_cast<std::size_t>(img.height) * img.width * 3);
    const Index H = t->shape[1], W = t->shape[2];
    for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j)
            for (Index c = 0; c < 3; ++c) {
                double v = static_cast<double>(t->values[(c * H + i) * W + j]);
                v = std::min(1.0, std::max(0.0, v));
                img.rgb[static_cast<std::size_t>((i * W + j) * 3 + c)] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

template <typename T>
Tensor<T> load_image(const std::string& path) {
    return image_to_tensor<T>(read_raw_image(path));
}

template <typename T>
void save_image(const Tensor<T>& t, const std::string& path) {
    write_png(path, tensor_to_image(t));
}

} // namespace bladapt
