#include "bladapt/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace bladapt {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

RawImage read_png_file(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed decoding PNG '" + path + "' (corrupt or truncated)");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    RawImage img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 i = 0; i < h; ++i)
        rows[i] = img.rgb.data() + static_cast<std::size_t>(i) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

RawImage read_ppm_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image '" + path + "'");
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("'" + path + "' is not a binary PPM (P6)");
    auto next_token = [&f, &path]() {
        std::string tok;
        while (f >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(f, rest);
                continue;
            }
            return tok;
        }
        throw IoError("truncated PPM header in '" + path + "'");
    };
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxv = std::stoi(next_token());
    if (w <= 0 || h <= 0 || maxv != 255)
        throw IoError("unsupported PPM geometry/maxval in '" + path + "'");
    f.get();  // single whitespace after maxval
    RawImage img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw IoError("truncated PPM payload in '" + path + "'");
    return img;
}

} // namespace

RawImage read_raw_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open image '" + path + "'");
    unsigned char sig[8] = {0};
    probe.read(reinterpret_cast<char*>(sig), 8);
    probe.close();
    if (png_sig_cmp(sig, 0, 8) == 0) return read_png_file(path);
    if (sig[0] == 'P' && sig[1] == '6') return read_ppm_file(path);
    throw IoError("'" + path + "' is neither PNG nor binary PPM");
}

void write_png(const std::string& path, const RawImage& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open '" + path + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed encoding PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_const_bytep> rows(static_cast<std::size_t>(img.height));
    for (int i = 0; i < img.height; ++i)
        rows[static_cast<std::size_t>(i)] =
            img.rgb.data() + static_cast<std::size_t>(i) * img.width * 3;
    png_write_rows(png, const_cast<png_bytepp>(rows.data()),
                   static_cast<png_uint_32>(rows.size()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_ppm(const std::string& path, const RawImage& img) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw IoError("failed writing PPM '" + path + "'");
}

} // namespace bladapt
