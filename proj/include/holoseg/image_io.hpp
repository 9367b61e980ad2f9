#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>
#include <json.hpp>

#include "holoseg/core.hpp"

namespace holoseg {

using ordered_json = nlohmann::ordered_json;

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngImage {
    int width = 0;
    int height = 0;
    int bit_depth = 0;
    int color_type = 0;
    std::vector<uint8_t> bytes;  // rows packed, 16-bit samples big-endian
};

inline PngImage read_png(const std::string& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw IoError("cannot open PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<png_bytep> row_ptrs;
    PngImage img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("malformed PNG file: " + path);
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.bit_depth = png_get_bit_depth(png, info);
    img.color_type = png_get_color_type(png, info);
    if (img.bit_depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
        img.bit_depth = 8;
    }
    png_read_update_info(png, info);
    const size_t row_bytes = png_get_rowbytes(png, info);
    img.bytes.resize(row_bytes * img.height);
    row_ptrs.resize(img.height);
    for (int r = 0; r < img.height; ++r) row_ptrs[r] = img.bytes.data() + r * row_bytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void write_png(const std::string& path, int width, int height, int bit_depth,
                      int color_type, const std::vector<uint8_t>& bytes) {
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw IoError("cannot open PNG file for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const int samples = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const size_t row_bytes = static_cast<size_t>(width) * samples * (bit_depth / 8);
    std::vector<png_bytep> row_ptrs(height);
    for (int r = 0; r < height; ++r)
        row_ptrs[r] = const_cast<png_bytep>(bytes.data() + r * row_bytes);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png_gray8(const std::string& path, const Grid<uint8_t>& g) {
    detail::write_png(path, g.cols, g.rows, 8, PNG_COLOR_TYPE_GRAY, g.data);
}

inline void write_png_gray16(const std::string& path, const Grid<uint16_t>& g) {
    std::vector<uint8_t> bytes(g.size() * 2);
    for (size_t i = 0; i < g.size(); ++i) {
        bytes[2 * i] = static_cast<uint8_t>(g.data[i] >> 8);  // network byte order
        bytes[2 * i + 1] = static_cast<uint8_t>(g.data[i] & 0xff);
    }
    detail::write_png(path, g.cols, g.rows, 16, PNG_COLOR_TYPE_GRAY, bytes);
}

inline void write_png_rgb8(const std::string& path, const Field<uint8_t>& img) {
    if (img.channels != 3) throw IoError("write_png_rgb8: field must have 3 channels");
    detail::write_png(path, img.cols, img.rows, 8, PNG_COLOR_TYPE_RGB, img.data);
}

inline Grid<uint8_t> read_png_gray8(const std::string& path) {
    detail::PngImage img = detail::read_png(path);
    if (img.color_type != PNG_COLOR_TYPE_GRAY || img.bit_depth != 8)
        throw IoError("expected 8-bit grayscale PNG: " + path);
    Grid<uint8_t> g(img.height, img.width);
    g.data = std::move(img.bytes);
    return g;
}

inline Grid<uint16_t> read_png_gray16(const std::string& path) {
    detail::PngImage img = detail::read_png(path);
    if (img.color_type != PNG_COLOR_TYPE_GRAY || img.bit_depth != 16)
        throw IoError("expected 16-bit grayscale PNG: " + path);
    Grid<uint16_t> g(img.height, img.width);
    for (size_t i = 0; i < g.size(); ++i)
        g.data[i] = static_cast<uint16_t>((img.bytes[2 * i] << 8) | img.bytes[2 * i + 1]);
    return g;
}

inline Field<uint8_t> read_png_rgb8(const std::string& path) {
    detail::PngImage img = detail::read_png(path);
    if (img.color_type != PNG_COLOR_TYPE_RGB || img.bit_depth != 8)
        throw IoError("expected 8-bit RGB PNG: " + path);
    Field<uint8_t> f(img.height, img.width, 3);
    f.data = std::move(img.bytes);
    return f;
}

inline ordered_json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open JSON file: " + path);
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

inline void save_json(const std::string& path, const ordered_json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open JSON file for writing: " + path);
    out << j.dump(2) << '\n';
}

template <typename T>
T json_get(const ordered_json& j, const std::string& key) {
    if (!j.contains(key)) throw IoError("missing JSON field: " + key);
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad JSON field '" + key + "': " + e.what());
    }
}

}  // namespace holoseg
