#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "cht/tensor.hpp"

namespace cht {

/// Decode an 8/16-bit gray, gray+alpha, RGB or RGBA PNG into float [0,1],
/// shape [H,W,C] with alpha dropped.
inline Tensor<float> read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    require(fp != nullptr, "read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        fail("read_png: decode error in " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    const size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> raw(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 r = 0; r < h; ++r) rows[r] = raw.data() + r * rowbytes;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Tensor<float> img = Tensor<float>::zeros({static_cast<int>(h), static_cast<int>(w), channels});
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

// ---- minimal .npy support (C-order, little-endian) ----

inline void npy_write(const std::string& path, const Tensor<float>& t) {
    std::ostringstream hs;
    hs << "{'descr': '<f4', 'fortran_order': False, 'shape': (";
    for (size_t i = 0; i < t.shape.size(); ++i) hs << t.shape[i] << (t.shape.size() == 1 || i + 1 < t.shape.size() ? ", " : "");
    hs << "), }";
    std::string header = hs.str();
    const size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header.push_back('\n');

    std::ofstream f(path, std::ios::binary);
    require(f.good(), "npy_write: cannot open " + path);
    f.write("\x93NUMPY\x01\x00", 8);
    const uint16_t hlen = static_cast<uint16_t>(header.size());
    f.write(reinterpret_cast<const char*>(&hlen), 2);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline Tensor<float> npy_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "npy_read: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    require(f.good() && std::memcmp(magic, "\x93NUMPY", 6) == 0, "npy_read: bad magic in " + path);
    const int major = magic[6];
    uint32_t hlen = 0;
    if (major == 1) {
        uint16_t h16 = 0;
        f.read(reinterpret_cast<char*>(&h16), 2);
        hlen = h16;
    } else {
        f.read(reinterpret_cast<char*>(&hlen), 4);
    }
    std::string header(hlen, '\0');
    f.read(header.data(), hlen);
    require(f.good(), "npy_read: truncated header in " + path);

    require(header.find("'fortran_order': False") != std::string::npos, "npy_read: fortran order unsupported: " + path);
    std::string descr;
    for (const char* d : {"<f4", "<f8", "|u1"})
        if (header.find(std::string("'") + d + "'") != std::string::npos) descr = d;
    require(!descr.empty(), "npy_read: unsupported dtype in " + path);

    const size_t sp = header.find("'shape':");
    require(sp != std::string::npos, "npy_read: shape missing in " + path);
    const size_t lp = header.find('(', sp), rp = header.find(')', sp);
    require(lp != std::string::npos && rp != std::string::npos, "npy_read: malformed shape in " + path);
    Shape shape;
    std::string dims = header.substr(lp + 1, rp - lp - 1);
    std::istringstream ds(dims);
    std::string tok;
    while (std::getline(ds, tok, ',')) {
        std::istringstream ts(tok);
        long v;
        if (ts >> v) shape.push_back(static_cast<int>(v));
    }
    require(!shape.empty(), "npy_read: empty shape in " + path);

    const long n = shape_numel(shape);
    Tensor<float> t = Tensor<float>::zeros(shape);
    if (descr == "<f4") {
        f.read(reinterpret_cast<char*>(t.data.data()), n * 4);
    } else if (descr == "<f8") {
        std::vector<double> buf(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(buf.data()), n * 8);
        for (long i = 0; i < n; ++i) t.data[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
    } else {
        std::vector<uint8_t> buf(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(buf.data()), n);
        for (long i = 0; i < n; ++i) t.data[i] = static_cast<float>(buf[static_cast<size_t>(i)]) / 255.0f;
    }
    require(f.good(), "npy_read: truncated data in " + path);
    return t;
}

}  // namespace cht
