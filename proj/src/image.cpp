#include "stealth/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace stealth {

namespace {

[[noreturn]] void parse_fail(size_t offset, const std::string& what) {
    throw std::runtime_error("ppm parse error at byte " + std::to_string(offset) +
                             ": " + what);
}

bool is_ppm_space(uint8_t c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' ||
           c == '\f';
}

// Skips whitespace and '#' comments; leaves pos at the next token byte.
void skip_separators(const std::vector<uint8_t>& b, size_t& pos) {
    while (pos < b.size()) {
        if (is_ppm_space(b[pos])) {
            ++pos;
        } else if (b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else {
            return;
        }
    }
}

long parse_int(const std::vector<uint8_t>& b, size_t& pos, const char* name) {
    skip_separators(b, pos);
    if (pos >= b.size()) parse_fail(pos, std::string("missing ") + name);
    if (b[pos] < '0' || b[pos] > '9')
        parse_fail(pos, std::string("expected digit for ") + name);
    long v = 0;
    while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
        v = v * 10 + (b[pos] - '0');
        if (v > 1000000000L) parse_fail(pos, std::string(name) + " out of range");
        ++pos;
    }
    return v;
}

}  // namespace

Image Image::blank(int width, int height, uint8_t r, uint8_t g, uint8_t b) {
    if (width <= 0 || height <= 0)
        throw std::invalid_argument("image dimensions must be positive");
    Image img;
    img.width = width;
    img.height = height;
    img.pixels.resize(static_cast<size_t>(3) * width * height);
    for (size_t i = 0; i < img.pixels.size(); i += 3) {
        img.pixels[i] = r;
        img.pixels[i + 1] = g;
        img.pixels[i + 2] = b;
    }
    return img;
}

Image decode_ppm(const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
        parse_fail(0, "magic is not P6");
    pos = 2;
    const long w = parse_int(bytes, pos, "width");
    const long h = parse_int(bytes, pos, "height");
    if (w <= 0 || h <= 0) parse_fail(pos, "non-positive dimensions");
    if (w > 1 << 16 || h > 1 << 16) parse_fail(pos, "dimensions out of range");
    const size_t maxval_at = pos;
    const long maxval = parse_int(bytes, pos, "maxval");
    if (maxval != 255)
        parse_fail(maxval_at, "maxval must be 255, got " + std::to_string(maxval));
    if (pos >= bytes.size() || !is_ppm_space(bytes[pos]))
        parse_fail(pos, "expected single whitespace before raster");
    ++pos;

    Image img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    const size_t need = static_cast<size_t>(3) * w * h;
    if (bytes.size() - pos < need)
        throw std::runtime_error(
            "ppm raster truncated: expected " + std::to_string(need) +
            " bytes, got " + std::to_string(bytes.size() - pos));
    img.pixels.assign(bytes.begin() + static_cast<long>(pos),
                      bytes.begin() + static_cast<long>(pos + need));
    return img;
}

std::vector<uint8_t> encode_ppm(const Image& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<size_t>(3) * img.width * img.height)
        throw std::invalid_argument("image buffer does not match dimensions");
    char header[64];
    const int n = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n",
                                img.width, img.height);
    std::vector<uint8_t> out(header, header + n);
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    try {
        return decode_ppm(bytes);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

void save_image(const Image& img, const std::string& path) {
    const std::vector<uint8_t> bytes = encode_ppm(img);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open image file for write: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<long>(bytes.size()));
    if (!out) throw std::runtime_error("short write to image file: " + path);
}

std::vector<double> image_to_planar(const Image& img) {
    const size_t hw = static_cast<size_t>(img.width) * img.height;
    std::vector<double> out(3 * hw);
    for (size_t i = 0; i < hw; ++i)
        for (size_t c = 0; c < 3; ++c)
            out[c * hw + i] = img.pixels[3 * i + c] / 255.0;
    return out;
}

Image planar_to_image(const std::vector<double>& data, int width, int height) {
    const size_t hw = static_cast<size_t>(width) * height;
    if (data.size() != 3 * hw)
        throw std::invalid_argument("planar buffer does not match dimensions");
    Image img;
    img.width = width;
    img.height = height;
    img.pixels.resize(3 * hw);
    for (size_t i = 0; i < hw; ++i)
        for (size_t c = 0; c < 3; ++c) {
            const double v = std::clamp(data[c * hw + i], 0.0, 1.0);
            img.pixels[3 * i + c] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

}  // namespace stealth
