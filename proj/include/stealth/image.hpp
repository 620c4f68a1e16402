#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stealth {

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // size = 3 * width * height

    bool operator==(const Image&) const = default;

    static Image blank(int width, int height, uint8_t r = 0, uint8_t g = 0,
                       uint8_t b = 0);
};

// Binary PPM (P6), maxval 255 only.  Round trip is bit-exact.
// Malformed headers raise errors that carry the offending byte offset.
Image load_image(const std::string& path);
void save_image(const Image& img, const std::string& path);

Image decode_ppm(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> encode_ppm(const Image& img);

// Planar [3, H, W] doubles in [0,1] <-> interleaved 8-bit, for the model side.
std::vector<double> image_to_planar(const Image& img);
Image planar_to_image(const std::vector<double>& data, int width, int height);

}  // namespace stealth
