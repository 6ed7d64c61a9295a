#pragma once

#include <array>
#include <string>
#include <vector>

namespace voxdiff {

// RGB image, row-major, values nominally in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> rgb;  // (py * width + px) * 3 + c

    Image() = default;
    Image(int width, int height) : width(width), height(height) {
        rgb.assign(static_cast<std::size_t>(width) * height * 3, 0.0);
    }

    double& at(int px, int py, int c) {
        return rgb[(static_cast<std::size_t>(py) * width + px) * 3 + c];
    }
    double at(int px, int py, int c) const {
        return rgb[(static_cast<std::size_t>(py) * width + px) * 3 + c];
    }
};

// Binary PPM (P6, 8-bit). Values clamp to [0,1] and round to the nearest of
// 255 levels on write.
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

// Little-endian float PFM ("PF", scale -1). Lossless up to f32.
void write_pfm(const Image& img, const std::string& path);
Image read_pfm(const std::string& path);

}  // namespace voxdiff
