#include "voxdiff/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace voxdiff {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_u8(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

// PNM-style token: skips whitespace and '#' comments.
std::string next_token(std::FILE* f) {
    std::string tok;
    int ch;
    while ((ch = std::fgetc(f)) != EOF) {
        if (ch == '#') {
            while ((ch = std::fgetc(f)) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

}  // namespace

void write_ppm(const Image& img, const std::string& path) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_ppm: empty image");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    std::fprintf(f.get(), "P6\n%d %d\n255\n", img.width, img.height);
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
    for (int py = 0; py < img.height; ++py) {
        for (int px = 0; px < img.width; ++px) {
            for (int c = 0; c < 3; ++c) row[px * 3 + c] = to_u8(img.at(px, py, c));
        }
        if (std::fwrite(row.data(), 1, row.size(), f.get()) != row.size())
            throw std::runtime_error("write_ppm: short write to " + path);
    }
}

Image read_ppm(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    if (next_token(f.get()) != "P6") throw std::runtime_error("read_ppm: not a P6 file: " + path);
    const int w = std::atoi(next_token(f.get()).c_str());
    const int h = std::atoi(next_token(f.get()).c_str());
    const int maxval = std::atoi(next_token(f.get()).c_str());
    if (w < 1 || h < 1 || maxval != 255)
        throw std::runtime_error("read_ppm: unsupported header in " + path);
    Image img(w, h);
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int py = 0; py < h; ++py) {
        if (std::fread(row.data(), 1, row.size(), f.get()) != row.size())
            throw std::runtime_error("read_ppm: truncated pixel data in " + path);
        for (int px = 0; px < w; ++px) {
            for (int c = 0; c < 3; ++c) img.at(px, py, c) = row[px * 3 + c] / 255.0;
        }
    }
    return img;
}

void write_pfm(const Image& img, const std::string& path) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_pfm: empty image");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("write_pfm: cannot open " + path);
    std::fprintf(f.get(), "PF\n%d %d\n-1.0\n", img.width, img.height);
    // PFM stores rows bottom-up.
    std::vector<float> row(static_cast<std::size_t>(img.width) * 3);
    for (int py = img.height - 1; py >= 0; --py) {
        for (int px = 0; px < img.width; ++px) {
            for (int c = 0; c < 3; ++c) row[px * 3 + c] = static_cast<float>(img.at(px, py, c));
        }
        if (std::fwrite(row.data(), 4, row.size(), f.get()) != row.size())
            throw std::runtime_error("write_pfm: short write to " + path);
    }
}

Image read_pfm(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("read_pfm: cannot open " + path);
    if (next_token(f.get()) != "PF") throw std::runtime_error("read_pfm: not a PF file: " + path);
    const int w = std::atoi(next_token(f.get()).c_str());
    const int h = std::atoi(next_token(f.get()).c_str());
    const double scale = std::atof(next_token(f.get()).c_str());
    if (w < 1 || h < 1 || scale >= 0.0)
        throw std::runtime_error("read_pfm: unsupported header in " + path);
    Image img(w, h);
    std::vector<float> row(static_cast<std::size_t>(w) * 3);
    for (int py = h - 1; py >= 0; --py) {
        if (std::fread(row.data(), 4, row.size(), f.get()) != row.size())
            throw std::runtime_error("read_pfm: truncated pixel data in " + path);
        for (int px = 0; px < w; ++px) {
            for (int c = 0; c < 3; ++c) img.at(px, py, c) = row[px * 3 + c];
        }
    }
    return img;
}

}  // namespace voxdiff
