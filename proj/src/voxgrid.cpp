#include "voxdiff/voxgrid.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace voxdiff {

VoxelGrid::VoxelGrid(int resolution, Bounds bounds_in) : resolution(resolution), bounds(bounds_in) {
    if (resolution < 1) throw std::invalid_argument("VoxelGrid: resolution must be >= 1");
    data.assign(value_count(), 0.0);
}

VoxelGrid VoxelGrid::filled(int resolution, double raw_density,
                            const std::array<double, 3>& raw_color, Bounds bounds) {
    VoxelGrid g(resolution, bounds);
    for (std::size_t v = 0; v < g.voxel_count(); ++v) {
        g.data[v * 4 + 0] = raw_density;
        g.data[v * 4 + 1] = raw_color[0];
        g.data[v * 4 + 2] = raw_color[1];
        g.data[v * 4 + 3] = raw_color[2];
    }
    return g;
}

std::array<double, 3> VoxelGrid::cell_size() const {
    return {bounds.extent(0) / resolution, bounds.extent(1) / resolution,
            bounds.extent(2) / resolution};
}

std::array<double, 3> VoxelGrid::voxel_center(int x, int y, int z) const {
    const auto h = cell_size();
    return {bounds.min[0] + (x + 0.5) * h[0], bounds.min[1] + (y + 0.5) * h[1],
            bounds.min[2] + (z + 0.5) * h[2]};
}

void VoxelGrid::validate() const {
    if (resolution < 1) throw std::invalid_argument("VoxelGrid: resolution must be >= 1");
    if (data.size() != value_count())
        throw std::invalid_argument("VoxelGrid: data length does not match R^3*4");
    for (int a = 0; a < 3; ++a) {
        if (!(bounds.min[a] < bounds.max[a]))
            throw std::invalid_argument("VoxelGrid: bounds min must be < max on every axis");
    }
    for (double v : data) {
        if (!std::isfinite(v)) throw std::invalid_argument("VoxelGrid: non-finite value");
    }
}

ActivationParams::ActivationParams(double alpha, double beta, double d_min)
    : alpha(alpha), beta(beta), d_min(d_min) {
    if (!(std::exp(alpha * d_min + beta) < 1e-3))
        throw std::invalid_argument(
            "ActivationParams: exp(alpha*d_min + beta) must be < 1e-3");
}

InterpStencil interp_stencil(const VoxelGrid& grid, const std::array<double, 3>& x) {
    for (double v : x) {
        if (!std::isfinite(v)) throw std::invalid_argument("trilinear_interp: non-finite point");
    }
    const int r = grid.resolution;
    const auto h = grid.cell_size();

    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        // Continuous voxel coordinate: u = i means the center of voxel i.
        const double u = (x[a] - grid.bounds.min[a]) / h[a] - 0.5;
        if (r == 1) {
            i0[a] = 0;
            f[a] = 0.0;
        } else if (u <= 0.0) {
            i0[a] = 0;
            f[a] = 0.0;
        } else if (u >= r - 1) {
            i0[a] = r - 2;
            f[a] = 1.0;
        } else {
            i0[a] = static_cast<int>(u);
            f[a] = u - i0[a];
        }
    }

    InterpStencil st;
    const int step[3] = {r == 1 ? 0 : 1, r == 1 ? 0 : 1, r == 1 ? 0 : 1};
    int corner = 0;
    for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? f[0] : 1.0 - f[0];
        for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? f[1] : 1.0 - f[1];
            for (int dz = 0; dz < 2; ++dz) {
                const double wz = dz ? f[2] : 1.0 - f[2];
                const std::size_t vi = grid.voxel_index(i0[0] + dx * step[0], i0[1] + dy * step[1],
                                                        i0[2] + dz * step[2]);
                st.base[corner] = vi * 4;
                st.weight[corner] = wx * wy * wz;
                ++corner;
            }
        }
    }
    return st;
}

std::array<double, 4> trilinear_interp(const VoxelGrid& grid, const std::array<double, 3>& x) {
    const InterpStencil st = interp_stencil(grid, x);
    std::array<double, 4> out{0.0, 0.0, 0.0, 0.0};
    for (int k = 0; k < 8; ++k) {
        const double w = st.weight[k];
        const double* f = grid.data.data() + st.base[k];
        out[0] += w * f[0];
        out[1] += w * f[1];
        out[2] += w * f[2];
        out[3] += w * f[3];
    }
    return out;
}

double density_from_raw(double v0, const ActivationParams& act) {
    return std::exp(act.alpha * v0 + act.beta);
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

std::array<double, 3> color_from_raw(const std::array<double, 3>& v) {
    return {sigmoid(v[0]), sigmoid(v[1]), sigmoid(v[2])};
}

// --- I/O ----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'V', 'X', 'G', 'R'};
constexpr std::uint32_t kFormatVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class Reader {
public:
    Reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}

    bool take(void* dst, std::size_t k) {
        if (pos_ + k > n_) return false;
        std::memcpy(dst, p_ + pos_, k);
        pos_ += k;
        return true;
    }
    std::uint32_t u32(bool& ok) {
        unsigned char b[4];
        if (!take(b, 4)) {
            ok = false;
            return 0;
        }
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    double f64(bool& ok) {
        unsigned char b[8];
        if (!take(b, 8)) {
            ok = false;
            return 0;
        }
        std::uint64_t bits = 0;
        for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    const unsigned char* cursor() const { return p_ + pos_; }
    std::size_t remaining() const { return n_ - pos_; }
    void skip(std::size_t k) { pos_ += k; }

private:
    const unsigned char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

}  // namespace

void grid_write(const VoxelGrid& grid, const std::string& path) {
    grid.validate();
    std::string bytes;
    bytes.reserve(28 + 48 + grid.value_count() * 4 + 4);
    bytes.append(kMagic, 4);
    put_u32(bytes, kFormatVersion);
    put_u32(bytes, static_cast<std::uint32_t>(grid.resolution));
    put_u32(bytes, static_cast<std::uint32_t>(VoxelGrid::kChannels));
    for (int a = 0; a < 3; ++a) put_f64(bytes, grid.bounds.min[a]);
    for (int a = 0; a < 3; ++a) put_f64(bytes, grid.bounds.max[a]);

    const std::size_t payload_start = bytes.size();
    for (double v : grid.data) put_f32(bytes, static_cast<float>(v));
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + payload_start),
              static_cast<uInt>(bytes.size() - payload_start)));
    put_u32(bytes, crc);

    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw GridIoError(GridIoError::Code::open_failed, "grid_write: cannot open " + path);
    if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
        throw GridIoError(GridIoError::Code::write_failed, "grid_write: short write to " + path);
}

VoxelGrid grid_read(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw GridIoError(GridIoError::Code::open_failed, "grid_read: cannot open " + path);
    std::string bytes;
    char buf[1 << 16];
    std::size_t k;
    while ((k = std::fread(buf, 1, sizeof(buf), f.get())) > 0) bytes.append(buf, k);

    Reader rd(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
    char magic[4];
    if (!rd.take(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw GridIoError(GridIoError::Code::bad_magic, "grid_read: bad magic in " + path);
    bool ok = true;
    const std::uint32_t version = rd.u32(ok);
    if (!ok) throw GridIoError(GridIoError::Code::truncated, "grid_read: truncated header");
    if (version != kFormatVersion)
        throw GridIoError(GridIoError::Code::bad_version, "grid_read: unsupported format version");
    const std::uint32_t r = rd.u32(ok);
    const std::uint32_t channels = rd.u32(ok);
    if (!ok) throw GridIoError(GridIoError::Code::truncated, "grid_read: truncated header");
    if (r < 1 || r > 4096 || channels != VoxelGrid::kChannels)
        throw GridIoError(GridIoError::Code::bad_dims, "grid_read: bad dimensions");

    Bounds b;
    for (int a = 0; a < 3; ++a) b.min[a] = rd.f64(ok);
    for (int a = 0; a < 3; ++a) b.max[a] = rd.f64(ok);
    if (!ok) throw GridIoError(GridIoError::Code::truncated, "grid_read: truncated header");
    for (int a = 0; a < 3; ++a) {
        if (!(b.min[a] < b.max[a]))
            throw GridIoError(GridIoError::Code::bad_dims, "grid_read: inverted bounds");
    }

    VoxelGrid grid(static_cast<int>(r), b);
    const std::size_t payload_bytes = grid.value_count() * 4;
    if (rd.remaining() < payload_bytes + 4)
        throw GridIoError(GridIoError::Code::truncated, "grid_read: truncated payload");
    const unsigned char* payload = rd.cursor();
    const std::uint32_t crc_expect = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(payload_bytes)));
    for (std::size_t i = 0; i < grid.value_count(); ++i) {
        std::uint32_t bits = static_cast<std::uint32_t>(payload[4 * i]) |
                             (static_cast<std::uint32_t>(payload[4 * i + 1]) << 8) |
                             (static_cast<std::uint32_t>(payload[4 * i + 2]) << 16) |
                             (static_cast<std::uint32_t>(payload[4 * i + 3]) << 24);
        float v;
        std::memcpy(&v, &bits, 4);
        grid.data[i] = static_cast<double>(v);
    }
    rd.skip(payload_bytes);
    const std::uint32_t crc_stored = rd.u32(ok);
    if (!ok) throw GridIoError(GridIoError::Code::truncated, "grid_read: missing checksum");
    if (crc_stored != crc_expect)
        throw GridIoError(GridIoError::Code::bad_checksum, "grid_read: checksum mismatch");
    grid.validate();
    return grid;
}

void quantize_to_storage(VoxelGrid& grid) {
    for (double& v : grid.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace voxdiff
