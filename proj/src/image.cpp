#include "lab/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace lab {

uint8_t quantize_unit(float v) {
    float scaled = (v + 1.0f) * 0.5f * 255.0f;
    if (scaled <= 0.0f) return 0;
    if (scaled >= 255.0f) return 255;
    // nearbyint under the default rounding mode is round-half-to-even
    return static_cast<uint8_t>(std::nearbyint(scaled));
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_u32(out, static_cast<uint32_t>(data.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, crc);
}

}  // namespace

std::vector<uint8_t> encode_png(const Tensor<float>& img) {
    if (img.ndim() != 3 || img.dim(0) != 3) throw IoError("encode_png: image must be (3,H,W)");
    const int H = img.dim(1), W = img.dim(2);
    // raw scanlines, filter byte 0 per row
    std::vector<uint8_t> raw(static_cast<size_t>(H) * (1 + static_cast<size_t>(W) * 3));
    const float* r = img.ptr();
    const float* g = r + static_cast<int64_t>(H) * W;
    const float* b = g + static_cast<int64_t>(H) * W;
    size_t pos = 0;
    for (int y = 0; y < H; ++y) {
        raw[pos++] = 0;
        for (int x = 0; x < W; ++x) {
            raw[pos++] = quantize_unit(r[y * W + x]);
            raw[pos++] = quantize_unit(g[y * W + x]);
            raw[pos++] = quantize_unit(b[y * W + x]);
        }
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("encode_png: zlib compress failed");
    comp.resize(comp_len);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(W));
    put_u32(ihdr, static_cast<uint32_t>(H));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // truecolor
    ihdr.push_back(0);   // deflate
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});
    return out;
}

void write_png(const Tensor<float>& img, const std::string& path) {
    auto bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write on " + path);
}

Tensor<float> read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IoError("not a PNG: " + path);
    size_t pos = 8;
    int W = 0, H = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("truncated PNG: " + path);
        std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
        const uint8_t* data = bytes.data() + pos + 8;
        if (type == "IHDR") {
            W = static_cast<int>(get_u32(data));
            H = static_cast<int>(get_u32(data + 4));
            if (data[8] != 8 || data[9] != 2 || data[12] != 0)
                throw IoError("read_png: only 8-bit RGB non-interlaced supported: " + path);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (W <= 0 || H <= 0 || idat.empty()) throw IoError("malformed PNG: " + path);
    const size_t stride = 1 + static_cast<size_t>(W) * 3;
    std::vector<uint8_t> raw(static_cast<size_t>(H) * stride);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("read_png: zlib inflate failed: " + path);

    // defilter (types 0-4)
    std::vector<uint8_t> pix(static_cast<size_t>(H) * W * 3);
    const int bpp = 3;
    for (int y = 0; y < H; ++y) {
        const uint8_t ft = raw[static_cast<size_t>(y) * stride];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * stride + 1;
        uint8_t* dst = pix.data() + static_cast<size_t>(y) * W * 3;
        const uint8_t* up = y > 0 ? pix.data() + static_cast<size_t>(y - 1) * W * 3 : nullptr;
        for (int i = 0; i < W * 3; ++i) {
            const int a = i >= bpp ? dst[i - bpp] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= bpp) ? up[i - bpp] : 0;
            int v = src[i];
            switch (ft) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw IoError("read_png: unsupported filter type");
            }
            dst[i] = static_cast<uint8_t>(v & 0xff);
        }
    }
    Tensor<float> img({3, H, W});
    float* r = img.ptr();
    float* g = r + static_cast<int64_t>(H) * W;
    float* b = g + static_cast<int64_t>(H) * W;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const uint8_t* p = pix.data() + (static_cast<size_t>(y) * W + x) * 3;
            r[y * W + x] = static_cast<float>(p[0]) / 255.0f * 2.0f - 1.0f;
            g[y * W + x] = static_cast<float>(p[1]) / 255.0f * 2.0f - 1.0f;
            b[y * W + x] = static_cast<float>(p[2]) / 255.0f * 2.0f - 1.0f;
        }
    return img;
}

Tensor<float> image_grid(const std::vector<Tensor<float>>& images, int cols) {
    if (images.empty()) throw IoError("image_grid: no images");
    const int H = images[0].dim(1), W = images[0].dim(2);
    const int n = static_cast<int>(images.size());
    const int rows = (n + cols - 1) / cols;
    const int sep = 2;
    const int GH = rows * H + (rows - 1) * sep;
    const int GW = cols * W + (cols - 1) * sep;
    Tensor<float> grid = Tensor<float>::full({3, GH, GW}, 1.0f);
    for (int i = 0; i < n; ++i) {
        const auto& img = images[static_cast<size_t>(i)];
        if (img.dim(1) != H || img.dim(2) != W) throw IoError("image_grid: ragged image sizes");
        const int ry = (i / cols) * (H + sep);
        const int cx = (i % cols) * (W + sep);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    grid.data[static_cast<size_t>((c * GH + ry + y) * GW + cx + x)] =
                        img.data[static_cast<size_t>((c * H + y) * W + x)];
    }
    return grid;
}

}  // namespace lab
