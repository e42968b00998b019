#pragma once

// Minimal PNG codec over zlib, covering the formats this project reads and
// writes: 8-bit grayscale/RGB and 16-bit grayscale, non-interlaced. The
// decoder additionally accepts 8/16-bit gray+alpha and RGBA and all five
// scanline filters; palette and interlaced files are rejected with a clear
// error naming the file.

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "panelkit/tensor.hpp"

namespace panelkit {

struct PngImage {
    long h = 0, w = 0;
    long channels = 0;   // 1 or 3 after decoding (alpha is dropped)
    long bit_depth = 0;  // 8 or 16
    std::vector<std::uint16_t> samples;  // row-major, channel-interleaved

    std::uint16_t at(long r, long c, long ch) const {
        return samples[static_cast<std::size_t>((r * w + c) * channels + ch)];
    }
};

namespace pngdetail {

inline void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

inline void write_chunk(std::ofstream& os, const char type[4], const std::vector<std::uint8_t>& data) {
    std::vector<std::uint8_t> head;
    put_u32be(head, static_cast<std::uint32_t>(data.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    os.write(type, 4);
    if (!data.empty()) os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
    std::vector<std::uint8_t> tail;
    put_u32be(tail, static_cast<std::uint32_t>(crc));
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

inline std::vector<std::uint8_t> deflate_all(const std::vector<std::uint8_t>& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> out(bound);
    if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw data_error("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<std::uint8_t> inflate_all(const std::vector<std::uint8_t>& z, std::size_t expect,
                                             const std::string& path) {
    std::vector<std::uint8_t> out(expect);
    uLongf got = static_cast<uLongf>(expect);
    const int rc = uncompress(out.data(), &got, z.data(), static_cast<uLong>(z.size()));
    if (rc != Z_OK || got != expect) throw data_error("png: inflate failed for " + path);
    return out;
}

inline std::uint32_t read_u32be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace pngdetail

// Writes 8-bit (bit_depth 8, channels 1 or 3) or 16-bit grayscale
// (bit_depth 16, channels 1) from the sample buffer.
inline void write_png(const std::string& path, long h, long w, long channels, long bit_depth,
                      const std::vector<std::uint16_t>& samples) {
    if (!((bit_depth == 8 && (channels == 1 || channels == 3)) || (bit_depth == 16 && channels == 1)))
        throw data_error("png: unsupported write format for " + path);
    if (static_cast<long>(samples.size()) != h * w * channels)
        throw data_error("png: sample count mismatch writing " + path);

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw data_error("png: cannot open for writing: " + path);
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<std::uint8_t> ihdr;
    pngdetail::put_u32be(ihdr, static_cast<std::uint32_t>(w));
    pngdetail::put_u32be(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(static_cast<std::uint8_t>(bit_depth));
    ihdr.push_back(channels == 3 ? 2 : 0);  // color type
    ihdr.push_back(0);                      // compression
    ihdr.push_back(0);                      // filter method
    ihdr.push_back(0);                      // not interlaced
    pngdetail::write_chunk(os, "IHDR", ihdr);

    const long bpp = channels * bit_depth / 8;
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(h * (1 + w * bpp)));
    for (long r = 0; r < h; ++r) {
        raw.push_back(0);  // filter: none
        for (long c = 0; c < w; ++c)
            for (long ch = 0; ch < channels; ++ch) {
                const std::uint16_t v = samples[static_cast<std::size_t>((r * w + c) * channels + ch)];
                if (bit_depth == 16) {
                    raw.push_back(static_cast<std::uint8_t>(v >> 8));
                    raw.push_back(static_cast<std::uint8_t>(v & 0xff));
                } else {
                    raw.push_back(static_cast<std::uint8_t>(v & 0xff));
                }
            }
    }
    pngdetail::write_chunk(os, "IDAT", pngdetail::deflate_all(raw));
    pngdetail::write_chunk(os, "IEND", {});
    if (!os) throw data_error("png: write failed: " + path);
}

inline PngImage read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("png: cannot open " + path);
    std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
        throw data_error("png: bad signature in " + path);

    PngImage img;
    long color_type = -1;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= file.size()) {
        const std::uint32_t len = pngdetail::read_u32be(&file[pos]);
        if (pos + 12 + len > file.size()) throw data_error("png: truncated chunk in " + path);
        const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
        const std::uint8_t* data = &file[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.w = pngdetail::read_u32be(data);
            img.h = pngdetail::read_u32be(data + 4);
            img.bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw data_error("png: interlaced files unsupported: " + path);
            if (img.bit_depth != 8 && img.bit_depth != 16)
                throw data_error("png: unsupported bit depth in " + path);
            if (color_type != 0 && color_type != 2 && color_type != 4 && color_type != 6)
                throw data_error("png: unsupported color type in " + path);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (img.w <= 0 || img.h <= 0 || color_type < 0) throw data_error("png: missing IHDR in " + path);

    const long src_channels = color_type == 0 ? 1 : (color_type == 2 ? 3 : (color_type == 4 ? 2 : 4));
    const long bpp = src_channels * img.bit_depth / 8;
    const std::size_t stride = static_cast<std::size_t>(img.w * bpp);
    std::vector<std::uint8_t> raw = pngdetail::inflate_all(idat, static_cast<std::size_t>(img.h) * (stride + 1), path);

    // undo per-scanline filters in place
    std::vector<std::uint8_t> prev(stride, 0);
    std::vector<std::uint8_t> line(stride);
    std::vector<std::uint8_t> pixels;
    pixels.reserve(static_cast<std::size_t>(img.h) * stride);
    for (long r = 0; r < img.h; ++r) {
        const std::uint8_t* src = &raw[static_cast<std::size_t>(r) * (stride + 1)];
        const std::uint8_t filter = src[0];
        ++src;
        for (std::size_t i = 0; i < stride; ++i) {
            const int x = src[i];
            const int a = i >= static_cast<std::size_t>(bpp) ? line[i - static_cast<std::size_t>(bpp)] : 0;
            const int b = prev[i];
            const int c = i >= static_cast<std::size_t>(bpp) ? prev[i - static_cast<std::size_t>(bpp)] : 0;
            int v = 0;
            switch (filter) {
                case 0: v = x; break;
                case 1: v = x + a; break;
                case 2: v = x + b; break;
                case 3: v = x + (a + b) / 2; break;
                case 4: v = x + pngdetail::paeth(a, b, c); break;
                default: throw data_error("png: bad filter byte in " + path);
            }
            line[i] = static_cast<std::uint8_t>(v & 0xff);
        }
        pixels.insert(pixels.end(), line.begin(), line.end());
        prev = line;
    }

    // drop alpha, expand to u16 samples
    img.channels = src_channels == 2 ? 1 : (src_channels == 4 ? 3 : src_channels);
    img.samples.resize(static_cast<std::size_t>(img.h * img.w * img.channels));
    const long bytes_per_sample = img.bit_depth / 8;
    for (long r = 0; r < img.h; ++r)
        for (long c = 0; c < img.w; ++c)
            for (long ch = 0; ch < img.channels; ++ch) {
                const std::size_t o =
                    static_cast<std::size_t>((r * img.w + c) * src_channels + ch) * static_cast<std::size_t>(bytes_per_sample);
                const std::uint16_t v = img.bit_depth == 16
                                            ? static_cast<std::uint16_t>((pixels[o] << 8) | pixels[o + 1])
                                            : pixels[o];
                img.samples[static_cast<std::size_t>((r * img.w + c) * img.channels + ch)] = v;
            }
    return img;
}

}  // namespace panelkit
