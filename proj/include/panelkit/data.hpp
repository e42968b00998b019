#pragma once

// Dataset plumbing: sample container, PNG-backed loading/saving, the
// tab-separated manifest, and the deterministic synthetic domain-shifted
// dataset (a stand-in for translated comics: paired scenes rendered in a
// flat "real" style and in a hue-rotated, posterized, outlined style with
// identical supervision planes).

#include <filesystem>
#include <fstream>

#include "panelkit/dta.hpp"
#include "panelkit/png.hpp"

namespace panelkit {

inline constexpr int kIgnoreLabel = 255;

struct Sample {
    long h = 0, w = 0;
    TensorT<float> image;                  // [h,w,3] in [0,1]
    std::vector<int> seg_labels;           // h*w class ids, 255 = ignore
    std::vector<float> depth;              // h*w in [0,1]
    std::vector<std::uint8_t> depth_valid; // h*w
    DomainTag domain = DomainTag::Real;
};

struct ManifestEntry {
    std::string image, labels, depth;  // paths relative to the manifest
    std::string domain;                // "real" | "comics"
    std::string split;                 // "train" | "val" | ...
};

// ---------------------------------------------------------------------------
// PNG-backed IO. 8-bit RGB image scaled to [0,1], 8-bit grayscale labels as
// raw class indices, 16-bit grayscale depth scaled by 1/65535.

inline void save_sample(const Sample& s, const std::string& image_path, const std::string& labels_path,
                        const std::string& depth_path) {
    std::vector<std::uint16_t> img(static_cast<std::size_t>(s.h * s.w * 3));
    for (long i = 0; i < s.h * s.w * 3; ++i) {
        const float v = std::min(std::max(s.image.data()[i], 0.0f), 1.0f);
        img[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(std::lround(v * 255.0));
    }
    write_png(image_path, s.h, s.w, 3, 8, img);

    std::vector<std::uint16_t> lab(static_cast<std::size_t>(s.h * s.w));
    for (long i = 0; i < s.h * s.w; ++i) lab[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(s.seg_labels[static_cast<std::size_t>(i)]);
    write_png(labels_path, s.h, s.w, 1, 8, lab);

    std::vector<std::uint16_t> dep(static_cast<std::size_t>(s.h * s.w));
    for (long i = 0; i < s.h * s.w; ++i) {
        const float v = std::min(std::max(s.depth[static_cast<std::size_t>(i)], 0.0f), 1.0f);
        dep[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
    write_png(depth_path, s.h, s.w, 1, 16, dep);
}

inline Sample load_sample(const ManifestEntry& e, const std::filesystem::path& base) {
    const auto img_path = (base / e.image).string();
    const auto lab_path = (base / e.labels).string();
    const auto dep_path = (base / e.depth).string();

    PngImage img = read_png(img_path);
    if (img.channels != 3 || img.bit_depth != 8)
        throw data_error("sample image must be 8-bit RGB: " + img_path);
    PngImage lab = read_png(lab_path);
    if (lab.channels != 1 || lab.bit_depth != 8)
        throw data_error("sample labels must be 8-bit grayscale: " + lab_path);
    PngImage dep = read_png(dep_path);
    if (dep.channels != 1 || dep.bit_depth != 16)
        throw data_error("sample depth must be 16-bit grayscale: " + dep_path);
    if (lab.h != img.h || lab.w != img.w || dep.h != img.h || dep.w != img.w)
        throw data_error("sample planes disagree on extents: " + img_path);

    Sample s;
    s.h = img.h;
    s.w = img.w;
    s.image = TensorT<float>::zeros({s.h, s.w, 3});
    for (long i = 0; i < s.h * s.w * 3; ++i)
        s.image.data()[i] = static_cast<float>(img.samples[static_cast<std::size_t>(i)]) / 255.0f;
    s.seg_labels.resize(static_cast<std::size_t>(s.h * s.w));
    for (long i = 0; i < s.h * s.w; ++i) s.seg_labels[static_cast<std::size_t>(i)] = lab.samples[static_cast<std::size_t>(i)];
    s.depth.resize(static_cast<std::size_t>(s.h * s.w));
    s.depth_valid.assign(static_cast<std::size_t>(s.h * s.w), 1);
    for (long i = 0; i < s.h * s.w; ++i)
        s.depth[static_cast<std::size_t>(i)] = static_cast<float>(dep.samples[static_cast<std::size_t>(i)]) / 65535.0f;
    s.domain = e.domain == "comics" ? DomainTag::Comics : DomainTag::Real;
    return s;
}

// ---------------------------------------------------------------------------
// Manifest: one tab-separated line per sample (image, labels, depth, domain,
// split).

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw data_error("cannot write manifest: " + path);
    for (const auto& e : entries)
        os << e.image << '\t' << e.labels << '\t' << e.depth << '\t' << e.domain << '\t' << e.split << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("cannot open manifest: " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    long ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        if (line.empty()) continue;
        ManifestEntry e;
        std::string* fields[5] = {&e.image, &e.labels, &e.depth, &e.domain, &e.split};
        std::size_t start = 0;
        for (int f = 0; f < 5; ++f) {
            const std::size_t tab = line.find('\t', start);
            if (f < 4 && tab == std::string::npos)
                throw data_error("manifest " + path + " line " + std::to_string(ln) + ": expected 5 fields");
            *fields[f] = line.substr(start, tab == std::string::npos ? std::string::npos : tab - start);
            start = tab + 1;
        }
        if (e.domain != "real" && e.domain != "comics")
            throw data_error("manifest " + path + " line " + std::to_string(ln) + ": unknown domain '" +
                             e.domain + "'");
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes: 1-3 non-overlapping shapes (circle/rectangle/triangle =
// classes 1-3 over background 0) on a 64x64 canvas. Depth is a per-shape
// constant decreasing with occlusion order (front shapes are larger and
// nearer), background 1.0. The comics-shifted rendering keeps supervision
// identical.

namespace synth {

inline constexpr long kCanvas = 64;
inline constexpr long kClasses = 4;

struct Shape {
    int kind = 0;  // 0 circle, 1 rectangle, 2 triangle
    double cx = 0, cy = 0, r = 0;
    float color[3] = {0, 0, 0};
    float depth = 0;
};

struct Scene {
    float bg[3] = {0, 0, 0};
    std::vector<Shape> shapes;
};

inline bool inside(const Shape& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case 0: return dx * dx + dy * dy <= s.r * s.r;
        case 1: return std::abs(dx) <= s.r && std::abs(dy) <= 0.75 * s.r;
        default:  // up-pointing isoceles triangle
            return dy >= -s.r && dy <= s.r && std::abs(dx) <= (dy + s.r) * 0.5;
    }
}

inline Scene make_scene(std::uint64_t seed) {
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x51ULL);
    Scene sc;
    for (int c = 0; c < 3; ++c) sc.bg[c] = static_cast<float>(rng.uniform(0.55, 0.95));
    const long n = rng.uniform_int(1, 3);
    int guard = 0;
    while (static_cast<long>(sc.shapes.size()) < n && guard < 200) {
        ++guard;
        Shape s;
        s.kind = static_cast<int>(rng.uniform_int(0, 2));
        s.r = rng.uniform(7.0, 13.0);
        s.cx = rng.uniform(s.r + 2.0, kCanvas - s.r - 2.0);
        s.cy = rng.uniform(s.r + 2.0, kCanvas - s.r - 2.0);
        bool ok = true;
        for (const auto& o : sc.shapes) {
            const double d2 = (s.cx - o.cx) * (s.cx - o.cx) + (s.cy - o.cy) * (s.cy - o.cy);
            const double min_d = s.r + o.r + 2.0;
            if (d2 < min_d * min_d) ok = false;
        }
        if (!ok) continue;
        for (int c = 0; c < 3; ++c) s.color[c] = static_cast<float>(rng.uniform(0.0, 1.0));
        double contrast = 0.0;
        for (int c = 0; c < 3; ++c) contrast += std::abs(s.color[c] - sc.bg[c]);
        if (contrast < 0.5)
            for (int c = 0; c < 3; ++c) s.color[c] = static_cast<float>(1.0 - sc.bg[c]) * 0.8f;
        sc.shapes.push_back(s);
    }
    // occlusion order by size: the largest shape is frontmost and nearest
    std::sort(sc.shapes.begin(), sc.shapes.end(), [](const Shape& a, const Shape& b) { return a.r > b.r; });
    const long k = static_cast<long>(sc.shapes.size());
    for (long i = 0; i < k; ++i)
        sc.shapes[static_cast<std::size_t>(i)].depth =
            k == 1 ? 0.3f : static_cast<float>(0.3 + 0.4 * static_cast<double>(i) / static_cast<double>(k - 1));
    return sc;
}

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    const float d = mx - mn;
    s = mx == 0.0f ? 0.0f : d / mx;
    if (d == 0.0f) {
        h = 0.0f;
    } else if (mx == r) {
        h = std::fmod((g - b) / d, 6.0f) / 6.0f;
    } else if (mx == g) {
        h = ((b - r) / d + 2.0f) / 6.0f;
    } else {
        h = ((r - g) / d + 4.0f) / 6.0f;
    }
    if (h < 0.0f) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float hh = h * 6.0f;
    const int i = static_cast<int>(hh) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1.0f - s), q = v * (1.0f - s * f), t = v * (1.0f - s * (1.0f - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

inline void comics_shift(float& r, float& g, float& b) {
    float h, s, v;
    rgb_to_hsv(r, g, b, h, s, v);
    h = std::fmod(h + 1.0f / 3.0f, 1.0f);  // fixed hue rotation
    hsv_to_rgb(h, s, v, r, g, b);
    // posterize to 4 levels per channel
    r = std::round(r * 3.0f) / 3.0f;
    g = std::round(g * 3.0f) / 3.0f;
    b = std::round(b * 3.0f) / 3.0f;
}

inline Sample render(const Scene& sc, DomainTag style) {
    Sample out;
    out.h = out.w = kCanvas;
    out.image = TensorT<float>::zeros({kCanvas, kCanvas, 3});
    out.seg_labels.assign(static_cast<std::size_t>(kCanvas * kCanvas), 0);
    out.depth.assign(static_cast<std::size_t>(kCanvas * kCanvas), 1.0f);
    out.depth_valid.assign(static_cast<std::size_t>(kCanvas * kCanvas), 1);
    out.domain = style;

    const bool comics = style == DomainTag::Comics;
    for (long y = 0; y < kCanvas; ++y)
        for (long x = 0; x < kCanvas; ++x) {
            float col[3] = {sc.bg[0], sc.bg[1], sc.bg[2]};
            int owner = -1;
            // front-to-back: the first (largest) shape wins the pixel
            for (std::size_t si = 0; si < sc.shapes.size(); ++si) {
                const Shape& s = sc.shapes[si];
                if (inside(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
                    owner = static_cast<int>(si);
                    break;
                }
            }
            if (owner >= 0) {
                const Shape& s = sc.shapes[static_cast<std::size_t>(owner)];
                col[0] = s.color[0];
                col[1] = s.color[1];
                col[2] = s.color[2];
                out.seg_labels[static_cast<std::size_t>(y * kCanvas + x)] = s.kind + 1;
                out.depth[static_cast<std::size_t>(y * kCanvas + x)] = s.depth;
                if (comics) {
                    // black outline on shape boundary pixels
                    bool edge = false;
                    const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                    for (int d = 0; d < 4 && !edge; ++d) {
                        const double nx = px + (d == 0 ? 1 : d == 1 ? -1 : 0);
                        const double ny = py + (d == 2 ? 1 : d == 3 ? -1 : 0);
                        if (!inside(s, nx, ny)) edge = true;
                    }
                    if (edge) {
                        col[0] = col[1] = col[2] = 0.0f;
                    } else {
                        comics_shift(col[0], col[1], col[2]);
                    }
                }
            } else if (comics) {
                comics_shift(col[0], col[1], col[2]);
            }
            float* px = out.image.data() + (y * kCanvas + x) * 3;
            px[0] = col[0];
            px[1] = col[1];
            px[2] = col[2];
        }
    return out;
}

}  // namespace synth

// Deterministic list of samples in one style; scene i of a given seed is
// shared between styles, so paired renders carry identical supervision.
inline std::vector<Sample> synth_dataset(std::uint64_t seed, long count, DomainTag style) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (long i = 0; i < count; ++i)
        out.push_back(synth::render(synth::make_scene(seed + static_cast<std::uint64_t>(i)), style));
    return out;
}

}  // namespace panelkit
