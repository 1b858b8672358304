#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "densevit/geometry.hpp"
#include "densevit/random.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

// One image with its ground-truth rotated boxes.
struct Scene {
    Tensor image; // (1,H,W), values in [0,1]
    std::vector<RotatedBox> boxes;
    std::string id;
};

struct SynthConfig {
    std::size_t image_size = 64;
    std::array<std::size_t, 2> num_clusters = {1, 3};       // inclusive range
    std::array<std::size_t, 2> targets_per_cluster = {2, 5}; // inclusive range
    std::array<double, 2> extent = {9.0, 16.0};             // long-side extent in pixels
    std::array<double, 2> aspect = {0.55, 1.0};             // short side as a fraction of long
    double min_spacing = 8.0;                               // min center distance (one grid cell)
    std::size_t speckle_looks = 4;                          // gamma shape of the speckle
    std::size_t clutter_blobs = 3;
    std::uint64_t seed = 42;
};

namespace detail {

inline bool inside_rect(const RotatedBox& b, double x, double y) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double dx = x - b.cx, dy = y - b.cy;
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    return std::abs(lx) <= 0.5 * b.w && std::abs(ly) <= 0.5 * b.h;
}

// Anti-aliased fill with a mild brightness ramp along the box's w-axis.
inline void render_rect(std::vector<double>& img, std::size_t hw, const RotatedBox& b,
                        double intensity) {
    const double reach = 0.5 * std::hypot(b.w, b.h) + 1.0;
    const long y0 = std::max(0L, static_cast<long>(std::floor(b.cy - reach)));
    const long y1 = std::min(static_cast<long>(hw) - 1, static_cast<long>(std::ceil(b.cy + reach)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(b.cx - reach)));
    const long x1 = std::min(static_cast<long>(hw) - 1, static_cast<long>(std::ceil(b.cx + reach)));
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
            int hits = 0;
            for (int sy = 0; sy < 4; ++sy)
                for (int sx = 0; sx < 4; ++sx)
                    hits += inside_rect(b, x - 0.5 + (sx + 0.5) / 4.0, y - 0.5 + (sy + 0.5) / 4.0);
            if (hits == 0) continue;
            const double alpha = hits / 16.0;
            const double lx = c * (x - b.cx) + s * (y - b.cy);
            const double ramp = 0.7 + 0.3 * std::clamp(lx / b.w + 0.5, 0.0, 1.0);
            double& px = img[static_cast<std::size_t>(y) * hw + static_cast<std::size_t>(x)];
            px = (1.0 - alpha) * px + alpha * intensity * ramp;
        }
}

} // namespace detail

// Deterministic synthetic dense scene: gamma-speckled dark background,
// clustered bright rotated rectangles, low-intensity clutter blobs.
inline Scene synth_scene(const SynthConfig& cfg, std::size_t index) {
    detail::check(cfg.image_size >= 16 && cfg.image_size % 16 == 0,
                  "synth_scene: image_size must be >= 16 and divisible by 16");
    detail::check(cfg.extent[0] >= 2.0, "synth_scene: extents must be >= 2 pixels");
    detail::check(cfg.speckle_looks >= 1, "synth_scene: speckle_looks must be positive");
    Rng rng(cfg.seed, index);
    const std::size_t n = cfg.image_size;

    const double bg = rng.uniform(0.06, 0.12);
    std::vector<double> img(n * n);
    const double looks = static_cast<double>(cfg.speckle_looks);
    for (double& px : img) px = bg * (rng.gamma(looks) / looks);

    Scene scene;
    const std::size_t nc =
        static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.num_clusters[0]),
                                                 static_cast<std::int64_t>(cfg.num_clusters[1])));
    const double margin = std::min(6.0, static_cast<double>(n) / 8.0);
    for (std::size_t ci = 0; ci < nc; ++ci) {
        const double ccx = rng.uniform(2.0 * margin, n - 2.0 * margin);
        const double ccy = rng.uniform(2.0 * margin, n - 2.0 * margin);
        const double spread = rng.uniform(std::min(7.0, n / 8.0), std::min(16.0, n / 4.0));
        const std::size_t nt = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(cfg.targets_per_cluster[0]),
                            static_cast<std::int64_t>(cfg.targets_per_cluster[1])));
        for (std::size_t ti = 0; ti < nt; ++ti) {
            for (int attempt = 0; attempt < 40; ++attempt) {
                const double cx = ccx + rng.normal(0.0, spread);
                const double cy = ccy + rng.normal(0.0, spread);
                if (cx < margin || cy < margin || cx > n - margin || cy > n - margin) continue;
                bool ok = true;
                for (const RotatedBox& other : scene.boxes)
                    if (std::hypot(cx - other.cx, cy - other.cy) < cfg.min_spacing) {
                        ok = false;
                        break;
                    }
                if (!ok) continue;
                const double w = rng.uniform(cfg.extent[0], cfg.extent[1]);
                const double h = std::max(2.0, w * rng.uniform(cfg.aspect[0], cfg.aspect[1]));
                const double theta = rng.uniform(-M_PI_2, M_PI_2);
                scene.boxes.push_back(make_box(cx, cy, w, h, theta, 0));
                detail::render_rect(img, n, scene.boxes.back(), bg * rng.uniform(3.0, 6.0));
                break;
            }
        }
    }

    for (std::size_t bi = 0; bi < cfg.clutter_blobs; ++bi) {
        const double bx = rng.uniform(2.0, n - 2.0), by = rng.uniform(2.0, n - 2.0);
        const double r = rng.uniform(1.5, 4.0);
        const double amp = bg * rng.uniform(1.2, 2.2);
        const long reach = static_cast<long>(std::ceil(3.0 * r));
        for (long y = std::max(0L, (long)std::floor(by) - reach);
             y <= std::min((long)n - 1, (long)std::ceil(by) + reach); ++y)
            for (long x = std::max(0L, (long)std::floor(bx) - reach);
                 x <= std::min((long)n - 1, (long)std::ceil(bx) + reach); ++x) {
                const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
                img[y * n + x] += amp * std::exp(-d2 / (2.0 * r * r));
            }
    }

    for (double& px : img) px = std::clamp(px, 0.0, 1.0);
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "synth-%06zu", index);
    scene.id = idbuf;
    scene.image = Tensor({1, n, n}, std::move(img));
    return scene;
}

// Horizontal mirror: x -> (W-1) - x at integer pixel centers; angles negate.
inline Scene hflip(const Scene& s) {
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    std::vector<double> img(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) img[y * w + x] = s.image.values()[y * w + (w - 1 - x)];
    Scene out;
    out.id = s.id;
    out.image = Tensor({1, h, w}, std::move(img));
    for (const RotatedBox& b : s.boxes)
        out.boxes.push_back(make_box((w - 1) - b.cx, b.cy, b.w, b.h, -b.theta, b.class_id, b.score));
    return out;
}

inline Scene vflip(const Scene& s) {
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    std::vector<double> img(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) img[y * w + x] = s.image.values()[(h - 1 - y) * w + x];
    Scene out;
    out.id = s.id;
    out.image = Tensor({1, h, w}, std::move(img));
    for (const RotatedBox& b : s.boxes)
        out.boxes.push_back(make_box(b.cx, (h - 1) - b.cy, b.w, b.h, -b.theta, b.class_id, b.score));
    return out;
}

// --- PGM (P5, maxval 255) ---------------------------------------------------

inline void write_pgm(const std::string& path, const Tensor& image) {
    detail::check(image.rank() == 3 && image.dim(0) == 1, "write_pgm: image must be (1,H,W)");
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::ofstream os(path, std::ios::binary);
    detail::check(os.good(), "cannot open '" + path + "' for writing");
    os << "P5\n" << w << " " << h << "\n255\n";
    for (double v : image.values()) {
        const double scaled = std::clamp(v, 0.0, 1.0) * 255.0;
        os.put(static_cast<char>(static_cast<unsigned char>(std::floor(scaled + 0.5))));
    }
    detail::check(os.good(), "write failed for '" + path + "'");
}

inline Tensor read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    detail::check(is.good(), "cannot open '" + path + "'");
    std::string magic;
    is >> magic;
    detail::check(magic == "P5", "'" + path + "' is not a P5 PGM (magic '" + magic + "')");
    auto next_token = [&is, &path]() {
        std::string tok;
        for (;;) {
            if (!(is >> tok)) detail::check(false, "truncated PGM header in '" + path + "'");
            if (tok[0] == '#') {
                std::string rest;
                std::getline(is, rest);
                continue;
            }
            return tok;
        }
    };
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const std::size_t maxval = std::stoul(next_token());
    detail::check(maxval == 255, "PGM maxval must be 255 in '" + path + "'");
    is.get(); // single whitespace after the header
    std::vector<unsigned char> raw(h * w);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    detail::check(is.gcount() == static_cast<std::streamsize>(raw.size()),
                  "truncated PGM payload in '" + path + "'");
    std::vector<double> vals(h * w);
    for (std::size_t i = 0; i < raw.size(); ++i) vals[i] = raw[i] / 255.0;
    return Tensor({1, h, w}, std::move(vals));
}

// --- annotations -------------------------------------------------------------

// One target per line: "image_id cx cy w h theta_radians class_name".
// '#' starts a comment, blank lines are skipped, angles are normalized.

struct ClassTable {
    std::vector<std::string> names = {"target", "ship", "vehicle"};

    int id_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        return -1;
    }
    const std::string& name_of(int id) const { return names.at(static_cast<std::size_t>(id)); }
};

inline std::vector<std::pair<std::string, RotatedBox>> parse_annotations(
    const std::string& path, const ClassTable& classes = {}) {
    std::ifstream is(path);
    detail::check(is.good(), "cannot open annotations '" + path + "'");
    std::vector<std::pair<std::string, RotatedBox>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string image_id;
        if (!(ls >> image_id)) continue; // blank or comment-only line
        double cx, cy, w, h, theta;
        std::string cls;
        if (!(ls >> cx >> cy >> w >> h >> theta >> cls))
            detail::check(false, "malformed annotation at " + path + ":" +
                                     std::to_string(lineno));
        std::string extra;
        if (ls >> extra)
            detail::check(false, "trailing tokens at " + path + ":" + std::to_string(lineno));
        const int cid = classes.id_of(cls);
        detail::check(cid >= 0, "unknown class name '" + cls + "' at " + path + ":" +
                                    std::to_string(lineno));
        detail::check(w > 0.0 && h > 0.0,
                      "non-positive extents at " + path + ":" + std::to_string(lineno));
        out.emplace_back(image_id, make_box(cx, cy, w, h, theta, cid));
    }
    return out;
}

inline void write_annotations(const std::string& path, const std::string& image_id,
                              const std::vector<RotatedBox>& boxes,
                              const ClassTable& classes = {}) {
    std::ofstream os(path);
    detail::check(os.good(), "cannot open '" + path + "' for writing");
    char buf[256];
    for (const RotatedBox& b : boxes) {
        std::snprintf(buf, sizeof(buf), "%s %.9f %.9f %.9f %.9f %.9f %s\n", image_id.c_str(),
                      b.cx, b.cy, b.w, b.h, b.theta, classes.name_of(b.class_id).c_str());
        os << buf;
    }
    detail::check(os.good(), "write failed for '" + path + "'");
}

// --- dataset manifest ---------------------------------------------------------

struct DatasetManifest {
    struct Entry {
        std::string id;
        std::string image_path;
        std::string annotation_path;
    };
    std::vector<Entry> images;
    std::vector<std::string> train; // image ids; parity split when absent
    std::vector<std::string> val;
};

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
    nlohmann::json j;
    j["images"] = nlohmann::json::array();
    for (const auto& e : m.images)
        j["images"].push_back({{"id", e.id},
                               {"image_path", e.image_path},
                               {"annotation_path", e.annotation_path}});
    j["split"] = {{"train", m.train}, {"val", m.val}};
    std::ofstream os(path);
    detail::check(os.good(), "cannot open manifest '" + path + "' for writing");
    os << j.dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    detail::check(is.good(), "cannot open manifest '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(is);
    DatasetManifest m;
    for (const auto& e : j.at("images"))
        m.images.push_back({e.at("id").get<std::string>(), e.at("image_path").get<std::string>(),
                            e.at("annotation_path").get<std::string>()});
    if (j.contains("split")) {
        for (const auto& v : j["split"].value("train", nlohmann::json::array()))
            m.train.push_back(v.get<std::string>());
        for (const auto& v : j["split"].value("val", nlohmann::json::array()))
            m.val.push_back(v.get<std::string>());
    } else {
        for (std::size_t i = 0; i < m.images.size(); ++i)
            (i % 2 == 0 ? m.train : m.val).push_back(m.images[i].id);
    }
    return m;
}

// Loads a scene from disk; annotations may live in a shared or per-image file.
inline Scene load_scene(const DatasetManifest::Entry& entry, const ClassTable& classes = {}) {
    Scene s;
    s.id = entry.id;
    s.image = read_pgm(entry.image_path);
    for (auto& [img_id, box] : parse_annotations(entry.annotation_path, classes))
        if (img_id == entry.id) s.boxes.push_back(box);
    return s;
}

} // namespace densevit
