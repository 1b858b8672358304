#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

namespace densevit {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Oriented rectangle: center (cx,cy), extents (w,h), rotation theta measured
// counter-clockwise from +x to the w-axis and normalized to [-pi/2, pi/2).
struct RotatedBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 1.0;
    double h = 1.0;
    double theta = 0.0;
    int class_id = 0;
    std::optional<double> score;

    double area() const { return w * h; }
};

// Wraps an angle into [-pi/2, pi/2); rectangles are pi-periodic so this is a
// geometric identity.
inline double normalize_angle(double theta) {
    double t = std::remainder(theta, M_PI); // (-pi/2, pi/2] up to rounding
    if (t >= M_PI_2) t -= M_PI;
    if (t < -M_PI_2) t += M_PI;
    return t;
}

inline RotatedBox make_box(double cx, double cy, double w, double h, double theta,
                           int class_id = 0, std::optional<double> score = std::nullopt) {
    if (!(w > 0.0) || !(h > 0.0))
        throw std::invalid_argument("RotatedBox extents must be positive");
    return RotatedBox{cx, cy, w, h, normalize_angle(theta), class_id, score};
}

// Counter-clockwise corners (positive shoelace order).
inline std::array<Point2, 4> box_to_corners(const RotatedBox& b) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double hw = 0.5 * b.w, hh = 0.5 * b.h;
    const std::array<Point2, 4> local = {Point2{hw, hh}, Point2{-hw, hh}, Point2{-hw, -hh},
                                         Point2{hw, -hh}};
    std::array<Point2, 4> out;
    for (int i = 0; i < 4; ++i)
        out[i] = Point2{b.cx + c * local[i].x - s * local[i].y,
                        b.cy + s * local[i].x + c * local[i].y};
    return out;
}

// Shoelace area; positive for counter-clockwise polygons.
inline double polygon_area(const std::vector<Point2>& poly) {
    double a = 0.0;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const Point2& p = poly[i];
        const Point2& q = poly[(i + 1) % poly.size()];
        a += p.x * q.y - q.x * p.y;
    }
    return 0.5 * a;
}

namespace detail {

// Sutherland-Hodgman clip of `subject` against the half-plane left of a->b.
inline std::vector<Point2> clip_edge(const std::vector<Point2>& subject, const Point2& a,
                                     const Point2& b) {
    std::vector<Point2> out;
    out.reserve(subject.size() + 2);
    const auto side = [&](const Point2& p) {
        return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    };
    for (std::size_t i = 0; i < subject.size(); ++i) {
        const Point2& cur = subject[i];
        const Point2& prev = subject[(i + subject.size() - 1) % subject.size()];
        const double sc = side(cur), sp = side(prev);
        const bool in_c = sc >= 0.0, in_p = sp >= 0.0;
        if (in_c != in_p) {
            const double t = sp / (sp - sc);
            out.push_back(Point2{prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
        }
        if (in_c) out.push_back(cur);
    }
    return out;
}

inline double intersection_area(const RotatedBox& a, const RotatedBox& b) {
    const auto ca = box_to_corners(a);
    const auto cb = box_to_corners(b);
    std::vector<Point2> poly(ca.begin(), ca.end());
    for (int i = 0; i < 4 && !poly.empty(); ++i)
        poly = clip_edge(poly, cb[i], cb[(i + 1) % 4]);
    if (poly.size() < 3) return 0.0;
    const double area = polygon_area(poly);
    return area < 1e-12 ? 0.0 : area;
}

// Deterministic operand order makes IoU exactly symmetric.
inline bool box_less(const RotatedBox& a, const RotatedBox& b) {
    if (a.cx != b.cx) return a.cx < b.cx;
    if (a.cy != b.cy) return a.cy < b.cy;
    if (a.w != b.w) return a.w < b.w;
    if (a.h != b.h) return a.h < b.h;
    return a.theta < b.theta;
}

} // namespace detail

// Intersection-over-union via convex polygon clipping of the two corner
// quadrilaterals. Symmetric; IoU(a,a) == 1.
inline double rotated_iou(const RotatedBox& a, const RotatedBox& b) {
    const RotatedBox& p = detail::box_less(a, b) ? a : b;
    const RotatedBox& q = detail::box_less(a, b) ? b : a;
    const double inter = detail::intersection_area(p, q);
    if (inter <= 0.0) return 0.0;
    const double uni = p.area() + q.area() - inter;
    return uni <= 0.0 ? 0.0 : std::min(inter / uni, 1.0);
}

// Greedy score-descending suppression. Returns the kept indices into `dets`
// in keep order; ties in score break toward the lower original index.
inline std::vector<std::size_t> rotated_nms(const std::vector<RotatedBox>& dets,
                                            double iou_thresh) {
    if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
        throw std::invalid_argument("rotated_nms: iou_thresh must lie in (0,1)");
    for (const RotatedBox& d : dets)
        if (!d.score.has_value())
            throw std::invalid_argument("rotated_nms: every detection needs a score");

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        return *dets[i].score > *dets[j].score;
    });

    std::vector<std::size_t> keep;
    std::vector<bool> suppressed(dets.size(), false);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (suppressed[i]) continue;
        keep.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (!suppressed[j] && rotated_iou(dets[i], dets[j]) > iou_thresh)
                suppressed[j] = true;
        }
    }
    return keep;
}

} // namespace densevit
