#pragma once

// Berry photograph morphometrics: backdrop segmentation, principal axis,
// left/right symmetry, calibrated area, hue statistics and achene detection.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "berrypoll/config.hpp"
#include "berrypoll/errors.hpp"

namespace berrypoll {

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct PointD {
    double x = 0.0, y = 0.0;
    friend bool operator==(const PointD&, const PointD&) = default;
};

class RasterImage {
public:
    RasterImage() = default;
    RasterImage(int width, int height, double ppi, Rgb fill = {})
        : width_(width), height_(height), ppi_(ppi),
          pixels_(static_cast<std::size_t>(std::max(width, 0)) * static_cast<std::size_t>(std::max(height, 0)), fill) {
        validate();
    }
    RasterImage(int width, int height, double ppi, std::vector<Rgb> pixels)
        : width_(width), height_(height), ppi_(ppi), pixels_(std::move(pixels)) {
        validate();
    }

    int width() const { return width_; }
    int height() const { return height_; }
    /// Linear resolution in pixels per inch.
    double ppi() const { return ppi_; }
    void set_ppi(double ppi) {
        ppi_ = ppi;
        validate();
    }

    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }
    const Rgb& at(int x, int y) const { return pixels_[index(x, y)]; }
    Rgb& at(int x, int y) { return pixels_[index(x, y)]; }
    const std::vector<Rgb>& pixels() const { return pixels_; }

    friend bool operator==(const RasterImage&, const RasterImage&) = default;

private:
    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }
    void validate() const {
        if (width_ <= 0 || height_ <= 0) throw InvalidImage("image dimensions must be positive");
        if (pixels_.size() != static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_))
            throw InvalidImage("pixel buffer does not match dimensions");
        if (!(ppi_ > 0.0) || !std::isfinite(ppi_)) throw InvalidImage("resolution must be positive");
    }

    int width_ = 0;
    int height_ = 0;
    double ppi_ = 0.0;
    std::vector<Rgb> pixels_;
};

/// Binary silhouette. Construction does not enforce single-component
/// topology; `segment` guarantees it for the masks it returns.
class BerryMask {
public:
    BerryMask() = default;
    BerryMask(int width, int height) : width_(width), height_(height), bits_(std::size_t(width) * std::size_t(height), 0) {}

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t pixel_count() const { return count_; }
    bool empty() const { return count_ == 0; }

    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }
    bool test(int x, int y) const { return contains(x, y) && bits_[index(x, y)] != 0; }
    void set(int x, int y, bool v) {
        auto& b = bits_[index(x, y)];
        if (b && !v) --count_;
        if (!b && v) ++count_;
        b = v ? 1 : 0;
    }

    const std::vector<std::uint8_t>& bits() const { return bits_; }

    friend bool operator==(const BerryMask& a, const BerryMask& b) {
        return a.width_ == b.width_ && a.height_ == b.height_ && a.bits_ == b.bits_;
    }

    template <typename F>
    void for_each_pixel(F&& f) const {
        for (int y = 0; y < height_; ++y)
            for (int x = 0; x < width_; ++x)
                if (bits_[index(x, y)]) f(x, y);
    }

private:
    std::size_t index(int x, int y) const { return std::size_t(y) * std::size_t(width_) + std::size_t(x); }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> bits_;
    std::size_t count_ = 0;
};

struct MajorAxis {
    PointD stem_point;
    PointD bottom_point;

    double length() const { return std::hypot(bottom_point.x - stem_point.x, bottom_point.y - stem_point.y); }

    /// Angle of the axis line from the image vertical, clockwise on screen,
    /// normalised to (-90, 90].
    double orientation_deg() const {
        const double dx = bottom_point.x - stem_point.x;
        const double dy = bottom_point.y - stem_point.y;
        double a = std::atan2(dx, -dy) * 180.0 / std::numbers::pi;
        while (a > 90.0) a -= 180.0;
        while (a <= -90.0) a += 180.0;
        return a;
    }
};

struct MorphologyMetrics {
    double area_in2 = 0.0;
    double symmetry_pct = 0.0;
    double hue_mean_deg = 0.0;
    double hue_std_deg = 0.0;
    friend bool operator==(const MorphologyMetrics&, const MorphologyMetrics&) = default;
};

struct AcheneDetection {
    PointD centroid;
    double area_px = 0.0;
    double circularity = 0.0;
    double equiv_diameter_px = 0.0;
    friend bool operator==(const AcheneDetection&, const AcheneDetection&) = default;
};

struct AcheneMetrics {
    std::size_t count = 0;
    std::optional<double> size_mean_px;
    std::optional<double> size_std_px;
    std::optional<double> nn_dist_mean_px;
    std::optional<double> nn_dist_std_px;
    friend bool operator==(const AcheneMetrics&, const AcheneMetrics&) = default;
};

struct SegmentConfig {
    std::optional<Rgb> backdrop;  ///< estimated from the corners when unset
    double tolerance = 40.0;      ///< Euclidean RGB distance
    std::size_t min_pixels = 500;
    int corner_patch = 5;
};

struct AcheneConfig {
    double d_min = 4.0;
    double d_max = 60.0;
    double circularity_floor = 0.6;
    std::optional<int> fixed_threshold;  ///< luminance; overrides Otsu
    /// Minimum gap between Otsu class means. Weaker splits are retried inside
    /// the darker class; if none qualifies the berry has no achenes.
    double min_contrast = 30.0;
};

struct ImagingConfig {
    SegmentConfig segment;
    AcheneConfig achene;
    double ppi = 300.0;

    static ImagingConfig from_config(const KeyValueConfig& kv) {
        ImagingConfig c;
        const auto backdrop = kv.get_string("backdrop", "auto");
        if (backdrop != "auto") {
            const auto parts = split(backdrop, ',');
            if (parts.size() != 3) throw InvalidSpec("backdrop must be 'auto' or 'r,g,b'");
            std::array<std::uint8_t, 3> ch{};
            for (std::size_t i = 0; i < 3; ++i) {
                auto v = parse_int(parts[i]);
                if (!v || *v < 0 || *v > 255) throw InvalidSpec("backdrop channel out of range");
                ch[i] = static_cast<std::uint8_t>(*v);
            }
            c.segment.backdrop = Rgb{ch[0], ch[1], ch[2]};
        }
        c.segment.tolerance = kv.get_double("backdrop_tolerance", c.segment.tolerance);
        c.segment.min_pixels = static_cast<std::size_t>(kv.get_int("min_berry_px", static_cast<long long>(c.segment.min_pixels)));
        c.achene.d_min = kv.get_double("achene_d_min", c.achene.d_min);
        c.achene.d_max = kv.get_double("achene_d_max", c.achene.d_max);
        c.achene.circularity_floor = kv.get_double("achene_circularity", c.achene.circularity_floor);
        c.achene.min_contrast = kv.get_double("achene_min_contrast", c.achene.min_contrast);
        const auto thr = kv.get_string("achene_threshold", "otsu");
        if (thr != "otsu") {
            auto v = parse_int(thr);
            if (!v || *v < 0 || *v > 255) throw InvalidSpec("achene_threshold must be 'otsu' or 0..255");
            c.achene.fixed_threshold = static_cast<int>(*v);
        }
        c.ppi = kv.get_double("ppi", c.ppi);
        if (!(c.ppi > 0)) throw InvalidSpec("ppi must be positive");
        if (!(c.achene.d_min > 0 && c.achene.d_min <= c.achene.d_max)) throw InvalidSpec("achene diameter range invalid");
        return c;
    }
};

// ---------------------------------------------------------------------------
// colour helpers

struct Hsv {
    double h = 0.0;  ///< degrees [0, 360)
    double s = 0.0;  ///< [0, 1]
    double v = 0.0;  ///< [0, 1]
};

inline Hsv to_hsv(Rgb c) {
    const double r = c.r / 255.0, g = c.g / 255.0, b = c.b / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) return out;
    double h;
    if (mx == r)
        h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = 60.0 * ((b - r) / d + 2.0);
    else
        h = 60.0 * ((r - g) / d + 4.0);
    if (h < 0.0) h += 360.0;
    if (h >= 360.0) h -= 360.0;
    out.h = h;
    return out;
}

inline int luminance(Rgb c) {
    return static_cast<int>(std::lround(0.299 * c.r + 0.587 * c.g + 0.114 * c.b));
}

namespace detail {

inline std::uint8_t median_channel(std::vector<std::uint8_t> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return v[v.size() / 2];
}

using Bitmap = std::vector<std::uint8_t>;

// 3x3 square structuring element, replicate border.
inline Bitmap morph3(const Bitmap& in, int w, int h, bool dilate) {
    Bitmap out(in.size(), 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            bool acc = !dilate;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    const int yy = std::clamp(y + dy, 0, h - 1);
                    const bool v = in[std::size_t(yy) * w + xx] != 0;
                    acc = dilate ? (acc || v) : (acc && v);
                }
            }
            out[std::size_t(y) * w + x] = acc ? 1 : 0;
        }
    }
    return out;
}

/// Labels connected components of set pixels; returns label image (0 = none)
/// and per-label pixel counts (index 0 unused).
inline std::pair<std::vector<int>, std::vector<std::size_t>> label_components(const Bitmap& in, int w, int h,
                                                                              bool eight) {
    std::vector<int> labels(in.size(), 0);
    std::vector<std::size_t> sizes{0};
    std::vector<int> stack;
    static constexpr std::array<std::pair<int, int>, 8> nb{
        {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, 1}, {1, -1}, {-1, -1}}};
    const std::size_t nn = eight ? 8 : 4;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = std::size_t(y) * w + x;
            if (!in[i] || labels[i]) continue;
            const int label = static_cast<int>(sizes.size());
            sizes.push_back(0);
            labels[i] = label;
            stack.assign(1, static_cast<int>(i));
            while (!stack.empty()) {
                const int cur = stack.back();
                stack.pop_back();
                ++sizes[label];
                const int cx = cur % w, cy = cur / w;
                for (std::size_t k = 0; k < nn; ++k) {
                    const int nx = cx + nb[k].first, ny = cy + nb[k].second;
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                    const std::size_t j = std::size_t(ny) * w + nx;
                    if (in[j] && !labels[j]) {
                        labels[j] = label;
                        stack.push_back(static_cast<int>(j));
                    }
                }
            }
        }
    }
    return {std::move(labels), std::move(sizes)};
}

// Background pixels not 8-connected to the image border become foreground.
inline void fill_holes(Bitmap& fg, int w, int h) {
    Bitmap outside(fg.size(), 0);
    std::vector<int> stack;
    auto seed = [&](int x, int y) {
        const std::size_t i = std::size_t(y) * w + x;
        if (!fg[i] && !outside[i]) {
            outside[i] = 1;
            stack.push_back(static_cast<int>(i));
        }
    };
    for (int x = 0; x < w; ++x) {
        seed(x, 0);
        seed(x, h - 1);
    }
    for (int y = 0; y < h; ++y) {
        seed(0, y);
        seed(w - 1, y);
    }
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cx = cur % w, cy = cur / w;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int nx = cx + dx, ny = cy + dy;
                if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                seed(nx, ny);
            }
    }
    for (std::size_t i = 0; i < fg.size(); ++i)
        if (!outside[i]) fg[i] = 1;
}

// Clockwise on screen (y grows downward).
inline constexpr std::array<std::pair<int, int>, 8> kMoore{
    {{1, 0}, {1, 1}, {0, 1}, {-1, 1}, {-1, 0}, {-1, -1}, {0, -1}, {1, -1}}};

inline int moore_index(int dx, int dy) {
    for (int k = 0; k < 8; ++k)
        if (kMoore[k].first == dx && kMoore[k].second == dy) return k;
    return -1;
}

/// Length of the 8-connected outer boundary of the component containing
/// `start`, which must be its first pixel in raster order. Axis steps count 1,
/// diagonal steps sqrt(2).
template <typename Pred>
double trace_perimeter(int sx, int sy, Pred&& inside, std::size_t max_steps) {
    int px = sx, py = sy;
    int bi = 4;  // backtrack neighbour: west of start is background
    int first_move = -1;
    double length = 0.0;
    for (std::size_t step = 0; step < max_steps; ++step) {
        int found = -1;
        for (int k = 1; k <= 8; ++k) {
            const int idx = (bi + k) % 8;
            if (inside(px + kMoore[idx].first, py + kMoore[idx].second)) {
                found = idx;
                break;
            }
        }
        if (found < 0) return 0.0;  // isolated pixel
        if (px == sx && py == sy) {
            if (first_move < 0)
                first_move = found;
            else if (found == first_move)
                return length;
        }
        const int prev = (found + 7) % 8;
        const int bx = px + kMoore[prev].first, by = py + kMoore[prev].second;
        px += kMoore[found].first;
        py += kMoore[found].second;
        length += (found % 2 == 0) ? 1.0 : std::numbers::sqrt2;
        bi = moore_index(bx - px, by - py);
    }
    return length;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// operations

/// Per-channel median of the four corner patches.
inline Rgb estimate_backdrop(const RasterImage& image, int patch = 5) {
    const int pw = std::min(patch, image.width());
    const int ph = std::min(patch, image.height());
    std::vector<std::uint8_t> r, g, b;
    auto take = [&](int x0, int y0) {
        for (int y = y0; y < y0 + ph; ++y)
            for (int x = x0; x < x0 + pw; ++x) {
                const auto& c = image.at(x, y);
                r.push_back(c.r);
                g.push_back(c.g);
                b.push_back(c.b);
            }
    };
    take(0, 0);
    take(image.width() - pw, 0);
    take(0, image.height() - ph);
    take(image.width() - pw, image.height() - ph);
    return {detail::median_channel(r), detail::median_channel(g), detail::median_channel(b)};
}

/// Largest 4-connected non-backdrop region after 3x3 open/close cleanup,
/// with interior holes filled.
inline BerryMask segment(const RasterImage& image, const SegmentConfig& cfg = {}) {
    const int w = image.width(), h = image.height();
    const Rgb bg = cfg.backdrop.value_or(estimate_backdrop(image, cfg.corner_patch));
    const double tol2 = cfg.tolerance * cfg.tolerance;

    detail::Bitmap fg(std::size_t(w) * h, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto& c = image.at(x, y);
            const double dr = double(c.r) - bg.r, dg = double(c.g) - bg.g, db = double(c.b) - bg.b;
            fg[std::size_t(y) * w + x] = (dr * dr + dg * dg + db * db > tol2) ? 1 : 0;
        }

    // open, then close
    fg = detail::morph3(detail::morph3(fg, w, h, false), w, h, true);
    fg = detail::morph3(detail::morph3(fg, w, h, true), w, h, false);

    auto [labels, sizes] = detail::label_components(fg, w, h, false);
    std::size_t best = 0;
    for (std::size_t l = 1; l < sizes.size(); ++l)
        if (sizes[l] > (best ? sizes[best] : 0)) best = l;
    if (best == 0 || sizes[best] < cfg.min_pixels)
        throw NoForeground("largest foreground component has " + std::to_string(best ? sizes[best] : 0) +
                           " px, minimum is " + std::to_string(cfg.min_pixels));

    detail::Bitmap keep(fg.size(), 0);
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = labels[i] == static_cast<int>(best) ? 1 : 0;
    detail::fill_holes(keep, w, h);

    BerryMask mask(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (keep[std::size_t(y) * w + x]) mask.set(x, y, true);
    return mask;
}

namespace detail {

inline PointD mask_centroid(const BerryMask& mask) {
    double sx = 0, sy = 0;
    mask.for_each_pixel([&](int x, int y) {
        sx += x;
        sy += y;
    });
    const double n = static_cast<double>(mask.pixel_count());
    return {sx / n, sy / n};
}

// Walks from `origin` along `dir` until the rounded sample leaves the mask and
// returns the last inside sample.
inline PointD march_to_boundary(const BerryMask& mask, PointD origin, PointD dir) {
    const double step = 0.05;
    const double limit = std::hypot(mask.width(), mask.height());
    PointD last = origin;
    for (double t = step; t <= limit; t += step) {
        const PointD p{origin.x + t * dir.x, origin.y + t * dir.y};
        if (!mask.test(static_cast<int>(std::lround(p.x)), static_cast<int>(std::lround(p.y)))) break;
        last = p;
    }
    return last;
}

inline double green_fraction(const RasterImage& image, PointD c, double radius) {
    std::size_t total = 0, green = 0;
    const int x0 = static_cast<int>(std::floor(c.x - radius)), x1 = static_cast<int>(std::ceil(c.x + radius));
    const int y0 = static_cast<int>(std::floor(c.y - radius)), y1 = static_cast<int>(std::ceil(c.y + radius));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            if (!image.contains(x, y)) continue;
            if ((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y) > radius * radius) continue;
            ++total;
            const Hsv hsv = to_hsv(image.at(x, y));
            if (hsv.s >= 0.2 && hsv.h >= 60.0 && hsv.h <= 180.0) ++green;
        }
    return total ? static_cast<double>(green) / static_cast<double>(total) : 0.0;
}

// Orders the endpoints stem-first: greener end wins; otherwise the upper one.
inline MajorAxis orient_axis(const RasterImage& image, PointD a, PointD b) {
    constexpr double kRadius = 15.0;
    constexpr double kMinDifference = 0.05;
    const double ga = green_fraction(image, a, kRadius);
    const double gb = green_fraction(image, b, kRadius);
    if (std::abs(ga - gb) >= kMinDifference) return ga > gb ? MajorAxis{a, b} : MajorAxis{b, a};
    const bool a_upper = a.y < b.y || (a.y == b.y && a.x <= b.x);
    return a_upper ? MajorAxis{a, b} : MajorAxis{b, a};
}

}  // namespace detail

/// Principal axis of the mask through its centroid, clipped to the mask.
/// Throws DegenerateAxis for near-circular masks; see `vertical_axis`.
inline MajorAxis compute_axis(const RasterImage& image, const BerryMask& mask) {
    if (mask.empty()) throw DegenerateAxis("empty mask");
    const PointD c = detail::mask_centroid(mask);
    double sxx = 0, syy = 0, sxy = 0;
    mask.for_each_pixel([&](int x, int y) {
        const double dx = x - c.x, dy = y - c.y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    });
    const double n = static_cast<double>(mask.pixel_count());
    sxx /= n;
    syy /= n;
    sxy /= n;
    const double tr = sxx + syy;
    const double disc = std::sqrt(std::max(0.0, 0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy));
    const double l1 = 0.5 * tr + disc;
    const double l2 = 0.5 * tr - disc;
    if (!(l1 > 0.0) || (l1 - l2) / l1 < 0.01)
        throw DegenerateAxis("principal eigenvalues differ by less than 1%");

    PointD dir;
    if (std::abs(sxy) > 1e-12 * tr) {
        dir = {l1 - syy, sxy};
    } else {
        dir = sxx >= syy ? PointD{1.0, 0.0} : PointD{0.0, 1.0};
    }
    const double norm = std::hypot(dir.x, dir.y);
    dir = {dir.x / norm, dir.y / norm};
    const PointD a = detail::march_to_boundary(mask, c, dir);
    const PointD b = detail::march_to_boundary(mask, c, {-dir.x, -dir.y});
    return detail::orient_axis(image, a, b);
}

/// Fallback axis for near-circular masks: vertical through the centroid.
inline MajorAxis vertical_axis(const RasterImage& image, const BerryMask& mask) {
    if (mask.empty()) throw DegenerateAxis("empty mask");
    const PointD c = detail::mask_centroid(mask);
    const PointD a = detail::march_to_boundary(mask, c, {0.0, -1.0});
    const PointD b = detail::march_to_boundary(mask, c, {0.0, 1.0});
    return detail::orient_axis(image, a, b);
}

/// Side pixel counts: first = left of stem->bottom, second = right.
inline std::pair<std::size_t, std::size_t> side_counts(const BerryMask& mask, const MajorAxis& axis) {
    const double dx = axis.bottom_point.x - axis.stem_point.x;
    const double dy = axis.bottom_point.y - axis.stem_point.y;
    // pixels within 1e-9 px of the line count as on it, so rounding noise in
    // the endpoints cannot move a whole column of on-axis pixels to one side
    const double eps = 1e-9 * std::hypot(dx, dy);
    std::size_t left = 0, right = 0;
    mask.for_each_pixel([&](int x, int y) {
        const double cross = dx * (y - axis.stem_point.y) - dy * (x - axis.stem_point.x);
        if (cross > eps)
            ++right;
        else if (cross < -eps)
            ++left;
    });
    return {left, right};
}

inline double symmetry_from_counts(std::size_t left, std::size_t right) {
    if (left + right == 0) throw EmptySides("no mask pixels off the axis");
    const double l = static_cast<double>(left), r = static_cast<double>(right);
    return std::abs(l - r) / ((l + r) / 2.0) * 100.0;
}

/// Percent difference between the pixel counts on either side of the axis.
inline double symmetry(const BerryMask& mask, const MajorAxis& axis) {
    if (!(axis.length() > 0.0)) throw EmptySides("axis has zero length");
    const auto [l, r] = side_counts(mask, axis);
    return symmetry_from_counts(l, r);
}

inline double area_in2(const BerryMask& mask, double ppi) {
    if (!(ppi > 0.0)) throw InvalidImage("resolution must be positive");
    return static_cast<double>(mask.pixel_count()) / (ppi * ppi);
}

struct HueStats {
    double mean_deg = 0.0;
    double std_deg = 0.0;
};

/// Circular mean and circular standard deviation of hue over saturated
/// mask pixels (saturation >= 0.05).
inline HueStats hue_stats(const RasterImage& image, const BerryMask& mask) {
    double sc = 0.0, ss = 0.0;
    std::size_t n = 0;
    mask.for_each_pixel([&](int x, int y) {
        const Hsv hsv = to_hsv(image.at(x, y));
        if (hsv.s < 0.05) return;
        const double rad = hsv.h * std::numbers::pi / 180.0;
        sc += std::cos(rad);
        ss += std::sin(rad);
        ++n;
    });
    if (n == 0) throw AllDesaturated("every mask pixel has saturation below 0.05");
    const double c = sc / double(n), s = ss / double(n);
    double mean = std::atan2(s, c) * 180.0 / std::numbers::pi;
    if (mean < 0.0) mean += 360.0;
    if (mean >= 360.0) mean -= 360.0;
    // snap tiny negative zero / rounding noise
    if (std::abs(mean) < 1e-9 || std::abs(mean - 360.0) < 1e-9) mean = 0.0;
    const double r = std::min(1.0, std::hypot(c, s));
    const double sd = std::sqrt(std::max(0.0, -2.0 * std::log(r))) * 180.0 / std::numbers::pi;
    return {mean, sd};
}

struct OtsuResult {
    int threshold = 0;          ///< values <= threshold form the dark class
    double dark_mean = 0.0;
    double bright_mean = 0.0;
    bool separable = false;     ///< both classes non-empty
};

/// Otsu's threshold over a 256-bin histogram.
inline OtsuResult otsu(const std::array<std::size_t, 256>& hist) {
    double total = 0, sum = 0;
    for (int i = 0; i < 256; ++i) {
        total += double(hist[i]);
        sum += double(i) * double(hist[i]);
    }
    OtsuResult best;
    double best_between = -1.0;
    double w0 = 0, s0 = 0;
    for (int t = 0; t < 255; ++t) {
        w0 += double(hist[t]);
        s0 += double(t) * double(hist[t]);
        const double w1 = total - w0;
        if (w0 == 0 || w1 == 0) continue;
        const double m0 = s0 / w0, m1 = (sum - s0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best_between) {
            best_between = between;
            best = {t, m0, m1, true};
        }
    }
    return best;
}

/// Dark, roughly round blobs inside the mask whose equivalent diameter falls
/// within the configured range. Sorted by centroid, row-major.
inline std::vector<AcheneDetection> detect_achenes(const RasterImage& image, const BerryMask& mask,
                                                   const AcheneConfig& cfg = {}) {
    const int w = image.width(), h = image.height();
    std::vector<int> lum(std::size_t(w) * h, 0);
    std::array<std::size_t, 256> hist{};
    mask.for_each_pixel([&](int x, int y) {
        const int l = luminance(image.at(x, y));
        lum[std::size_t(y) * w + x] = l;
        ++hist[static_cast<std::size_t>(l)];
    });

    int threshold;
    if (cfg.fixed_threshold) {
        threshold = *cfg.fixed_threshold;
    } else {
        // A handful of achenes is a tiny mode next to the flesh, so a single
        // split can land inside the flesh spread. Keep splitting the darker
        // class until the two sides differ by at least min_contrast.
        std::optional<int> found;
        for (int depth = 0; depth < 8 && !found; ++depth) {
            const OtsuResult o = otsu(hist);
            if (!o.separable) break;
            if (o.bright_mean - o.dark_mean >= cfg.min_contrast) {
                found = o.threshold;
                break;
            }
            for (int i = o.threshold + 1; i < 256; ++i) hist[static_cast<std::size_t>(i)] = 0;
        }
        if (!found) return {};
        threshold = *found;
    }

    detail::Bitmap dark(std::size_t(w) * h, 0);
    mask.for_each_pixel([&](int x, int y) {
        const std::size_t i = std::size_t(y) * w + x;
        dark[i] = lum[i] <= threshold ? 1 : 0;
    });
    auto [labels, sizes] = detail::label_components(dark, w, h, true);

    struct Acc {
        double sx = 0, sy = 0;
        int first_x = -1, first_y = -1;
    };
    std::vector<Acc> acc(sizes.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int l = labels[std::size_t(y) * w + x];
            if (!l) continue;
            auto& a = acc[static_cast<std::size_t>(l)];
            if (a.first_x < 0) {
                a.first_x = x;
                a.first_y = y;
            }
            a.sx += x;
            a.sy += y;
        }

    std::vector<AcheneDetection> out;
    for (std::size_t l = 1; l < sizes.size(); ++l) {
        const double area = static_cast<double>(sizes[l]);
        const double diameter = 2.0 * std::sqrt(area / std::numbers::pi);
        if (diameter < cfg.d_min || diameter > cfg.d_max) continue;
        const int label = static_cast<int>(l);
        auto inside = [&](int x, int y) {
            return x >= 0 && y >= 0 && x < w && y < h && labels[std::size_t(y) * w + x] == label;
        };
        const double perimeter = detail::trace_perimeter(acc[l].first_x, acc[l].first_y, inside, 4 * sizes[l] + 16);
        const double circ = perimeter > 0.0 ? std::clamp(4.0 * std::numbers::pi * area / (perimeter * perimeter), 0.0, 1.0) : 0.0;
        if (circ < cfg.circularity_floor) continue;
        out.push_back({{acc[l].sx / area, acc[l].sy / area}, area, circ, diameter});
    }
    std::sort(out.begin(), out.end(), [](const AcheneDetection& a, const AcheneDetection& b) {
        return std::pair(a.centroid.y, a.centroid.x) < std::pair(b.centroid.y, b.centroid.x);
    });
    return out;
}

/// Distance from each point to its nearest other point, in input order.
/// Each point scans outward through the x-sorted order and stops once the x
/// gap alone exceeds its best distance; the distance expression is the same
/// one a brute-force scan uses, so results agree bit for bit.
inline std::vector<double> nearest_neighbor_distances(const std::vector<PointD>& pts) {
    const std::size_t n = pts.size();
    if (n < 2) return {};
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::pair(pts[a].x, pts[a].y) < std::pair(pts[b].x, pts[b].y);
    });
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    auto visit = [&](std::size_t i, std::size_t j) {
        const double dx = pts[j].x - pts[i].x;
        if (std::abs(dx) > best[i]) return false;
        const double dy = pts[j].y - pts[i].y;
        best[i] = std::min(best[i], std::sqrt(dx * dx + dy * dy));
        return true;
    };
    for (std::size_t ai = 0; ai < n; ++ai) {
        const std::size_t i = order[ai];
        for (std::size_t bi = ai + 1; bi < n && visit(i, order[bi]); ++bi) {
        }
        for (std::size_t bi = ai; bi-- > 0 && visit(i, order[bi]);) {
        }
    }
    return best;
}

namespace detail {

inline std::pair<double, std::optional<double>> mean_and_sample_std(const std::vector<double>& v) {
    double sum = 0;
    for (double x : v) sum += x;
    const double mean = sum / double(v.size());
    if (v.size() < 2) return {mean, std::nullopt};
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / double(v.size() - 1))};
}

}  // namespace detail

inline AcheneMetrics achene_metrics(const std::vector<AcheneDetection>& detections) {
    AcheneMetrics m;
    m.count = detections.size();
    if (m.count >= 1) {
        std::vector<double> d;
        d.reserve(m.count);
        for (const auto& a : detections) d.push_back(a.equiv_diameter_px);
        auto [mean, sd] = detail::mean_and_sample_std(d);
        m.size_mean_px = mean;
        m.size_std_px = sd;
    }
    if (m.count >= 2) {
        std::vector<PointD> pts;
        pts.reserve(m.count);
        for (const auto& a : detections) pts.push_back(a.centroid);
        auto [mean, sd] = detail::mean_and_sample_std(nearest_neighbor_distances(pts));
        m.nn_dist_mean_px = mean;
        m.nn_dist_std_px = sd;
    }
    return m;
}

struct ImageAnalysis {
    MorphologyMetrics morphology;
    AcheneMetrics achenes;
    MajorAxis axis;
    bool axis_fallback = false;
    std::size_t mask_pixels = 0;
};

/// Full per-image pipeline. Errors are rethrown as StageError naming the
/// failing stage.
inline ImageAnalysis analyze_image(const RasterImage& image, const ImagingConfig& cfg) {
    auto stage = [](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const StageError&) {
            throw;
        } catch (const Error& e) {
            throw StageError(name, e);
        }
    };

    ImageAnalysis out;
    const BerryMask mask = stage("segment", [&] { return segment(image, cfg.segment); });
    out.mask_pixels = mask.pixel_count();
    out.axis = stage("axis", [&] {
        try {
            return compute_axis(image, mask);
        } catch (const DegenerateAxis&) {
            out.axis_fallback = true;
            return vertical_axis(image, mask);
        }
    });
    out.morphology.symmetry_pct = stage("symmetry", [&] { return symmetry(mask, out.axis); });
    out.morphology.area_in2 = stage("area", [&] { return area_in2(mask, image.ppi()); });
    const HueStats hs = stage("hue", [&] { return hue_stats(image, mask); });
    out.morphology.hue_mean_deg = hs.mean_deg;
    out.morphology.hue_std_deg = hs.std_deg;
    const auto detections = stage("achenes", [&] { return detect_achenes(image, mask, cfg.achene); });
    out.achenes = achene_metrics(detections);
    return out;
}

}  // namespace berrypoll
