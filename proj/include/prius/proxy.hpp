#ifndef PRIUS_PROXY_HPP
#define PRIUS_PROXY_HPP

// Image-derived ambiguity proxies: Sobel gradient magnitude, label boundaries,
// exact Euclidean distance to the nearest boundary, boundary normals and the
// normal-line aggregation used by contrast supervision.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "prius/grid.hpp"

namespace prius {

/// 3x3 Sobel magnitude sqrt(Gx^2 + Gy^2) with replicated borders.
inline ScalarGrid gradient_magnitude(const ScalarGrid& image) {
    ScalarGrid out(image.height(), image.width());
    for (int r = 0; r < image.height(); ++r) {
        for (int c = 0; c < image.width(); ++c) {
            auto at = [&](int dr, int dc) { return image.clamped(r + dr, c + dc); };
            const double gx = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
            const double gy = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
            out(r, c) = std::sqrt(gx * gx + gy * gy);
        }
    }
    return out;
}

struct BoundarySet {
    std::vector<PixelIndex> pixels;  // row-major order
    std::vector<int> owner;          // label of each member
    Grid<std::uint8_t> mask;         // 1 on members

    bool empty() const noexcept { return pixels.empty(); }
    std::size_t size() const noexcept { return pixels.size(); }
    bool contains(PixelIndex p) const noexcept { return mask[p] != 0; }
};

/// Pixels with at least one 4-neighbour of a different label. Both sides of an interface qualify.
inline BoundarySet boundary_pixels(const LabelGrid& labels) {
    BoundarySet set{{}, {}, Grid<std::uint8_t>(labels.height(), labels.width(), 0)};
    constexpr int kDr[4] = {-1, 1, 0, 0};
    constexpr int kDc[4] = {0, 0, -1, 1};
    for (int r = 0; r < labels.height(); ++r) {
        for (int c = 0; c < labels.width(); ++c) {
            const int k = labels.label(r, c);
            for (int n = 0; n < 4; ++n) {
                const int rr = r + kDr[n];
                const int cc = c + kDc[n];
                if (labels.contains(rr, cc) && labels.label(rr, cc) != k) {
                    set.pixels.push_back({r, c});
                    set.owner.push_back(k);
                    set.mask(r, c) = 1;
                    break;
                }
            }
        }
    }
    return set;
}

namespace detail {

// One-dimensional squared distance transform of a sampled function (lower envelope of parabolas).
inline void squared_edt_1d(std::span<const double> f, std::span<double> out, std::vector<int>& v,
                           std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    constexpr double kInf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        auto intersect = [&](int p) { return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p)); };
        double s = intersect(v[k]);
        // z[0] is -inf, so k never drops below zero.
        while (s <= z[k]) s = intersect(v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        std::fill(out.begin(), out.end(), kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double dq = q - v[j];
        out[q] = dq * dq + f[v[j]];
    }
}

}  // namespace detail

/// Exact Euclidean distance from every pixel of an h x w grid to the nearest member of a
/// non-empty pixel set, via two passes of the 1D squared transform.
inline ScalarGrid distance_to_pixels(int h, int w, std::span<const PixelIndex> targets) {
    if (targets.empty()) throw std::invalid_argument("distance transform needs at least one target pixel");
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> sq(static_cast<std::size_t>(h) * w, kInf);
    for (const auto& p : targets) sq[static_cast<std::size_t>(p.row) * w + p.col] = 0.0;

    std::vector<int> v;
    std::vector<double> z;
    std::vector<double> line_in(std::max(h, w));
    std::vector<double> line_out(std::max(h, w));

    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) line_in[r] = sq[static_cast<std::size_t>(r) * w + c];
        detail::squared_edt_1d(std::span<const double>(line_in.data(), h), std::span<double>(line_out.data(), h), v, z);
        for (int r = 0; r < h; ++r) sq[static_cast<std::size_t>(r) * w + c] = line_out[r];
    }
    for (int r = 0; r < h; ++r) {
        std::copy_n(sq.begin() + static_cast<std::ptrdiff_t>(r) * w, w, line_in.begin());
        detail::squared_edt_1d(std::span<const double>(line_in.data(), w), std::span<double>(line_out.data(), w), v, z);
        std::copy_n(line_out.begin(), w, sq.begin() + static_cast<std::ptrdiff_t>(r) * w);
    }

    ScalarGrid out(h, w);
    for (std::size_t i = 0; i < sq.size(); ++i) out.values()[i] = std::sqrt(sq[i]);
    return out;
}

/// Exact Euclidean distance of every pixel to its nearest boundary pixel.
/// Returns nullopt when the label grid has no boundary at all.
inline std::optional<ScalarGrid> boundary_distance(const LabelGrid& labels, const BoundarySet& boundary) {
    if (boundary.empty()) return std::nullopt;
    return distance_to_pixels(labels.height(), labels.width(), boundary.pixels);
}

inline std::optional<ScalarGrid> boundary_distance(const LabelGrid& labels) {
    return boundary_distance(labels, boundary_pixels(labels));
}

/// Normalized central-difference gradient of the distance field; (0, 1) when the gradient vanishes.
inline UnitVector2 boundary_normal(const ScalarGrid& distance, PixelIndex at) {
    const double gy = 0.5 * (distance.clamped(at.row + 1, at.col) - distance.clamped(at.row - 1, at.col));
    const double gx = 0.5 * (distance.clamped(at.row, at.col + 1) - distance.clamped(at.row, at.col - 1));
    const double norm = std::hypot(gy, gx);
    if (norm < 1e-8) return {0.0, 1.0};
    return {gy / norm, gx / norm};
}

struct NormalSamples {
    PixelIndex center;
    int radius = 0;
    std::vector<PixelIndex> samples;  // samples[t + radius] for t in [-radius, radius]
};

/// Pixels nearest to center + t * normal for t in [-radius, radius], clamped into the grid.
inline NormalSamples normal_line_samples(PixelIndex center, UnitVector2 normal, int radius, int height, int width) {
    if (radius < 0) throw std::invalid_argument("sampling radius must be non-negative");
    NormalSamples out{center, radius, {}};
    out.samples.reserve(static_cast<std::size_t>(2 * radius + 1));
    for (int t = -radius; t <= radius; ++t) {
        const int r = static_cast<int>(std::floor(center.row + t * normal.dy + 0.5));
        const int c = static_cast<int>(std::floor(center.col + t * normal.dx + 0.5));
        out.samples.push_back({std::clamp(r, 0, height - 1), std::clamp(c, 0, width - 1)});
    }
    return out;
}

struct NormalAggregate {
    double g_tilde = 0.0;  // max gradient along the normal line
    double u_bar = 0.0;    // mean uncertainty along the normal line
};

inline NormalAggregate normal_aggregate(const ScalarGrid& gradient, const ScalarGrid& uncertainty,
                                        const NormalSamples& samples) {
    if (!gradient.same_shape(uncertainty)) throw std::invalid_argument("gradient and uncertainty shapes differ");
    NormalAggregate agg{-std::numeric_limits<double>::infinity(), 0.0};
    for (const auto& p : samples.samples) {
        agg.g_tilde = std::max(agg.g_tilde, gradient[p]);
        agg.u_bar += uncertainty[p];
    }
    agg.u_bar /= static_cast<double>(samples.samples.size());
    return agg;
}

}  // namespace prius

#endif  // PRIUS_PROXY_HPP
