#ifndef PRIUS_METRICS_HPP
#define PRIUS_METRICS_HPP

// Interpretability metrics (UCC as a Spearman correlation, UR as a pairwise
// ordering ratio) restricted to per-class boundary bands, segmentation metrics
// (DSC, HD95) and the perturbation protocols used to probe uncertainty.
//
// Undefined results (tied sequences, empty classes) are std::nullopt and never
// silently coerced to a number.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "prius/grid.hpp"
#include "prius/proxy.hpp"
#include "prius/supervision.hpp"

namespace prius {

using MaybeReal = std::optional<double>;

struct BoundaryBand {
    int k = 0;
    double d0 = 0.0;
    std::vector<PixelIndex> pixels;

    bool empty() const noexcept { return pixels.empty(); }
    std::size_t size() const noexcept { return pixels.size(); }
};

/// {i | y_i = k, d_i <= d0}
inline BoundaryBand boundary_band(const LabelGrid& labels, const ScalarGrid& distance, int k, double d0) {
    if (!labels.same_shape(distance)) throw std::invalid_argument("labels and distance map differ in shape");
    BoundaryBand band{k, d0, {}};
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels.values()[i] == k && distance.values()[i] <= d0) band.pixels.push_back(labels.pixel(i));
    return band;
}

inline std::vector<double> gather_values(const ScalarGrid& field, const BoundaryBand& band) {
    std::vector<double> out;
    out.reserve(band.size());
    for (const auto& p : band.pixels) out.push_back(field[p]);
    return out;
}

/// 1-based ranks with ties sharing the average of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline MaybeReal pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("correlation of sequences with different lengths");
    if (a.size() < 2) return std::nullopt;
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Spearman correlation: Pearson correlation of fractional ranks. Undefined for constant input.
inline MaybeReal spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: sequences differ in length");
    if (a.size() < 2) return std::nullopt;
    const auto ra = fractional_ranks(a);
    const auto rb = fractional_ranks(b);
    return pearson(ra, rb);
}

inline MaybeReal ucc_g(const ScalarGrid& uncertainty, const ScalarGrid& gradient, const BoundaryBand& band) {
    return spearman(gather_values(gradient, band), gather_values(uncertainty, band));
}

inline MaybeReal ucc_d(const ScalarGrid& uncertainty, const ScalarGrid& distance, const BoundaryBand& band) {
    return spearman(gather_values(distance, band), gather_values(uncertainty, band));
}

enum class Direction { inverse, direct };

namespace detail {

// Number of unordered pairs with a_i < a_j and b_i < b_j (strictly concordant).
inline std::uint64_t strictly_concordant_pairs(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    std::vector<double> sorted_b(b.begin(), b.end());
    std::sort(sorted_b.begin(), sorted_b.end());
    sorted_b.erase(std::unique(sorted_b.begin(), sorted_b.end()), sorted_b.end());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] < a[y]; });

    std::vector<std::uint64_t> fenwick(sorted_b.size() + 1, 0);
    auto rank_of = [&](double v) {
        return static_cast<std::size_t>(std::lower_bound(sorted_b.begin(), sorted_b.end(), v) - sorted_b.begin());
    };
    auto count_below = [&](std::size_t r) {  // entries with rank < r
        std::uint64_t s = 0;
        for (std::size_t i = r; i > 0; i -= i & (~i + 1)) s += fenwick[i];
        return s;
    };
    auto insert = [&](std::size_t r) {
        for (std::size_t i = r + 1; i < fenwick.size(); i += i & (~i + 1)) ++fenwick[i];
    };

    std::uint64_t total = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && a[order[j]] == a[order[i]]) ++j;
        for (std::size_t t = i; t < j; ++t) total += count_below(rank_of(b[order[t]]));
        for (std::size_t t = i; t < j; ++t) insert(rank_of(b[order[t]]));
        i = j;
    }
    return total;
}

}  // namespace detail

/// Fraction of ordered pairs i != j whose product (a_i - a_j)(b_i - b_j) is <= 0 (inverse)
/// or >= 0 (direct). Ties satisfy both. O(n log n).
inline double ur(std::span<const double> a, std::span<const double> b, Direction direction) {
    if (a.size() != b.size()) throw std::invalid_argument("ur: sequences differ in length");
    if (a.size() < 2) throw std::invalid_argument("ur needs at least two elements");
    const auto n = static_cast<std::uint64_t>(a.size());
    const std::uint64_t unordered = n * (n - 1) / 2;
    std::uint64_t violating = 0;
    if (direction == Direction::inverse) {
        violating = detail::strictly_concordant_pairs(a, b);
    } else {
        std::vector<double> neg(b.begin(), b.end());
        for (double& v : neg) v = -v;
        violating = detail::strictly_concordant_pairs(a, neg);
    }
    return static_cast<double>(unordered - violating) / static_cast<double>(unordered);
}

inline double ur_band(const ScalarGrid& proxy, const ScalarGrid& uncertainty, const BoundaryBand& band,
                      Direction direction) {
    return ur(gather_values(proxy, band), gather_values(uncertainty, band), direction);
}

/// Ordinary least-squares slope of y on x. Undefined for constant x.
inline MaybeReal regression_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("regression: sequences differ in length");
    if (x.size() < 2) return std::nullopt;
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) return std::nullopt;
    return sxy / sxx;
}

/// Linear-interpolation percentile of an unsorted sample, q in [0, 1].
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// ---------------------------------------------------------------------------
// Segmentation metrics
// ---------------------------------------------------------------------------

struct PerClass {
    std::vector<MaybeReal> per_class;  // index = class; class 0 (background) left undefined
    MaybeReal mean;                    // over defined foreground classes
};

inline MaybeReal mean_defined(std::span<const MaybeReal> values) {
    double sum = 0.0;
    int n = 0;
    for (const auto& v : values)
        if (v) {
            sum += *v;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / n;
}

inline PerClass finish_per_class(std::vector<MaybeReal> values) {
    PerClass out{std::move(values), std::nullopt};
    out.mean = mean_defined(std::span<const MaybeReal>(out.per_class).subspan(1));
    return out;
}

/// Foreground Dice 2|P n T| / (|P| + |T|); classes empty in both masks are undefined.
inline PerClass dsc(const LabelGrid& pred, const LabelGrid& truth) {
    if (!pred.same_shape(truth)) throw std::invalid_argument("dsc: shape mismatch");
    const int classes = std::max(pred.num_classes(), truth.num_classes());
    std::vector<MaybeReal> out(static_cast<std::size_t>(classes));
    for (int c = 1; c < classes; ++c) {
        std::size_t p = 0, t = 0, both = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool in_p = pred.values()[i] == c;
            const bool in_t = truth.values()[i] == c;
            p += in_p;
            t += in_t;
            both += in_p && in_t;
        }
        if (p + t > 0) out[c] = 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
    }
    return finish_per_class(std::move(out));
}

/// Pixels of class c with a 4-neighbour outside the class; the whole mask if it has none.
inline std::vector<PixelIndex> mask_boundary(const LabelGrid& labels, int c) {
    std::vector<PixelIndex> edge, all;
    constexpr int kDr[4] = {-1, 1, 0, 0};
    constexpr int kDc[4] = {0, 0, -1, 1};
    for (int r = 0; r < labels.height(); ++r)
        for (int col = 0; col < labels.width(); ++col) {
            if (labels.label(r, col) != c) continue;
            all.push_back({r, col});
            for (int n = 0; n < 4; ++n) {
                const int rr = r + kDr[n], cc = col + kDc[n];
                if (labels.contains(rr, cc) && labels.label(rr, cc) != c) {
                    edge.push_back({r, col});
                    break;
                }
            }
        }
    return edge.empty() ? all : edge;
}

/// 95th percentile of the pooled directed boundary-to-boundary distances (both directions), pixels.
inline MaybeReal hd95_class(const LabelGrid& pred, const LabelGrid& truth, int c) {
    const auto bp = mask_boundary(pred, c);
    const auto bt = mask_boundary(truth, c);
    if (bp.empty() || bt.empty()) return std::nullopt;
    const auto to_truth = distance_to_pixels(truth.height(), truth.width(), bt);
    const auto to_pred = distance_to_pixels(pred.height(), pred.width(), bp);
    std::vector<double> pooled;
    pooled.reserve(bp.size() + bt.size());
    for (const auto& p : bp) pooled.push_back(to_truth[p]);
    for (const auto& p : bt) pooled.push_back(to_pred[p]);
    return percentile(std::move(pooled), 0.95);
}

inline PerClass hd95(const LabelGrid& pred, const LabelGrid& truth) {
    if (!pred.same_shape(truth)) throw std::invalid_argument("hd95: shape mismatch");
    const int classes = std::max(pred.num_classes(), truth.num_classes());
    std::vector<MaybeReal> out(static_cast<std::size_t>(classes));
    for (int c = 1; c < classes; ++c) out[c] = hd95_class(pred, truth, c);
    return finish_per_class(std::move(out));
}

// ---------------------------------------------------------------------------
// Perturbation protocols
// ---------------------------------------------------------------------------

/// Maps an input image to a predicted uncertainty field.
using UncertaintyModel = std::function<ScalarGrid(const ScalarGrid&)>;

struct GaussianNoise {
    double sigma = 0.0;
};

/// Separable Gaussian blur with replicated borders; sigma = 0 is the identity.
struct GaussianBlur {
    double sigma = 0.0;
    int radius = 0;  // 0 picks ceil(3 sigma)
};

using Perturbation = std::variant<GaussianNoise, GaussianBlur>;

inline ScalarGrid gaussian_blur(const ScalarGrid& image, double sigma, int radius = 0) {
    if (sigma < 0.0) throw std::invalid_argument("blur sigma must be non-negative");
    if (sigma == 0.0) return image;
    if (radius <= 0) radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int t = -radius; t <= radius; ++t) total += kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
    for (double& k : kernel) k /= total;
    ScalarGrid tmp(image.height(), image.width());
    ScalarGrid out(image.height(), image.width());
    for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c) {
            double s = 0.0;
            for (int t = -radius; t <= radius; ++t) s += kernel[t + radius] * image.clamped(r, c + t);
            tmp(r, c) = s;
        }
    for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c) {
            double s = 0.0;
            for (int t = -radius; t <= radius; ++t) s += kernel[t + radius] * tmp.clamped(r + t, c);
            out(r, c) = s;
        }
    return out;
}

template <typename Rng>
ScalarGrid apply_perturbation(const ScalarGrid& image, const Perturbation& perturbation, Rng& rng) {
    if (const auto* noise = std::get_if<GaussianNoise>(&perturbation)) return corrupt(image, noise->sigma, rng);
    const auto& blur = std::get<GaussianBlur>(perturbation);
    return gaussian_blur(image, blur.sigma, blur.radius);
}

struct DeltaUSummary {
    std::size_t count = 0;
    double mean = 0.0;
    double fraction_positive = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
};

inline DeltaUSummary summarize(std::vector<double> delta) {
    DeltaUSummary s;
    s.count = delta.size();
    if (delta.empty()) return s;
    std::size_t positive = 0;
    for (double d : delta) {
        s.mean += d;
        positive += d > 0.0;
    }
    s.mean /= static_cast<double>(delta.size());
    s.fraction_positive = static_cast<double>(positive) / static_cast<double>(delta.size());
    s.q1 = percentile(delta, 0.25);
    s.median = percentile(delta, 0.5);
    s.q3 = percentile(std::move(delta), 0.75);
    return s;
}

/// u(perturbed) - u(clean) at every band pixel.
template <typename Rng>
std::vector<double> delta_u_values(const UncertaintyModel& model, const ScalarGrid& image,
                                   std::span<const PixelIndex> band, const Perturbation& perturbation, Rng& rng) {
    const ScalarGrid u_clean = model(image);
    const ScalarGrid u_pert = model(apply_perturbation(image, perturbation, rng));
    std::vector<double> out;
    out.reserve(band.size());
    for (const auto& p : band) out.push_back(u_pert[p] - u_clean[p]);
    return out;
}

template <typename Rng>
DeltaUSummary delta_u_under_perturbation(const UncertaintyModel& model, const ScalarGrid& image,
                                         const BoundaryBand& band, const Perturbation& perturbation, Rng& rng) {
    if (band.empty()) throw std::invalid_argument("delta-u protocol needs a non-empty band");
    return summarize(delta_u_values(model, image, band.pixels, perturbation, rng));
}

/// Band-mean uncertainty per noise level, each level averaged over `trials` corruptions.
template <typename Rng>
std::vector<double> band_mean_by_noise(const UncertaintyModel& model, const ScalarGrid& image,
                                       const BoundaryBand& band, std::span<const double> levels, int trials, Rng& rng) {
    if (band.empty()) throw std::invalid_argument("noise response needs a non-empty band");
    std::vector<double> means;
    for (double sigma : levels) {
        double acc = 0.0;
        const int reps = sigma == 0.0 ? 1 : trials;
        for (int t = 0; t < reps; ++t) {
            const ScalarGrid u = model(corrupt(image, sigma, rng));
            double s = 0.0;
            for (const auto& p : band.pixels) s += u[p];
            acc += s / static_cast<double>(band.size());
        }
        means.push_back(acc / reps);
    }
    return means;
}

/// Spearman correlation between noise level and band-mean uncertainty.
template <typename Rng>
MaybeReal ucc_sigma(const UncertaintyModel& model, const ScalarGrid& image, const BoundaryBand& band,
                    std::span<const double> levels, int trials, Rng& rng) {
    if (levels.size() < 2) throw std::invalid_argument("ucc_sigma needs at least two noise levels");
    const auto means = band_mean_by_noise(model, image, band, levels, trials, rng);
    return spearman(levels, means);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string image_id;
    int k = 0;
    MaybeReal ucc_g, ucc_sigma, ucc_d;
    MaybeReal ur_g, ur_sigma, ur_d;
    MaybeReal dsc, hd95;
    MaybeReal slope_g, slope_d;
};

inline constexpr const char* kMetricCsvHeader =
    "image_id,class,ucc_g,ucc_sigma,ucc_d,ur_g,ur_sigma,ur_d,dsc,hd95,slope_g,slope_d";

inline std::string format_metric(const MaybeReal& v) {
    if (!v) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return buf;
}

/// Per-(image, class) rows followed by an aggregate block: one "mean" row per class
/// (average over images where defined) and a final "mean" row with class "fg"
/// averaging the foreground classes.
struct MetricReport {
    std::vector<MetricRow> rows;
    std::vector<MetricRow> aggregate;  // per class, image_id "mean"
    MetricRow foreground;              // image_id "mean", class column "fg"

    static constexpr std::array<MaybeReal MetricRow::*, 10> kFields{
        &MetricRow::ucc_g, &MetricRow::ucc_sigma, &MetricRow::ucc_d, &MetricRow::ur_g,    &MetricRow::ur_sigma,
        &MetricRow::ur_d,  &MetricRow::dsc,       &MetricRow::hd95,  &MetricRow::slope_g, &MetricRow::slope_d};

    /// Averages rows per class, then foreground classes (class >= 1).
    void finalize(int classes) {
        aggregate.clear();
        for (int k = 0; k < classes; ++k) {
            MetricRow agg;
            agg.image_id = "mean";
            agg.k = k;
            for (auto field : kFields) {
                std::vector<MaybeReal> vals;
                for (const auto& r : rows)
                    if (r.k == k) vals.push_back(r.*field);
                agg.*field = mean_defined(vals);
            }
            aggregate.push_back(agg);
        }
        foreground = MetricRow{};
        foreground.image_id = "mean";
        foreground.k = -1;
        for (auto field : kFields) {
            std::vector<MaybeReal> vals;
            for (const auto& a : aggregate)
                if (a.k >= 1) vals.push_back(a.*field);
            foreground.*field = mean_defined(vals);
        }
    }

    void write_csv(std::ostream& out) const {
        out << kMetricCsvHeader << '\n';
        auto emit = [&out](const MetricRow& r, const std::string& cls) {
            out << r.image_id << ',' << cls;
            for (auto field : kFields) out << ',' << format_metric(r.*field);
            out << '\n';
        };
        for (const auto& r : rows) emit(r, std::to_string(r.k));
        for (const auto& r : aggregate) emit(r, std::to_string(r.k));
        emit(foreground, "fg");
    }
};

}  // namespace prius

#endif  // PRIUS_METRICS_HPP
