#ifndef PRIUS_SUPERVISION_HPP
#define PRIUS_SUPERVISION_HPP

// Gated uncertainty supervision. Three principle-specific hinge terms act on
// the predicted uncertainty field:
//
//   contrast   phi_g = w_g(i,j) * max(0, (ubar_i - ubar_j)(gt_i - gt_j))
//              w_g   = lambda_g * rho(d_g - max(d_i, d_j))
//   corruption phi_s = lambda_s * rho(d_n - d_i) *
//                      sum_n max(0, -(s_n - s_{n-1})(ubar^n_i - ubar^{n-1}_i))
//   geometry   phi_d = max(0, Omega_d * (u_i - (1 - 2 t_ij) u_j))
//              Omega_d = (1 - t_ij) * w_eps * (d_i - d_j) + lambda_f * t_ij
//
// with rho(x) = 1 / (1 + exp(-gamma x)). Every term is a function of plain
// uncertainty values; the loss assembly returns the value together with the
// analytic (sub)gradient with respect to each uncertainty field it touched.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prius/grid.hpp"
#include "prius/proxy.hpp"

namespace prius {

struct GateParams {
    double gamma = 100.0;
    double d_g = 2.0;
    double d_n = 7.0;
    double d_f = 9.0;
    double d_eps = 0.5;
    double lambda_g = 1.0;
    double lambda_sigma = 1.0;
    double lambda_f = 100.0;

    /// d_n = d0 - delta and d_f = d0 + delta.
    static GateParams around_reference(double d0, double delta, GateParams base) {
        base.d_n = d0 - delta;
        base.d_f = d0 + delta;
        base.validate();
        return base;
    }
    static GateParams around_reference(double d0, double delta) { return around_reference(d0, delta, GateParams{}); }

    void validate() const {
        if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
        if (d_g < 0.0 || d_n < 0.0 || d_f < 0.0 || d_eps < 0.0)
            throw std::invalid_argument("gate distances must be non-negative");
        if (d_n > d_f) throw std::invalid_argument("d_n must not exceed d_f");
        if (lambda_g < 0.0 || lambda_sigma < 0.0 || lambda_f < 0.0)
            throw std::invalid_argument("supervision coefficients must be non-negative");
    }
};

struct NoiseSchedule {
    std::array<double, 3> sigma{0.0, 0.05, 0.10};

    void validate() const {
        if (sigma[0] != 0.0) throw std::invalid_argument("noise level 0 must be the clean image (sigma = 0)");
        if (sigma[1] < sigma[0] || sigma[2] < sigma[1])
            throw std::invalid_argument("noise levels must be non-decreasing");
    }
};

struct PatchSpec {
    int radius = 1;
};

struct PairSample {
    PixelIndex i;
    PixelIndex j;
    bool same_class = false;
};

// ---------------------------------------------------------------------------
// Scalar building blocks
// ---------------------------------------------------------------------------

/// Numerically stable 1 / (1 + exp(-gamma x)).
inline double slope_sigmoid(double x, double gamma) {
    const double z = gamma * x;
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double contrast_pair_loss(double u_bar_i, double u_bar_j, double g_tilde_i, double g_tilde_j) {
    return std::max(0.0, (u_bar_i - u_bar_j) * (g_tilde_i - g_tilde_j));
}

inline double contrast_gate(double d_i, double d_j, const GateParams& p) {
    return p.lambda_g * slope_sigmoid(p.d_g - std::max(d_i, d_j), p.gamma);
}

inline double corruption_pixel_loss(std::span<const double, 3> u_bars, const NoiseSchedule& schedule) {
    double loss = 0.0;
    for (int n = 1; n <= 2; ++n)
        loss += std::max(0.0, -(schedule.sigma[n] - schedule.sigma[n - 1]) * (u_bars[n] - u_bars[n - 1]));
    return loss;
}

inline double corruption_gate(double d_i, const GateParams& p) {
    return p.lambda_sigma * slope_sigmoid(p.d_n - d_i, p.gamma);
}

/// Soft indicator t_ij that both pixels lie beyond d_f.
inline double interior_indicator(double d_i, double d_j, const GateParams& p) {
    return slope_sigmoid(d_i - p.d_f, p.gamma) * slope_sigmoid(d_j - p.d_f, p.gamma);
}

inline double distance_margin_gate(double d_i, double d_j, const GateParams& p) {
    return slope_sigmoid(std::abs(d_i - d_j) - p.d_eps, p.gamma);
}

inline double geometry_modulation(double d_i, double d_j, const GateParams& p) {
    const double t = interior_indicator(d_i, d_j, p);
    return (1.0 - t) * distance_margin_gate(d_i, d_j, p) * (d_i - d_j) + p.lambda_f * t;
}

inline double geometry_pair_loss(double u_i, double u_j, double d_i, double d_j, const GateParams& p) {
    const double t = interior_indicator(d_i, d_j, p);
    return std::max(0.0, geometry_modulation(d_i, d_j, p) * (u_i - (1.0 - 2.0 * t) * u_j));
}

// Hinge subgradients (zero at the kink).

struct PairGradient {
    double value = 0.0;
    double d_first = 0.0;   // d loss / d first uncertainty argument
    double d_second = 0.0;  // d loss / d second uncertainty argument
};

inline PairGradient contrast_pair_loss_grad(double u_bar_i, double u_bar_j, double g_tilde_i, double g_tilde_j) {
    const double dg = g_tilde_i - g_tilde_j;
    const double arg = (u_bar_i - u_bar_j) * dg;
    if (arg <= 0.0) return {};
    return {arg, dg, -dg};
}

inline PairGradient geometry_pair_loss_grad(double u_i, double u_j, double d_i, double d_j, const GateParams& p) {
    const double t = interior_indicator(d_i, d_j, p);
    const double omega = geometry_modulation(d_i, d_j, p);
    const double arg = omega * (u_i - (1.0 - 2.0 * t) * u_j);
    if (arg <= 0.0) return {};
    return {arg, omega, -omega * (1.0 - 2.0 * t)};
}

inline double corruption_pixel_loss_grad(std::span<const double, 3> u_bars, const NoiseSchedule& schedule,
                                         std::span<double, 3> grad) {
    double loss = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int n = 1; n <= 2; ++n) {
        const double ds = schedule.sigma[n] - schedule.sigma[n - 1];
        const double arg = -ds * (u_bars[n] - u_bars[n - 1]);
        if (arg > 0.0) {
            loss += arg;
            grad[n] -= ds;
            grad[n - 1] += ds;
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Field-level pieces
// ---------------------------------------------------------------------------

/// x + N(0, sigma^2) per pixel; sigma = 0 returns the input untouched and draws nothing.
template <typename Rng>
ScalarGrid corrupt(const ScalarGrid& image, double sigma, Rng& rng) {
    if (sigma < 0.0) throw std::invalid_argument("noise level must be non-negative");
    if (sigma == 0.0) return image;
    std::normal_distribution<double> noise(0.0, sigma);
    ScalarGrid out = image;
    for (double& v : out.values()) v += noise(rng);
    return out;
}

/// Clamped square patch around a center, duplicates included.
inline std::vector<PixelIndex> patch_pixels(PixelIndex center, PatchSpec patch, int height, int width) {
    std::vector<PixelIndex> out;
    out.reserve(static_cast<std::size_t>((2 * patch.radius + 1) * (2 * patch.radius + 1)));
    for (int dr = -patch.radius; dr <= patch.radius; ++dr)
        for (int dc = -patch.radius; dc <= patch.radius; ++dc)
            out.push_back({std::clamp(center.row + dr, 0, height - 1), std::clamp(center.col + dc, 0, width - 1)});
    return out;
}

inline double patch_mean_uncertainty(const ScalarGrid& u, PixelIndex center, PatchSpec patch) {
    if (!u.contains(center)) throw std::out_of_range("patch center outside the grid");
    if (patch.radius < 0) throw std::invalid_argument("patch radius must be non-negative");
    const auto pixels = patch_pixels(center, patch, u.height(), u.width());
    double sum = 0.0;
    for (const auto& p : pixels) sum += u[p];
    return sum / static_cast<double>(pixels.size());
}

// ---------------------------------------------------------------------------
// Sampling and assembly
// ---------------------------------------------------------------------------

struct SupervisionToggles {
    bool contrast = true;
    bool corruption = true;
    bool geometry = true;
};

struct SamplerConfig {
    int contrast_pairs = 256;
    int geometry_pairs = 256;
    int corruption_pixels = 256;
    int normal_radius = 2;
    PatchSpec patch{1};
};

struct SupervisionSamples {
    std::vector<PairSample> contrast;
    std::vector<PairSample> geometry;
    std::vector<PixelIndex> corruption;
};

/// Draws the spatial samples for one image.
///   contrast:   same-class pairs among pixels with d <= d_g
///   geometry:   each endpoint drawn with probability 1/2 from {d < d_f} or {d >= d_f}
///   corruption: anchors uniform over {d <= d_n}
/// An empty candidate pool yields no samples of that kind.
template <typename Rng>
SupervisionSamples sample_supervision(const LabelGrid& labels, const ScalarGrid& distance, const GateParams& params,
                                      const SamplerConfig& config, Rng& rng) {
    SupervisionSamples out;
    const std::size_t n = labels.size();
    std::vector<std::vector<std::size_t>> contrast_pool(static_cast<std::size_t>(labels.num_classes()));
    std::vector<std::size_t> contrast_any, near, far, corruption_pool;
    for (std::size_t k = 0; k < n; ++k) {
        const double d = distance.values()[k];
        if (d <= params.d_g) {
            contrast_pool[labels.values()[k]].push_back(k);
        }
        (d < params.d_f ? near : far).push_back(k);
        if (d <= params.d_n) corruption_pool.push_back(k);
    }
    for (std::size_t c = 0; c < contrast_pool.size(); ++c)
        if (contrast_pool[c].size() >= 2) contrast_any.insert(contrast_any.end(), contrast_pool[c].begin(), contrast_pool[c].end());

    auto pick = [&rng](const std::vector<std::size_t>& pool) {
        return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    };

    if (!contrast_any.empty()) {
        for (int s = 0; s < config.contrast_pairs; ++s) {
            const std::size_t a = pick(contrast_any);
            const auto& pool = contrast_pool[labels.values()[a]];
            std::size_t b = a;
            while (b == a) b = pick(pool);
            out.contrast.push_back({labels.pixel(a), labels.pixel(b), true});
        }
    }
    if (n >= 2) {
        std::bernoulli_distribution coin(0.5);
        auto endpoint = [&]() {
            const bool use_far = far.empty() ? false : (near.empty() ? true : coin(rng));
            return pick(use_far ? far : near);
        };
        for (int s = 0; s < config.geometry_pairs; ++s) {
            const std::size_t a = endpoint();
            std::size_t b = endpoint();
            while (b == a) b = endpoint();
            out.geometry.push_back(
                {labels.pixel(a), labels.pixel(b), labels.values()[a] == labels.values()[b]});
        }
    }
    if (!corruption_pool.empty())
        for (int s = 0; s < config.corruption_pixels; ++s) out.corruption.push_back(labels.pixel(pick(corruption_pool)));
    return out;
}

/// Per-image inputs of the supervision loss. u[0] is the clean prediction,
/// u[1] and u[2] the predictions on inputs corrupted at schedule levels 1 and 2.
struct SupervisionInputs {
    std::array<const ScalarGrid*, 3> u{};
    const ScalarGrid* gradient = nullptr;
    const ScalarGrid* distance = nullptr;  // null when the labels carry no boundary
};

struct UncertaintyLoss {
    double value = 0.0;
    double phi_g = 0.0;      // mean contrast term
    double phi_sigma = 0.0;  // mean corruption term
    double phi_d = 0.0;      // mean geometry term
    std::array<std::vector<double>, 3> grad;  // d value / d u[level], row-major
};

/// L_u = mean(phi_g) + mean(phi_sigma) + mean(phi_d) over the supplied samples, with gradients.
inline UncertaintyLoss uncertainty_loss(const SupervisionInputs& in, const SupervisionSamples& samples,
                                        const GateParams& params, const NoiseSchedule& schedule,
                                        const SamplerConfig& config, const SupervisionToggles& toggles = {}) {
    const ScalarGrid& u0 = *in.u[0];
    UncertaintyLoss out;
    for (auto& g : out.grad) g.assign(u0.size(), 0.0);
    if (in.distance == nullptr) return out;
    const ScalarGrid& dist = *in.distance;
    const int h = u0.height();
    const int w = u0.width();

    if (toggles.contrast && !samples.contrast.empty()) {
        const ScalarGrid& grad_img = *in.gradient;
        const double inv_pairs = 1.0 / static_cast<double>(samples.contrast.size());
        double sum = 0.0;
        for (const auto& pair : samples.contrast) {
            const double gate = contrast_gate(dist[pair.i], dist[pair.j], params);
            if (gate == 0.0) continue;
            const auto line_i =
                normal_line_samples(pair.i, boundary_normal(dist, pair.i), config.normal_radius, h, w);
            const auto line_j =
                normal_line_samples(pair.j, boundary_normal(dist, pair.j), config.normal_radius, h, w);
            const auto agg_i = normal_aggregate(grad_img, u0, line_i);
            const auto agg_j = normal_aggregate(grad_img, u0, line_j);
            const auto pg = contrast_pair_loss_grad(agg_i.u_bar, agg_j.u_bar, agg_i.g_tilde, agg_j.g_tilde);
            sum += gate * pg.value;
            if (pg.value == 0.0) continue;
            const double wi = gate * pg.d_first * inv_pairs / static_cast<double>(line_i.samples.size());
            const double wj = gate * pg.d_second * inv_pairs / static_cast<double>(line_j.samples.size());
            for (const auto& p : line_i.samples) out.grad[0][u0.index(p)] += wi;
            for (const auto& p : line_j.samples) out.grad[0][u0.index(p)] += wj;
        }
        out.phi_g = sum * inv_pairs;
    }

    if (toggles.corruption && !samples.corruption.empty()) {
        const double inv = 1.0 / static_cast<double>(samples.corruption.size());
        double sum = 0.0;
        for (const auto& anchor : samples.corruption) {
            const double gate = corruption_gate(dist[anchor], params);
            if (gate == 0.0) continue;
            std::array<double, 3> u_bars{};
            for (int lvl = 0; lvl < 3; ++lvl) u_bars[lvl] = patch_mean_uncertainty(*in.u[lvl], anchor, config.patch);
            std::array<double, 3> g{};
            const double loss = corruption_pixel_loss_grad(u_bars, schedule, g);
            sum += gate * loss;
            if (loss == 0.0) continue;
            const auto patch = patch_pixels(anchor, config.patch, h, w);
            const double scale = gate * inv / static_cast<double>(patch.size());
            for (int lvl = 0; lvl < 3; ++lvl) {
                if (g[lvl] == 0.0) continue;
                for (const auto& p : patch) out.grad[lvl][u0.index(p)] += scale * g[lvl];
            }
        }
        out.phi_sigma = sum * inv;
    }

    if (toggles.geometry && !samples.geometry.empty()) {
        const double inv = 1.0 / static_cast<double>(samples.geometry.size());
        double sum = 0.0;
        for (const auto& pair : samples.geometry) {
            const auto pg = geometry_pair_loss_grad(u0[pair.i], u0[pair.j], dist[pair.i], dist[pair.j], params);
            sum += pg.value;
            if (pg.value == 0.0) continue;
            out.grad[0][u0.index(pair.i)] += pg.d_first * inv;
            out.grad[0][u0.index(pair.j)] += pg.d_second * inv;
        }
        out.phi_d = sum * inv;
    }

    out.value = out.phi_g + out.phi_sigma + out.phi_d;
    return out;
}

/// Convenience wrapper: derives gradient, boundary distance and samples from the image and labels.
template <typename Rng>
UncertaintyLoss total_uncertainty_loss(const ScalarGrid& u_clean, const std::array<ScalarGrid, 2>& u_noisy,
                                       const ScalarGrid& image, const LabelGrid& labels, const GateParams& params,
                                       const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                                       const SupervisionToggles& toggles = {}) {
    for (const ScalarGrid* g : {&u_noisy[0], &u_noisy[1], &image})
        if (!g->same_shape(u_clean)) throw std::invalid_argument("supervision inputs must share one shape");
    if (!labels.same_shape(u_clean)) throw std::invalid_argument("labels must match the uncertainty shape");
    const auto distance = boundary_distance(labels);
    const ScalarGrid gradient = gradient_magnitude(image);
    SupervisionInputs in{{&u_clean, &u_noisy[0], &u_noisy[1]}, &gradient, distance ? &*distance : nullptr};
    if (!distance) {
        UncertaintyLoss out;
        for (auto& g : out.grad) g.assign(u_clean.size(), 0.0);
        return out;
    }
    const auto samples = sample_supervision(labels, *distance, params, config, rng);
    return uncertainty_loss(in, samples, params, schedule, config, toggles);
}

}  // namespace prius

#endif  // PRIUS_SUPERVISION_HPP
