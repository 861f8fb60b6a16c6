#ifndef PRIUS_EVIDENTIAL_HPP
#define PRIUS_EVIDENTIAL_HPP

// Subjective-logic Dirichlet head: alpha = e + W r, p = alpha / S, u = C / S,
// with the evidential segmentation losses and the training schedules.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prius/grid.hpp"
#include "prius/special.hpp"
#include "prius/supervision.hpp"

namespace prius {

/// Per-pixel length-C vectors stored class-major: value(c, k) at c * pixels + k.
class ClassField {
public:
    ClassField() = default;
    ClassField(int classes, int height, int width, double fill = 0.0)
        : classes_(classes), height_(height), width_(width),
          data_(static_cast<std::size_t>(classes) * height * width, fill) {
        if (classes < 1 || height <= 0 || width <= 0) throw std::invalid_argument("bad class field shape");
    }
    ClassField(int classes, int height, int width, std::vector<double> data)
        : classes_(classes), height_(height), width_(width), data_(std::move(data)) {
        if (classes < 1 || height <= 0 || width <= 0) throw std::invalid_argument("bad class field shape");
        if (data_.size() != static_cast<std::size_t>(classes) * height * width)
            throw std::invalid_argument("class field value count mismatch");
    }

    int classes() const noexcept { return classes_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }

    double& operator()(int c, std::size_t k) noexcept { return data_[c * pixels() + k]; }
    double operator()(int c, std::size_t k) const noexcept { return data_[c * pixels() + k]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool same_shape(const ClassField& o) const noexcept {
        return classes_ == o.classes_ && height_ == o.height_ && width_ == o.width_;
    }
    bool matches(const LabelGrid& labels) const noexcept {
        return height_ == labels.height() && width_ == labels.width() && classes_ == labels.num_classes();
    }

    friend bool operator==(const ClassField&, const ClassField&) = default;

private:
    int classes_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

struct BaseRate {
    std::vector<double> r;

    int classes() const noexcept { return static_cast<int>(r.size()); }

    void validate() const {
        if (r.size() < 2) throw std::invalid_argument("base rate needs at least two classes");
        double sum = 0.0;
        for (double v : r) {
            if (!(v >= 0.0)) throw std::invalid_argument("base rate entries must be non-negative");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("base rate must sum to one");
    }

    static BaseRate uniform(int classes) { return {std::vector<double>(static_cast<std::size_t>(classes), 1.0 / classes)}; }
};

/// Smoothed class frequencies: (count_c + eps) / (total + C eps).
inline BaseRate base_rate_from_labels(std::span<const LabelGrid> labels, double eps = 1.0) {
    if (labels.empty()) throw std::invalid_argument("base rate needs at least one label grid");
    const int classes = labels.front().num_classes();
    std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
    double total = 0.0;
    for (const auto& grid : labels) {
        if (grid.num_classes() != classes) throw std::invalid_argument("label grids disagree on class count");
        for (std::uint8_t v : grid.values()) counts[v] += 1.0;
        total += static_cast<double>(grid.size());
    }
    BaseRate out;
    for (double c : counts) out.r.push_back((c + eps) / (total + classes * eps));
    return out;
}

struct DirichletField {
    ClassField alpha;
    double weight = 0.0;

    int classes() const noexcept { return alpha.classes(); }
    double strength(std::size_t k) const noexcept {
        double s = 0.0;
        for (int c = 0; c < alpha.classes(); ++c) s += alpha(c, k);
        return s;
    }
};

inline DirichletField dirichlet_from_evidence(const ClassField& evidence, const BaseRate& rate, double weight) {
    if (evidence.classes() != rate.classes()) throw std::invalid_argument("evidence and base rate class counts differ");
    if (!(weight > 0.0)) throw std::invalid_argument("Dirichlet prior weight must be positive");
    DirichletField out{ClassField(evidence.classes(), evidence.height(), evidence.width()), weight};
    for (int c = 0; c < evidence.classes(); ++c) {
        for (std::size_t k = 0; k < evidence.pixels(); ++k) {
            const double e = evidence(c, k);
            if (!(e >= 0.0)) throw std::invalid_argument("evidence must be non-negative");
            out.alpha(c, k) = e + weight * rate.r[c];
        }
    }
    return out;
}

struct ExpectedOutput {
    ClassField probs;
    ScalarGrid uncertainty;
};

inline ExpectedOutput expected_prob_and_uncertainty(const DirichletField& field) {
    const auto& a = field.alpha;
    ExpectedOutput out{ClassField(a.classes(), a.height(), a.width()), ScalarGrid(a.height(), a.width())};
    for (std::size_t k = 0; k < a.pixels(); ++k) {
        const double s = field.strength(k);
        for (int c = 0; c < a.classes(); ++c) out.probs(c, k) = a(c, k) / s;
        out.uncertainty.values()[k] = a.classes() / s;
    }
    return out;
}

/// Argmax of the expected probabilities (lowest class index wins ties).
inline LabelGrid predicted_labels(const ClassField& probs) {
    LabelGrid out(probs.height(), probs.width(), std::max(2, probs.classes()));
    for (std::size_t k = 0; k < probs.pixels(); ++k) {
        int best = 0;
        for (int c = 1; c < probs.classes(); ++c)
            if (probs(c, k) > probs(best, k)) best = c;
        out.values()[k] = static_cast<std::uint8_t>(best);
    }
    return out;
}

struct FieldLoss {
    double value = 0.0;
    ClassField grad;  // with respect to the loss argument (alpha or probs)
};

/// mean_i [psi(S_i) - psi(alpha_{i,y_i})]
inline FieldLoss evidential_ce_loss_grad(const DirichletField& field, const LabelGrid& labels) {
    const auto& a = field.alpha;
    if (!a.matches(labels)) throw std::invalid_argument("Dirichlet field and labels disagree in shape");
    FieldLoss out{0.0, ClassField(a.classes(), a.height(), a.width())};
    const double inv = 1.0 / static_cast<double>(a.pixels());
    for (std::size_t k = 0; k < a.pixels(); ++k) {
        const int y = labels.values()[k];
        const double s = field.strength(k);
        out.value += digamma(s) - digamma(a(y, k));
        const double ts = trigamma(s) * inv;
        for (int c = 0; c < a.classes(); ++c) out.grad(c, k) = ts;
        out.grad(y, k) -= trigamma(a(y, k)) * inv;
    }
    out.value *= inv;
    return out;
}

inline double evidential_ce_loss(const DirichletField& field, const LabelGrid& labels) {
    return evidential_ce_loss_grad(field, labels).value;
}

inline constexpr double kDiceSmoothing = 1e-5;

/// 1 - mean over present foreground classes of (2 I + s) / (P + Y + s); 0 when none is present.
inline FieldLoss evidential_dice_loss_grad(const ClassField& probs, const LabelGrid& labels) {
    if (!probs.matches(labels)) throw std::invalid_argument("probabilities and labels disagree in shape");
    FieldLoss out{0.0, ClassField(probs.classes(), probs.height(), probs.width())};
    std::vector<int> present;
    for (int c = 1; c < probs.classes(); ++c)
        if (labels.count(c) > 0) present.push_back(c);
    if (present.empty()) return out;

    const double inv_classes = 1.0 / static_cast<double>(present.size());
    double score = 0.0;
    for (int c : present) {
        double inter = 0.0, p_sum = 0.0, y_sum = 0.0;
        for (std::size_t k = 0; k < probs.pixels(); ++k) {
            const double y = labels.values()[k] == c ? 1.0 : 0.0;
            inter += probs(c, k) * y;
            p_sum += probs(c, k);
            y_sum += y;
        }
        const double num = 2.0 * inter + kDiceSmoothing;
        const double den = p_sum + y_sum + kDiceSmoothing;
        score += num / den;
        for (std::size_t k = 0; k < probs.pixels(); ++k) {
            const double y = labels.values()[k] == c ? 1.0 : 0.0;
            // d(1 - mean D)/dp = -(2 y den - num) / den^2 / |present|
            out.grad(c, k) = -(2.0 * y * den - num) / (den * den) * inv_classes;
        }
    }
    out.value = 1.0 - score * inv_classes;
    return out;
}

inline double evidential_dice_loss(const ClassField& probs, const LabelGrid& labels) {
    return evidential_dice_loss_grad(probs, labels).value;
}

/// mean_i KL(Dir(alpha~_i) || Dir(1)) with alpha~ = y + (1 - y) * alpha.
inline FieldLoss kl_regularizer_grad(const DirichletField& field, const LabelGrid& labels) {
    const auto& a = field.alpha;
    if (!a.matches(labels)) throw std::invalid_argument("Dirichlet field and labels disagree in shape");
    const int classes = a.classes();
    FieldLoss out{0.0, ClassField(classes, a.height(), a.width())};
    const double inv = 1.0 / static_cast<double>(a.pixels());
    const double log_gamma_c = log_gamma(static_cast<double>(classes));
    std::vector<double> tilde(static_cast<std::size_t>(classes));
    for (std::size_t k = 0; k < a.pixels(); ++k) {
        const int y = labels.values()[k];
        double s = 0.0, excess = 0.0;
        for (int c = 0; c < classes; ++c) {
            tilde[c] = c == y ? 1.0 : a(c, k);
            s += tilde[c];
            excess += tilde[c] - 1.0;
        }
        const double psi_s = digamma(s);
        double kl = log_gamma(s) - log_gamma_c;
        for (int c = 0; c < classes; ++c) kl += -log_gamma(tilde[c]) + (tilde[c] - 1.0) * (digamma(tilde[c]) - psi_s);
        out.value += kl;
        const double tri_s = trigamma(s);
        for (int c = 0; c < classes; ++c) {
            if (c == y) continue;
            out.grad(c, k) = ((tilde[c] - 1.0) * trigamma(tilde[c]) - tri_s * excess) * inv;
        }
    }
    out.value *= inv;
    return out;
}

inline double kl_regularizer(const DirichletField& field, const LabelGrid& labels) {
    return kl_regularizer_grad(field, labels).value;
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

inline double kl_weight(int epoch) {
    if (epoch < 0) throw std::invalid_argument("epoch must be non-negative");
    return std::min(1.0, epoch / 20.0);
}

/// alpha0 * exp(-(ln alpha0 / T) t): ramps from alpha0 at t = 0 to 1 at t = T.
inline double anneal_alpha(int epoch, int total_epochs, double alpha0) {
    if (total_epochs <= 0) throw std::invalid_argument("total epochs must be positive");
    if (epoch < 0 || epoch > total_epochs) throw std::invalid_argument("epoch outside [0, T]");
    if (!(alpha0 > 0.0 && alpha0 < 1.0)) throw std::invalid_argument("alpha0 must lie in (0, 1)");
    return alpha0 * std::exp(-(std::log(alpha0) / total_epochs) * epoch);
}

/// Supervision coefficients as multiples of the annealing factor (lambda = multiplier * alpha).
struct CoefficientScheme {
    double lambda_g = 1.0;
    double lambda_sigma = 1.0;
    double lambda_f = 100.0;
};

struct LossWeights {
    double lambda_ce = 1.0;
    double lambda_dice = 1.0;
    double lambda_kl = 0.0;
    double anneal = 1.0;
    double lambda_g = 0.0;
    double lambda_sigma = 0.0;
    double lambda_f = 0.0;
};

inline LossWeights weights_at(int epoch, int total_epochs, double alpha0, const CoefficientScheme& scheme) {
    LossWeights w;
    w.anneal = anneal_alpha(epoch, total_epochs, alpha0);
    w.lambda_kl = kl_weight(epoch);
    w.lambda_dice = 1.0 - w.anneal;
    w.lambda_g = scheme.lambda_g * w.anneal;
    w.lambda_sigma = scheme.lambda_sigma * w.anneal;
    w.lambda_f = scheme.lambda_f * w.anneal;
    return w;
}

// ---------------------------------------------------------------------------
// Total objective for one image
// ---------------------------------------------------------------------------

/// Everything the objective needs besides the three evidence maps.
struct ObjectiveContext {
    const LabelGrid* labels = nullptr;
    const ScalarGrid* gradient = nullptr;        // Sobel magnitude of the clean image
    const ScalarGrid* distance = nullptr;        // null when the labels have no boundary
    const SupervisionSamples* samples = nullptr;
    BaseRate rate;
    double prior_weight = 0.0;  // W; the class count when left at 0
    GateParams gates;           // lambda fields are overwritten from the weights
    NoiseSchedule schedule;
    SamplerConfig sampler;
    SupervisionToggles toggles;
    LossWeights weights;
};

struct ObjectiveTerms {
    double total = 0.0;
    double ce = 0.0;
    double dice = 0.0;
    double kl = 0.0;
    UncertaintyLoss supervision;
    std::array<ClassField, 3> grad;  // d total / d evidence per pass
};

/// lambda_CE CE + lambda_Dice Dice + lambda_KL KL + L_u on the clean pass plus the two
/// corrupted passes (which only enter through L_u). evidence[1..2] may be null when the
/// corruption term is toggled off.
inline ObjectiveTerms total_loss(std::array<const ClassField*, 3> evidence, const ObjectiveContext& ctx) {
    const LabelGrid& labels = *ctx.labels;
    const double weight = ctx.prior_weight > 0.0 ? ctx.prior_weight : static_cast<double>(labels.num_classes());
    ObjectiveTerms out;

    std::array<DirichletField, 3> fields;
    std::array<ExpectedOutput, 3> expected;
    const int passes = evidence[1] && evidence[2] ? 3 : 1;
    for (int p = 0; p < passes; ++p) {
        fields[p] = dirichlet_from_evidence(*evidence[p], ctx.rate, weight);
        expected[p] = expected_prob_and_uncertainty(fields[p]);
        out.grad[p] = ClassField(fields[p].classes(), labels.height(), labels.width());
    }
    const auto& alpha0 = fields[0].alpha;
    ClassField& g0 = out.grad[0];

    {
        auto ce = evidential_ce_loss_grad(fields[0], labels);
        out.ce = ce.value;
        for (std::size_t i = 0; i < g0.data().size(); ++i) g0.data()[i] += ctx.weights.lambda_ce * ce.grad.data()[i];
    }
    {
        auto dice = evidential_dice_loss_grad(expected[0].probs, labels);
        out.dice = dice.value;
        // chain through p_c = alpha_c / S
        for (std::size_t k = 0; k < alpha0.pixels(); ++k) {
            const double s = fields[0].strength(k);
            double dot = 0.0;
            for (int c = 0; c < alpha0.classes(); ++c) dot += dice.grad(c, k) * expected[0].probs(c, k);
            for (int c = 0; c < alpha0.classes(); ++c)
                g0(c, k) += ctx.weights.lambda_dice * (dice.grad(c, k) - dot) / s;
        }
    }
    {
        auto kl = kl_regularizer_grad(fields[0], labels);
        out.kl = kl.value;
        for (std::size_t i = 0; i < g0.data().size(); ++i) g0.data()[i] += ctx.weights.lambda_kl * kl.grad.data()[i];
    }

    const bool any_supervision = ctx.toggles.contrast || ctx.toggles.corruption || ctx.toggles.geometry;
    if (any_supervision && ctx.distance != nullptr && ctx.samples != nullptr) {
        GateParams gates = ctx.gates;
        gates.lambda_g = ctx.weights.lambda_g;
        gates.lambda_sigma = ctx.weights.lambda_sigma;
        gates.lambda_f = ctx.weights.lambda_f;
        SupervisionToggles toggles = ctx.toggles;
        if (passes < 3) toggles.corruption = false;
        SupervisionInputs in{{&expected[0].uncertainty, passes == 3 ? &expected[1].uncertainty : &expected[0].uncertainty,
                              passes == 3 ? &expected[2].uncertainty : &expected[0].uncertainty},
                             ctx.gradient, ctx.distance};
        out.supervision = uncertainty_loss(in, *ctx.samples, gates, ctx.schedule, ctx.sampler, toggles);
        // u = C / S  =>  du/dalpha_c = -C / S^2 for every c
        for (int p = 0; p < passes; ++p) {
            const auto& gu = out.supervision.grad[p];
            for (std::size_t k = 0; k < gu.size(); ++k) {
                if (gu[k] == 0.0) continue;
                const double s = fields[p].strength(k);
                const double d = -gu[k] * fields[p].classes() / (s * s);
                for (int c = 0; c < fields[p].classes(); ++c) out.grad[p](c, k) += d;
            }
        }
    }

    out.total = ctx.weights.lambda_ce * out.ce + ctx.weights.lambda_dice * out.dice +
                ctx.weights.lambda_kl * out.kl + out.supervision.value;
    return out;
}

}  // namespace prius

#endif  // PRIUS_EVIDENTIAL_HPP
