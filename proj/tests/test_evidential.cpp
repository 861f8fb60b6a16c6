#include <gtest/gtest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <random>

#include "prius/evidential.hpp"

using namespace prius;
namespace bm = boost::math;

namespace {

ClassField random_positive(std::mt19937_64& rng, int classes, int h, int w, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    ClassField f(classes, h, w);
    for (double& v : f.data()) v = u(rng);
    return f;
}

LabelGrid random_labels(std::mt19937_64& rng, int classes, int h, int w) {
    LabelGrid l(h, w, classes);
    for (auto& v : l.values()) v = static_cast<std::uint8_t>(rng() % classes);
    return l;
}

double kl_oracle(const std::vector<double>& a) {
    double s = 0.0;
    for (double v : a) s += v;
    double kl = bm::lgamma(s) - bm::lgamma(static_cast<double>(a.size()));
    for (double v : a) kl += -bm::lgamma(v) + (v - 1.0) * (bm::digamma(v) - bm::digamma(s));
    return kl;
}

}  // namespace

TEST(Special, DigammaAgainstBoost) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> lx(-6, 6);
    for (int k = 0; k < 2000; ++k) {
        const double x = std::exp(lx(rng));
        EXPECT_LE(std::abs(digamma(x) - bm::digamma(x)), 1e-12 * std::max(1.0, std::abs(bm::digamma(x)))) << x;
        EXPECT_LE(std::abs(trigamma(x) - bm::trigamma(x)), 1e-12 * std::max(1.0, bm::trigamma(x))) << x;
        EXPECT_LE(std::abs(log_gamma(x) - bm::lgamma(x)), 1e-12 * std::max(1.0, std::abs(bm::lgamma(x)))) << x;
    }
    EXPECT_NEAR(digamma(2.0) - digamma(1.0), 1.0, 1e-14);
    EXPECT_THROW(digamma(0.0), std::domain_error);
}

TEST(BaseRate, Examples) {
    LabelGrid half(2, 2, 2, std::vector<std::uint8_t>{0, 1, 1, 0});
    const auto r = base_rate_from_labels(std::span<const LabelGrid>(&half, 1));
    EXPECT_DOUBLE_EQ(r.r[0], 0.5);
    EXPECT_DOUBLE_EQ(r.r[1], 0.5);

    std::vector<std::uint8_t> v(100, 0);
    v[10] = 1;
    v[20] = 2;
    const std::vector<LabelGrid> grids{LabelGrid(10, 10, 3, v)};
    const auto s = base_rate_from_labels(grids);
    EXPECT_NEAR(s.r[0], 99.0 / 103, 1e-15);
    EXPECT_NEAR(s.r[1], 2.0 / 103, 1e-15);
    EXPECT_NEAR(s.r[2], 2.0 / 103, 1e-15);
    EXPECT_NO_THROW(s.validate());

    const std::vector<LabelGrid> absent{LabelGrid(4, 4, 3, 0)};
    EXPECT_GT(base_rate_from_labels(absent).r[2], 0.0);
    EXPECT_THROW(base_rate_from_labels(std::span<const LabelGrid>{}), std::invalid_argument);
}

TEST(Dirichlet, Examples) {
    const BaseRate half{{0.5, 0.5}};
    ClassField zero(2, 1, 1, std::vector<double>{0, 0});
    const auto a = dirichlet_from_evidence(zero, half, 2.0);
    EXPECT_EQ(a.alpha(0, 0), 1.0);
    EXPECT_EQ(a.alpha(1, 0), 1.0);
    const auto out = expected_prob_and_uncertainty(a);
    EXPECT_EQ(out.probs(0, 0), 0.5);
    EXPECT_EQ(out.uncertainty(0, 0), 1.0);

    ClassField eight(2, 1, 1, std::vector<double>{8, 0});
    const auto b = dirichlet_from_evidence(eight, half, 2.0);
    EXPECT_EQ(b.alpha(0, 0), 9.0);
    EXPECT_EQ(b.alpha(1, 0), 1.0);
    const auto ob = expected_prob_and_uncertainty(b);
    EXPECT_DOUBLE_EQ(ob.probs(0, 0), 0.9);
    EXPECT_DOUBLE_EQ(ob.probs(1, 0), 0.1);
    EXPECT_DOUBLE_EQ(ob.uncertainty(0, 0), 0.2);

    ClassField neg(2, 1, 1, std::vector<double>{-1e-9, 0});
    EXPECT_THROW(dirichlet_from_evidence(neg, half, 2.0), std::invalid_argument);
}

TEST(Dirichlet, PermutationEquivariance) {
    const auto rate = BaseRate::uniform(3);
    ClassField e(3, 1, 1, std::vector<double>{0.3, 2.0, 5.5});
    ClassField p(3, 1, 1, std::vector<double>{5.5, 0.3, 2.0});
    const auto a = dirichlet_from_evidence(e, rate, 3.0);
    const auto b = dirichlet_from_evidence(p, rate, 3.0);
    EXPECT_EQ(a.alpha(0, 0), b.alpha(1, 0));
    EXPECT_EQ(a.alpha(1, 0), b.alpha(2, 0));
    EXPECT_EQ(a.alpha(2, 0), b.alpha(0, 0));
}

TEST(Dirichlet, SimplexAndUncertaintyProperties) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const int classes = 2 + trial % 4;
        const auto ev = random_positive(rng, classes, 5, 6, 0.0, 20.0);
        std::vector<double> raw(classes);
        for (double& v : raw) v = 0.1 + static_cast<double>(rng() % 100);
        double total = 0;
        for (double v : raw) total += v;
        BaseRate rate;
        for (double v : raw) rate.r.push_back(v / total);
        const double W = classes;
        const auto f = dirichlet_from_evidence(ev, rate, W);
        const auto o = expected_prob_and_uncertainty(f);
        const double rmin = *std::min_element(rate.r.begin(), rate.r.end());
        for (std::size_t k = 0; k < f.alpha.pixels(); ++k) {
            double s = 0;
            for (int c = 0; c < classes; ++c) s += o.probs(c, k);
            EXPECT_NEAR(s, 1.0, 1e-9);
            EXPECT_NEAR(o.uncertainty.values()[k] * f.strength(k), classes, 1e-9);
            EXPECT_GT(o.uncertainty.values()[k], 0.0);
            EXPECT_LE(o.uncertainty.values()[k], classes / (W * rmin) + 1e-12);
        }
        // more evidence on any class lowers u; doubling alpha halves u
        ClassField more = ev;
        more(static_cast<int>(rng() % classes), 3) += 0.5;
        EXPECT_LT(expected_prob_and_uncertainty(dirichlet_from_evidence(more, rate, W)).uncertainty.values()[3],
                  o.uncertainty.values()[3]);
        DirichletField doubled = f;
        for (double& v : doubled.alpha.data()) v *= 2.0;
        const auto od = expected_prob_and_uncertainty(doubled);
        EXPECT_NEAR(od.uncertainty.values()[0], 0.5 * o.uncertainty.values()[0], 1e-15);
        EXPECT_NEAR(od.probs(0, 0), o.probs(0, 0), 1e-15);
    }
}

TEST(CrossEntropy, Examples) {
    DirichletField f{ClassField(2, 1, 1, std::vector<double>{1, 1}), 2.0};
    LabelGrid y0(1, 1, 2, 0), y1(1, 1, 2, 1);
    EXPECT_NEAR(evidential_ce_loss(f, y0), 1.0, 1e-14);
    EXPECT_EQ(evidential_ce_loss(f, y0), evidential_ce_loss(f, y1));
    DirichletField sure{ClassField(2, 1, 1, std::vector<double>{1e9, 1}), 2.0};
    EXPECT_LT(evidential_ce_loss(sure, y0), 1e-8);
}

TEST(Dice, Examples) {
    LabelGrid y(2, 4, 2, std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1});
    ClassField onehot(2, 2, 4);
    for (std::size_t k = 0; k < 8; ++k) onehot(y.values()[k], k) = 1.0;
    EXPECT_NEAR(evidential_dice_loss(onehot, y), 0.0, 1e-12);
    ClassField half(2, 2, 4, 0.5);
    const double A = 4.0, s = kDiceSmoothing;
    EXPECT_NEAR(evidential_dice_loss(half, y), 1.0 - (2 * 0.5 * A + s) / (0.5 * 2 * A + A + s), 1e-15);
    EXPECT_NEAR(evidential_dice_loss(half, y), 0.5, 1e-5);
    EXPECT_EQ(evidential_dice_loss(half, LabelGrid(2, 4, 2, 0)), 0.0);
}

TEST(KL, Examples) {
    LabelGrid y0(1, 1, 2, 0);
    DirichletField ones{ClassField(2, 1, 1, 1.0), 2.0};
    EXPECT_NEAR(kl_regularizer(ones, y0), 0.0, 1e-14);
    DirichletField right{ClassField(2, 1, 1, std::vector<double>{5, 1}), 2.0};
    EXPECT_NEAR(kl_regularizer(right, y0), 0.0, 1e-14);
    DirichletField wrong{ClassField(2, 1, 1, std::vector<double>{1, 5}), 2.0};
    const double expect = std::log(120.0 / (1.0 * 24.0 * 1.0)) + 4.0 * (bm::digamma(5.0) - bm::digamma(6.0));
    EXPECT_NEAR(kl_regularizer(wrong, y0), expect, 1e-12);
    EXPECT_NEAR(expect, std::log(5.0) - 0.8, 1e-14);
    EXPECT_GT(expect, 0.0);
}

TEST(Losses, MatchOraclesOnRandomFields) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int classes = 2 + trial % 3;
        const auto labels = random_labels(rng, classes, 4, 5);
        DirichletField f{random_positive(rng, classes, 4, 5, 0.2, 9.0), double(classes)};
        double ce = 0, kl = 0;
        for (std::size_t k = 0; k < 20; ++k) {
            const int y = labels.values()[k];
            std::vector<double> tilde(classes);
            double s = 0;
            for (int c = 0; c < classes; ++c) {
                s += f.alpha(c, k);
                tilde[c] = c == y ? 1.0 : f.alpha(c, k);
            }
            ce += bm::digamma(s) - bm::digamma(f.alpha(y, k));
            kl += kl_oracle(tilde);
        }
        EXPECT_NEAR(evidential_ce_loss(f, labels), ce / 20, 1e-12);
        EXPECT_NEAR(kl_regularizer(f, labels), kl / 20, 1e-12);
        EXPECT_GE(kl_regularizer(f, labels), 0.0);
    }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(4);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int classes = 2 + trial % 3;
        auto labels = random_labels(rng, classes, 3, 4);
        labels.values()[0] = 1;
        DirichletField f{random_positive(rng, classes, 3, 4, 0.5, 6.0), double(classes)};
        const auto probs = expected_prob_and_uncertainty(f).probs;
        const auto ce = evidential_ce_loss_grad(f, labels);
        const auto kl = kl_regularizer_grad(f, labels);
        const auto dice = evidential_dice_loss_grad(probs, labels);
        for (std::size_t i = 0; i < f.alpha.data().size(); ++i) {
            const double h = 1e-5;
            auto at = [&](double delta) {
                DirichletField g = f;
                g.alpha.data()[i] += delta;
                return std::pair{evidential_ce_loss(g, labels), kl_regularizer(g, labels)};
            };
            const auto [cp, kp] = at(h);
            const auto [cm, km] = at(-h);
            for (auto [fd, an] : {std::pair{(cp - cm) / (2 * h), ce.grad.data()[i]}, {(kp - km) / (2 * h), kl.grad.data()[i]}}) {
                const double rel = std::abs(fd - an) / std::max(std::abs(an), 1e-6);
                worst = std::max(worst, rel);
                EXPECT_LE(rel, 1e-4) << fd << " vs " << an;
            }
            ClassField pp = probs, pm = probs;
            pp.data()[i] += h;
            pm.data()[i] -= h;
            const double fd = (evidential_dice_loss(pp, labels) - evidential_dice_loss(pm, labels)) / (2 * h);
            EXPECT_LE(std::abs(fd - dice.grad.data()[i]), 1e-4 * std::max(std::abs(fd), 1e-6));
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Schedules, Examples) {
    EXPECT_EQ(kl_weight(10), 0.5);
    EXPECT_EQ(kl_weight(0), 0.0);
    EXPECT_EQ(kl_weight(40), 1.0);
    EXPECT_EQ(kl_weight(20), 1.0);
    EXPECT_NEAR(anneal_alpha(0, 60, 0.01), 0.01, 1e-15);
    EXPECT_NEAR(anneal_alpha(60, 60, 0.01), 1.0, 1e-14);
    EXPECT_NEAR(anneal_alpha(30, 60, 0.01), 0.1, 1e-15);
    EXPECT_THROW(anneal_alpha(61, 60, 0.01), std::invalid_argument);
    for (int t = 0; t < 60; ++t) {
        EXPECT_LT(anneal_alpha(t, 60, 0.01), anneal_alpha(t + 1, 60, 0.01));
        EXPECT_GE(anneal_alpha(t, 60, 0.01), 0.01 - 1e-15);
    }
    const auto w = weights_at(60, 60, 0.01, CoefficientScheme{});
    EXPECT_NEAR(w.lambda_dice, 0.0, 1e-14);
    EXPECT_EQ(w.lambda_kl, 1.0);
    EXPECT_NEAR(w.lambda_f, 100.0, 1e-12);
}

TEST(TotalLoss, OnlyCrossEntropy) {
    std::mt19937_64 rng(5);
    const auto labels = random_labels(rng, 3, 4, 4);
    const auto ev = random_positive(rng, 3, 4, 4, 0.0, 5.0);
    ObjectiveContext ctx;
    ctx.labels = &labels;
    ctx.rate = BaseRate::uniform(3);
    ctx.weights = LossWeights{1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0};
    const auto t = total_loss({&ev, nullptr, nullptr}, ctx);
    EXPECT_EQ(t.total, evidential_ce_loss(dirichlet_from_evidence(ev, ctx.rate, 3.0), labels));
}

TEST(TotalLoss, HandBuiltFourByFour) {
    LabelGrid labels(4, 4, 2, std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1, 0, 1, 1, 1, 0, 0, 0, 1});
    std::mt19937_64 rng(6);
    std::array<ClassField, 3> ev{random_positive(rng, 2, 4, 4, 0.0, 4.0), random_positive(rng, 2, 4, 4, 0.0, 4.0),
                                 random_positive(rng, 2, 4, 4, 0.0, 4.0)};
    ScalarGrid image(4, 4);
    for (std::size_t k = 0; k < 16; ++k) image.values()[k] = labels.values()[k] * 0.6 + 0.05 * (k % 3);
    const auto grad = gradient_magnitude(image);
    const auto dist = *boundary_distance(labels);
    SamplerConfig sc;
    sc.contrast_pairs = sc.geometry_pairs = sc.corruption_pixels = 8;
    sc.normal_radius = 1;
    GateParams gates;
    const auto samples = sample_supervision(labels, dist, gates, sc, rng);

    ObjectiveContext ctx;
    ctx.labels = &labels;
    ctx.gradient = &grad;
    ctx.distance = &dist;
    ctx.samples = &samples;
    ctx.rate = BaseRate{{0.6, 0.4}};
    ctx.gates = gates;
    ctx.sampler = sc;
    ctx.weights = weights_at(7, 20, 0.01, CoefficientScheme{});
    const auto t = total_loss({&ev[0], &ev[1], &ev[2]}, ctx);

    // independent sum of the four components
    double ce = 0, kl = 0;
    std::array<ScalarGrid, 3> u{ScalarGrid(4, 4), ScalarGrid(4, 4), ScalarGrid(4, 4)};
    double inter = 0, psum = 0, ysum = 0;
    for (int p = 0; p < 3; ++p)
        for (std::size_t k = 0; k < 16; ++k) {
            const double a0 = ev[p](0, k) + 2 * 0.6, a1 = ev[p](1, k) + 2 * 0.4;
            u[p].values()[k] = 2.0 / (a0 + a1);
            if (p != 0) continue;
            const int y = labels.values()[k];
            const double ay = y ? a1 : a0;
            ce += bm::digamma(a0 + a1) - bm::digamma(ay);
            kl += kl_oracle({1.0, y ? a0 : a1});
            inter += y * a1 / (a0 + a1);
            psum += a1 / (a0 + a1);
            ysum += y;
        }
    const double dice = 1.0 - (2 * inter + 1e-5) / (psum + ysum + 1e-5);
    GateParams g = gates;
    g.lambda_g = ctx.weights.lambda_g;
    g.lambda_sigma = ctx.weights.lambda_sigma;
    g.lambda_f = ctx.weights.lambda_f;
    const auto lu = uncertainty_loss({{&u[0], &u[1], &u[2]}, &grad, &dist}, samples, g, NoiseSchedule{}, sc);
    const double expect = ce / 16 + ctx.weights.lambda_dice * dice + ctx.weights.lambda_kl * kl / 16 + lu.value;
    EXPECT_NEAR(t.total, expect, 1e-12);
    EXPECT_NEAR(t.ce, ce / 16, 1e-13);
    EXPECT_NEAR(t.dice, dice, 1e-13);
    EXPECT_NEAR(t.kl, kl / 16, 1e-13);
}

TEST(TotalLoss, EvidenceGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    int compared = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 8;
        LabelGrid labels(n, n, 3);
        const int cut = 2 + trial % 4;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) labels(r, c) = static_cast<std::uint8_t>(c < cut ? 0 : (r < 4 ? 1 : 2));
        std::array<ClassField, 3> ev{random_positive(rng, 3, n, n, 0.0, 3.0), random_positive(rng, 3, n, n, 0.0, 3.0),
                                     random_positive(rng, 3, n, n, 0.0, 3.0)};
        ScalarGrid image(n, n);
        for (std::size_t k = 0; k < image.size(); ++k) image.values()[k] = 0.3 * labels.values()[k] + 0.01 * (rng() % 7);
        const auto grad = gradient_magnitude(image);
        const auto dist = *boundary_distance(labels);
        SamplerConfig sc;
        sc.contrast_pairs = sc.geometry_pairs = sc.corruption_pixels = 16;
        GateParams gates = GateParams::around_reference(2.0, 1.0);
        const auto samples = sample_supervision(labels, dist, gates, sc, rng);
        ObjectiveContext ctx;
        ctx.labels = &labels;
        ctx.gradient = &grad;
        ctx.distance = &dist;
        ctx.samples = &samples;
        ctx.rate = BaseRate{{0.5, 0.3, 0.2}};
        ctx.gates = gates;
        ctx.sampler = sc;
        ctx.weights = weights_at(trial, 20, 0.01, CoefficientScheme{2.0, 50.0, 5.0});
        const auto base = total_loss({&ev[0], &ev[1], &ev[2]}, ctx);
        for (int p = 0; p < 3; ++p)
            for (std::size_t i = 0; i < ev[p].data().size(); i += 5) {
                const double h = 1e-6;
                auto f = [&](double delta) {
                    auto e = ev;
                    e[p].data()[i] += delta;
                    return total_loss({&e[0], &e[1], &e[2]}, ctx).total;
                };
                const double fp = f(h), fm = f(-h);
                const double fwd = (fp - base.total) / h, bwd = (base.total - fm) / h;
                if (std::abs(fwd - bwd) > 1e-4 * std::max(1.0, std::abs(fwd))) continue;  // hinge kink
                const double fd = (fp - fm) / (2 * h);
                const double an = base.grad[p].data()[i];
                EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(std::abs(an), 1e-4)) << p << " " << i;
                ++compared;
            }
    }
    EXPECT_GT(compared, 500);
}
