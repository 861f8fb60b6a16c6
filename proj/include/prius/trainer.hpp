#ifndef PRIUS_TRAINER_HPP
#define PRIUS_TRAINER_HPP

// Run configuration, training loop, evaluation, d0 sweep and ablation grid.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "prius/diffnet.hpp"
#include "prius/evidential.hpp"
#include "prius/grid.hpp"
#include "prius/metrics.hpp"
#include "prius/phantom.hpp"
#include "prius/proxy.hpp"
#include "prius/supervision.hpp"

namespace prius {

using nn::Adam;
using nn::AdamConfig;
using nn::CheckpointError;
using nn::EvidenceNet;
using nn::NetworkConfig;
using nn::Tensor;
using nn::backward;
using nn::custom_scalar;
using nn::load_checkpoint;
using nn::save_checkpoint;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    std::uint64_t seed = 1234;
    std::string data_dir = "data";

    // phantoms
    int height = 64;
    int width = 64;
    int classes = 3;
    int n_train = 32;
    int n_val = 8;
    int n_test = 8;
    double background_level = 0.2;
    double outer_contrast = 0.3;
    double inner_contrast = 0.1;
    double contrast_modulation = 1.0;
    double texture_amplitude = 0.08;
    double texture_frequency = 6.0;
    double pre_blur = 0.0;
    double center_jitter = 4.0;
    double core_radius_min = 7.0;
    double core_radius_max = 11.0;
    double ring_thickness_min = 5.0;
    double ring_thickness_max = 9.0;

    // network
    int levels = 3;
    int base_width = 8;

    // supervision
    double gamma = 100.0;
    double d0 = 8.0;
    double delta = 1.0;
    double d_g = 2.0;
    double d_eps = 0.5;
    double coef_g = 1.0;
    double coef_sigma = 1.0;
    double coef_f = 100.0;
    double alpha0 = 0.01;
    double sigma1 = 0.05;
    double sigma2 = 0.10;
    int contrast_pairs = 256;
    int geometry_pairs = 256;
    int corruption_pixels = 256;
    int normal_radius = 2;
    int patch_radius = 1;
    bool use_Lg = true;
    bool use_Lsigma = true;
    bool use_Ld = true;
    bool use_kl = true;

    // optimisation
    int epochs = 60;
    int batch_size = 4;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;

    // evaluation
    double eval_d0 = 8.0;
    int eval_trials = 3;

    PhantomSpec phantom() const {
        PhantomSpec s;
        s.height = height;
        s.width = width;
        s.classes = classes;
        s.background_level = background_level;
        s.outer_contrast = outer_contrast;
        s.inner_contrast = inner_contrast;
        s.contrast_modulation = contrast_modulation;
        s.texture_amplitude = texture_amplitude;
        s.texture_frequency = texture_frequency;
        s.pre_blur = pre_blur;
        s.center_jitter = center_jitter;
        s.core_radius_min = core_radius_min;
        s.core_radius_max = core_radius_max;
        s.ring_thickness_min = ring_thickness_min;
        s.ring_thickness_max = ring_thickness_max;
        s.seed = seed;
        return s;
    }
    SplitCounts split() const { return {n_train, n_val, n_test}; }
    NetworkConfig network() const { return {1, classes, levels, base_width}; }
    GateParams gates() const {
        GateParams g;
        g.gamma = gamma;
        g.d_g = d_g;
        g.d_eps = d_eps;
        return GateParams::around_reference(d0, delta, g);
    }
    NoiseSchedule schedule() const { return {{0.0, sigma1, sigma2}}; }
    SamplerConfig sampler() const {
        return {contrast_pairs, geometry_pairs, corruption_pixels, normal_radius, PatchSpec{patch_radius}};
    }
    SupervisionToggles toggles() const { return {use_Lg, use_Lsigma, use_Ld}; }
    CoefficientScheme scheme() const { return {coef_g, coef_sigma, coef_f}; }
    AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_epsilon}; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        try {
            phantom().validate();
            network().validate();
            gates();
            schedule().validate();
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
        const int div = network().spatial_divisor();
        if (height % div || width % div)
            fail("image size " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by 2^(levels-1) = " +
                 std::to_string(div) + "; change height/width or levels");
        if (n_train < 1 || n_val < 1 || n_test < 1) fail("n_train, n_val and n_test must be >= 1");
        if (d0 - delta < 0.0) fail("d0 - delta must be non-negative");
        if (!(delta > 0.0)) fail("delta must be positive");
        if (!(gamma > 0.0)) fail("gamma must be positive");
        if (!(d_eps > 0.0)) fail("d_eps must be positive");
        if (!(alpha0 > 0.0 && alpha0 < 1.0)) fail("alpha0 must lie in (0, 1)");
        if (coef_g < 0.0 || coef_sigma < 0.0 || coef_f < 0.0) fail("coefficients must be non-negative");
        if (contrast_pairs < 0 || geometry_pairs < 0 || corruption_pixels < 0) fail("sample budgets must be >= 0");
        if (normal_radius < 0 || patch_radius < 0) fail("normal_radius and patch_radius must be >= 0");
        if (epochs < 1) fail("epochs must be >= 1");
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
        if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be positive");
        if (!(eval_d0 >= 0.0)) fail("eval_d0 must be non-negative");
        if (eval_trials < 1) fail("eval_trials must be >= 1");
        if (data_dir.empty()) fail("data_dir must not be empty");
    }
};

namespace detail {

using ConfigField = std::variant<std::uint64_t RunConfig::*, int RunConfig::*, double RunConfig::*, bool RunConfig::*,
                                 std::string RunConfig::*>;

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
    static const std::vector<std::pair<std::string, ConfigField>> fields{
        {"seed", &RunConfig::seed},
        {"data_dir", &RunConfig::data_dir},
        {"height", &RunConfig::height},
        {"width", &RunConfig::width},
        {"classes", &RunConfig::classes},
        {"n_train", &RunConfig::n_train},
        {"n_val", &RunConfig::n_val},
        {"n_test", &RunConfig::n_test},
        {"background_level", &RunConfig::background_level},
        {"outer_contrast", &RunConfig::outer_contrast},
        {"inner_contrast", &RunConfig::inner_contrast},
        {"contrast_modulation", &RunConfig::contrast_modulation},
        {"texture_amplitude", &RunConfig::texture_amplitude},
        {"texture_frequency", &RunConfig::texture_frequency},
        {"pre_blur", &RunConfig::pre_blur},
        {"center_jitter", &RunConfig::center_jitter},
        {"core_radius_min", &RunConfig::core_radius_min},
        {"core_radius_max", &RunConfig::core_radius_max},
        {"ring_thickness_min", &RunConfig::ring_thickness_min},
        {"ring_thickness_max", &RunConfig::ring_thickness_max},
        {"levels", &RunConfig::levels},
        {"base_width", &RunConfig::base_width},
        {"gamma", &RunConfig::gamma},
        {"d0", &RunConfig::d0},
        {"delta", &RunConfig::delta},
        {"d_g", &RunConfig::d_g},
        {"d_eps", &RunConfig::d_eps},
        {"coef_g", &RunConfig::coef_g},
        {"coef_sigma", &RunConfig::coef_sigma},
        {"coef_f", &RunConfig::coef_f},
        {"alpha0", &RunConfig::alpha0},
        {"sigma1", &RunConfig::sigma1},
        {"sigma2", &RunConfig::sigma2},
        {"contrast_pairs", &RunConfig::contrast_pairs},
        {"geometry_pairs", &RunConfig::geometry_pairs},
        {"corruption_pixels", &RunConfig::corruption_pixels},
        {"normal_radius", &RunConfig::normal_radius},
        {"patch_radius", &RunConfig::patch_radius},
        {"use_Lg", &RunConfig::use_Lg},
        {"use_Lsigma", &RunConfig::use_Lsigma},
        {"use_Ld", &RunConfig::use_Ld},
        {"use_kl", &RunConfig::use_kl},
        {"epochs", &RunConfig::epochs},
        {"batch_size", &RunConfig::batch_size},
        {"learning_rate", &RunConfig::learning_rate},
        {"beta1", &RunConfig::beta1},
        {"beta2", &RunConfig::beta2},
        {"adam_epsilon", &RunConfig::adam_epsilon},
        {"eval_d0", &RunConfig::eval_d0},
        {"eval_trials", &RunConfig::eval_trials},
    };
    return fields;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
    auto bad = [&](const char* what) { throw ConfigError("key '" + key + "': expected " + what + ", got '" + value + "'"); };
    std::visit(
        [&](auto member) {
            using T = std::remove_reference_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, std::string>) {
                cfg.*member = value;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (value == "true" || value == "1")
                    cfg.*member = true;
                else if (value == "false" || value == "0")
                    cfg.*member = false;
                else
                    bad("true/false");
            } else {
                std::size_t used = 0;
                try {
                    if constexpr (std::is_same_v<T, double>) {
                        cfg.*member = std::stod(value, &used);
                        if (!std::isfinite(cfg.*member)) bad("a finite real");
                    } else if constexpr (std::is_same_v<T, int>) {
                        cfg.*member = std::stoi(value, &used);
                    } else {
                        if (!value.empty() && value[0] == '-') bad("a non-negative integer");
                        cfg.*member = std::stoull(value, &used);
                    }
                } catch (const std::logic_error&) {
                    bad(std::is_same_v<T, double> ? "a real number" : "an integer");
                }
                if (used != value.size()) bad(std::is_same_v<T, double> ? "a real number" : "an integer");
            }
        },
        it->second);
}

/// Flat `key = value` text; '#' starts a comment. Unknown or repeated keys are errors.
inline RunConfig parse_config(std::istream& in) {
    RunConfig cfg;
    std::map<std::string, int> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (auto [pos, fresh] = seen.emplace(key, lineno); !fresh)
            throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' already set on line " +
                              std::to_string(pos->second));
        try {
            set_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

/// Reads a config file; a relative data_dir is resolved against the file's directory.
inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    RunConfig cfg = parse_config(in);
    std::filesystem::path data = cfg.data_dir;
    if (data.is_relative()) cfg.data_dir = (path.parent_path() / data).lexically_normal().string();
    return cfg;
}

/// Every key with its effective value, in schema order.
inline std::string effective_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << "# effective configuration\n";
    for (const auto& [key, field] : detail::config_fields()) {
        out << key << " = ";
        std::visit(
            [&](auto member) {
                using T = std::remove_reference_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, double>)
                    out << detail::format_real(cfg.*member);
                else if constexpr (std::is_same_v<T, bool>)
                    out << (cfg.*member ? "true" : "false");
                else
                    out << cfg.*member;
            },
            field);
        out << '\n';
    }
    out << "# derived: d_n = " << detail::format_real(cfg.d0 - cfg.delta)
        << ", d_f = " << detail::format_real(cfg.d0 + cfg.delta) << '\n';
    return out.str();
}

// named RNG consumers
enum class Stream : std::uint64_t { init = 1, shuffle = 2, noise = 3, sampler = 4, eval = 5 };

inline std::uint64_t stream_seed(std::uint64_t master, Stream s) {
    return derive_seed(master, (std::uint64_t{1} << 63) + static_cast<std::uint64_t>(s));
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    detail::write_file(path, std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

struct Prediction {
    ScalarGrid uncertainty;
    LabelGrid labels;
};

using Predictor = std::function<Prediction(const ScalarGrid&)>;

inline ClassField evidence_of(const Tensor& evidence, int n) {
    const int c = evidence.dim(1), h = evidence.dim(2), w = evidence.dim(3);
    ClassField out(c, h, w);
    const auto block = static_cast<std::size_t>(c) * h * w;
    const auto src = evidence.values().subspan(static_cast<std::size_t>(n) * block, block);
    std::copy(src.begin(), src.end(), out.data().begin());
    return out;
}

inline Prediction predict_from_evidence(const ClassField& evidence, const BaseRate& rate) {
    const auto field = dirichlet_from_evidence(evidence, rate, static_cast<double>(evidence.classes()));
    auto expected = expected_prob_and_uncertainty(field);
    return {std::move(expected.uncertainty), predicted_labels(expected.probs)};
}

/// Predictor backed by a network; the network is frozen so no graph is recorded.
inline Predictor network_predictor(const EvidenceNet& net, const BaseRate& rate) {
    auto frozen = std::make_shared<EvidenceNet>(net.frozen());
    return [frozen, rate](const ScalarGrid& image) {
        const ScalarGrid one[] = {image};
        const Tensor evidence = frozen->forward(EvidenceNet::batch(one));
        return predict_from_evidence(evidence_of(evidence, 0), rate);
    };
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double total = 0.0, ce = 0.0, dice = 0.0, kl = 0.0;
    double phi_g = 0.0, phi_sigma = 0.0, phi_d = 0.0;
    LossWeights weights;
    MaybeReal val_dsc;
};

inline constexpr const char* kTrainingLogHeader =
    "epoch,total,ce,dice,kl,phi_g,phi_sigma,phi_d,lambda_kl,anneal,lambda_dice,lambda_g,lambda_sigma,lambda_f,val_dsc";

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream out;
    out << kTrainingLogHeader << '\n';
    auto r = detail::format_real;
    for (const auto& e : log) {
        out << e.epoch << ',' << r(e.total) << ',' << r(e.ce) << ',' << r(e.dice) << ',' << r(e.kl) << ','
            << r(e.phi_g) << ',' << r(e.phi_sigma) << ',' << r(e.phi_d) << ',' << r(e.weights.lambda_kl) << ','
            << r(e.weights.anneal) << ',' << r(e.weights.lambda_dice) << ',' << r(e.weights.lambda_g) << ','
            << r(e.weights.lambda_sigma) << ',' << r(e.weights.lambda_f) << ',' << format_metric(e.val_dsc) << '\n';
    }
    return out.str();
}

/// Loss weights for one epoch, with the KL term optionally forced off.
inline LossWeights epoch_weights(const RunConfig& cfg, int epoch) {
    LossWeights w = weights_at(epoch, cfg.epochs, cfg.alpha0, cfg.scheme());
    if (!cfg.use_kl) w.lambda_kl = 0.0;
    return w;
}

/// Image-derived quantities reused every epoch.
struct TrainingItem {
    const DatasetItem* item = nullptr;
    ScalarGrid gradient;
    std::optional<ScalarGrid> distance;
};

struct BatchResult {
    double total = 0.0, ce = 0.0, dice = 0.0, kl = 0.0;
    double phi_g = 0.0, phi_sigma = 0.0, phi_d = 0.0;
    std::vector<std::vector<double>> grads;
};

/// Mean objective over a batch and its gradient w.r.t. the network parameters.
/// `noisy` holds the two corrupted copies per image (ignored when corruption is off).
inline BatchResult batch_objective(EvidenceNet& net, std::span<const TrainingItem* const> items,
                                   std::span<const std::array<ScalarGrid, 2>> noisy,
                                   std::span<const SupervisionSamples> samples, const ObjectiveContext& base) {
    const int b = static_cast<int>(items.size());
    const bool three = base.toggles.corruption;
    std::vector<ScalarGrid> inputs;
    for (int i = 0; i < b; ++i) inputs.push_back(items[i]->item->image);
    if (three) {
        for (int p = 0; p < 2; ++p)
            for (int i = 0; i < b; ++i) inputs.push_back(noisy[i][p]);
    }
    const Tensor evidence = net.forward(EvidenceNet::batch(inputs));
    for (double v : evidence.values())
        if (!std::isfinite(v)) throw DivergenceError("non-finite evidence");
    const std::size_t block = evidence.size() / inputs.size();
    std::vector<double> grad(evidence.size(), 0.0);

    BatchResult out;
    for (int i = 0; i < b; ++i) {
        const int passes = three ? 3 : 1;
        std::array<ClassField, 3> ev;
        for (int p = 0; p < passes; ++p) ev[p] = evidence_of(evidence, p * b + i);
        ObjectiveContext ctx = base;
        ctx.labels = &items[i]->item->labels;
        ctx.gradient = &items[i]->gradient;
        ctx.distance = items[i]->distance ? &*items[i]->distance : nullptr;
        ctx.samples = &samples[i];
        const auto terms = total_loss({&ev[0], three ? &ev[1] : nullptr, three ? &ev[2] : nullptr}, ctx);
        out.total += terms.total / b;
        out.ce += terms.ce / b;
        out.dice += terms.dice / b;
        out.kl += terms.kl / b;
        out.phi_g += terms.supervision.phi_g / b;
        out.phi_sigma += terms.supervision.phi_sigma / b;
        out.phi_d += terms.supervision.phi_d / b;
        for (int p = 0; p < passes; ++p) {
            const auto& g = terms.grad[p].data();
            double* dst = grad.data() + static_cast<std::size_t>(p * b + i) * block;
            for (std::size_t k = 0; k < block; ++k) dst[k] = g[k] / b;
        }
    }
    if (!std::isfinite(out.total)) throw DivergenceError("non-finite loss");
    const Tensor loss = custom_scalar({evidence}, out.total, {std::move(grad)});
    out.grads = backward(loss, net.parameters());
    for (const auto& g : out.grads)
        for (double v : g)
            if (!std::isfinite(v)) throw DivergenceError("non-finite parameter gradient");
    return out;
}

struct TrainResult {
    EvidenceNet net;
    BaseRate rate;
    std::vector<EpochLog> log;
};

inline std::vector<Tensor> checkpoint_tensors(const EvidenceNet& net, const BaseRate& rate) {
    std::vector<Tensor> t = net.parameters();
    t.push_back(Tensor::constant({static_cast<int>(rate.r.size())}, rate.r));
    return t;
}

/// Splits a checkpoint into network parameters and the trailing base-rate vector.
inline std::pair<EvidenceNet, BaseRate> from_checkpoint(std::vector<Tensor> tensors) {
    if (tensors.size() < 3 || tensors.back().shape().size() != 1)
        throw CheckpointError("checkpoint lacks the trailing base-rate vector");
    BaseRate rate{std::vector<double>(tensors.back().values().begin(), tensors.back().values().end())};
    tensors.pop_back();
    try {
        auto net = EvidenceNet::from_tensors(std::move(tensors));
        if (static_cast<int>(rate.r.size()) != net.config().classes)
            throw CheckpointError("base-rate length does not match the class count");
        rate.validate();
        return {std::move(net), std::move(rate)};
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline MaybeReal mean_dsc(const Predictor& model, const Dataset& data) {
    std::vector<MaybeReal> vals;
    for (const auto& item : data) vals.push_back(dsc(model(item.image).labels, item.labels).mean);
    return mean_defined(vals);
}

using EpochCallback = std::function<void(const EpochLog&)>;

inline TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("empty training set");
    for (const auto& d : {&train_set, &val_set})
        for (const auto& item : *d) {
            if (item.image.height() != cfg.height || item.image.width() != cfg.width)
                throw ConfigError("dataset image " + item.id + " does not match the configured size");
            if (item.labels.num_classes() != cfg.classes)
                throw ConfigError("dataset labels " + item.id + " do not match the configured class count");
        }

    TrainResult result;
    result.net = EvidenceNet::initialized(cfg.network(), stream_seed(cfg.seed, Stream::init));
    std::vector<LabelGrid> labels;
    for (const auto& item : train_set) labels.push_back(item.labels);
    result.rate = base_rate_from_labels(labels);

    std::vector<TrainingItem> items;
    for (const auto& item : train_set)
        items.push_back({&item, gradient_magnitude(item.image), boundary_distance(item.labels)});

    std::mt19937_64 shuffle_rng(stream_seed(cfg.seed, Stream::shuffle));
    std::mt19937_64 noise_rng(stream_seed(cfg.seed, Stream::noise));
    std::mt19937_64 sampler_rng(stream_seed(cfg.seed, Stream::sampler));
    Adam adam(cfg.adam());

    ObjectiveContext base;
    base.rate = result.rate;
    base.gates = cfg.gates();
    base.schedule = cfg.schedule();
    base.sampler = cfg.sampler();
    base.toggles = cfg.toggles();

    std::vector<std::size_t> order(items.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        base.weights = epoch_weights(cfg, epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochLog log;
        log.epoch = epoch;
        log.weights = base.weights;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const TrainingItem*> batch;
            std::vector<std::array<ScalarGrid, 2>> noisy;
            std::vector<SupervisionSamples> samples;
            for (std::size_t i = start; i < end; ++i) {
                const TrainingItem& it = items[order[i]];
                batch.push_back(&it);
                if (base.toggles.corruption)
                    noisy.push_back({corrupt(it.item->image, base.schedule.sigma[1], noise_rng),
                                     corrupt(it.item->image, base.schedule.sigma[2], noise_rng)});
                samples.push_back(it.distance
                                      ? sample_supervision(it.item->labels, *it.distance, base.gates, base.sampler, sampler_rng)
                                      : SupervisionSamples{});
            }
            BatchResult r;
            try {
                r = batch_objective(result.net, batch, noisy, samples, base);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(batches));
            }
            adam.step(result.net.parameters(), r.grads);
            log.total += r.total;
            log.ce += r.ce;
            log.dice += r.dice;
            log.kl += r.kl;
            log.phi_g += r.phi_g;
            log.phi_sigma += r.phi_sigma;
            log.phi_d += r.phi_d;
            ++batches;
        }
        for (double* v : {&log.total, &log.ce, &log.dice, &log.kl, &log.phi_g, &log.phi_sigma, &log.phi_d})
            *v /= batches;
        for (const auto& p : result.net.parameters())
            for (double v : p.values())
                if (!std::isfinite(v)) throw DivergenceError("non-finite parameter after epoch " + std::to_string(epoch));
        if (!val_set.empty()) log.val_dsc = mean_dsc(network_predictor(result.net, result.rate), val_set);
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return result;
}

inline std::filesystem::path manifest_path(const RunConfig& cfg, const char* split) {
    return std::filesystem::path(cfg.data_dir) / (std::string(split) + ".tsv");
}

inline Dataset load_split(const RunConfig& cfg, const char* split) {
    const auto path = manifest_path(cfg, split);
    if (!std::filesystem::exists(path))
        throw ConfigError("dataset manifest " + path.string() + " not found; run `generate` first");
    return load_manifest(path, cfg.classes);
}

/// Trains on the configured dataset and writes checkpoint.prnw, training_log.csv and
/// effective_config.txt into `out`.
inline TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& out, const EpochCallback& on_epoch = {}) {
    const Dataset train_set = load_split(cfg, "train");
    const Dataset val_set = load_split(cfg, "val");
    std::filesystem::create_directories(out);
    write_text(out / "effective_config.txt", effective_config(cfg));
    TrainResult result = train(cfg, train_set, val_set, on_epoch);
    write_text(out / "training_log.csv", training_log_csv(result.log));
    save_checkpoint(checkpoint_tensors(result.net, result.rate), out / "checkpoint.prnw");
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
    double d0 = 8.0;
    std::vector<double> ucc_sigma_levels{0.0, 0.025, 0.05, 0.075, 0.10};
    int trials = 3;
    std::vector<double> noise_ladder{0.025, 0.05, 0.10};
    std::vector<double> blur_ladder{0.5, 1.0, 1.5};
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> maps_dir;
};

struct DeltaURow {
    std::string perturbation;
    double level = 0.0;
    DeltaUSummary summary;
};

struct EvalResult {
    MetricReport report;
    std::vector<DeltaURow> delta_u;
};

inline std::string delta_u_csv(const std::vector<DeltaURow>& rows) {
    std::ostringstream out;
    out << "perturbation,level,count,mean,fraction_positive,q1,median,q3\n";
    auto r = detail::format_real;
    for (const auto& row : rows) {
        const auto& s = row.summary;
        if (s.count == 0) {
            out << row.perturbation << ',' << r(row.level) << ",0,NA,NA,NA,NA,NA\n";
            continue;
        }
        out << row.perturbation << ',' << r(row.level) << ',' << s.count << ',' << r(s.mean) << ','
            << r(s.fraction_positive) << ',' << r(s.q1) << ',' << r(s.median) << ',' << r(s.q3) << '\n';
    }
    return out.str();
}

inline std::string metric_report_csv(const MetricReport& report) {
    std::ostringstream out;
    report.write_csv(out);
    return out.str();
}

/// Per-(image, class) interpretability and segmentation metrics over the boundary band
/// {y = k, d <= d0}, plus pooled delta-u summaries under the noise and blur ladders.
inline EvalResult evaluate(const Predictor& model, const Dataset& data, int classes, const EvalOptions& opt) {
    if (opt.ucc_sigma_levels.size() < 2) throw std::invalid_argument("need at least two noise levels for UCC_sigma");
    std::mt19937_64 rng(derive_seed(opt.seed, (std::uint64_t{1} << 63) + static_cast<std::uint64_t>(Stream::eval)));
    EvalResult result;
    std::vector<Perturbation> ladder;
    for (double s : opt.noise_ladder) ladder.push_back(GaussianNoise{s});
    for (double s : opt.blur_ladder) ladder.push_back(GaussianBlur{s, 0});
    std::vector<std::vector<double>> pooled(ladder.size());

    for (const auto& item : data) {
        const Prediction clean = model(item.image);
        const ScalarGrid gradient = gradient_magnitude(item.image);
        const auto distance = boundary_distance(item.labels);
        const auto seg_dsc = dsc(clean.labels, item.labels);
        const auto seg_hd = hd95(clean.labels, item.labels);

        std::vector<BoundaryBand> bands;
        if (distance)
            for (int k = 0; k < classes; ++k) bands.push_back(boundary_band(item.labels, *distance, k, opt.d0));

        // band means of u per noise level, averaged over trials
        std::vector<std::vector<double>> level_means(static_cast<std::size_t>(classes));
        if (distance) {
            for (double sigma : opt.ucc_sigma_levels) {
                std::vector<double> acc(static_cast<std::size_t>(classes), 0.0);
                const int reps = sigma == 0.0 ? 1 : opt.trials;
                for (int t = 0; t < reps; ++t) {
                    const ScalarGrid u = sigma == 0.0 ? clean.uncertainty : model(corrupt(item.image, sigma, rng)).uncertainty;
                    for (int k = 0; k < classes; ++k) {
                        const auto& band = bands[static_cast<std::size_t>(k)];
                        if (band.empty()) continue;
                        double s = 0.0;
                        for (const auto& p : band.pixels) s += u[p];
                        acc[static_cast<std::size_t>(k)] += s / static_cast<double>(band.size());
                    }
                }
                for (int k = 0; k < classes; ++k) level_means[static_cast<std::size_t>(k)].push_back(acc[static_cast<std::size_t>(k)] / reps);
            }
        }

        for (int k = 0; k < classes; ++k) {
            MetricRow row;
            row.image_id = item.id;
            row.k = k;
            if (static_cast<std::size_t>(k) < seg_dsc.per_class.size()) row.dsc = seg_dsc.per_class[static_cast<std::size_t>(k)];
            if (static_cast<std::size_t>(k) < seg_hd.per_class.size()) row.hd95 = seg_hd.per_class[static_cast<std::size_t>(k)];
            if (distance && bands[static_cast<std::size_t>(k)].size() >= 2) {
                const auto& band = bands[static_cast<std::size_t>(k)];
                const auto u = gather_values(clean.uncertainty, band);
                const auto g = gather_values(gradient, band);
                const auto d = gather_values(*distance, band);
                row.ucc_g = spearman(g, u);
                row.ucc_d = spearman(d, u);
                row.ur_g = ur(g, u, Direction::inverse);
                row.ur_d = ur(d, u, Direction::inverse);
                row.slope_g = regression_slope(g, u);
                row.slope_d = regression_slope(d, u);
                const auto& means = level_means[static_cast<std::size_t>(k)];
                row.ucc_sigma = spearman(opt.ucc_sigma_levels, means);
                row.ur_sigma = ur(opt.ucc_sigma_levels, means, Direction::direct);
            }
            result.report.rows.push_back(std::move(row));
        }

        if (distance) {
            std::vector<PixelIndex> band_all;
            for (std::size_t i = 0; i < item.labels.size(); ++i)
                if (distance->values()[i] <= opt.d0) band_all.push_back(item.labels.pixel(i));
            for (std::size_t p = 0; p < ladder.size(); ++p) {
                const ScalarGrid perturbed = apply_perturbation(item.image, ladder[p], rng);
                const ScalarGrid u = model(perturbed).uncertainty;
                for (const auto& px : band_all) pooled[p].push_back(u[px] - clean.uncertainty[px]);
            }
        }

        if (opt.maps_dir) {
            std::filesystem::create_directories(*opt.maps_dir);
            export_pgm(clean.uncertainty, *opt.maps_dir / (item.id + "_uncertainty.pgm"));
            export_pgm(gradient, *opt.maps_dir / (item.id + "_gradient.pgm"));
            if (distance) export_pgm(*distance, *opt.maps_dir / (item.id + "_distance.pgm"));
        }
    }
    result.report.finalize(classes);
    for (std::size_t p = 0; p < ladder.size(); ++p) {
        const bool noise = std::holds_alternative<GaussianNoise>(ladder[p]);
        const double level = noise ? std::get<GaussianNoise>(ladder[p]).sigma : std::get<GaussianBlur>(ladder[p]).sigma;
        result.delta_u.push_back({noise ? "noise" : "blur", level, summarize(std::move(pooled[p]))});
    }
    return result;
}

/// Loads a checkpoint, evaluates it on a manifest and writes metrics.csv, delta_u.csv and maps/.
inline EvalResult run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest, double d0,
                           const std::filesystem::path& out, std::uint64_t seed = 0, int trials = 3) {
    auto [net, rate] = from_checkpoint(load_checkpoint(checkpoint));
    const Dataset data = load_manifest(manifest, net.config().classes);
    for (const auto& item : data) net.config().check_input(item.image.height(), item.image.width());
    EvalOptions opt;
    opt.d0 = d0;
    opt.seed = seed;
    opt.trials = trials;
    opt.maps_dir = out / "maps";
    std::filesystem::create_directories(out);
    auto result = evaluate(network_predictor(net, rate), data, net.config().classes, opt);
    write_text(out / "metrics.csv", metric_report_csv(result.report));
    write_text(out / "delta_u.csv", delta_u_csv(result.delta_u));
    return result;
}

// ---------------------------------------------------------------------------
// d0 sweep and ablation
// ---------------------------------------------------------------------------

struct SweepMetric {
    const char* name;
    MaybeReal MetricRow::*field;
    bool higher_is_better;
};

inline const std::array<SweepMetric, 8>& sweep_metrics() {
    static const std::array<SweepMetric, 8> m{{{"ucc_g", &MetricRow::ucc_g, false},
                                               {"ucc_sigma", &MetricRow::ucc_sigma, true},
                                               {"ucc_d", &MetricRow::ucc_d, false},
                                               {"ur_g", &MetricRow::ur_g, true},
                                               {"ur_sigma", &MetricRow::ur_sigma, true},
                                               {"ur_d", &MetricRow::ur_d, true},
                                               {"dsc", &MetricRow::dsc, true},
                                               {"hd95", &MetricRow::hd95, false}}};
    return m;
}

/// Direction-aligned min-max normalisation: the best value maps to 1, the worst to 0.
/// Undefined inputs stay undefined; a column with a single distinct value reads 1.
inline std::vector<MaybeReal> normalize_aligned(const std::vector<MaybeReal>& values, bool higher_is_better) {
    std::optional<double> lo, hi;
    for (const auto& v : values)
        if (v) {
            const double a = higher_is_better ? *v : -*v;
            lo = lo ? std::min(*lo, a) : a;
            hi = hi ? std::max(*hi, a) : a;
        }
    std::vector<MaybeReal> out;
    for (const auto& v : values) {
        if (!v) {
            out.push_back(std::nullopt);
            continue;
        }
        const double a = higher_is_better ? *v : -*v;
        out.push_back(*hi > *lo ? (a - *lo) / (*hi - *lo) : 1.0);
    }
    return out;
}

/// Keeps first occurrences; reports whether anything was dropped.
inline std::vector<double> dedupe_values(const std::vector<double>& values, bool* had_duplicates = nullptr) {
    std::vector<double> out;
    for (double v : values)
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    if (had_duplicates) *had_duplicates = out.size() != values.size();
    return out;
}

struct RunOutcome {
    std::string status = "ok";  // or "diverged: <reason>"
    MetricRow foreground;
};

inline RunOutcome train_and_eval(const RunConfig& cfg, const std::filesystem::path& out) {
    RunOutcome outcome;
    try {
        run_train(cfg, out / "train");
        const auto result = run_eval(out / "train" / "checkpoint.prnw", manifest_path(cfg, "test"), cfg.eval_d0,
                                     out / "eval", cfg.seed, cfg.eval_trials);
        outcome.foreground = result.report.foreground;
    } catch (const DivergenceError& e) {
        outcome.status = std::string("diverged: ") + e.what();
    }
    return outcome;
}

inline std::string format_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

/// One train + eval cycle per d0 (d_n, d_f re-derived); writes sweep.csv with raw and
/// normalised foreground metrics.
inline std::vector<RunOutcome> run_sweep(const RunConfig& cfg, const std::vector<double>& values,
                                         const std::filesystem::path& out, std::ostream& warn = std::cerr) {
    if (values.empty()) throw ConfigError("sweep needs at least one d0 value");
    bool dup = false;
    const auto d0s = dedupe_values(values, &dup);
    if (dup) warn << "warning: duplicate d0 values removed\n";
    for (double d0 : d0s) {
        RunConfig c = cfg;
        c.d0 = d0;
        c.validate();
    }
    std::vector<RunOutcome> outcomes;
    for (double d0 : d0s) {
        RunConfig c = cfg;
        c.d0 = d0;
        outcomes.push_back(train_and_eval(c, out / ("d0_" + format_label(d0))));
    }
    std::ostringstream csv;
    csv << "d0,status";
    for (const auto& m : sweep_metrics()) csv << ',' << m.name;
    for (const auto& m : sweep_metrics()) csv << ",norm_" << m.name;
    csv << '\n';
    std::vector<std::vector<MaybeReal>> norm;
    for (const auto& m : sweep_metrics()) {
        std::vector<MaybeReal> col;
        for (const auto& o : outcomes) col.push_back(o.status == "ok" ? o.foreground.*(m.field) : std::nullopt);
        norm.push_back(normalize_aligned(col, m.higher_is_better));
    }
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        csv << format_label(d0s[i]) << ',' << (outcomes[i].status == "ok" ? "ok" : "diverged");
        for (const auto& m : sweep_metrics())
            csv << ',' << (outcomes[i].status == "ok" ? format_metric(outcomes[i].foreground.*(m.field)) : "NA");
        for (const auto& col : norm) csv << ',' << format_metric(col[i]);
        csv << '\n';
    }
    std::filesystem::create_directories(out);
    write_text(out / "sweep.csv", csv.str());
    return outcomes;
}

struct AblationRow {
    bool use_Lg = true, use_Lsigma = true, use_Ld = true;
    RunOutcome outcome;
};

/// The 8 toggle combinations, full model first and all-off last.
inline std::vector<std::array<bool, 3>> ablation_grid() {
    std::vector<std::array<bool, 3>> grid;
    for (int mask = 7; mask >= 0; --mask) grid.push_back({(mask & 4) != 0, (mask & 2) != 0, (mask & 1) != 0});
    return grid;
}

inline std::string sign_of(const MaybeReal& v) {
    if (!v) return "NA";
    return *v > 0.0 ? "+" : (*v < 0.0 ? "-" : "0");
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream csv;
    csv << "use_Lg,use_Lsigma,use_Ld,status,ucc_g,ucc_sigma,ucc_d,sign_g,sign_sigma,sign_d,"
           "delta_ucc_g,delta_ucc_sigma,delta_ucc_d,ur_g,ur_sigma,ur_d,dsc\n";
    const MetricRow* full = rows.empty() || rows.front().outcome.status != "ok" ? nullptr : &rows.front().outcome.foreground;
    auto delta = [&](const RunOutcome& o, MaybeReal MetricRow::*f) -> MaybeReal {
        if (!full || o.status != "ok" || !(o.foreground.*f) || !(full->*f)) return std::nullopt;
        return *(o.foreground.*f) - *(full->*f);
    };
    for (const auto& r : rows) {
        const auto& m = r.outcome.foreground;
        const bool ok = r.outcome.status == "ok";
        auto val = [&](MaybeReal MetricRow::*f) { return ok ? format_metric(m.*f) : std::string("NA"); };
        csv << r.use_Lg << ',' << r.use_Lsigma << ',' << r.use_Ld << ',' << (ok ? "ok" : "diverged") << ','
            << val(&MetricRow::ucc_g) << ',' << val(&MetricRow::ucc_sigma) << ',' << val(&MetricRow::ucc_d) << ','
            << (ok ? sign_of(m.ucc_g) : "NA") << ',' << (ok ? sign_of(m.ucc_sigma) : "NA") << ','
            << (ok ? sign_of(m.ucc_d) : "NA") << ',' << format_metric(delta(r.outcome, &MetricRow::ucc_g)) << ','
            << format_metric(delta(r.outcome, &MetricRow::ucc_sigma)) << ','
            << format_metric(delta(r.outcome, &MetricRow::ucc_d)) << ',' << val(&MetricRow::ur_g) << ','
            << val(&MetricRow::ur_sigma) << ',' << val(&MetricRow::ur_d) << ',' << val(&MetricRow::dsc) << '\n';
    }
    return csv.str();
}

inline std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::filesystem::path& out) {
    std::vector<AblationRow> rows;
    for (const auto& t : ablation_grid()) {
        RunConfig c = cfg;
        c.use_Lg = t[0];
        c.use_Lsigma = t[1];
        c.use_Ld = t[2];
        const std::string name = std::string("g") + (t[0] ? "1" : "0") + "_s" + (t[1] ? "1" : "0") + "_d" + (t[2] ? "1" : "0");
        rows.push_back({t[0], t[1], t[2], train_and_eval(c, out / name)});
    }
    std::filesystem::create_directories(out);
    write_text(out / "ablation.csv", ablation_csv(rows));
    return rows;
}

}  // namespace prius

#endif  // PRIUS_TRAINER_HPP
