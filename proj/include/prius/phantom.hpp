#ifndef PRIUS_PHANTOM_HPP
#define PRIUS_PHANTOM_HPP

// Synthetic segmentation phantoms: a core disk nested in a ring on background,
// with separately controlled contrast on the two interfaces, smooth background
// texture and optional pre-blur. Everything is a pure function of (seed, index).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prius/grid.hpp"
#include "prius/metrics.hpp"

namespace prius {

struct PhantomSpec {
    int height = 64;
    int width = 64;
    int classes = 3;  // background, ring, core
    double background_level = 0.2;
    double outer_contrast = 0.3;       // ring minus background
    double inner_contrast = 0.1;      // core minus ring
    double contrast_modulation = 1.0;  // depth of the contrast ramp across each structure, in [0, 1]
    double texture_amplitude = 0.08;
    double texture_frequency = 6.0;  // max cycles per image side of the texture cosines
    double pre_blur = 0.0;
    double center_jitter = 4.0;
    double core_radius_min = 7.0;
    double core_radius_max = 11.0;
    double ring_thickness_min = 5.0;
    double ring_thickness_max = 9.0;
    std::uint64_t seed = 1234;

    void validate() const {
        if (height < 8 || width < 8) throw std::invalid_argument("phantom must be at least 8x8");
        if (classes != 3) throw std::invalid_argument("phantoms carry exactly three classes (background, ring, core)");
        if (outer_contrast < 0.0 || inner_contrast < 0.0 || texture_amplitude < 0.0 || pre_blur < 0.0)
            throw std::invalid_argument("contrast, texture and blur amplitudes must be non-negative");
        if (!(texture_frequency >= 0.0) || texture_frequency > 0.25 * std::min(height, width))
            throw std::invalid_argument("texture frequency must lie in [0, size/4] cycles per image");
        if (contrast_modulation < 0.0 || contrast_modulation > 1.0)
            throw std::invalid_argument("contrast modulation must lie in [0, 1]");
        if (center_jitter < 0.0) throw std::invalid_argument("center jitter must be non-negative");
        if (!(core_radius_min >= 1.5) || core_radius_max < core_radius_min)
            throw std::invalid_argument("core radius range must satisfy 1.5 <= min <= max");
        // a ring of at least two pixels keeps background out of every core 8-neighbourhood
        if (!(ring_thickness_min >= 2.0) || ring_thickness_max < ring_thickness_min)
            throw std::invalid_argument("ring thickness range must satisfy 2 <= min <= max");
        const double outer = core_radius_max + ring_thickness_max + center_jitter + 1.0;
        if (2.0 * outer >= std::min(height, width))
            throw std::invalid_argument("radii incompatible with image size: outer extent " + std::to_string(outer) +
                                        " does not fit a " + std::to_string(height) + "x" + std::to_string(width) +
                                        " image");
    }
};

struct PhantomGeometry {
    double center_row = 0.0;
    double center_col = 0.0;
    double core_radius = 0.0;
    double outer_radius = 0.0;
};

struct PhantomSample {
    ScalarGrid image;
    LabelGrid labels;
    PhantomGeometry geometry;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent stream seed for a named consumer of a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    return splitmix64(splitmix64(master) ^ splitmix64(stream + 0x51ED2701ull));
}

inline PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t index) {
    spec.validate();
    std::mt19937_64 rng(derive_seed(spec.seed, index));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    PhantomGeometry geo;
    geo.center_row = 0.5 * (spec.height - 1) + uniform(-spec.center_jitter, spec.center_jitter);
    geo.center_col = 0.5 * (spec.width - 1) + uniform(-spec.center_jitter, spec.center_jitter);
    geo.core_radius = uniform(spec.core_radius_min, spec.core_radius_max);
    geo.outer_radius = geo.core_radius + uniform(spec.ring_thickness_min, spec.ring_thickness_max);
    const double outer_phase = uniform(0.0, 2.0 * std::numbers::pi);
    const double inner_phase = uniform(0.0, 2.0 * std::numbers::pi);

    struct Wave {
        double fy, fx, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k)
        waves.push_back({uniform(-spec.texture_frequency, spec.texture_frequency),
                         uniform(-spec.texture_frequency, spec.texture_frequency), uniform(0.0, 2.0 * std::numbers::pi), uniform(0.5, 1.0)});
    double amp_sum = 0.0;
    for (const auto& w : waves) amp_sum += w.amp;

    // contrast ramps linearly across the structure along direction `phase`, from full
    // amplitude on one side to (1 - modulation) of it on the opposite side
    auto modulation = [&](double dy, double dx, double phase, double radius) {
        const double along = std::clamp((dx * std::cos(phase) + dy * std::sin(phase)) / radius, -1.0, 1.0);
        return 1.0 - spec.contrast_modulation * 0.5 * (1.0 + along);
    };

    LabelGrid labels(spec.height, spec.width, spec.classes);
    ScalarGrid image(spec.height, spec.width);
    for (int r = 0; r < spec.height; ++r) {
        for (int c = 0; c < spec.width; ++c) {
            const double dy = r - geo.center_row;
            const double dx = c - geo.center_col;
            const double rho = std::hypot(dy, dx);
            int k = 0;
            if (rho < geo.core_radius)
                k = 2;
            else if (rho < geo.outer_radius)
                k = 1;
            labels(r, c) = static_cast<std::uint8_t>(k);

            double v = spec.background_level;
            if (k >= 1) v += spec.outer_contrast * modulation(dy, dx, outer_phase, geo.outer_radius);
            if (k == 2) v += spec.inner_contrast * modulation(dy, dx, inner_phase, geo.core_radius);
            double tex = 0.0;
            for (const auto& w : waves)
                tex += w.amp * std::cos(2.0 * std::numbers::pi * (w.fy * r / spec.height + w.fx * c / spec.width) + w.phase);
            v += spec.texture_amplitude * tex / amp_sum;
            image(r, c) = v;
        }
    }
    if (spec.pre_blur > 0.0) image = gaussian_blur(image, spec.pre_blur);
    for (double& v : image.values()) v = std::clamp(v, 0.0, 1.0);
    return {std::move(image), std::move(labels), geo};
}

// ---------------------------------------------------------------------------
// Datasets on disk
// ---------------------------------------------------------------------------

struct DatasetItem {
    std::string id;
    ScalarGrid image;
    LabelGrid labels;
};

using Dataset = std::vector<DatasetItem>;

struct SplitCounts {
    int train = 32;
    int val = 8;
    int test = 8;
};

inline std::string manifest_header(const PhantomSpec& spec) {
    return "# seed=" + std::to_string(spec.seed) + " size=" + std::to_string(spec.height) + "x" +
           std::to_string(spec.width);
}

/// Writes <dir>/<split>/{img,lab}_NNNN.prgd and <dir>/<split>.tsv for train, val and test.
/// Index ranges are disjoint: train [0, n_train), val next, test last. Manifest paths are
/// relative to the manifest's directory.
inline void generate_split(const PhantomSpec& spec, const SplitCounts& counts, const std::filesystem::path& dir) {
    spec.validate();
    if (counts.train < 1 || counts.val < 1 || counts.test < 1) throw std::invalid_argument("split counts must be >= 1");
    std::filesystem::create_directories(dir);
    std::uint64_t index = 0;
    const std::pair<const char*, int> splits[] = {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}};
    for (const auto& [name, n] : splits) {
        std::filesystem::create_directories(dir / name);
        std::ostringstream manifest;
        manifest << manifest_header(spec) << '\n';
        for (int i = 0; i < n; ++i, ++index) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "%04llu", static_cast<unsigned long long>(index));
            const auto sample = generate_phantom(spec, index);
            const std::string img = std::string(name) + "/img_" + stem + ".prgd";
            const std::string lab = std::string(name) + "/lab_" + stem + ".prgd";
            save_grid(sample.image, dir / img);
            save_grid(sample.labels, dir / lab);
            manifest << img << '\t' << lab << '\n';
        }
        const std::string text = manifest.str();
        detail::write_file(dir / (std::string(name) + ".tsv"),
                           std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
    }
}

inline Dataset load_manifest(const std::filesystem::path& manifest, int classes) {
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("cannot open manifest " + manifest.string());
    const auto base = manifest.parent_path();
    Dataset out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("manifest line without tab: " + line);
        const std::filesystem::path img = line.substr(0, tab);
        const std::filesystem::path lab = line.substr(tab + 1);
        DatasetItem item{img.stem().string(), load_scalar_grid(img.is_absolute() ? img : base / img),
                         load_label_grid(lab.is_absolute() ? lab : base / lab, classes)};
        if (!item.image.same_shape(item.labels)) throw std::runtime_error("image and labels differ in shape: " + line);
        out.push_back(std::move(item));
    }
    if (out.empty()) throw std::runtime_error("manifest " + manifest.string() + " lists no samples");
    return out;
}

}  // namespace prius

#endif  // PRIUS_PHANTOM_HPP
