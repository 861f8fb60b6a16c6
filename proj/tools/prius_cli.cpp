// prius command-line driver: generate, train, eval, sweep-d0, ablate.
// Exit codes: 0 success, 1 validation error, 2 numerical divergence.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prius/trainer.hpp"

namespace {

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::logic_error&) {
            throw prius::ConfigError("--values: '" + item + "' is not a number");
        }
        if (used != item.size() || !std::isfinite(v)) throw prius::ConfigError("--values: '" + item + "' is not a number");
        out.push_back(v);
    }
    if (out.empty()) throw prius::ConfigError("--values needs at least one d0");
    return out;
}

void print_epoch(const prius::EpochLog& e) {
    std::fprintf(stderr, "epoch %3d  total %.5f  ce %.5f  dice %.5f  kl %.5f  phi_g %.5f  phi_s %.5f  phi_d %.5f  val_dsc %s\n",
                 e.epoch, e.total, e.ce, e.dice, e.kl, e.phi_g, e.phi_sigma, e.phi_d,
                 prius::format_metric(e.val_dsc).c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-supervised evidential segmentation on synthetic phantoms"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, manifest, values;
    double d0 = 8.0;
    std::uint64_t seed = 0;
    int trials = 3;
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "no per-epoch progress");

    auto* gen = app.add_subcommand("generate", "write the phantom dataset and manifests");
    gen->add_option("--config", config)->required();
    gen->add_option("--out", out)->required();

    auto* tr = app.add_subcommand("train", "train and write checkpoint + training log");
    tr->add_option("--config", config)->required();
    tr->add_option("--out", out)->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--manifest", manifest)->required();
    ev->add_option("--d0", d0)->required();
    ev->add_option("--out", out)->required();
    ev->add_option("--seed", seed, "seed for the perturbation protocols");
    ev->add_option("--trials", trials, "noise draws per level for UCC_sigma")->check(CLI::PositiveNumber);

    auto* sw = app.add_subcommand("sweep-d0", "train + eval once per d0");
    sw->add_option("--config", config)->required();
    sw->add_option("--values", values)->required();
    sw->add_option("--out", out)->required();

    auto* ab = app.add_subcommand("ablate", "train + eval the 8 supervision toggle combinations");
    ab->add_option("--config", config)->required();
    ab->add_option("--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const prius::EpochCallback progress = quiet ? prius::EpochCallback{} : prius::EpochCallback{print_epoch};
    try {
        if (*gen) {
            const auto cfg = prius::load_config(config);
            prius::generate_split(cfg.phantom(), cfg.split(), out);
            prius::write_text(std::filesystem::path(out) / "effective_config.txt", prius::effective_config(cfg));
        } else if (*tr) {
            prius::run_train(prius::load_config(config), out, progress);
        } else if (*ev) {
            if (!(d0 >= 0.0)) throw prius::ConfigError("--d0 must be non-negative");
            const auto r = prius::run_eval(checkpoint, manifest, d0, out, seed, trials);
            std::ostringstream summary;
            r.report.write_csv(summary);
            const std::string text = summary.str();
            std::cout << text.substr(text.rfind("mean,fg"));
        } else if (*sw) {
            const auto cfg = prius::load_config(config);
            const auto outcomes = prius::run_sweep(cfg, parse_values(values), out);
            for (const auto& o : outcomes)
                if (o.status != "ok") std::cerr << o.status << '\n';
        } else if (*ab) {
            const auto rows = prius::run_ablation(prius::load_config(config), out);
            for (const auto& r : rows)
                if (r.outcome.status != "ok") std::cerr << r.outcome.status << '\n';
        }
    } catch (const prius::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
