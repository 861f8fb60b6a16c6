// Acceptance runner: one PASS/FAIL line per criterion. Exit status is nonzero if any
// criterion fails. Work files go under ./acceptance_work.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "prius/trainer.hpp"

using namespace prius;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::vector<std::pair<int, Outcome>> results;

void report(int id, const Outcome& o) {
    std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    results.push_back({id, o});
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PRIUS_CLI) + " -q " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double value(const MaybeReal& v) { return v ? *v : std::nan(""); }

// ---------------------------------------------------------------------------

Outcome formulas() {
    const auto t0 = Clock::now();
    int checked = 0, failed = 0;
    double worst = 0.0;
    auto near = [&](double got, double want) {
        ++checked;
        const double e = std::abs(got - want);
        worst = std::max(worst, e);
        if (!(e <= 1e-9)) ++failed;
    };
    const double rho_lo = 1.0 / (1.0 + std::exp(200.0));  // far-saturated sigmoid tails

    near(slope_sigmoid(0.1, 100.0), 1.0 / (1.0 + std::exp(-10.0)));
    near(slope_sigmoid(0.1, 100.0), 0.99995460213129757);  // 30-digit reference value, rounded

    near(contrast_pair_loss(0.2, 0.8, 0.9, 0.1), 0.0);
    near(contrast_pair_loss(0.8, 0.2, 0.9, 0.1), 0.48);
    near(contrast_pair_loss(0.4, 0.4, 0.7, 0.7), 0.0);

    GateParams p;  // gamma 100, d_g 2, d_n 7, d_f 9, d_eps 0.5
    p.lambda_g = 0.7;
    near(contrast_gate(2.0, 2.0, p), 0.35);
    near(contrast_gate(5.0, 3.0, p), 0.0);
    near(contrast_gate(0.0, 0.0, p), 0.7 * (1.0 - rho_lo));

    const NoiseSchedule s{{0.0, 5.0, 10.0}};
    const double up[] = {0.1, 0.2, 0.3}, down[] = {0.3, 0.2, 0.1}, flat[] = {0.4, 0.4, 0.4};
    near(corruption_pixel_loss(std::span<const double, 3>(up), s), 0.0);
    near(corruption_pixel_loss(std::span<const double, 3>(down), s), 1.0);
    near(corruption_pixel_loss(std::span<const double, 3>(flat), s), 0.0);

    p.lambda_sigma = 0.6;
    near(corruption_gate(7.0, p), 0.3);
    near(corruption_gate(0.0, p), 0.6);
    near(corruption_gate(8.0, p), 0.0);

    near(interior_indicator(30.0, 40.0, p), 1.0);
    near(interior_indicator(1.0, 40.0, p), 0.0);
    near(interior_indicator(9.0, 9.0, p), 0.25);

    near(distance_margin_gate(3.0, 3.5, p), 0.5);
    GateParams wide = p;
    wide.d_eps = 1.0;
    near(distance_margin_gate(4.0, 4.0, wide), 0.0);

    p.lambda_f = 3.0;
    near(geometry_modulation(30.0, 40.0, p), 3.0);
    near(geometry_modulation(1.0, 5.0, p), -4.0);
    near(geometry_modulation(1.0, 1.0, p), 0.0);

    near(geometry_pair_loss(0.0, 0.0, 1.0, 5.0, p), 0.0);
    near(geometry_pair_loss(0.8, 0.2, 1.0, 5.0, p), 0.0);
    near(geometry_pair_loss(0.2, 0.8, 1.0, 5.0, p), 2.4);
    p.lambda_f = 1.0;
    near(geometry_pair_loss(0.2, 0.3, 30.0, 40.0, p), 0.5);

    ScalarGrid g(1, 3, std::vector<double>{1, 5, 3}), u(1, 3, std::vector<double>{0.2, 0.4, 0.6});
    const auto agg = normal_aggregate(g, u, {{0, 1}, 1, {{0, 0}, {0, 1}, {0, 2}}});
    near(agg.g_tilde, 5.0);
    near(agg.u_bar, 0.4);

    const BaseRate half{{0.5, 0.5}};
    const auto vac = dirichlet_from_evidence(ClassField(2, 1, 1, std::vector<double>{0, 0}), half, 2.0);
    near(vac.alpha(0, 0), 1.0);
    near(vac.alpha(1, 0), 1.0);
    const auto conf = dirichlet_from_evidence(ClassField(2, 1, 1, std::vector<double>{8, 0}), half, 2.0);
    near(conf.alpha(0, 0), 9.0);
    near(conf.alpha(1, 0), 1.0);
    const auto ev = expected_prob_and_uncertainty(vac), ec = expected_prob_and_uncertainty(conf);
    near(ev.probs(0, 0), 0.5);
    near(ev.probs(1, 0), 0.5);
    near(ev.uncertainty(0, 0), 1.0);
    near(ec.probs(0, 0), 0.9);
    near(ec.probs(1, 0), 0.1);
    near(ec.uncertainty(0, 0), 0.2);

    near(kl_weight(0), 0.0);
    near(kl_weight(10), 0.5);
    near(kl_weight(40), 1.0);
    near(anneal_alpha(0, 60, 0.01), 0.01);
    near(anneal_alpha(60, 60, 0.01), 1.0);
    near(anneal_alpha(30, 60, 0.01), 0.1);

    const double secs = seconds_since(t0);
    return {failed == 0 && secs < 1.0,
            fmt("%d examples, %d off by more than 1e-9 (worst %.3g), %.4f s (limit 1 s)", checked, failed, worst, secs)};
}

Outcome oracles() {
    const auto t0 = Clock::now();
    const auto rep = oracle::compare_all(150, 20240611);
    const double secs = seconds_since(t0);
    return {rep.mismatches == 0 && rep.worst_real <= 1e-12 && rep.instances >= 100 && secs < 30.0,
            fmt("%d random instances up to 32x32, %d mismatches, worst real diff %.3g (limit 1e-12), %.2f s (limit 30 s)",
                rep.instances, rep.mismatches, rep.worst_real, secs)};
}

Outcome gradients() {
    const auto t0 = Clock::now();
    const auto loss = testing::loss_gradcheck(24, 77);
    const auto net = testing::network_gradcheck(20, 78);
    const double secs = seconds_since(t0);
    return {loss.configs >= 20 && net.configs >= 20 && loss.worst <= 1e-4 && net.worst <= 1e-3 && secs < 120.0,
            fmt("losses: %d configs, %d coords, worst rel err %.3g (limit 1e-4); network: %d configs, %d coords, worst %.3g "
                "(limit 1e-3); %d+%d kink coords skipped; %.1f s (limit 120 s)",
                loss.configs, loss.compared, loss.worst, net.configs, net.compared, net.worst, loss.skipped, net.skipped, secs)};
}

const char* kTinyConfig =
    "height = 32\nwidth = 32\nn_train = 3\nn_val = 1\nn_test = 2\n"
    "core_radius_min = 4\ncore_radius_max = 5\nring_thickness_min = 3\nring_thickness_max = 4\ncenter_jitter = 1\n"
    "texture_frequency = 2\nlevels = 2\nbase_width = 4\nbatch_size = 2\nepochs = 45\n"
    "contrast_pairs = 16\ngeometry_pairs = 16\ncorruption_pixels = 16\neval_trials = 1\n";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream in(line);
    for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
    return cells;
}

Outcome schedules(const fs::path& work) {
    bool ok = kl_weight(10) == 0.5 && kl_weight(40) == 1.0;
    ok = ok && anneal_alpha(0, 45, 0.01) == 0.01 && std::abs(anneal_alpha(45, 45, 0.01) - 1.0) <= 1e-12;

    // a short real training run: every logged weight must equal the schedule value bit for bit
    const fs::path dir = work / "schedule";
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.txt") << kTinyConfig << "data_dir = data\n";
    const auto cfg = load_config(dir / "cfg.txt");
    generate_split(cfg.phantom(), cfg.split(), cfg.data_dir);
    run_train(cfg, dir / "train");
    std::ifstream log(dir / "train" / "training_log.csv");
    std::string line;
    std::getline(log, line);
    ok = ok && line == kTrainingLogHeader;
    int rows = 0, mismatched = 0;
    double kl10 = -1, kl40 = -1, a0 = -1, aT = -1;
    while (std::getline(log, line)) {
        const auto c = split_csv_line(line);
        const int epoch = std::stoi(c.at(0));
        const auto w = epoch_weights(cfg, epoch);
        const double want[] = {w.lambda_kl, w.anneal, w.lambda_dice, w.lambda_g, w.lambda_sigma, w.lambda_f};
        for (int k = 0; k < 6; ++k)
            if (std::stod(c.at(8 + k)) != want[k]) ++mismatched;
        if (epoch == 10) kl10 = std::stod(c[8]);
        if (epoch == 40) kl40 = std::stod(c[8]);
        if (epoch == 0) a0 = std::stod(c[9]);
        ++rows;
    }
    aT = anneal_alpha(cfg.epochs, cfg.epochs, cfg.alpha0);
    ok = ok && rows == cfg.epochs && mismatched == 0 && kl10 == 0.5 && kl40 == 1.0 && a0 == 0.01;
    return {ok, fmt("lambda_KL(10) = %.17g, lambda_KL(40) = %.17g, anneal(0) = %.17g, anneal(T) = %.17g; %d logged epochs, "
                    "%d logged weights differing from the schedule",
                    kl10, kl40, a0, aT, rows, mismatched)};
}

struct FullRun {
    EvalResult eval;
    double seconds = 0.0;
    bool ok = false;
    std::string status;
};

FullRun full_run(const RunConfig& cfg, const fs::path& out) {
    FullRun r;
    const auto t0 = Clock::now();
    try {
        run_train(cfg, out / "train");
        r.eval = run_eval(out / "train" / "checkpoint.prnw", manifest_path(cfg, "test"), cfg.eval_d0, out / "eval", cfg.seed,
                          cfg.eval_trials);
        r.ok = true;
        r.status = "ok";
    } catch (const std::exception& e) {
        r.status = e.what();
    }
    r.seconds = seconds_since(t0);
    return r;
}

Outcome signs(const FullRun& full) {
    if (!full.ok) return {false, "full model run failed: " + full.status};
    const auto& m = full.eval.report.foreground;
    const double g = value(m.ucc_g), s = value(m.ucc_sigma), d = value(m.ucc_d), urs = value(m.ur_sigma), urd = value(m.ur_d);
    const bool ok = g < 0.0 && s > 0.0 && d < 0.0 && urs >= 0.7 && urd >= 0.6 && full.seconds <= 900.0;
    std::string fails;
    if (!(g < 0.0)) fails += " UCC_g not < 0;";
    if (!(s > 0.0)) fails += " UCC_sigma not > 0;";
    if (!(d < 0.0)) fails += " UCC_d not < 0;";
    if (!(urs >= 0.7)) fails += " UR_sigma < 0.7;";
    if (!(urd >= 0.6)) fails += " UR_d < 0.6;";
    if (full.seconds > 900.0) fails += " over 15 min;";
    return {ok, fmt("test foreground aggregate: UCC_g %.4f, UCC_sigma %.4f, UCC_d %.4f, UR_sigma %.4f, UR_d %.4f, DSC %.4f; "
                    "%.0f s (limit 900 s)%s%s",
                    g, s, d, urs, urd, value(m.dsc), full.seconds, fails.empty() ? "" : " -- failing:", fails.c_str())};
}

Outcome ablations(const RunConfig& cfg, const FullRun& full, const fs::path& work) {
    if (!full.ok) return {false, "full model run failed: " + full.status};
    RunConfig no_s = cfg, no_g = cfg;
    no_s.use_Lsigma = false;
    no_g.use_Lg = false;
    const auto t0 = Clock::now();
    const auto rs = full_run(no_s, work / "no_Lsigma");
    const auto rg = full_run(no_g, work / "no_Lg");
    const double secs = seconds_since(t0);
    if (!rs.ok || !rg.ok) return {false, "ablation run failed: " + rs.status + " / " + rg.status};
    const auto& f = full.eval.report.foreground;
    const double fs_ = value(f.ucc_sigma), fg = value(f.ucc_g);
    const double as = value(rs.eval.report.foreground.ucc_sigma), ag = value(rg.eval.report.foreground.ucc_g);
    const bool ok = as < fs_ && ag > fg && secs <= 2700.0;
    return {ok, fmt("UCC_sigma full %.4f vs no-L_sigma %.4f (must drop); UCC_g full %.4f vs no-L_g %.4f (must rise); "
                    "%.0f s (limit 2700 s)",
                    fs_, as, fg, ag, secs)};
}

Outcome corruption_response(const FullRun& full) {
    if (!full.ok) return {false, "full model run failed: " + full.status};
    std::vector<double> frac;
    for (const auto& row : full.eval.delta_u)
        if (row.perturbation == "noise") frac.push_back(row.summary.count ? row.summary.fraction_positive : std::nan(""));
    const bool ok = frac.size() == 3 && frac[0] < frac[1] && frac[1] < frac[2] && frac[2] > 0.5;
    return {ok, fmt("fraction of positive delta-u over the band at sigma 0.025 / 0.05 / 0.10: %.4f / %.4f / %.4f",
                    frac.size() > 0 ? frac[0] : NAN, frac.size() > 1 ? frac[1] : NAN, frac.size() > 2 ? frac[2] : NAN)};
}

bool has_nan(const std::string& text) {
    std::string lower = text;
    for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return lower.find("nan") != std::string::npos || lower.find("inf") != std::string::npos;
}

Outcome degenerate(const fs::path& work) {
    const fs::path dir = work / "degenerate";
    fs::create_directories(dir / "data");
    std::vector<std::string> problems;
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond) problems.push_back(what);
    };

    // uniform labels, a two-class-only map (ring absent), and a regular phantom
    const ScalarGrid flat_img(32, 32, 0.4);
    save_grid(flat_img, dir / "data/img_flat.prgd");
    save_grid(LabelGrid(32, 32, 3, 0), dir / "data/lab_flat.prgd");
    ScalarGrid half_img(32, 32, 0.2);
    LabelGrid half(32, 32, 3, 0);
    for (int r = 0; r < 32; ++r)
        for (int c = 16; c < 32; ++c) {
            half(r, c) = 2;
            half_img(r, c) = 0.6;
        }
    save_grid(half_img, dir / "data/img_half.prgd");
    save_grid(half, dir / "data/lab_half.prgd");
    std::ofstream(dir / "data/test.tsv") << "# degenerate\ndata/img_flat.prgd\tdata/lab_flat.prgd\n"
                                            "data/img_half.prgd\tdata/lab_half.prgd\n";
    fs::rename(dir / "data/test.tsv", dir / "test.tsv");
    std::ofstream(dir / "data/train.tsv") << "# degenerate\nimg_flat.prgd\tlab_flat.prgd\nimg_half.prgd\tlab_half.prgd\n";
    std::ofstream(dir / "data/val.tsv") << "# degenerate\nimg_flat.prgd\tlab_flat.prgd\n";

    // training on boundary-free and class-deficient maps
    std::ofstream(dir / "cfg.txt") << kTinyConfig << "data_dir = data\n";
    {
        std::string text = slurp(dir / "cfg.txt");
        text.replace(text.find("epochs = 45"), 11, "epochs = 3 ");
        std::ofstream(dir / "cfg.txt") << text;
    }
    const int train_code = run_cli("train --config " + (dir / "cfg.txt").string() + " --out " + (dir / "train").string());
    expect(train_code == 0, "train exit " + std::to_string(train_code));
    expect(!has_nan(slurp(dir / "train/training_log.csv")), "NaN in training log");

    const int eval_code = run_cli("eval --checkpoint " + (dir / "train/checkpoint.prnw").string() + " --manifest " +
                                  (dir / "test.tsv").string() + " --d0 4 --out " + (dir / "eval").string());
    expect(eval_code == 0, "eval exit " + std::to_string(eval_code));
    const std::string metrics = slurp(dir / "eval/metrics.csv");
    expect(metrics.find("img_flat,0,NA,NA,NA,NA,NA,NA") != std::string::npos, "uniform-label row lacks NA markers");
    expect(!has_nan(metrics) && !has_nan(slurp(dir / "eval/delta_u.csv")), "NaN in eval output");

    // constant uncertainty: an all-zero network predicts u = 1 everywhere
    save_checkpoint(checkpoint_tensors(EvidenceNet::zeros({1, 3, 2, 4}), BaseRate::uniform(3)), dir / "zero.prnw");
    const int zero_code = run_cli("eval --checkpoint " + (dir / "zero.prnw").string() + " --manifest " +
                                  (dir / "test.tsv").string() + " --d0 4 --out " + (dir / "eval_zero").string());
    expect(zero_code == 0, "constant-u eval exit " + std::to_string(zero_code));
    const std::string zero_metrics = slurp(dir / "eval_zero/metrics.csv");
    expect(zero_metrics.find("img_half,2,NA,NA,NA") != std::string::npos, "constant u did not yield NA correlations");
    expect(!has_nan(zero_metrics), "NaN in constant-u metrics");

    // library level: no boundary means zero supervision
    std::mt19937_64 rng(3);
    const ScalarGrid u(32, 32, 0.5);
    const auto lu = total_uncertainty_loss(u, {u, u}, flat_img, LabelGrid(32, 32, 3, 0), GateParams{}, NoiseSchedule{},
                                           SamplerConfig{}, rng, SupervisionToggles{});
    expect(lu.value == 0.0 && lu.phi_g == 0.0 && lu.phi_sigma == 0.0 && lu.phi_d == 0.0, "nonzero supervision without boundary");
    expect(!spearman(std::vector<double>{1, 2, 3}, std::vector<double>{4, 4, 4}).has_value(), "constant Spearman defined");

    std::string detail = fmt("train exit %d, eval exit %d, constant-u eval exit %d", train_code, eval_code, zero_code);
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty(), detail};
}

Outcome determinism(const fs::path& work) {
    const fs::path dir = work / "determinism";
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.txt") << "data_dir = data\n";
    const std::string cfg = (dir / "cfg.txt").string();
    std::vector<std::string> problems;
    if (run_cli("generate --config " + cfg + " --out " + (dir / "data").string()) != 0) problems.push_back("generate failed");
    for (const char* run : {"a", "b"}) {
        if (run_cli("train --config " + cfg + " --out " + (dir / run / "train").string()) != 0)
            problems.push_back(std::string("train ") + run + " failed");
        if (run_cli("eval --checkpoint " + (dir / run / "train/checkpoint.prnw").string() + " --manifest " +
                    (dir / "data/test.tsv").string() + " --d0 8 --seed 1234 --out " + (dir / run / "eval").string()) != 0)
            problems.push_back(std::string("eval ") + run + " failed");
    }
    int files = 0, differing = 0;
    if (problems.empty()) {
        for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
            if (!e.is_regular_file()) continue;
            const auto rel = fs::relative(e.path(), dir / "a");
            ++files;
            if (!fs::exists(dir / "b" / rel) || slurp(e.path()) != slurp(dir / "b" / rel)) {
                ++differing;
                problems.push_back("differs: " + rel.string());
            }
        }
        for (const char* f : {"train/checkpoint.prnw", "train/training_log.csv", "eval/metrics.csv", "eval/delta_u.csv"})
            if (!fs::exists(dir / "a" / f)) problems.push_back(std::string("missing ") + f);
    }
    std::string detail = fmt("two default train+eval runs: %d files compared, %d differ", files, differing);
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty(), detail};
}

}  // namespace

int main() {
    const fs::path work = fs::current_path() / "acceptance_work";
    fs::remove_all(work);
    fs::create_directories(work);

    report(1, formulas());
    report(2, oracles());
    report(3, gradients());
    report(4, schedules(work));

    RunConfig cfg;
    cfg.data_dir = (work / "data").string();
    generate_split(cfg.phantom(), cfg.split(), cfg.data_dir);
    const FullRun full = full_run(cfg, work / "full");
    report(5, signs(full));
    report(6, ablations(cfg, full, work));
    report(7, corruption_response(full));
    report(8, degenerate(work));
    report(9, determinism(work));

    int failed = 0;
    for (const auto& [id, o] : results) failed += o.pass ? 0 : 1;
    std::printf("%d of %zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
    return failed == 0 ? 0 : 1;
}
