#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bladapt/gradcheck.hpp>
#include <bladapt/phases.hpp>

#include "oracles.hpp"

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

// Acceptance checks for the scene-adaptation system. Every criterion prints
// one "[criterion N] PASS/FAIL" line with its measured numbers; thresholds
// are fixed constants here, never derived from the run itself.

using namespace bladapt;
namespace fs = std::filesystem;

namespace {

using R = float;  // precision of the command-line pipeline

constexpr std::uint64_t kSeeds[3] = {1, 2, 3};
const char* const kRoot = "acceptance_work";

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void report(int n, bool ok, const std::string& detail) {
    std::printf("[criterion %d] %s: %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

RunConfig base_cfg(std::uint64_t seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.workdir = std::string(kRoot) + "/s" + std::to_string(seed);
    cfg.dump_images = false;
    return cfg;
}

SceneData<R>& find_scene(std::vector<SceneData<R>>& bench, char id) {
    for (auto& s : bench)
        if (s.spec.id == id) return s;
    throw ConfigError(std::string("no scene '") + id + "'");
}

void ensure_gen(const RunConfig& cfg) {
    if (fs::exists(fs::path(cfg.workdir) / "data" / "manifest.csv")) return;
    const double t0 = now_s();
    write_benchmark(cfg.workdir, cfg.seed, cfg.scale, cfg.image_size);
    std::printf("fixture: %s gen (%.1f s)\n", cfg.workdir.c_str(), now_s() - t0);
}

void ensure_learn(std::uint64_t seed, const std::string& mode) {
    auto cfg = base_cfg(seed);
    cfg.mode = mode;
    const auto tag = learn_tag(mode);
    const auto cpath = ckpt_path(cfg.workdir, tag);
    if (fs::exists(cpath)) return;
    const double t0 = now_s();
    auto bench = load_benchmark<R>(cfg.workdir, cfg.scale);
    auto model = Model<R>::make(cfg.seed, mode == "RBL");
    auto recs = learn_phase(model, bench, cfg);
    fs::create_directories(fs::path(cpath).parent_path());
    save_checkpoint(cpath, model.state_tensors());
    write_phase_log(log_path(cfg.workdir, tag), recs);
    std::printf("fixture: %s %s final val psnr %.2f (%.1f s)\n", cfg.workdir.c_str(),
                tag.c_str(), recs.back().psnr, now_s() - t0);
}

void ensure_adapt(std::uint64_t seed, const std::string& mode, char scene,
                  const std::string& init, bool finetune_denoiser = false) {
    auto cfg = base_cfg(seed);
    cfg.mode = mode;
    cfg.scene = scene;
    cfg.decoder_init = init;
    cfg.finetune_denoiser = finetune_denoiser;
    const auto tag = adapt_tag(mode, scene, init);
    const auto cpath = ckpt_path(cfg.workdir, tag);
    if (fs::exists(cpath)) return;
    const double t0 = now_s();
    auto bench = load_benchmark<R>(cfg.workdir, cfg.scale);
    auto& sd = find_scene(bench, scene);
    Model<R> model;
    if (mode == "naive") {
        model = Model<R>::make(cfg.seed, false);
    } else {
        model = load_model<R>(ckpt_path(cfg.workdir, learn_tag(mode)), cfg.seed);
        apply_decoder_init(model, cfg);
    }
    auto recs = adapt_phase(model, sd, cfg);
    fs::create_directories(fs::path(cpath).parent_path());
    save_checkpoint(cpath, model.state_tensors());
    write_phase_log(log_path(cfg.workdir, tag), recs);
    std::printf("fixture: %s %s final val psnr %.2f (%.1f s)\n", cfg.workdir.c_str(),
                tag.c_str(), recs[recs.size() - 1].psnr, now_s() - t0);
}

Model<R> load_fixture_model(std::uint64_t seed, const std::string& tag) {
    return load_model<R>(ckpt_path(base_cfg(seed).workdir, tag), seed);
}

std::vector<SceneData<R>> load_fixture_bench(std::uint64_t seed) {
    const auto cfg = base_cfg(seed);
    return load_benchmark<R>(cfg.workdir, cfg.scale);
}

// Validation psnr by epoch from a phase log.
std::vector<std::pair<int, double>> val_psnr_curve(const std::string& path) {
    std::vector<std::pair<int, double>> out;
    for (const auto& r : read_phase_log(path))
        if (r.split == "val" && (r.phase == "adapt" || r.phase == "naive" || r.phase == "learn"))
            out.emplace_back(r.epoch, r.psnr);
    return out;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(BLADAPT_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Closed-form scaffolding for the hypergradient criteria: upper (v-a)^2,
// lower (v-u)^2, both minimized over scalars.
struct Quadratic {
    Tensor<double> u, v;
    double a;
    Quadratic(double u0, double v0, double a0, const char* uname = "u")
        : u(make_tensor<double>({1}, {u0}, true, uname)),
          v(make_tensor<double>({1}, {v0}, true, "v")),
          a(a0) {}
    LossFn<double> upper() const {
        return [this](Tape<double>& t) {
            t.watch(u);
            auto d = t.add_scalar(v, -a);
            return t.sum(t.mul(d, d));
        };
    }
    LossFn<double> lower() const {
        return [this](Tape<double>& t) {
            auto d = t.sub(v, u);
            return t.sum(t.mul(d, d));
        };
    }
};

} // namespace

TEST_CASE("c00 fixtures: benchmark, learning and adaptation artifacts for three seeds") {
    fs::create_directories(kRoot);
    for (auto seed : kSeeds) {
        auto cfg = base_cfg(seed);
        ensure_gen(cfg);
        ensure_learn(seed, "BL");
        ensure_learn(seed, "RBL");
        ensure_adapt(seed, "BL", 'A', "random");
        ensure_adapt(seed, "BL", 'B', "random");
        ensure_adapt(seed, "BL", 'C', "random");
        ensure_adapt(seed, "naive", 'C', "random");
        // The finetune comparison trains every scene-specific block, decoder and
        // denoiser alike, so the contrast against the zero-epoch model isolates
        // the value of taking adaptation steps at all.
        ensure_adapt(seed, "RBL", 'C', "meta", true);
        for (const char* tag : {"learn_BL", "learn_RBL", "adapt_BL_A_random",
                                "adapt_BL_B_random", "adapt_BL_C_random", "naive_C",
                                "adapt_RBL_C_meta"})
            CHECK(fs::exists(ckpt_path(cfg.workdir, tag)));
    }
}

TEST_CASE("c01 gradient checks on every primitive and full pipelines") {
    constexpr double kTol = 1e-4;
    const double t0 = now_s();
    const auto checks = run_standard_gradchecks(1);
    const double elapsed = now_s() - t0;
    double worst = 0.0;
    std::size_t n_grads = 0;
    for (const auto& c : checks) {
        worst = std::max(worst, c.max_rel_err);
        n_grads += c.checked;
    }
    const bool ok = !checks.empty() && worst <= kTol && elapsed < 120.0;
    report(1, ok,
           fmt("max relative error %.3e over %zu ops (%zu gradients) in %.1f s, tolerance "
               "%.0e, budget 120 s",
               worst, checks.size(), n_grads, elapsed, kTol));
    CHECK(ok);
}

TEST_CASE("c02 one-step hypergradient matches the closed form and is step-size independent") {
    constexpr double kTolGrid = 1e-10;
    constexpr double kTolFd = 1e-9;
    const double t0 = now_s();

    double worst_grid = 0.0;
    const double us[5] = {-2.0, -1.0, 0.0, 1.0, 2.0};
    const double as[5] = {-2.0, -0.5, 0.3, 1.0, 2.0};
    for (double uv : us)
        for (double av : as) {
            Quadratic q(uv, uv, av);
            auto res = bl_hypergradient<double>({q.u}, {q.v}, q.upper(), q.lower(), 0.5);
            worst_grid = std::max(worst_grid, std::abs(res.grad.at("u")[0] - 2.0 * (uv - av)));
        }

    // Bilinear lower problem: the mixed second derivative is constant, so the
    // central difference must reproduce it at every step size.
    double worst_fd = 0.0;
    const Index n = 4;
    Rng rng(5, "accept/fd");
    std::vector<double> uv(n), vv(n), gv(n);
    for (Index i = 0; i < n; ++i) {
        uv[i] = rng.uniform(-1.0, 1.0);
        vv[i] = rng.uniform(-1.0, 1.0);
        gv[i] = rng.uniform(-1.0, 1.0);
    }
    auto u = make_tensor<double>({n}, std::vector<double>(uv), true, "u");
    auto v = make_tensor<double>({n}, std::vector<double>(vv), true, "v");
    auto bilinear = [&u, &v](Tape<double>& t) {
        auto cross = t.mul_scalar(t.sum(t.mul(u, v)), 1.7);
        auto outer = t.mul_scalar(t.mul(t.sum(u), t.sum(v)), 0.6);
        return t.add(cross, outer);
    };
    GradMap<double> dir;
    dir["v"] = gv;
    double gsum = 0.0;
    for (double g : gv) gsum += g;
    for (double eps : {1e-6, 1e-4, 1e-2, 1e-1}) {
        auto mvp = finite_difference_mvp<double>({u}, {v}, dir, bilinear, eps);
        for (Index i = 0; i < n; ++i)
            worst_fd = std::max(worst_fd, std::abs(mvp.at("u")[i] - (1.7 * gv[i] + 0.6 * gsum)));
    }

    const double elapsed = now_s() - t0;
    const bool ok = worst_grid <= kTolGrid && worst_fd <= kTolFd && elapsed < 1.0;
    report(2, ok,
           fmt("closed-form gap %.2e over 25 pairs at step 0.5 (tol %.0e); step-size drift "
               "%.2e over eps 1e-6..1e-1 (tol %.0e); %.2f s",
               worst_grid, kTolGrid, worst_fd, kTolFd, elapsed));
    CHECK(ok);
}

TEST_CASE("c03 meta-initialization hypergradient matches the closed form") {
    constexpr double kTol = 1e-10;
    const double t0 = now_s();
    double worst = 0.0;
    const double ms[5] = {-2.0, -1.0, 0.0, 1.0, 2.0};
    const double as[5] = {-2.0, -0.5, 0.3, 1.0, 2.0};
    for (double mv : ms)
        for (double av : as) {
            Quadratic q(mv, mv, av, "m");
            auto res = rbl_hypergradient<double>({q.u}, {q.v}, q.upper(), q.lower(), 0.5);
            worst = std::max(worst, std::abs(res.grad.at("m")[0] - 2.0 * (mv - av)));
        }
    const double elapsed = now_s() - t0;
    const bool ok = worst <= kTol && elapsed < 1.0;
    report(3, ok, fmt("closed-form gap %.2e over 25 pairs (tol %.0e); %.2f s", worst, kTol,
                      elapsed));
    CHECK(ok);
}

TEST_CASE("c04 encoder parameters are bit-identical after adaptation") {
    bool ok = true;
    std::string detail;
    for (auto seed : kSeeds) {
        const auto bl = load_fixture_model(seed, "learn_BL");
        const auto rbl = load_fixture_model(seed, "learn_RBL");
        const auto enc_bl = values_checksum(bl.encoder.state_tensors());
        const auto enc_rbl = values_checksum(rbl.encoder.state_tensors());
        for (const char* tag :
             {"adapt_BL_A_random", "adapt_BL_B_random", "adapt_BL_C_random"}) {
            const auto m = load_fixture_model(seed, tag);
            if (values_checksum(m.encoder.state_tensors()) != enc_bl) {
                ok = false;
                detail += fmt(" seed %llu %s;", (unsigned long long)seed, tag);
            }
        }
        const auto m = load_fixture_model(seed, "adapt_RBL_C_meta");
        if (values_checksum(m.encoder.state_tensors()) != enc_rbl) {
            ok = false;
            detail += fmt(" seed %llu adapt_RBL_C_meta;", (unsigned long long)seed);
        }
    }
    report(4, ok,
           ok ? std::string("encoder checksums unchanged through 12 adaptations (3 seeds x "
                            "4 runs)")
              : "checksum drift in:" + detail);
    CHECK(ok);
}

TEST_CASE("c05 adapted decoders interchange across the shared encoder") {
    constexpr double kMaxShift = 1.5;
    const double t0 = now_s();
    double shift_a = 0.0, shift_b = 0.0;
    for (auto seed : kSeeds) {
        auto bench = load_fixture_bench(seed);
        auto& sa = find_scene(bench, 'A');
        auto& sb = find_scene(bench, 'B');
        const auto ma = load_fixture_model(seed, "adapt_BL_A_random");
        const auto mb = load_fixture_model(seed, "adapt_BL_B_random");
        REQUIRE(values_checksum(ma.encoder.state_tensors()) ==
                values_checksum(mb.encoder.state_tensors()));
        const double a_matched = test_phase(ma, sa).mean.psnr;
        const double a_crossed = test_phase(mb, sa).mean.psnr;
        const double b_matched = test_phase(mb, sb).mean.psnr;
        const double b_crossed = test_phase(ma, sb).mean.psnr;
        shift_a += std::abs(a_matched - a_crossed) / 3.0;
        shift_b += std::abs(b_matched - b_crossed) / 3.0;
    }
    const double elapsed = now_s() - t0;
    const bool ok = shift_a < kMaxShift && shift_b < kMaxShift && elapsed < 1200.0;
    report(5, ok,
           fmt("mean matched-vs-crossed psnr shift: scene A %.3f dB, scene B %.3f dB "
               "(limit %.1f dB); %.0f s of 1200",
               shift_a, shift_b, kMaxShift, elapsed));
    CHECK(ok);
}

TEST_CASE("c06 frozen-encoder adaptation reaches the from-scratch result in half the epochs") {
    const double t0 = now_s();
    int hits = 0;
    std::string detail;
    const auto cfg = base_cfg(1);
    const int budget = cfg.epochs_adapt;
    for (auto seed : kSeeds) {
        const auto wd = base_cfg(seed).workdir;
        const auto naive = val_psnr_curve(log_path(wd, "naive_C"));
        const auto bl = val_psnr_curve(log_path(wd, "adapt_BL_C_random"));
        REQUIRE(!naive.empty());
        REQUIRE(!bl.empty());
        const double target = naive.back().second;
        int reached = -1;
        for (const auto& [epoch, p] : bl)
            if (p >= target) {
                reached = epoch;
                break;
            }
        const bool hit = reached >= 0 && reached <= budget / 2;
        hits += hit ? 1 : 0;
        detail += fmt(" s%llu: scratch %.2f dB at epoch %d, frozen-encoder %s;",
                      (unsigned long long)seed, target, naive.back().first,
                      reached < 0 ? "never matched" : fmt("matched at epoch %d", reached).c_str());
    }
    const double elapsed = now_s() - t0;
    const bool ok = hits >= 2 && elapsed < 1800.0;
    report(6, ok, fmt("%d of 3 seeds within %d epochs;%s %.0f s", hits, budget / 2,
                      detail.c_str(), elapsed));
    CHECK(ok);
}

TEST_CASE("c07 meta initialization starts adaptation at a lower validation loss") {
    int hits_c = 0, hits_d = 0;
    std::string detail;
    for (auto seed : kSeeds) {
        for (char scene : {'C', 'D'}) {
            auto bench = load_fixture_bench(seed);
            auto& sd = find_scene(bench, scene);
            double loss[2] = {0.0, 0.0};
            const char* inits[2] = {"meta", "random"};
            for (int i = 0; i < 2; ++i) {
                auto cfg = base_cfg(seed);
                cfg.mode = "RBL";
                cfg.scene = scene;
                cfg.decoder_init = inits[i];
                cfg.epochs_adapt = 0;
                auto model = load_fixture_model(seed, "learn_RBL");
                apply_decoder_init(model, cfg);
                const auto recs = adapt_phase(model, sd, cfg);
                REQUIRE(recs.size() == 1);
                loss[i] = recs[0].loss;
            }
            const bool hit = loss[0] < loss[1];
            (scene == 'C' ? hits_c : hits_d) += hit ? 1 : 0;
            detail += fmt(" s%llu%c: meta %.4f vs random %.4f;", (unsigned long long)seed,
                          scene, loss[0], loss[1]);
        }
    }
    const bool ok = hits_c >= 2 && hits_d >= 2;
    report(7, ok,
           fmt("meta below random in %d/3 seeds on C and %d/3 on D (need 2);%s", hits_c,
               hits_d, detail.c_str()));
    CHECK(ok);
}

TEST_CASE("c08 the adaptive denoiser lifts test psnr on the noisy scene") {
    constexpr double kMinGain = 0.5;
    double gain = 0.0;
    std::string detail;
    for (auto seed : kSeeds) {
        auto bench = load_fixture_bench(seed);
        auto& sb = find_scene(bench, 'B');
        const auto m = load_fixture_model(seed, "adapt_BL_B_random");
        const double with = test_phase(m, sb, true).mean.psnr;
        const double without = test_phase(m, sb, false).mean.psnr;
        gain += (with - without) / 3.0;
        detail += fmt(" s%llu: %.2f vs %.2f;", (unsigned long long)seed, with, without);
    }
    const bool ok = gain >= kMinGain;
    report(8, ok, fmt("mean denoiser gain %.3f dB (need %.1f);%s", gain, kMinGain,
                      detail.c_str()));
    CHECK(ok);
}

TEST_CASE("c09 adaptation beats the zero-epoch initialization on psnr and ssim") {
    int hits = 0;
    std::string detail;
    for (auto seed : kSeeds) {
        auto bench = load_fixture_bench(seed);
        auto& sc = find_scene(bench, 'C');
        const auto adapted = load_fixture_model(seed, "adapt_RBL_C_meta");
        auto zero = load_fixture_model(seed, "learn_RBL");
        auto cfg = base_cfg(seed);
        cfg.mode = "RBL";
        cfg.scene = 'C';
        cfg.decoder_init = "meta";
        apply_decoder_init(zero, cfg);
        const auto ra = test_phase(adapted, sc);
        const auto rz = test_phase(zero, sc);
        const bool hit = ra.mean.psnr > rz.mean.psnr && ra.mean.ssim > rz.mean.ssim;
        hits += hit ? 1 : 0;
        detail += fmt(" s%llu: psnr %.2f vs %.2f, ssim %.4f vs %.4f;",
                      (unsigned long long)seed, ra.mean.psnr, rz.mean.psnr, ra.mean.ssim,
                      rz.mean.ssim);
    }
    const bool ok = hits == 3;
    report(9, ok, fmt("%d/3 seeds improved on both metrics;%s", hits, detail.c_str()));
    CHECK(ok);
}

TEST_CASE("c10 quality metrics match brute-force oracles and closed forms") {
    constexpr double kTol = 1e-6;
    Rng rng(31, "accept/metrics");
    double worst = 0.0;

    // psnr, de and loe on small random images; ssim needs its 11x11 window so
    // it runs on the smallest sizes that admit one.
    for (int trial = 0; trial < 100; ++trial) {
        const Index h = 2 + static_cast<Index>(rng.below(7));
        const Index w = 2 + static_cast<Index>(rng.below(7));
        auto a = zeros<double>({3, h, w});
        auto b = zeros<double>({3, h, w});
        for (auto& x : a->values) x = rng.uniform(0.0, 1.0);
        for (auto& x : b->values) x = rng.uniform(0.0, 1.0);
        worst = std::max(worst, std::abs(psnr(a, b) - oracles::psnr_direct(a->values, b->values)));
        worst = std::max(worst, std::abs(de_entropy(a) - oracles::de_direct(a->values, h, w)));
        worst = std::max(
            worst, std::abs(loe(a, b) - oracles::loe_direct(a->values, b->values, h, w)));
    }
    for (int trial = 0; trial < 100; ++trial) {
        const Index h = 11 + static_cast<Index>(rng.below(6));
        const Index w = 11 + static_cast<Index>(rng.below(6));
        auto a = zeros<double>({3, h, w});
        auto b = zeros<double>({3, h, w});
        for (auto& x : a->values) x = rng.uniform(0.0, 1.0);
        for (auto& x : b->values) x = rng.uniform(0.0, 1.0);
        worst = std::max(worst,
                         std::abs(ssim(a, b) - oracles::ssim_direct(a->values, b->values, h, w)));
    }

    // Closed forms.
    auto x0 = zeros<double>({3, 4, 4});
    auto x1 = zeros<double>({3, 4, 4});
    for (auto& v : x1->values) v = 0.1;
    const double p20 = psnr(x0, x1);
    auto flat = zeros<double>({3, 8, 8});
    for (auto& v : flat->values) v = 0.25;
    auto half = zeros<double>({3, 8, 8});
    for (std::size_t i = 0; i < half->values.size(); ++i) half->values[i] = i % 2 ? 1.0 : 0.0;
    auto ramp = zeros<double>({3, 16, 16});
    for (Index i = 0; i < 256; ++i)
        for (Index c = 0; c < 3; ++c) ramp->values[c * 256 + i] = static_cast<double>(i) / 255.0;
    auto any = zeros<double>({3, 12, 12});
    for (auto& v : any->values) v = rng.uniform(0.0, 1.0);
    const bool closed = std::abs(p20 - 20.0) <= 1e-12 && de_entropy(flat) == 0.0 && de_entropy(half) == 1.0 &&
                        de_entropy(ramp) == 8.0 && ssim(any, any) == 1.0 && loe(any, any) == 0.0;

    const bool ok = worst <= kTol && closed;
    report(10, ok,
           fmt("max oracle gap %.2e over 300 random images (tol %.0e); closed forms "
               "psnr@mse0.01 %.12f, de 0/1/8, ssim self 1, loe self 0: %s",
               worst, kTol, p20, closed ? "hold" : "VIOLATED"));
    CHECK(ok);
}

TEST_CASE("c11 illumination stays in (0,1) and reconstructs the input") {
    constexpr double kTol = 1e-6;
    const auto model = load_fixture_model(1, "learn_BL");
    auto bench = load_fixture_bench(1);
    std::size_t range_bad = 0, recon_bad = 0, checked = 0, guarded = 0, images = 0;
    double worst = 0.0;
    for (auto& scene : bench) {
        for (const auto& pair : scene.test_pool) {
            Tape<R> tape;
            auto out = enhance(tape, model, stack_images<R>({pair.low}), BatchNormMode::Eval);
            const auto& x = out.illumination->values;
            const auto& z = out.reflectance->values;
            const auto& y = pair.low->values;
            ++images;
            for (std::size_t i = 0; i < y.size(); ++i) {
                if (!(x[i] > 0.0f && x[i] < 1.0f)) ++range_bad;
                if (x[i] >= static_cast<float>(kDenomFloor) &&
                    z[i] < static_cast<float>(kReflectanceMax)) {
                    ++checked;
                    const double err = std::abs(static_cast<double>(x[i]) * z[i] - y[i]);
                    worst = std::max(worst, err);
                    if (err > kTol) ++recon_bad;
                } else {
                    ++guarded;
                }
            }
        }
    }
    const bool ok = images == 50 && range_bad == 0 && checked > 0 && recon_bad == 0;
    report(11, ok,
           fmt("%zu images: %zu range violations; reconstruction max err %.2e over %zu "
               "unguarded pixels (tol %.0e), %zu guarded",
               images, range_bad, worst, checked, kTol, guarded));
    CHECK(ok);
}

TEST_CASE("c12 the full pipeline is byte-deterministic") {
    const fs::path root = fs::path(kRoot) / "determinism";
    const fs::path wd[2] = {root / "r1", root / "r2"};
    const double t0 = now_s();
    if (!fs::exists(wd[0] / "reports" / "test_BL_C.csv") ||
        !fs::exists(wd[1] / "reports" / "test_BL_C.csv")) {
        fs::remove_all(root);
        fs::create_directories(root);
        for (int r = 0; r < 2; ++r) {
            const fs::path cfgp = root / ("run" + std::to_string(r) + ".cfg");
            std::ofstream f(cfgp);
            f << "seed=1\nmode=BL\nscale=tiny\nscene=C\nepochs_learn=2\nepochs_adapt=2\n"
              << "dump_images=false\nworkdir=" << wd[r].string() << "\n";
            f.close();
            const std::string c = "--config " + cfgp.string();
            REQUIRE(run_cli("gen " + c) == 0);
            REQUIRE(run_cli("learn " + c) == 0);
            REQUIRE(run_cli("adapt " + c) == 0);
            REQUIRE(run_cli("test " + c) == 0);
        }
    }
    const std::string rep0 = slurp(wd[0] / "reports" / "test_BL_C.csv");
    const std::string rep1 = slurp(wd[1] / "reports" / "test_BL_C.csv");
    const std::string man0 = slurp(wd[0] / "data" / "manifest.csv");
    const std::string man1 = slurp(wd[1] / "data" / "manifest.csv");
    const bool ok = !rep0.empty() && rep0 == rep1 && man0 == man1;
    report(12, ok,
           fmt("two gen+learn+adapt+test runs: report %zu bytes %s, manifest %zu bytes %s; "
               "%.0f s",
               rep0.size(), rep0 == rep1 ? "identical" : "DIFFER", man0.size(),
               man0 == man1 ? "identical" : "DIFFER", now_s() - t0));
    CHECK(ok);
}
