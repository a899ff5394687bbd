#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include "bladapt/config.hpp"
#include "bladapt/data.hpp"
#include "bladapt/gradcheck.hpp"
#include "bladapt/phases.hpp"

namespace {

using bladapt::RunConfig;
using Real = float;

constexpr double kGradTol = 1e-4;

bladapt::SceneData<Real>& find_scene(std::vector<bladapt::SceneData<Real>>& bench, char id) {
    for (auto& s : bench)
        if (s.spec.id == id) return s;
    throw bladapt::ConfigError(std::string("no scene '") + id + "' in the benchmark");
}

void require_file(const std::string& path, const std::string& hint) {
    if (!std::filesystem::exists(path))
        throw bladapt::IoError("missing checkpoint '" + path + "' (" + hint + ")");
}

int cmd_gen(const RunConfig& cfg) {
    const auto entries =
        bladapt::write_benchmark(cfg.workdir, cfg.seed, cfg.scale, cfg.image_size);
    std::printf("generated %zu images under %s/data (seed %llu, scale %s)\n", entries.size(),
                cfg.workdir.c_str(), static_cast<unsigned long long>(cfg.seed),
                cfg.scale.c_str());
    return 0;
}

int cmd_learn(const RunConfig& cfg) {
    if (cfg.mode == "naive")
        throw bladapt::ConfigError("the learning phase runs in BL or RBL mode; naive is an "
                                   "adaptation baseline");
    auto bench = bladapt::load_benchmark<Real>(cfg.workdir, cfg.scale);
    auto model = bladapt::Model<Real>::make(cfg.seed, cfg.mode == "RBL");
    auto records = bladapt::learn_phase(model, bench, cfg);
    const std::string tag = bladapt::learn_tag(cfg.mode);
    const std::string cpath = bladapt::ckpt_path(cfg.workdir, tag);
    std::filesystem::create_directories(std::filesystem::path(cpath).parent_path());
    bladapt::save_checkpoint(cpath, model.state_tensors());
    bladapt::write_phase_log(bladapt::log_path(cfg.workdir, tag), records);
    if (!records.empty())
        std::printf("learn %s: %lld epochs, final val loss %.6f psnr %.2f\n", cfg.mode.c_str(),
                    static_cast<long long>(cfg.epochs_learn), records.back().loss,
                    records.back().psnr);
    std::printf("wrote %s\n", cpath.c_str());
    return 0;
}

int cmd_adapt(RunConfig cfg) {
    auto bench = bladapt::load_benchmark<Real>(cfg.workdir, cfg.scale);
    auto& scene = find_scene(bench, cfg.scene);
    bladapt::Model<Real> model;
    if (cfg.mode == "naive") {
        model = bladapt::Model<Real>::make(cfg.seed, false);
    } else {
        const std::string lpath = bladapt::ckpt_path(cfg.workdir, bladapt::learn_tag(cfg.mode));
        require_file(lpath, "run the learn command for this workdir and mode first");
        model = bladapt::load_model<Real>(lpath, cfg.seed);
        bladapt::apply_decoder_init(model, cfg);
    }
    // Parameters must never move; running statistics may, when unfrozen.
    const auto enc_params = model.encoder.learnables();
    const std::uint64_t pre = bladapt::values_checksum(enc_params);
    auto records = bladapt::adapt_phase(model, scene, cfg);
    const std::uint64_t post = bladapt::values_checksum(enc_params);

    if (cfg.mode != "naive") {
        const bool frozen_ok = pre == post;
        bladapt::PhaseRecord check;
        check.phase = "freeze_check";
        check.epoch = static_cast<int>(cfg.epochs_adapt);
        check.split = frozen_ok ? "pass" : "fail";
        check.seconds = records.empty() ? 0.0 : records.back().seconds;
        records.push_back(check);
        std::printf("encoder frozen: %s (checksum %016llx)\n", frozen_ok ? "pass" : "FAIL",
                    static_cast<unsigned long long>(post));
        if (!frozen_ok)
            throw bladapt::FrozenViolationError("encoder parameters changed during adaptation");
    }
    const std::string tag = bladapt::adapt_tag(cfg.mode, cfg.scene, cfg.decoder_init);
    const std::string cpath = bladapt::ckpt_path(cfg.workdir, tag);
    std::filesystem::create_directories(std::filesystem::path(cpath).parent_path());
    bladapt::save_checkpoint(cpath, model.state_tensors());
    bladapt::write_phase_log(bladapt::log_path(cfg.workdir, tag), records);
    std::printf("adapt %s scene %c: %lld epochs, final val loss %.6f psnr %.2f\n",
                cfg.mode.c_str(), cfg.scene, static_cast<long long>(cfg.epochs_adapt),
                records[records.size() - (cfg.mode != "naive" ? 2 : 1)].loss,
                records[records.size() - (cfg.mode != "naive" ? 2 : 1)].psnr);
    std::printf("wrote %s\n", cpath.c_str());
    return 0;
}

int cmd_test(const RunConfig& cfg) {
    auto bench = bladapt::load_benchmark<Real>(cfg.workdir, cfg.scale);
    auto& scene = find_scene(bench, cfg.scene);
    std::string cpath = cfg.checkpoint;
    if (cpath.empty())
        cpath = bladapt::ckpt_path(cfg.workdir,
                                   bladapt::adapt_tag(cfg.mode, cfg.scene, cfg.decoder_init));
    require_file(cpath, "run the adapt command for this workdir, mode and scene first, or pass "
                        "checkpoint= in the config");
    auto model = bladapt::load_model<Real>(cpath, cfg.seed);
    const std::string dumps =
        cfg.dump_images ? bladapt::dump_dir(cfg.workdir, cfg.mode, cfg.scene) : "";
    auto rep = bladapt::test_phase(model, scene, true, dumps);
    const std::string rpath = bladapt::report_path(cfg.workdir, cfg.mode, cfg.scene);
    bladapt::write_report(rpath, rep);
    std::printf("test %s scene %c: mean psnr %.4f ssim %.4f de %.4f loe %.4f over %zu images\n",
                cfg.mode.c_str(), cfg.scene, rep.mean.psnr, rep.mean.ssim, rep.mean.de,
                rep.mean.loe, rep.rows.size());
    std::printf("wrote %s\n", rpath.c_str());
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
    const auto checks = bladapt::run_standard_gradchecks(cfg.seed);
    bool all_ok = true;
    std::printf("%-24s %12s %8s  %s\n", "op", "max_rel_err", "checked", "status");
    for (const auto& c : checks) {
        const bool ok = c.max_rel_err <= kGradTol;
        all_ok = all_ok && ok;
        std::printf("%-24s %12.3e %8zu  %s\n", c.op.c_str(), c.max_rel_err, c.checked,
                    ok ? "pass" : "FAIL");
    }
    if (!all_ok) throw bladapt::NumericError("gradient checks exceeded tolerance");
    std::printf("all %zu gradient checks within %.0e\n", checks.size(), kGradTol);
    return 0;
}

int cmd_oracle(const RunConfig&) {
    const auto rows = bladapt::run_bilevel_oracle();
    std::printf("%8s %6s %10s %14s %14s %12s\n", "u", "xi", "eps", "approx", "exact", "gap");
    for (const auto& r : rows)
        std::printf("%8.2f %6.2f %10.1e %14.10f %14.10f %12.3e\n", r.u, r.xi, r.eps, r.approx,
                    r.exact, r.gap);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"bilevel fast scene adaptation for low-light enhancement"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    std::string mode, scale, workdir;

    const char* names[] = {"gen", "learn", "adapt", "test", "gradcheck", "oracle"};
    const char* descs[] = {"generate the synthetic benchmark",
                           "run the bilevel learning phase",
                           "adapt to one scene (encoder frozen unless naive)",
                           "evaluate a checkpoint on one scene's test split",
                           "finite-difference checks for all gradients",
                           "closed-form bilevel solver diagnostics"};
    for (int i = 0; i < 6; ++i) {
        auto* sub = app.add_subcommand(names[i], descs[i]);
        sub->add_option("--config", config_path, "key=value config file");
        sub->add_option("--seed", seed, "master random seed");
        sub->add_option("--mode", mode, "BL | RBL | naive");
        sub->add_option("--scale", scale, "tiny | small");
        sub->add_option("--workdir", workdir, "working directory for artifacts");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        RunConfig cfg;
        if (!config_path.empty()) cfg = bladapt::load_config(config_path);
        if (sub->count("--seed")) cfg.seed = seed;
        if (!mode.empty()) cfg.mode = mode;
        if (!scale.empty()) cfg.scale = scale;
        if (!workdir.empty()) cfg.workdir = workdir;
        cfg.validate();

        const std::string cmd = sub->get_name();
        if (cmd == "gen") return cmd_gen(cfg);
        if (cmd == "learn") return cmd_learn(cfg);
        if (cmd == "adapt") return cmd_adapt(cfg);
        if (cmd == "test") return cmd_test(cfg);
        if (cmd == "gradcheck") return cmd_gradcheck(cfg);
        return cmd_oracle(cfg);
    } catch (const bladapt::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    } catch (const bladapt::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const bladapt::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
