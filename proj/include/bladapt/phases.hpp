#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bladapt/bilevel.hpp"
#include "bladapt/checkpoint.hpp"
#include "bladapt/config.hpp"
#include "bladapt/data.hpp"
#include "bladapt/enhance.hpp"
#include "bladapt/losses.hpp"
#include "bladapt/metrics.hpp"
#include "bladapt/nn.hpp"

namespace bladapt {

struct PhaseRecord {
    std::string phase;
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    double psnr = 0.0;
    double seconds = 0.0;
};

// Fixed-precision CSV numeral; infinities and NaNs spelled out.
inline std::string fmt_fixed(double v, int prec) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return std::string(buf);
}

inline void write_phase_log(const std::string& path, const std::vector<PhaseRecord>& records) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write phase log '" + path + "'");
    f << "phase,epoch,split,loss,psnr,seconds\n";
    for (const auto& r : records)
        f << r.phase << "," << r.epoch << "," << r.split << "," << fmt_fixed(r.loss, 8) << ","
          << fmt_fixed(r.psnr, 4) << "," << fmt_fixed(r.seconds, 3) << "\n";
}

inline std::vector<PhaseRecord> read_phase_log(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read phase log '" + path + "'");
    std::vector<PhaseRecord> out;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        PhaseRecord r;
        std::stringstream ss(line);
        std::string col;
        std::getline(ss, r.phase, ',');
        std::getline(ss, col, ',');
        r.epoch = std::stoi(col);
        std::getline(ss, r.split, ',');
        std::getline(ss, col, ',');
        r.loss = std::stod(col);
        std::getline(ss, col, ',');
        r.psnr = col == "nan" ? std::nan("") : col == "inf" ? INFINITY : std::stod(col);
        std::getline(ss, col, ',');
        r.seconds = std::stod(col);
        out.push_back(std::move(r));
    }
    return out;
}

// ---- workdir layout ----

inline std::string learn_tag(const std::string& mode) { return "learn_" + mode; }

inline std::string adapt_tag(const std::string& mode, char scene, const std::string& init) {
    if (mode == "naive") return std::string("naive_") + scene;
    return "adapt_" + mode + "_" + scene + "_" + init;
}

inline std::string ckpt_path(const std::string& workdir, const std::string& tag) {
    return workdir + "/checkpoints/" + tag + ".ckpt";
}
inline std::string log_path(const std::string& workdir, const std::string& tag) {
    return workdir + "/logs/" + tag + ".csv";
}
inline std::string report_path(const std::string& workdir, const std::string& mode, char scene) {
    return workdir + "/reports/test_" + mode + "_" + scene + ".csv";
}
inline std::string dump_dir(const std::string& workdir, const std::string& mode, char scene) {
    return workdir + "/dumps/test_" + mode + "_" + scene;
}

template <typename T>
std::uint64_t values_checksum(const std::vector<Tensor<T>>& ts) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& t : ts) {
        mix_bytes(t->name.data(), t->name.size());
        mix_bytes(t->values.data(), t->values.size() * sizeof(T));
    }
    return h;
}

// ---- batches and loss closures ----

template <typename T>
struct Batch {
    Tensor<T> low;  // [N,3,H,W]
    Tensor<T> gt;   // null unless every item is paired
};

template <typename T>
Batch<T> make_batch(const std::vector<const ImagePair<T>*>& items) {
    std::vector<Tensor<T>> lows, gts;
    bool paired = true;
    for (const auto* p : items) {
        lows.push_back(p->low);
        if (p->gt) gts.push_back(p->gt);
        else paired = false;
    }
    Batch<T> b;
    b.low = stack_images(lows);
    if (paired) b.gt = stack_images(gts);
    return b;
}

template <typename T>
using OverrideBuilder = std::function<ParamOverride<T>(Tape<T>&)>;

// Decoder weights presented to the tape as v + (meta - stop_grad(meta)): the
// values equal v, and gradients reach both v (inner variable) and the
// meta-initialization (upper variable) with identity Jacobians, which is what
// the episodic-reset coupling linearizes to.
template <typename T>
OverrideBuilder<T> meta_displacement(std::vector<Tensor<T>> v, std::vector<Tensor<T>> meta) {
    return [v = std::move(v), meta = std::move(meta)](Tape<T>& tape) {
        ParamOverride<T> ov;
        for (std::size_t i = 0; i < v.size(); ++i)
            ov[v[i].get()] = tape.add(v[i], tape.sub(meta[i], tape.detach(meta[i])));
        return ov;
    };
}

// Scene brightening objective: supervised reflectance MSE when ground truth
// exists, fidelity+smoothness on the illumination otherwise.
template <typename T>
LossFn<T> make_brightening_loss(const Model<T>* m, Batch<T> batch, ForwardModes modes,
                                SmoothnessContext<T> ctx, OverrideBuilder<T> ovb = nullptr) {
    return [m, batch, modes, ctx, ovb](Tape<T>& tape) -> Tensor<T> {
        ParamOverride<T> ov;
        const ParamOverride<T>* ovp = nullptr;
        if (ovb) {
            ov = ovb(tape);
            ovp = &ov;
        }
        Tensor<T> x = estimate_illumination(tape, m->encoder, m->decoder, batch.low, modes, ovp);
        if (batch.gt) {
            Tensor<T> z = reflectance<T>(tape, batch.low, x);
            return supervised_loss(tape, z, batch.gt);
        }
        return unsupervised_loss(tape, x, batch.low, ctx);
    };
}

// ---- evaluation ----

template <typename T>
struct EvalStats {
    double loss = 0.0;
    double psnr = 0.0;  // NaN when no ground truth
};

template <typename T>
EvalStats<T> evaluate_pool(const Model<T>& m, const std::vector<ImagePair<T>>& pool,
                           const RunConfig& cfg, bool use_denoiser = true) {
    SmoothnessContext<T> ctx{static_cast<T>(cfg.sigma_smooth), static_cast<T>(cfg.lambda_fidelity)};
    double loss_sum = 0.0;
    double psnr_sum = 0.0;
    std::size_t psnr_n = 0;
    std::size_t i = 0;
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    while (i < pool.size()) {
        std::vector<const ImagePair<T>*> items;
        for (; items.size() < bs && i < pool.size(); ++i) items.push_back(&pool[i]);
        Batch<T> b = make_batch(items);
        Tape<T> tape;
        auto out = enhance(tape, m, b.low, BatchNormMode::Eval, nullptr, use_denoiser);
        if (b.gt) {
            Tape<T> lt;
            // loss recomputed on its own tape to keep this a pure read
            auto loss = make_brightening_loss(&m, b, ForwardModes(BatchNormMode::Eval), ctx)(lt);
            loss_sum += static_cast<double>(loss->values[0]) * static_cast<double>(items.size());
            const Index N = b.low->shape[0];
            const Index chw = b.low->shape[1] * b.low->shape[2] * b.low->shape[3];
            for (Index n = 0; n < N; ++n) {
                auto img = make_tensor<T>({b.low->shape[1], b.low->shape[2], b.low->shape[3]},
                                          std::vector<T>(out.output->values.begin() + n * chw,
                                                         out.output->values.begin() + (n + 1) * chw));
                auto ref = make_tensor<T>(img->shape,
                                          std::vector<T>(b.gt->values.begin() + n * chw,
                                                         b.gt->values.begin() + (n + 1) * chw));
                psnr_sum += psnr(img, ref);
                ++psnr_n;
            }
        } else {
            Tape<T> lt;
            auto loss = make_brightening_loss(&m, b, ForwardModes(BatchNormMode::Eval), ctx)(lt);
            loss_sum += static_cast<double>(loss->values[0]) * static_cast<double>(items.size());
        }
    }
    EvalStats<T> s;
    s.loss = loss_sum / static_cast<double>(pool.size());
    s.psnr = psnr_n ? psnr_sum / static_cast<double>(psnr_n) : std::nan("");
    return s;
}

// ---- learning phase ----

// Per minibatch: inner decoder step on D_tr, outer encoder step through the
// one-step hypergradient on D_val, the meta-initialization step (RBL), and an
// interleaved denoiser step on the mixed noisy/clean batch. Batch statistics
// are used without touching the running buffers inside the bilevel probes; a
// dedicated refresh forward keeps the running stats current for evaluation.
template <typename T>
std::vector<PhaseRecord> learn_phase(Model<T>& model, std::vector<SceneData<T>>& bench,
                                     const RunConfig& cfg) {
    const bool rbl = cfg.mode == "RBL";
    std::vector<SceneData<T>*> scenes;
    for (auto& s : bench)
        if (s.spec.learnable) scenes.push_back(&s);
    if (scenes.size() < 2)
        throw ConfigError("learn_phase: need at least 2 learning scenes, found " +
                          std::to_string(scenes.size()));
    bool any_noisy = false, any_clean = false;
    for (const auto* s : scenes) {
        (s->spec.noisy() ? any_noisy : any_clean) = true;
        if (!s->spec.paired)
            throw ConfigError("learn_phase: learning scenes must be paired");
    }
    if (!any_noisy || !any_clean)
        throw ConfigError("learn_phase: learning scenes must include a noisy and a clean one");

    std::vector<ImagePair<T>> d_tr, d_val;
    for (auto* s : scenes) {
        std::vector<ImagePair<T>> tr, val;
        split_pool(s->learn_pool, tr, val);
        d_tr.insert(d_tr.end(), tr.begin(), tr.end());
        d_val.insert(d_val.end(), val.begin(), val.end());
    }

    const auto u = model.encoder.learnables();
    const auto v = model.decoder.learnables();
    const auto g_params = model.denoiser.learnables();
    if (rbl && model.meta_init.empty())
        throw ConfigError("learn_phase: RBL mode requires a meta-initialization");

    const T xi = static_cast<T>(cfg.lr_inner);
    const T fd = static_cast<T>(cfg.fd_scale);
    const T clip = static_cast<T>(cfg.clip_norm);
    SmoothnessContext<T> ctx{static_cast<T>(cfg.sigma_smooth),
                             static_cast<T>(cfg.lambda_fidelity)};
    AdamState<T> st_u, st_meta, st_g;
    Rng shuffle_rng(cfg.seed, "learn/shuffle");
    Rng val_rng(cfg.seed, "learn/val");

    std::vector<PhaseRecord> records;
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    std::int64_t global_step = 0;

    for (int epoch = 1; epoch <= cfg.epochs_learn; ++epoch) {
        std::vector<std::size_t> order(d_tr.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);

        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const ImagePair<T>*> tr_items;
            for (std::size_t k = pos;
                 k < std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size)); ++k)
                tr_items.push_back(&d_tr[order[k]]);
            std::vector<const ImagePair<T>*> val_items;
            for (std::int64_t k = 0; k < cfg.batch_size; ++k)
                val_items.push_back(&d_val[val_rng.below(d_val.size())]);

            Batch<T> tr_batch = make_batch(tr_items);
            Batch<T> val_batch = make_batch(val_items);
            const ForwardModes probe_modes(BatchNormMode::TrainNoUpdate);
            auto f_tr = make_brightening_loss(&model, tr_batch, probe_modes, ctx);
            auto F_val = make_brightening_loss(&model, val_batch, probe_modes, ctx);

            if (rbl && global_step % cfg.episode_len == 0)
                for (std::size_t i = 0; i < v.size(); ++i) v[i]->values = model.meta_init[i]->values;

            // (i) inner decoder step
            assign_values(v, lower_step(v, f_tr, xi));

            // (ii) outer encoder step
            auto res = bl_hypergradient(u, v, F_val, f_tr, xi, fd);
            clip_gradients(res.grad, clip);
            adam_update(u, res.grad, st_u, static_cast<T>(cfg.lr_outer),
                        static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
                        static_cast<T>(cfg.adam_eps));

            // (iii) meta-initialization step
            if (rbl) {
                auto ovb = meta_displacement<T>(v, model.meta_init);
                auto h_tr = make_brightening_loss(&model, tr_batch, probe_modes, ctx, ovb);
                auto H_val = make_brightening_loss(&model, val_batch, probe_modes, ctx, ovb);
                auto mres = rbl_hypergradient(model.meta_init, v, H_val, h_tr, xi, fd);
                clip_gradients(mres.grad, clip);
                adam_update(model.meta_init, mres.grad, st_meta, static_cast<T>(cfg.lr_outer),
                            static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
                            static_cast<T>(cfg.adam_eps));
            }

            // (iv) denoiser step on the mixed batch, split by source
            {
                std::vector<const ImagePair<T>*> noisy_items, clean_items;
                for (const auto* p : tr_items)
                    (p->noisy ? noisy_items : clean_items).push_back(p);
                Tape<T> tape;
                auto run_group = [&](const std::vector<const ImagePair<T>*>& items)
                    -> std::pair<Tensor<T>, Tensor<T>> {
                    Batch<T> b = make_batch(items);
                    Tensor<T> x = estimate_illumination(tape, model.encoder, model.decoder,
                                                        b.low, probe_modes);
                    Tensor<T> z = tape.detach(reflectance<T>(tape, b.low, x));
                    return {denoise(tape, model.denoiser, z).output, b.gt};
                };
                std::optional<std::pair<Tensor<T>, Tensor<T>>> ga, gb;
                if (!noisy_items.empty()) ga = run_group(noisy_items);
                if (!clean_items.empty()) gb = run_group(clean_items);
                Tensor<T> loss = adaptive_denoise_loss<T>(
                    tape, ga ? &ga->first : nullptr, ga ? &ga->second : nullptr,
                    gb ? &gb->first : nullptr, gb ? &gb->second : nullptr);
                GradMap<T> gg = tape.backward(loss, names_of(g_params));
                clip_gradients(gg, clip);
                adam_update(g_params, gg, st_g, static_cast<T>(cfg.lr_outer),
                            static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
                            static_cast<T>(cfg.adam_eps));
            }

            // (v) running-statistics refresh
            {
                Tape<T> tape;
                estimate_illumination(tape, model.encoder, model.decoder, tr_batch.low,
                                      ForwardModes(BatchNormMode::Train));
            }
            ++global_step;
        }

        auto tr_stats = evaluate_pool(model, d_tr, cfg);
        auto val_stats = evaluate_pool(model, d_val, cfg);
        records.push_back({"learn", epoch, "train", tr_stats.loss, tr_stats.psnr, elapsed()});
        records.push_back({"learn", epoch, "val", val_stats.loss, val_stats.psnr, elapsed()});
    }
    return records;
}

// ---- adaptation phase ----

// Plain ADAM on the scene loss. In BL/RBL modes the encoder is frozen
// (gradient flow off, update guard on, optionally statistics pinned); naive
// mode trains the whole fresh network as the from-scratch baseline.
template <typename T>
std::vector<PhaseRecord> adapt_phase(Model<T>& model, SceneData<T>& scene, const RunConfig& cfg) {
    const bool naive = cfg.mode == "naive";
    std::vector<ImagePair<T>> d_tr, d_val;
    split_pool(scene.adapt_pool, d_tr, d_val);
    if (d_tr.empty() || d_val.empty())
        throw ConfigError("adapt_phase: adaptation pool too small to split");

    const auto enc_params = model.encoder.learnables();
    std::vector<Tensor<T>> train_params = model.decoder.learnables();
    if (naive) {
        auto e = enc_params;
        train_params.insert(train_params.end(), e.begin(), e.end());
    }
    if (!naive) {
        set_requires_grad(enc_params, false);
        set_frozen(enc_params, true);
    }
    // The denoiser keeps its split-group objective; it only has a training
    // signal when the scene supplies ground truth.
    const bool train_g = (naive || cfg.finetune_denoiser) && scene.spec.paired;
    const auto g_params = model.denoiser.learnables();
    const ForwardModes train_modes =
        naive ? ForwardModes(BatchNormMode::Train)
              : ForwardModes(cfg.freeze_bn_stats ? BatchNormMode::Eval : BatchNormMode::Train,
                             BatchNormMode::Train);

    SmoothnessContext<T> ctx{static_cast<T>(cfg.sigma_smooth),
                             static_cast<T>(cfg.lambda_fidelity)};
    AdamState<T> st, st_g;
    Rng shuffle_rng(cfg.seed, std::string("adapt/shuffle/") + scene.spec.id);
    const T clip = static_cast<T>(cfg.clip_norm);

    std::vector<PhaseRecord> records;
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    const std::string tag = naive ? "naive" : "adapt";

    auto val0 = evaluate_pool(model, d_val, cfg);
    records.push_back({tag, 0, "val", val0.loss, val0.psnr, elapsed()});

    for (int epoch = 1; epoch <= cfg.epochs_adapt; ++epoch) {
        std::vector<std::size_t> order(d_tr.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);
        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const ImagePair<T>*> items;
            for (std::size_t k = pos;
                 k < std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size)); ++k)
                items.push_back(&d_tr[order[k]]);
            Batch<T> batch = make_batch(items);
            {
                Tape<T> tape;
                auto loss = make_brightening_loss(&model, batch, train_modes, ctx)(tape);
                GradMap<T> grads = tape.backward(loss, names_of(train_params));
                if (!all_finite(grads)) throw NumericError("adapt_phase: non-finite gradient");
                clip_gradients(grads, clip);
                adam_update(train_params, grads, st, static_cast<T>(cfg.lr_adapt),
                            static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
                            static_cast<T>(cfg.adam_eps));
            }
            if (train_g) {
                // Statistics were already refreshed by the decoder step.
                auto quiet = [](BatchNormMode m) {
                    return m == BatchNormMode::Train ? BatchNormMode::TrainNoUpdate : m;
                };
                Tape<T> tape;
                Tensor<T> x = estimate_illumination(
                    tape, model.encoder, model.decoder, batch.low,
                    ForwardModes(quiet(train_modes.enc), quiet(train_modes.dec)));
                Tensor<T> z = tape.detach(reflectance<T>(tape, batch.low, x));
                Tensor<T> zhat = denoise(tape, model.denoiser, z).output;
                const bool noisy = scene.spec.noisy();
                Tensor<T> loss = adaptive_denoise_loss<T>(
                    tape, noisy ? &zhat : nullptr, noisy ? &batch.gt : nullptr,
                    noisy ? nullptr : &zhat, noisy ? nullptr : &batch.gt);
                GradMap<T> grads = tape.backward(loss, names_of(g_params));
                clip_gradients(grads, clip);
                adam_update(g_params, grads, st_g, static_cast<T>(cfg.lr_adapt),
                            static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
                            static_cast<T>(cfg.adam_eps));
            }
        }
        auto tr_stats = evaluate_pool(model, d_tr, cfg);
        auto val_stats = evaluate_pool(model, d_val, cfg);
        records.push_back({tag, epoch, "train", tr_stats.loss, tr_stats.psnr, elapsed()});
        records.push_back({tag, epoch, "val", val_stats.loss, val_stats.psnr, elapsed()});
    }
    if (!naive) set_frozen(enc_params, false);
    return records;
}

// ---- testing phase ----

struct MetricRow {
    std::string id;
    double psnr = 0.0, ssim = 0.0, de = 0.0, loe = 0.0;
};

struct TestReport {
    std::vector<MetricRow> rows;
    MetricRow mean;
};

inline void write_report(const std::string& path, const TestReport& rep) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write report '" + path + "'");
    f << "id,psnr,ssim,de,loe\n";
    auto row = [&f](const MetricRow& r) {
        f << r.id << "," << fmt_fixed(r.psnr, 4) << "," << fmt_fixed(r.ssim, 6) << ","
          << fmt_fixed(r.de, 4) << "," << fmt_fixed(r.loe, 4) << "\n";
    };
    for (const auto& r : rep.rows) row(r);
    row(rep.mean);
}

// Min-max normalization for dumping signed residual maps.
template <typename T>
Tensor<T> normalize_for_dump(const Tensor<T>& t) {
    T lo = t->values[0], hi = t->values[0];
    for (T v : t->values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const T span = hi - lo;
    auto out = zeros<T>(t->shape);
    for (std::size_t i = 0; i < t->values.size(); ++i)
        out->values[i] = span > T(0) ? (t->values[i] - lo) / span : T(0);
    return out;
}

template <typename T>
Tensor<T> slice_image(const Tensor<T>& batch, Index n) {
    const Index C = batch->shape[1], H = batch->shape[2], W = batch->shape[3];
    const Index chw = C * H * W;
    return make_tensor<T>({C, H, W},
                          std::vector<T>(batch->values.begin() + n * chw,
                                         batch->values.begin() + (n + 1) * chw));
}

template <typename T>
TestReport test_phase(const Model<T>& model, const SceneData<T>& scene, bool use_denoiser = true,
                      const std::string& dump_to = "") {
    namespace fs = std::filesystem;
    TestReport rep;
    if (!dump_to.empty()) fs::create_directories(dump_to);
    double sums[4] = {0, 0, 0, 0};
    std::size_t counts[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < scene.test_pool.size(); ++i) {
        const auto& pair = scene.test_pool[i];
        std::vector<Tensor<T>> one = {pair.low};
        Tape<T> tape;
        auto out = enhance(tape, model, stack_images(one), BatchNormMode::Eval, nullptr,
                           use_denoiser);
        Tensor<T> result = slice_image(out.output, 0);
        MetricRow row;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "%c_%03d", scene.spec.id, pair.index);
        row.id = idbuf;
        if (pair.gt) {
            row.psnr = psnr(result, pair.gt);
            row.ssim = ssim(result, pair.gt);
        } else {
            row.psnr = std::nan("");
            row.ssim = std::nan("");
        }
        row.de = de_entropy(result);
        row.loe = loe(result, pair.low);
        const double vals[4] = {row.psnr, row.ssim, row.de, row.loe};
        for (int k = 0; k < 4; ++k)
            if (!std::isnan(vals[k]) && !std::isinf(vals[k])) {
                sums[k] += vals[k];
                ++counts[k];
            }
        rep.rows.push_back(row);
        if (!dump_to.empty()) {
            const std::string stem = (fs::path(dump_to) / row.id).string();
            save_image(pair.low, stem + "_input.png");
            save_image(slice_image(out.illumination, 0), stem + "_illumination.png");
            save_image(slice_image(out.reflectance, 0), stem + "_reflectance.png");
            save_image(normalize_for_dump(slice_image(out.noise_map, 0)), stem + "_noise.png");
            save_image(result, stem + "_output.png");
        }
    }
    rep.mean.id = "mean";
    rep.mean.psnr = counts[0] ? sums[0] / counts[0] : std::nan("");
    rep.mean.ssim = counts[1] ? sums[1] / counts[1] : std::nan("");
    rep.mean.de = counts[2] ? sums[2] / counts[2] : std::nan("");
    rep.mean.loe = counts[3] ? sums[3] / counts[3] : std::nan("");
    return rep;
}

// ---- model construction helpers shared by the CLI and tests ----

template <typename T>
Model<T> load_model(const std::string& path, std::uint64_t seed) {
    auto recs = load_checkpoint_records(path);
    bool has_meta = false;
    for (const auto& r : recs)
        if (r.name.rfind("meta_init.", 0) == 0) has_meta = true;
    Model<T> m = Model<T>::make(seed, has_meta);
    load_checkpoint_into(path, m.state_tensors());
    return m;
}

// Applies the configured decoder initialization before adaptation: "random"
// re-draws a fresh decoder (with reset statistics), "meta" copies the learned
// meta-initialization into the decoder learnables.
template <typename T>
void apply_decoder_init(Model<T>& model, const RunConfig& cfg) {
    if (cfg.decoder_init == "random") {
        Decoder<T> fresh = Decoder<T>::make(
            Rng(cfg.seed, std::string("adapt/decoder_init/") + cfg.scene));
        const auto dst = model.decoder.state_tensors();
        const auto src = fresh.state_tensors();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->values = src[i]->values;
    } else {
        if (model.meta_init.empty())
            throw ConfigError("decoder_init=meta requires a checkpoint with a "
                              "meta-initialization (RBL learning phase)");
        const auto v = model.decoder.learnables();
        for (std::size_t i = 0; i < v.size(); ++i) v[i]->values = model.meta_init[i]->values;
    }
}

} // namespace bladapt
