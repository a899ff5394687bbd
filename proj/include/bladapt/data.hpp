#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bladapt/errors.hpp"
#include "bladapt/image_io.hpp"
#include "bladapt/rng.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

enum class DegradeKind { Gamma, Linear };
enum class NoiseKind { None, Gaussian, Speckle };

struct SceneSpec {
    char id = '?';
    DegradeKind degrade = DegradeKind::Gamma;
    double amount = 1.0;  // gamma exponent or linear scale
    NoiseKind noise = NoiseKind::None;
    double sigma_n = 0.0;
    bool paired = true;
    bool learnable = false;
    int n_learn = 0, n_adapt = 0, n_test = 0;

    bool noisy() const { return noise != NoiseKind::None; }

    void validate() const {
        if (degrade == DegradeKind::Gamma && amount < 1.0)
            throw ConfigError("scene spec: gamma must be >= 1");
        if (degrade == DegradeKind::Linear && !(amount > 0.0 && amount < 1.0))
            throw ConfigError("scene spec: linear scale must lie in (0,1)");
        if (sigma_n < 0.0 || sigma_n > 0.2)
            throw ConfigError("scene spec: noise sigma must lie in [0, 0.2]");
        if (n_learn <= 0 || n_adapt <= 0 || n_test <= 0)
            throw ConfigError("scene spec: pool sizes must be positive");
    }
};

// The five benchmark scenes. A and B are the learning pool; C, D, E are
// unseen at learning time; E withholds its ground truth.
inline std::vector<SceneSpec> benchmark_scenes(const std::string& scale) {
    int learn = 0, adapt = 0, test = 0;
    if (scale == "tiny") {
        learn = 50; adapt = 50; test = 10;
    } else if (scale == "small") {
        learn = 200; adapt = 200; test = 40;
    } else {
        throw ConfigError("unknown scale '" + scale + "' (expected tiny or small)");
    }
    std::vector<SceneSpec> scenes = {
        {'A', DegradeKind::Gamma, 2.5, NoiseKind::None, 0.0, true, true, learn, adapt, test},
        {'B', DegradeKind::Gamma, 3.0, NoiseKind::Gaussian, 0.05, true, true, learn, adapt, test},
        {'C', DegradeKind::Gamma, 3.5, NoiseKind::None, 0.0, true, false, learn, adapt, test},
        {'D', DegradeKind::Linear, 0.2, NoiseKind::Speckle, 0.03, true, false, learn, adapt, test},
        {'E', DegradeKind::Gamma, 4.0, NoiseKind::Gaussian, 0.08, false, false, learn, adapt, test},
    };
    for (const auto& s : scenes) s.validate();
    return scenes;
}

// Deterministic "normal-light" source image: a color ramp, a few solid
// rectangles and ellipses, and band-limited sinusoidal texture, mapped into
// [0.2, 1.0].
inline Tensor<double> generate_base_image(Rng rng, Index H, Index W) {
    if (H % 16 != 0 || W % 16 != 0)
        throw DimensionError("generate_base_image: dims must be divisible by 16");
    auto img = zeros<double>({3, H, W});
    auto px = [&img, H, W](Index c, Index i, Index j) -> double& {
        return img->values[(c * H + i) * W + j];
    };

    for (Index c = 0; c < 3; ++c) {
        const double base = rng.uniform(0.3, 0.7);
        const double gx = rng.uniform(-0.3, 0.3);
        const double gy = rng.uniform(-0.3, 0.3);
        for (Index i = 0; i < H; ++i)
            for (Index j = 0; j < W; ++j)
                px(c, i, j) = base + gx * (static_cast<double>(j) / (W - 1)) +
                              gy * (static_cast<double>(i) / (H - 1));
    }

    const int n_rect = 3 + static_cast<int>(rng.below(4));
    for (int r = 0; r < n_rect; ++r) {
        const Index x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(W)));
        const Index y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(H)));
        const Index rw = H / 8 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(3 * W / 8)));
        const Index rh = H / 8 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(3 * H / 8)));
        double color[3];
        for (double& c : color) c = rng.uniform(0.0, 1.0);
        const double alpha = rng.uniform(0.5, 1.0);
        for (Index i = y0; i < std::min(H, y0 + rh); ++i)
            for (Index j = x0; j < std::min(W, x0 + rw); ++j)
                for (Index c = 0; c < 3; ++c)
                    px(c, i, j) = (1.0 - alpha) * px(c, i, j) + alpha * color[c];
    }

    const int n_ell = 2 + static_cast<int>(rng.below(3));
    for (int e = 0; e < n_ell; ++e) {
        const double cx = rng.uniform(0.0, static_cast<double>(W));
        const double cy = rng.uniform(0.0, static_cast<double>(H));
        const double rx = rng.uniform(static_cast<double>(H) / 10.0, static_cast<double>(H) / 3.0);
        const double ry = rng.uniform(static_cast<double>(H) / 10.0, static_cast<double>(H) / 3.0);
        double color[3];
        for (double& c : color) c = rng.uniform(0.0, 1.0);
        const double alpha = rng.uniform(0.5, 1.0);
        for (Index i = 0; i < H; ++i)
            for (Index j = 0; j < W; ++j) {
                const double dx = (j - cx) / rx, dy = (i - cy) / ry;
                if (dx * dx + dy * dy <= 1.0)
                    for (Index c = 0; c < 3; ++c)
                        px(c, i, j) = (1.0 - alpha) * px(c, i, j) + alpha * color[c];
            }
    }

    for (int k = 0; k < 8; ++k) {
        const double amp = rng.uniform(0.01, 0.05);
        const double fx = rng.uniform(1.0, 8.0);
        const double fy = rng.uniform(1.0, 8.0);
        const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        for (Index i = 0; i < H; ++i)
            for (Index j = 0; j < W; ++j) {
                const double s = amp * std::sin(2.0 * 3.14159265358979323846 *
                                                    (fx * j / static_cast<double>(W) +
                                                     fy * i / static_cast<double>(H)) +
                                                phase);
                for (Index c = 0; c < 3; ++c) px(c, i, j) += s;
            }
    }

    for (auto& v : img->values) v = 0.2 + 0.8 * std::min(1.0, std::max(0.0, v));
    return img;
}

// low = clamp(darken(gt) + noise, 0, 1). Noise is injected in the dark domain.
inline Tensor<double> degrade(const Tensor<double>& gt, const SceneSpec& spec, Rng rng) {
    auto low = zeros<double>(gt->shape);
    for (std::size_t i = 0; i < gt->values.size(); ++i) {
        const double g = gt->values[i];
        low->values[i] = spec.degrade == DegradeKind::Gamma ? std::pow(g, spec.amount)
                                                            : g * spec.amount;
    }
    if (spec.noise == NoiseKind::Gaussian) {
        for (auto& v : low->values) v += spec.sigma_n * rng.normal();
    } else if (spec.noise == NoiseKind::Speckle) {
        for (auto& v : low->values) v += v * spec.sigma_n * rng.normal();
    }
    for (auto& v : low->values) v = std::min(1.0, std::max(0.0, v));
    return low;
}

// Snaps values to the 8-bit grid so that saved images reload exactly.
inline void quantize8(Tensor<double>& t) {
    for (auto& v : t->values) v = std::lround(v * 255.0) / 255.0;
}

struct ManifestEntry {
    char scene = '?';
    std::string split;  // learn | adapt | test
    int index = 0;
    std::string low_path;  // workdir-relative
    std::string gt_path;   // empty when unpaired
};

inline std::string scene_dir(char id) { return std::string("data/") + id; }

inline std::string image_rel_path(char scene, const std::string& split, int index, bool gt) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03d.png", gt ? "gt" : "low", index);
    return scene_dir(scene) + "/" + split + "/" + buf;
}

inline Rng base_image_rng(std::uint64_t seed, char scene, const std::string& split, int index) {
    return Rng(seed, std::string("base/") + scene + "/" + split + "/" + std::to_string(index));
}

inline Rng degrade_rng(std::uint64_t seed, char scene, const std::string& split, int index) {
    return Rng(seed, std::string("degrade/") + scene + "/" + split + "/" + std::to_string(index));
}

// Generates the full benchmark under workdir/data and returns the manifest
// text. Idempotent for a fixed (seed, scale, size).
inline std::vector<ManifestEntry> write_benchmark(const std::string& workdir,
                                                  std::uint64_t seed, const std::string& scale,
                                                  Index size = 64) {
    namespace fs = std::filesystem;
    const auto scenes = benchmark_scenes(scale);
    std::vector<ManifestEntry> entries;
    std::ostringstream manifest;
    manifest << "# synthetic low-light benchmark seed=" << seed << " scale=" << scale
             << " image_size=" << size << "\n";
    manifest << "# columns: scene_id,split,index,low_path[,gt_path]\n";
    for (const auto& s : scenes) {
        manifest << "# scene " << s.id << " degradation="
                 << (s.degrade == DegradeKind::Gamma ? "gamma" : "linear") << ":" << s.amount
                 << " noise="
                 << (s.noise == NoiseKind::None ? "none"
                     : s.noise == NoiseKind::Gaussian ? "gaussian" : "speckle")
                 << ":" << s.sigma_n << " paired=" << (s.paired ? 1 : 0)
                 << " learnable=" << (s.learnable ? 1 : 0) << " pools=" << s.n_learn << "/"
                 << s.n_adapt << "/" << s.n_test << "\n";
    }
    for (const auto& s : scenes) {
        const std::pair<std::string, int> splits[3] = {
            {"learn", s.n_learn}, {"adapt", s.n_adapt}, {"test", s.n_test}};
        for (const auto& [split, count] : splits) {
            fs::create_directories(fs::path(workdir) / scene_dir(s.id) / split);
            for (int idx = 0; idx < count; ++idx) {
                auto gt = generate_base_image(base_image_rng(seed, s.id, split, idx), size, size);
                quantize8(gt);
                auto low = degrade(gt, s, degrade_rng(seed, s.id, split, idx));
                quantize8(low);
                ManifestEntry e;
                e.scene = s.id;
                e.split = split;
                e.index = idx;
                e.low_path = image_rel_path(s.id, split, idx, false);
                save_image(low, (fs::path(workdir) / e.low_path).string());
                if (s.paired) {
                    e.gt_path = image_rel_path(s.id, split, idx, true);
                    save_image(gt, (fs::path(workdir) / e.gt_path).string());
                }
                manifest << e.scene << "," << e.split << "," << e.index << "," << e.low_path;
                if (!e.gt_path.empty()) manifest << "," << e.gt_path;
                manifest << "\n";
                entries.push_back(std::move(e));
            }
        }
    }
    const fs::path mpath = fs::path(workdir) / "data" / "manifest.csv";
    std::ofstream f(mpath, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write manifest '" + mpath.string() + "'");
    f << manifest.str();
    return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& workdir) {
    namespace fs = std::filesystem;
    const fs::path mpath = fs::path(workdir) / "data" / "manifest.csv";
    std::ifstream f(mpath);
    if (!f)
        throw IoError("missing manifest '" + mpath.string() +
                      "' (run the gen command for this workdir first)");
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (cols.size() < 4 || cols.size() > 5 || cols[0].size() != 1)
            throw IoError("bad manifest row at line " + std::to_string(lineno) + ": '" + line +
                          "'");
        ManifestEntry e;
        e.scene = cols[0][0];
        e.split = cols[1];
        e.index = std::stoi(cols[2]);
        e.low_path = cols[3];
        if (cols.size() == 5) e.gt_path = cols[4];
        entries.push_back(std::move(e));
    }
    return entries;
}

template <typename T>
struct ImagePair {
    Tensor<T> low;
    Tensor<T> gt;  // null when unpaired
    bool noisy = false;
    char scene = '?';
    int index = 0;
};

template <typename T>
struct SceneData {
    SceneSpec spec;
    std::vector<ImagePair<T>> learn_pool, adapt_pool, test_pool;
};

template <typename T>
std::vector<SceneData<T>> load_benchmark(const std::string& workdir, const std::string& scale) {
    namespace fs = std::filesystem;
    const auto specs = benchmark_scenes(scale);
    const auto entries = read_manifest(workdir);
    std::vector<SceneData<T>> out;
    for (const auto& spec : specs) {
        SceneData<T> sd;
        sd.spec = spec;
        out.push_back(std::move(sd));
    }
    for (const auto& e : entries) {
        auto sit = std::find_if(out.begin(), out.end(),
                                [&e](const SceneData<T>& s) { return s.spec.id == e.scene; });
        if (sit == out.end())
            throw IoError(std::string("manifest names unknown scene '") + e.scene + "'");
        ImagePair<T> p;
        p.scene = e.scene;
        p.index = e.index;
        p.noisy = sit->spec.noisy();
        p.low = load_image<T>((fs::path(workdir) / e.low_path).string());
        if (!e.gt_path.empty()) p.gt = load_image<T>((fs::path(workdir) / e.gt_path).string());
        if (e.split == "learn") sit->learn_pool.push_back(std::move(p));
        else if (e.split == "adapt") sit->adapt_pool.push_back(std::move(p));
        else if (e.split == "test") sit->test_pool.push_back(std::move(p));
        else throw IoError("manifest has unknown split '" + e.split + "'");
    }
    for (const auto& sd : out) {
        if (static_cast<int>(sd.learn_pool.size()) != sd.spec.n_learn ||
            static_cast<int>(sd.adapt_pool.size()) != sd.spec.n_adapt ||
            static_cast<int>(sd.test_pool.size()) != sd.spec.n_test)
            throw IoError(std::string("scene ") + sd.spec.id +
                          " pool sizes on disk do not match the scale '" + scale + "'");
    }
    return out;
}

// Deterministic 80/20 train/validation split: the leading 80% trains.
template <typename T>
void split_pool(const std::vector<ImagePair<T>>& pool, std::vector<ImagePair<T>>& tr,
                std::vector<ImagePair<T>>& val) {
    const std::size_t n_val = pool.size() / 5;
    const std::size_t n_tr = pool.size() - n_val;
    tr.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_tr));
    val.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_tr), pool.end());
}

// Stacks [3,H,W] images into one [N,3,H,W] batch tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<T>>& imgs) {
    if (imgs.empty()) throw DimensionError("stack_images: empty batch");
    const Shape& s0 = imgs[0]->shape;
    auto out = zeros<T>({static_cast<Index>(imgs.size()), s0[0], s0[1], s0[2]});
    const std::size_t stride = imgs[0]->values.size();
    for (std::size_t n = 0; n < imgs.size(); ++n) {
        if (imgs[n]->shape != s0)
            throw DimensionError("stack_images: inconsistent image shapes in batch");
        std::copy(imgs[n]->values.begin(), imgs[n]->values.end(),
                  out->values.begin() + static_cast<std::ptrdiff_t>(n * stride));
    }
    return out;
}

} // namespace bladapt
