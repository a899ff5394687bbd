#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "bladapt/errors.hpp"

namespace bladapt {

// Runtime configuration shared by every command. Text form is plain UTF-8
// key=value lines; serialization is canonical (sorted keys, shortest
// round-trip numerals), so parse -> serialize is a fixpoint.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string scale = "tiny";      // tiny | small
    std::string mode = "BL";         // BL | RBL | naive
    std::string workdir = "work";
    char scene = 'C';                // target of adapt/test
    std::int64_t image_size = 64;

    std::int64_t epochs_learn = 15;
    std::int64_t epochs_adapt = 30;
    std::int64_t batch_size = 8;

    double lr_outer = 1e-3;   // ADAM lr for encoder / meta-init
    double lr_inner = 1e-3;   // xi, the inner SGD step
    double lr_adapt = 1e-3;   // ADAM lr during adaptation
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    double fd_scale = 1e-2;   // numerator of the norm-relative FD constant
    std::int64_t episode_len = 5;
    double clip_norm = 5.0;

    double lambda_fidelity = 0.2;
    double sigma_smooth = 0.1;

    bool freeze_bn_stats = true;
    bool finetune_denoiser = false;
    std::string decoder_init = "random";  // random | meta
    bool dump_images = true;
    std::string checkpoint;  // optional explicit checkpoint path for test

    void validate() const {
        if (scale != "tiny" && scale != "small")
            throw ConfigError("scale must be tiny or small, got '" + scale + "'");
        if (mode != "BL" && mode != "RBL" && mode != "naive")
            throw ConfigError("mode must be BL, RBL or naive, got '" + mode + "'");
        if (scene < 'A' || scene > 'E')
            throw ConfigError(std::string("scene must be one of A..E, got '") + scene + "'");
        if (image_size < 16 || image_size % 16 != 0)
            throw ConfigError("image_size must be a positive multiple of 16");
        if (epochs_learn < 0 || epochs_adapt < 0)
            throw ConfigError("epoch counts must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (!(lr_inner > 0)) throw ConfigError("lr_inner (xi) must be positive");
        if (!(fd_scale > 0)) throw ConfigError("fd_scale must be positive");
        if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
            throw ConfigError("beta1/beta2 must lie in (0,1)");
        if (episode_len < 1) throw ConfigError("episode_len must be positive");
        if (decoder_init != "random" && decoder_init != "meta")
            throw ConfigError("decoder_init must be random or meta, got '" + decoder_init + "'");
        if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
    }
};

namespace cfgdetail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
    double v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError("key '" + key + "': cannot parse '" + s + "' as a number");
    return v;
}

inline std::int64_t parse_int(const std::string& key, const std::string& s) {
    std::int64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError("key '" + key + "': cannot parse '" + s + "' as an integer");
    return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError("key '" + key + "': cannot parse '" + s + "' as an unsigned integer");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + s + "'");
}

} // namespace cfgdetail

inline void apply_config_kv(RunConfig& c, const std::string& key, const std::string& val) {
    using namespace cfgdetail;
    if (key == "seed") c.seed = parse_uint(key, val);
    else if (key == "scale") c.scale = val;
    else if (key == "mode") c.mode = val;
    else if (key == "workdir") c.workdir = val;
    else if (key == "scene") {
        if (val.size() != 1) throw ConfigError("scene must be a single letter, got '" + val + "'");
        c.scene = val[0];
    }
    else if (key == "image_size") c.image_size = parse_int(key, val);
    else if (key == "epochs_learn") c.epochs_learn = parse_int(key, val);
    else if (key == "epochs_adapt") c.epochs_adapt = parse_int(key, val);
    else if (key == "batch_size") c.batch_size = parse_int(key, val);
    else if (key == "lr_outer") c.lr_outer = parse_double(key, val);
    else if (key == "lr_inner") c.lr_inner = parse_double(key, val);
    else if (key == "lr_adapt") c.lr_adapt = parse_double(key, val);
    else if (key == "beta1") c.beta1 = parse_double(key, val);
    else if (key == "beta2") c.beta2 = parse_double(key, val);
    else if (key == "adam_eps") c.adam_eps = parse_double(key, val);
    else if (key == "fd_scale") c.fd_scale = parse_double(key, val);
    else if (key == "episode_len") c.episode_len = parse_int(key, val);
    else if (key == "clip_norm") c.clip_norm = parse_double(key, val);
    else if (key == "lambda_fidelity") c.lambda_fidelity = parse_double(key, val);
    else if (key == "sigma_smooth") c.sigma_smooth = parse_double(key, val);
    else if (key == "freeze_bn_stats") c.freeze_bn_stats = parse_bool(key, val);
    else if (key == "finetune_denoiser") c.finetune_denoiser = parse_bool(key, val);
    else if (key == "decoder_init") c.decoder_init = val;
    else if (key == "dump_images") c.dump_images = parse_bool(key, val);
    else if (key == "checkpoint") c.checkpoint = val;
    else throw ConfigError("unknown config key '" + key + "'");
}

// Canonical serialization: every key, sorted, one per line.
inline std::string serialize_config(const RunConfig& c) {
    using cfgdetail::fmt_double;
    std::map<std::string, std::string> kv;
    kv["seed"] = std::to_string(c.seed);
    kv["scale"] = c.scale;
    kv["mode"] = c.mode;
    kv["workdir"] = c.workdir;
    kv["scene"] = std::string(1, c.scene);
    kv["image_size"] = std::to_string(c.image_size);
    kv["epochs_learn"] = std::to_string(c.epochs_learn);
    kv["epochs_adapt"] = std::to_string(c.epochs_adapt);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["lr_outer"] = fmt_double(c.lr_outer);
    kv["lr_inner"] = fmt_double(c.lr_inner);
    kv["lr_adapt"] = fmt_double(c.lr_adapt);
    kv["beta1"] = fmt_double(c.beta1);
    kv["beta2"] = fmt_double(c.beta2);
    kv["adam_eps"] = fmt_double(c.adam_eps);
    kv["fd_scale"] = fmt_double(c.fd_scale);
    kv["episode_len"] = std::to_string(c.episode_len);
    kv["clip_norm"] = fmt_double(c.clip_norm);
    kv["lambda_fidelity"] = fmt_double(c.lambda_fidelity);
    kv["sigma_smooth"] = fmt_double(c.sigma_smooth);
    kv["freeze_bn_stats"] = c.freeze_bn_stats ? "true" : "false";
    kv["finetune_denoiser"] = c.finetune_denoiser ? "true" : "false";
    kv["decoder_init"] = c.decoder_init;
    kv["dump_images"] = c.dump_images ? "true" : "false";
    kv["checkpoint"] = c.checkpoint;
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    return os.str();
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::istringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              " is not key=value: '" + line + "'");
        apply_config_kv(c, line.substr(0, eq), line.substr(eq + 1));
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

} // namespace bladapt
