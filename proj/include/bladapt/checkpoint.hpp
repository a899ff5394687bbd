#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bladapt/errors.hpp"
#include "bladapt/tensor.hpp"

namespace bladapt {

// Checkpoint container: magic "BLAD", version u16, count u32, then per-tensor
// records (name length u16 + UTF-8 name, dtype u8 {0:f32,1:f64}, rank u8,
// extents u32 each, row-major little-endian payload).
namespace ckpt {

constexpr char kMagic[4] = {'B', 'L', 'A', 'D'};
constexpr std::uint16_t kVersion = 1;

struct Record {
    std::string name;
    std::uint8_t dtype = 0;  // 0:f32 1:f64
    Shape shape;
    std::vector<double> data;  // held widest; narrowed on materialization
};

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(b_[pos_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool exhausted() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > b_.size())
            throw IoError("checkpoint '" + path_ + "' is truncated at byte " +
                          std::to_string(pos_));
    }
    const std::string& b_;
    std::string path_;
    std::size_t pos_ = 0;
};

template <typename T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void serialize_tensor(std::string& out, const TensorData<T>& t) {
    if (t.name.empty()) throw IoError("checkpoint: refusing to save an unnamed tensor");
    if (t.name.size() > 0xffff) throw IoError("checkpoint: tensor name too long");
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.append(t.name);
    out.push_back(static_cast<char>(dtype_code<T>()));
    out.push_back(static_cast<char>(t.shape.size()));
    for (Index d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : t.values) {
        if constexpr (std::is_same_v<T, float>) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        } else {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(out, bits);
        }
    }
}

inline Record parse_record(Reader& r) {
    Record rec;
    const std::uint16_t nlen = r.u16();
    rec.name = r.bytes(nlen);
    rec.dtype = r.u8();
    if (rec.dtype > 1)
        throw IoError("checkpoint: unknown dtype code " + std::to_string(rec.dtype) +
                      " for tensor '" + rec.name + "'");
    const std::uint8_t rank = r.u8();
    rec.shape.resize(rank);
    Index n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        rec.shape[i] = static_cast<Index>(r.u32());
        n *= rec.shape[i];
    }
    rec.data.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        if (rec.dtype == 0) {
            const std::uint32_t bits = r.u32();
            float f;
            std::memcpy(&f, &bits, 4);
            rec.data[static_cast<std::size_t>(i)] = f;
        } else {
            const std::uint64_t bits = r.u64();
            double d;
            std::memcpy(&d, &bits, 8);
            rec.data[static_cast<std::size_t>(i)] = d;
        }
    }
    return rec;
}

} // namespace ckpt

template <typename T>
std::string checkpoint_bytes(const std::vector<Tensor<T>>& tensors) {
    std::string out;
    out.append(ckpt::kMagic, 4);
    ckpt::put_u16(out, ckpt::kVersion);
    ckpt::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) ckpt::serialize_tensor(out, *t);
    return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<Tensor<T>>& tensors) {
    const std::string bytes = checkpoint_bytes(tensors);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing checkpoint '" + path + "'");
}

inline std::vector<ckpt::Record> load_checkpoint_records(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "' (missing artifact?)");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ckpt::Reader r(bytes, path);
    const std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), ckpt::kMagic, 4) != 0)
        throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    const std::uint16_t ver = r.u16();
    if (ver != ckpt::kVersion)
        throw IoError("checkpoint '" + path + "' has version " + std::to_string(ver) +
                      ", expected " + std::to_string(ckpt::kVersion));
    const std::uint32_t count = r.u32();
    std::vector<ckpt::Record> recs;
    recs.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) recs.push_back(ckpt::parse_record(r));
    if (!r.exhausted()) throw IoError("checkpoint '" + path + "' has trailing bytes");
    return recs;
}

// Strict load: the file and the model must agree on the exact set of names;
// shapes must match. Values are converted if dtypes differ.
template <typename T>
void load_checkpoint_into(const std::string& path, const std::vector<Tensor<T>>& tensors) {
    auto recs = load_checkpoint_records(path);
    std::map<std::string, const ckpt::Record*> by_name;
    for (const auto& r : recs) {
        if (!by_name.emplace(r.name, &r).second)
            throw IoError("checkpoint '" + path + "' names '" + r.name + "' twice");
    }
    std::string missing, unexpected;
    std::map<std::string, Tensor<T>> want;
    for (const auto& t : tensors) want.emplace(t->name, t);
    for (const auto& [name, t] : want)
        if (!by_name.count(name)) missing += (missing.empty() ? "" : ", ") + name;
    for (const auto& [name, r] : by_name)
        if (!want.count(name)) unexpected += (unexpected.empty() ? "" : ", ") + name;
    if (!missing.empty() || !unexpected.empty())
        throw IoError("checkpoint '" + path + "' does not match the model: missing [" +
                      missing + "], unexpected [" + unexpected + "]");
    for (const auto& [name, t] : want) {
        const ckpt::Record* r = by_name[name];
        if (r->shape != t->shape)
            throw IoError("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                          shape_str(r->shape) + ", model expects " + shape_str(t->shape));
        for (std::size_t i = 0; i < t->values.size(); ++i)
            t->values[i] = static_cast<T>(r->data[i]);
    }
}

} // namespace bladapt
