#include "core/weights_io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace headgate::model {

namespace {

constexpr char kMagic[4] = {'H', 'G', 'W', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<uint8_t>& out, const float* data, size_t count) {
    for (size_t i = 0; i < count; ++i) {
        uint32_t bits;
        std::memcpy(&bits, &data[i], 4);
        put_u32(out, bits);
    }
}

class Reader {
public:
    Reader(const std::vector<uint8_t>& b) : b_(b) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string str(size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), len);
        pos_ += len;
        return s;
    }
    void f32(float* dst, size_t count) {
        need(count * 4);
        for (size_t i = 0; i < count; ++i) {
            uint32_t bits = 0;
            for (int k = 0; k < 4; ++k)
                bits |= static_cast<uint32_t>(b_[pos_ + 4 * i + k]) << (8 * k);
            std::memcpy(&dst[i], &bits, 4);
        }
        pos_ += count * 4;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(size_t n) {
        require(pos_ + n <= b_.size(), errc::format, "weights file truncated");
    }
    const std::vector<uint8_t>& b_;
    size_t pos_ = 0;
};

} // namespace

std::vector<uint8_t> serialize_weights(const ModelWeights& w) {
    w.validate();
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    const ModelConfig& c = w.cfg;
    put_u32(out, static_cast<uint32_t>(c.layers));
    put_u32(out, static_cast<uint32_t>(c.heads));
    put_u32(out, static_cast<uint32_t>(c.head_dim));
    put_u32(out, static_cast<uint32_t>(c.dim));
    put_u32(out, static_cast<uint32_t>(c.ffn_dim));
    put_u32(out, static_cast<uint32_t>(c.vocab));
    put_u32(out, static_cast<uint32_t>(c.max_seq));
    put_u64(out, c.seed);

    auto& mut = const_cast<ModelWeights&>(w);
    for (const TensorRef& ref : tensor_refs(mut)) {
        put_u32(out, static_cast<uint32_t>(ref.name.size()));
        out.insert(out.end(), ref.name.begin(), ref.name.end());
        if (ref.mat) {
            put_u32(out, 2);
            put_u32(out, static_cast<uint32_t>(ref.mat->rows));
            put_u32(out, static_cast<uint32_t>(ref.mat->cols));
            put_f32(out, ref.mat->data.data(), ref.mat->data.size());
        } else {
            put_u32(out, 1);
            put_u32(out, static_cast<uint32_t>(ref.vec->dim()));
            put_f32(out, ref.vec->data.data(), ref.vec->data.size());
        }
    }
    return out;
}

ModelWeights deserialize_weights(const std::vector<uint8_t>& bytes) {
    Reader r(bytes);
    require(r.str(4) == std::string(kMagic, 4), errc::format, "bad weights magic");
    require(r.u32() == kVersion, errc::format, "unsupported weights format version");

    ModelConfig cfg;
    cfg.layers = static_cast<int>(r.u32());
    cfg.heads = static_cast<int>(r.u32());
    cfg.head_dim = static_cast<int>(r.u32());
    cfg.dim = static_cast<int>(r.u32());
    cfg.ffn_dim = static_cast<int>(r.u32());
    cfg.vocab = static_cast<int>(r.u32());
    cfg.max_seq = static_cast<int>(r.u32());
    cfg.seed = r.u64();
    cfg.validate();

    // allocate by config, then require every stored tensor to match
    ModelWeights w = init_weights(cfg);
    for (const TensorRef& ref : tensor_refs(w)) {
        const std::string name = r.str(r.u32());
        require(name == ref.name, errc::format,
                "weights file: expected tensor '" + ref.name + "', found '" + name + "'");
        const uint32_t ndim = r.u32();
        if (ref.mat) {
            require(ndim == 2, errc::format, "tensor '" + name + "': expected 2 dims");
            const int rows = static_cast<int>(r.u32());
            const int cols = static_cast<int>(r.u32());
            require(rows == ref.mat->rows && cols == ref.mat->cols, errc::shape,
                    "tensor '" + name + "': shape " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " does not match config (" +
                        std::to_string(ref.mat->rows) + "x" + std::to_string(ref.mat->cols) +
                        ")");
            r.f32(ref.mat->data.data(), ref.mat->data.size());
        } else {
            require(ndim == 1, errc::format, "tensor '" + name + "': expected 1 dim");
            const int dim = static_cast<int>(r.u32());
            require(dim == ref.vec->dim(), errc::shape,
                    "tensor '" + name + "': length " + std::to_string(dim) +
                        " does not match config (" + std::to_string(ref.vec->dim()) + ")");
            r.f32(ref.vec->data.data(), ref.vec->data.size());
        }
    }
    require(r.done(), errc::format, "weights file has trailing bytes");
    return w;
}

void save_weights(const ModelWeights& w, const std::string& path) {
    const std::vector<uint8_t> bytes = serialize_weights(w);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), errc::io, "cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    require(f.good(), errc::io, "short write to '" + path + "'");
}

ModelWeights load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), errc::io, "cannot open weights file '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return deserialize_weights(bytes);
}

std::string fingerprint(const ModelWeights& w) {
    const std::vector<uint8_t> bytes = serialize_weights(w);
    uint64_t h = 1469598103934665603ULL;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 16);
}

} // namespace headgate::model
