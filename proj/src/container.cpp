// CQM1 binary container: magic, version, sorted `key = value` config text,
// then sorted named tensors with little-endian payloads.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "codequant/model.hpp"

namespace codequant {

namespace {

constexpr char kMagic[4] = {'C', 'Q', 'M', '1'};
constexpr std::uint32_t kVersion = 1;

enum DType : std::uint8_t { kF32 = 0, kNibble = 1, kI8 = 2 };

struct Tensor {
    std::string name;
    std::uint8_t dtype = kF32;
    std::vector<std::uint64_t> dims;
    std::string payload;

    std::uint64_t numel() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

std::uint64_t payload_size(std::uint8_t dtype, std::uint64_t numel) {
    switch (dtype) {
        case kF32: return numel * 4;
        case kNibble: return (numel + 1) / 2;
        case kI8: return numel;
    }
    throw FormatError("unknown tensor dtype " + std::to_string(dtype));
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    std::string_view take(std::size_t n, const std::string& what) {
        if (in_.size() - pos_ < n) throw FormatError("truncated container while reading " + what);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    template <typename U>
    U uint(const std::string& what) {
        auto s = take(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
        return v;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    std::string_view in_;
    std::size_t pos_ = 0;
};

void put_f32(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f32(std::string_view s, std::size_t i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[4 * i + b])) << (8 * b);
    return static_cast<double>(std::bit_cast<float>(bits));
}

Tensor f32_tensor(std::string name, std::vector<std::uint64_t> dims, const std::vector<double>& values) {
    Tensor t{std::move(name), kF32, std::move(dims), {}};
    t.payload.reserve(values.size() * 4);
    for (double v : values) put_f32(t.payload, v);
    return t;
}

std::map<std::string, std::string> config_entries(const ModelWeights& w) {
    std::map<std::string, std::string> kv;
    const auto& c = w.config;
    kv["model.d_model"] = std::to_string(c.d_model);
    kv["model.n_heads"] = std::to_string(c.n_heads);
    kv["model.d_ff"] = std::to_string(c.d_ff);
    kv["model.experts"] = std::to_string(c.experts);
    kv["model.top_k"] = std::to_string(c.top_k);
    kv["model.layers"] = std::to_string(c.layers);
    kv["model.calib_tokens"] = std::to_string(c.calib_tokens);
    kv["model.seed"] = std::to_string(c.seed);
    for (const auto& [k, v] : w.metadata) {
        if (k.find('\n') != std::string::npos || v.find('\n') != std::string::npos)
            throw FormatError("metadata entries must be single-line");
        kv["meta." + k] = v;
    }
    if (!w.rtn.empty()) {
        const int bits = w.rtn.begin()->second.bits;
        for (const auto& [name, rw] : w.rtn)
            if (rw.bits != bits) throw FormatError("all RTN tensors in one container must share a bit width");
        kv["quant.weight_bits"] = std::to_string(bits);
    }
    return kv;
}

std::map<std::string, std::string> parse_config_text(std::string_view text) {
    std::map<std::string, std::string> kv;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string_view::npos) throw FormatError("malformed config line '" + std::string(line) + "'");
        kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 3));
    }
    return kv;
}

std::size_t parse_count(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("container config is missing '" + key + "'");
    try {
        std::size_t used = 0;
        const auto v = std::stoull(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw FormatError("container config value for '" + key + "' is not an integer");
    }
}

void append_linear(std::vector<Tensor>& out, const ModelWeights& w, const std::string& name) {
    if (auto it = w.codebooks.find(name); it != w.codebooks.end()) {
        const Codebook& cb = it->second;
        cb.validate();
        out.push_back(f32_tensor(name + ".centroids", {cb.rows, cb.n_groups(), cb.k}, cb.centroids));
        Tensor ids{name + ".ids", kNibble, {cb.rows, cb.cols}, {}};
        const auto packed = pack_nibbles(cb.ids);
        ids.payload.assign(packed.begin(), packed.end());
        out.push_back(std::move(ids));
        return;
    }
    if (auto it = w.rtn.find(name); it != w.rtn.end()) {
        const RtnWeights& rw = it->second;
        Tensor q{name + ".qweight", kI8, {rw.q.rows(), rw.q.cols()}, {}};
        for (auto v : rw.q.data()) q.payload.push_back(static_cast<char>(static_cast<std::int8_t>(v)));
        out.push_back(std::move(q));
        out.push_back(f32_tensor(name + ".scales", {rw.scales.rows(), rw.scales.cols()}, rw.scales.data()));
        return;
    }
    const Matrix& m = weight_by_name(w, name);
    out.push_back(f32_tensor(name, {m.rows(), m.cols()}, m.data()));
}

}  // namespace

std::string serialize_model(const ModelWeights& w) {
    w.config.validate();
    std::vector<Tensor> tensors;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        tensors.push_back(f32_tensor(layer_tensor_name(l, "attn_norm"), {w.layers[l].attn_norm.size()}, w.layers[l].attn_norm));
        tensors.push_back(f32_tensor(layer_tensor_name(l, "mlp_norm"), {w.layers[l].mlp_norm.size()}, w.layers[l].mlp_norm));
    }
    for (const auto& name : linear_weight_names(w.config)) append_linear(tensors, w, name);
    if (w.rotation) tensors.push_back(f32_tensor("rotation", {w.rotation->rows(), w.rotation->cols()}, w.rotation->data()));
    std::sort(tensors.begin(), tensors.end(), [](const Tensor& a, const Tensor& b) { return a.name < b.name; });

    std::string text;
    for (const auto& [k, v] : config_entries(w)) text += k + " = " + v + "\n";

    Writer out;
    out.bytes(kMagic, 4);
    out.uint<std::uint32_t>(kVersion);
    out.uint<std::uint64_t>(text.size());
    out.bytes(text.data(), text.size());
    out.uint<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        out.uint<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
        out.bytes(t.name.data(), t.name.size());
        out.uint<std::uint8_t>(t.dtype);
        out.uint<std::uint32_t>(static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) out.uint<std::uint64_t>(d);
        out.bytes(t.payload.data(), t.payload.size());
    }
    return out.take();
}

namespace {

struct ParsedContainer {
    std::uint32_t version = 0;
    std::string config_text;
    std::vector<Tensor> tensors;
};

ParsedContainer parse_container(std::string_view bytes, bool keep_payload) {
    Reader in(bytes);
    auto magic = in.take(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic: not a CQM1 container");
    ParsedContainer pc;
    pc.version = in.uint<std::uint32_t>("version");
    if (pc.version != kVersion) throw FormatError("unsupported container version " + std::to_string(pc.version));
    const auto text_len = in.uint<std::uint64_t>("config length");
    pc.config_text = std::string(in.take(text_len, "config text"));
    const auto count = in.uint<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string which = "tensor #" + std::to_string(i);
        Tensor t;
        const auto name_len = in.uint<std::uint32_t>(which + " name length");
        t.name = std::string(in.take(name_len, which + " name"));
        t.dtype = in.uint<std::uint8_t>("dtype of tensor '" + t.name + "'");
        const auto ndim = in.uint<std::uint32_t>("rank of tensor '" + t.name + "'");
        if (ndim > 8) throw FormatError("tensor '" + t.name + "' has implausible rank " + std::to_string(ndim));
        for (std::uint32_t d = 0; d < ndim; ++d) t.dims.push_back(in.uint<std::uint64_t>("dims of tensor '" + t.name + "'"));
        const auto n = payload_size(t.dtype, t.numel());
        auto payload = in.take(n, "payload of tensor '" + t.name + "'");
        if (keep_payload) t.payload = std::string(payload);
        pc.tensors.push_back(std::move(t));
    }
    if (!in.done()) throw FormatError("trailing bytes after last tensor");
    return pc;
}

void expect_dims(const Tensor& t, std::vector<std::uint64_t> dims) {
    if (t.dims != dims) throw FormatError("tensor '" + t.name + "' has a shape that disagrees with the model config");
}

void expect_dtype(const Tensor& t, std::uint8_t dtype) {
    if (t.dtype != dtype) throw FormatError("tensor '" + t.name + "' has dtype " + std::to_string(t.dtype));
}

std::vector<double> f32_values(const Tensor& t) {
    expect_dtype(t, kF32);
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = get_f32(t.payload, i);
    return v;
}

}  // namespace

ContainerManifest read_manifest(std::string_view bytes) {
    auto pc = parse_container(bytes, false);
    ContainerManifest m;
    m.version = pc.version;
    m.config_text = pc.config_text;
    for (auto& t : pc.tensors) m.tensors.push_back({t.name, t.dtype, t.dims, payload_size(t.dtype, t.numel())});
    return m;
}

ModelWeights deserialize_model(std::string_view bytes) {
    auto pc = parse_container(bytes, true);
    const auto kv = parse_config_text(pc.config_text);
    ModelWeights w;
    auto& c = w.config;
    c.d_model = parse_count(kv, "model.d_model");
    c.n_heads = parse_count(kv, "model.n_heads");
    c.d_ff = parse_count(kv, "model.d_ff");
    c.experts = parse_count(kv, "model.experts");
    c.top_k = parse_count(kv, "model.top_k");
    c.layers = parse_count(kv, "model.layers");
    c.calib_tokens = parse_count(kv, "model.calib_tokens");
    c.seed = parse_count(kv, "model.seed");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("container config invalid: ") + e.what());
    }
    for (const auto& [k, v] : kv)
        if (k.rfind("meta.", 0) == 0) w.metadata[k.substr(5)] = v;
    int weight_bits = 0;
    if (kv.count("quant.weight_bits")) weight_bits = static_cast<int>(parse_count(kv, "quant.weight_bits"));

    std::map<std::string, Tensor> by_name;
    for (auto& t : pc.tensors) {
        const std::string name = t.name;
        if (!by_name.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor '" + name + "'");
    }
    auto take = [&](const std::string& name) -> std::optional<Tensor> {
        auto it = by_name.find(name);
        if (it == by_name.end()) return std::nullopt;
        Tensor t = std::move(it->second);
        by_name.erase(it);
        return t;
    };
    auto require = [&](const std::string& name) -> Tensor {
        auto t = take(name);
        if (!t) throw FormatError("tensor '" + name + "' is absent from the container");
        return std::move(*t);
    };

    w.layers.resize(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) {
        for (const char* which : {"attn_norm", "mlp_norm"}) {
            auto t = require(layer_tensor_name(l, which));
            expect_dims(t, {c.d_model});
            (std::string(which) == "attn_norm" ? w.layers[l].attn_norm : w.layers[l].mlp_norm) = f32_values(t);
        }
        w.layers[l].experts.resize(c.experts);
    }
    for (const auto& name : linear_weight_names(c)) {
        Matrix& dst = weight_by_name(w, name);
        std::size_t rows = c.d_model, cols = c.d_model;
        if (name.ends_with(".router")) cols = c.experts;
        if (name.ends_with(".gate") || name.ends_with(".up")) cols = c.d_ff;
        if (name.ends_with(".down")) rows = c.d_ff;
        if (auto dense = take(name)) {
            expect_dims(*dense, {rows, cols});
            dst = Matrix(rows, cols, f32_values(*dense));
            continue;
        }
        if (by_name.count(name + ".centroids") || by_name.count(name + ".ids")) {
            auto cent = require(name + ".centroids");
            auto ids = require(name + ".ids");
            expect_dtype(ids, kNibble);
            expect_dims(ids, {cols, rows});
            if (cent.dims.size() != 3 || cent.dims[0] != cols || cent.dims[1] == 0 || rows % cent.dims[1] != 0)
                throw FormatError("tensor '" + cent.name + "' has a shape that disagrees with the model config");
            const std::size_t n_groups = cent.dims[1];
            Codebook cb(cols, rows, n_groups == 1 ? 0 : rows / n_groups, cent.dims[2]);
            cb.centroids = f32_values(cent);
            cb.ids = unpack_nibbles(std::span(reinterpret_cast<const std::uint8_t*>(ids.payload.data()), ids.payload.size()),
                                    cb.rows * cb.cols);
            try {
                cb.validate();
            } catch (const ShapeError& e) {
                throw FormatError("codebook '" + name + "': " + e.what());
            }
            dst = transpose(reconstruct(cb));
            w.codebooks[name] = std::move(cb);
            continue;
        }
        if (by_name.count(name + ".qweight") || by_name.count(name + ".scales")) {
            auto q = require(name + ".qweight");
            auto s = require(name + ".scales");
            expect_dtype(q, kI8);
            expect_dims(q, {cols, rows});
            if (s.dims.size() != 2 || s.dims[0] != cols || s.dims[1] == 0 || rows % s.dims[1] != 0)
                throw FormatError("tensor '" + s.name + "' has a shape that disagrees with the model config");
            if (weight_bits == 0) throw FormatError("RTN tensors present but quant.weight_bits is missing");
            RtnWeights rw;
            rw.bits = weight_bits;
            rw.group = s.dims[1] == 1 ? 0 : rows / s.dims[1];
            rw.q = BasicMatrix<std::int32_t>(cols, rows);
            for (std::size_t i = 0; i < rw.q.size(); ++i) rw.q.data()[i] = static_cast<std::int8_t>(q.payload[i]);
            rw.scales = Matrix(s.dims[0], s.dims[1], f32_values(s));
            dst = transpose(dequantize(rw));
            w.rtn[name] = std::move(rw);
            continue;
        }
        throw FormatError("tensor '" + name + "' is absent from the container");
    }
    if (auto rot = take("rotation")) {
        expect_dims(*rot, {c.d_model, c.d_model});
        w.rotation = Matrix(c.d_model, c.d_model, f32_values(*rot));
    }
    if (!by_name.empty()) throw FormatError("unexpected tensor '" + by_name.begin()->first + "' in container");
    return w;
}

void save_model(const ModelWeights& w, const std::string& path) {
    const std::string bytes = serialize_model(w);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("failed writing '" + path + "'");
}

ModelWeights load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_model(ss.str());
}

}  // namespace codequant
