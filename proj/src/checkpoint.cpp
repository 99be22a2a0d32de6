#include "tide/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace tide {

namespace {

constexpr char kMagic[8] = {'T', 'I', 'D', 'E', 'C', 'K', 'P', 'T'};
constexpr uint8_t kVersion = 1;

void put_u8(std::ostream& out, uint8_t v) { out.put(static_cast<char>(v)); }

void put_u32(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

void put_i32(std::ostream& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }

void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(b, 8);
}

uint8_t get_u8(std::istream& in) {
    char c;
    if (!in.get(c)) throw IoError("checkpoint: truncated file");
    return static_cast<uint8_t>(c);
}

uint32_t get_u32(std::istream& in) {
    char b[4];
    if (!in.read(b, 4)) throw IoError("checkpoint: truncated file");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

int32_t get_i32(std::istream& in) { return static_cast<int32_t>(get_u32(in)); }

double get_f64(std::istream& in) {
    char b[8];
    if (!in.read(b, 8)) throw IoError("checkpoint: truncated file");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_config(std::ostream& out, const ModelConfig& cfg, const TideConfig& tide_cfg) {
    put_u32(out, 9 * 4 + 2 * 8 + 1);  // block length
    put_i32(out, cfg.vocab_size);
    put_i32(out, cfg.d_model);
    put_i32(out, cfg.n_layers);
    put_i32(out, cfg.n_heads);
    put_i32(out, cfg.d_ff);
    put_i32(out, cfg.t_max);
    put_f64(out, cfg.rope_theta);
    put_f64(out, cfg.norm_eps);
    put_u8(out, cfg.tied_head ? 1 : 0);
    put_i32(out, tide_cfg.k_blocks);
    put_i32(out, tide_cfg.d_block);
}

std::pair<ModelConfig, TideConfig> get_config(std::istream& in) {
    const uint32_t len = get_u32(in);
    if (len != 9 * 4 + 2 * 8 + 1) throw IoError("checkpoint: unexpected config block length");
    ModelConfig cfg;
    TideConfig tide_cfg;
    cfg.vocab_size = get_i32(in);
    cfg.d_model = get_i32(in);
    cfg.n_layers = get_i32(in);
    cfg.n_heads = get_i32(in);
    cfg.d_ff = get_i32(in);
    cfg.t_max = get_i32(in);
    cfg.rope_theta = get_f64(in);
    cfg.norm_eps = get_f64(in);
    cfg.tied_head = get_u8(in) != 0;
    tide_cfg.k_blocks = get_i32(in);
    tide_cfg.d_block = get_i32(in);
    return {cfg, tide_cfg};
}

void put_record(std::ostream& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put_i32(out, t.dim(i));
    for (int64_t i = 0; i < t.size(); ++i) put_f64(out, t.data()[i]);
}

void open_container(std::istream& in, const std::string& path) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError("checkpoint: bad magic in " + path);
    }
    const uint8_t version = get_u8(in);
    if (version != kVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const TideModel& model) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(kMagic, 8);
    put_u8(out, kVersion);
    put_config(out, model.config(), model.tide_config());
    const auto params = model.named_params();
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (const NamedParam& p : params) put_record(out, p.name, p.tensor);
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

TideModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    open_container(in, path);
    const auto [cfg, tide_cfg] = get_config(in);
    TideModel model(cfg, tide_cfg, 0);
    const uint32_t count = get_u32(in);
    auto params = model.named_params();
    if (count != params.size()) {
        throw IoError("load_checkpoint: expected " + std::to_string(params.size()) +
                      " records, found " + std::to_string(count));
    }
    for (uint32_t r = 0; r < count; ++r) {
        const uint32_t name_len = get_u32(in);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) throw IoError("checkpoint: truncated name");
        const NamedParam& p = params[r];
        if (name != p.name) {
            throw IoError("load_checkpoint: record " + name + " where " + p.name +
                          " was expected");
        }
        const uint32_t ndim = get_u32(in);
        Shape shape(ndim);
        for (uint32_t i = 0; i < ndim; ++i) shape[i] = get_i32(in);
        if (shape != p.tensor.shape()) {
            throw IoError("load_checkpoint: shape mismatch for " + name);
        }
        for (int64_t i = 0; i < p.tensor.size(); ++i) p.tensor.data()[i] = get_f64(in);
    }
    return model;
}

void save_tensor_records(const std::string& path, const ModelConfig& cfg,
                         const TideConfig& tide_cfg,
                         const std::vector<std::pair<std::string, Tensor>>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_tensor_records: cannot open " + path);
    out.write(kMagic, 8);
    put_u8(out, kVersion);
    put_config(out, cfg, tide_cfg);
    put_u32(out, static_cast<uint32_t>(records.size()));
    for (const auto& [name, tensor] : records) put_record(out, name, tensor);
    if (!out) throw IoError("save_tensor_records: write failed for " + path);
}

}  // namespace tide
