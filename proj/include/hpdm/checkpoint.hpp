#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hpdm/config.hpp"
#include "hpdm/denoiser.hpp"
#include "hpdm/optimizer.hpp"
#include "hpdm/serialize.hpp"

namespace hpdm {

// Checkpoint layout (all little-endian):
//   "HPDMCKPT" | u32 version | u32 count
//   count x [u32 name_len | name | u32 rank | u32 dims... | f32 payload]   raw params
//   count x identical records                                              EMA params
//   optimizer payload:
//     u64 config_hash | str config_text | u64 step
//     f32 lr | u64 warmup | u64 decay | f32 wd | f32 b1 | f32 b2 | f32 eps | f32 ema
//     count x [f32 m payload | f32 v payload]   (moment shapes match params)
//   u32 crc32 over everything above
inline constexpr char kCheckpointMagic[9] = "HPDMCKPT";
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    std::vector<int64_t> dims;
    std::vector<float> values;
};

struct Checkpoint {
    std::vector<CheckpointRecord> params;
    std::vector<CheckpointRecord> ema;
    uint64_t config_hash = 0;
    std::string config_text;
    int64_t step = 0;
    OptimizerConfig optim;
    std::vector<std::vector<float>> moment_m;
    std::vector<std::vector<float>> moment_v;

    int64_t total_parameters() const {
        int64_t n = 0;
        for (const auto& r : params) n += int64_t(r.values.size());
        return n;
    }
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
    ByteWriter w;
    w.raw(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    w.u32(uint32_t(ck.params.size()));
    auto write_records = [&](const std::vector<CheckpointRecord>& recs) {
        for (const auto& r : recs) {
            w.str(r.name);
            w.u32(uint32_t(r.dims.size()));
            for (int64_t d : r.dims) w.u32(uint32_t(d));
            w.f32_array(r.values.data(), r.values.size());
        }
    };
    write_records(ck.params);
    write_records(ck.ema);
    w.u64(ck.config_hash);
    w.str(ck.config_text);
    w.u64(uint64_t(ck.step));
    w.f32(ck.optim.base_lr);
    w.u64(uint64_t(ck.optim.warmup_steps));
    w.u64(uint64_t(ck.optim.decay_steps));
    w.f32(ck.optim.weight_decay);
    w.f32(ck.optim.beta1);
    w.f32(ck.optim.beta2);
    w.f32(ck.optim.eps);
    w.f32(ck.optim.ema_decay);
    for (size_t i = 0; i < ck.params.size(); i++) {
        w.f32_array(ck.moment_m[i].data(), ck.moment_m[i].size());
        w.f32_array(ck.moment_v[i].data(), ck.moment_v[i].size());
    }
    w.append_crc();
    return w.bytes;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw DataError("checkpoint: bad magic");
    ByteReader r(bytes);
    r.check_trailing_crc("checkpoint");
    r.at = 8;
    const uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw DataError(strcat_all("checkpoint: unsupported version ", version));
    const uint32_t count = r.u32("count");
    Checkpoint ck;
    auto read_records = [&](std::vector<CheckpointRecord>& recs) {
        for (uint32_t i = 0; i < count; i++) {
            CheckpointRecord rec;
            rec.name = r.str("param name");
            const uint32_t rank = r.u32("rank");
            int64_t numel = 1;
            for (uint32_t d = 0; d < rank; d++) {
                rec.dims.push_back(r.u32("dim"));
                numel *= rec.dims.back();
            }
            rec.values.resize(size_t(numel));
            r.f32_array(rec.values.data(), rec.values.size(), "payload");
            recs.push_back(std::move(rec));
        }
    };
    read_records(ck.params);
    read_records(ck.ema);
    ck.config_hash = r.u64("config hash");
    ck.config_text = r.str("config text");
    ck.step = int64_t(r.u64("step"));
    ck.optim.base_lr = r.f32("lr");
    ck.optim.warmup_steps = int64_t(r.u64("warmup"));
    ck.optim.decay_steps = int64_t(r.u64("decay"));
    ck.optim.weight_decay = r.f32("weight decay");
    ck.optim.beta1 = r.f32("beta1");
    ck.optim.beta2 = r.f32("beta2");
    ck.optim.eps = r.f32("eps");
    ck.optim.ema_decay = r.f32("ema decay");
    for (uint32_t i = 0; i < count; i++) {
        const size_t n = ck.params[i].values.size();
        std::vector<float> m(n), v(n);
        r.f32_array(m.data(), n, "moment m");
        r.f32_array(v.data(), n, "moment v");
        ck.moment_m.push_back(std::move(m));
        ck.moment_v.push_back(std::move(v));
    }
    if (r.remaining() != 4) throw DataError("checkpoint: trailing bytes");
    return ck;
}

inline Checkpoint snapshot_checkpoint(const Denoiser& model, const OptimizerState& opt,
                                      const RunConfig& cfg) {
    Checkpoint ck;
    const auto& reg = model.registry();
    for (size_t i = 0; i < reg.size(); i++) {
        const auto& [name, t] = reg[i];
        ck.params.push_back({name, t.shape(), t.values()});
        ck.ema.push_back({name, t.shape(), opt.ema[i].values()});
        ck.moment_m.push_back(opt.m[i]);
        ck.moment_v.push_back(opt.v[i]);
    }
    ck.config_hash = cfg.content_hash();
    ck.config_text = cfg.canonical_text();
    ck.step = opt.step;
    ck.optim = opt.cfg;
    return ck;
}

inline void save_checkpoint(const std::string& path, const Denoiser& model,
                            const OptimizerState& opt, const RunConfig& cfg) {
    write_file(path, encode_checkpoint(snapshot_checkpoint(model, opt, cfg)));
}

// Rebuild (model, optimizer state, config) from a checkpoint. `use_ema`
// loads the EMA weights into the model instead of the raw ones.
struct RestoredRun {
    RunConfig config;
    Denoiser model;
    OptimizerState opt;
};

inline RestoredRun restore_checkpoint(const Checkpoint& ck, bool use_ema) {
    RestoredRun out;
    out.config = parse_run_config(ck.config_text);
    if (out.config.content_hash() != ck.config_hash)
        throw DataError("checkpoint: embedded config hash does not match its config text");
    out.model = Denoiser(out.config.model, out.config.seed);
    const auto& reg = out.model.registry();
    if (reg.size() != ck.params.size())
        throw DataError(strcat_all("checkpoint: has ", ck.params.size(),
                                   " parameters, model expects ", reg.size()));
    for (size_t i = 0; i < reg.size(); i++) {
        if (reg[i].first != ck.params[i].name)
            throw DataError(strcat_all("checkpoint: parameter ", i, " is '", ck.params[i].name,
                                       "', expected '", reg[i].first, "'"));
        if (int64_t(ck.params[i].values.size()) != reg[i].second.numel())
            throw DataError(strcat_all("checkpoint: parameter ", ck.params[i].name,
                                       " size mismatch"));
    }
    std::vector<std::vector<float>> vals;
    for (size_t i = 0; i < reg.size(); i++)
        vals.push_back(use_ema ? ck.ema[i].values : ck.params[i].values);
    out.model.load_values(vals);
    out.opt.cfg = ck.optim;
    out.opt.step = ck.step;
    out.opt.m = ck.moment_m;
    out.opt.v = ck.moment_v;
    for (size_t i = 0; i < reg.size(); i++) {
        auto ema = Tensor::from_values(ck.ema[i].dims, ck.ema[i].values);
        out.opt.ema.push_back(std::move(ema));
    }
    return out;
}

inline RestoredRun load_checkpoint(const std::string& path, bool use_ema) {
    return restore_checkpoint(decode_checkpoint(read_file(path)), use_ema);
}

}  // namespace hpdm
