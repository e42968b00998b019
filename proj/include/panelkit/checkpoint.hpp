#pragma once

// Flat checkpoint container. Layout: magic "PFCK", u32 format version, then
// repeated records of (u32 name length, name bytes, u32 rank, u32 extents,
// raw little-endian float32 values). Optimizer moments and trainer state
// live under reserved "~" name prefixes; the model configuration is stored
// as "~config/..." scalar records so a checkpoint is self-describing.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "panelkit/optim.hpp"
#include "panelkit/swin.hpp"

namespace panelkit {

inline constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw data_error("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);
    for (const auto& r : records) {
        detail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(r.shape.size()));
        for (long e : r.shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
        static_assert(sizeof(float) == 4);
        os.write(reinterpret_cast<const char*>(r.values.data()),
                 static_cast<std::streamsize>(r.values.size() * 4));
    }
    if (!os) throw data_error("checkpoint write failed: " + path);
}

inline std::vector<CheckpointRecord> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw data_error("not a PFCK checkpoint: " + path);
    std::uint32_t version = 0;
    if (!detail::get_u32(is, version)) throw data_error("truncated checkpoint header: " + path);
    if (version != kCheckpointVersion)
        throw data_error("checkpoint " + path + " has format version " + std::to_string(version) +
                         ", expected " + std::to_string(kCheckpointVersion));
    std::vector<CheckpointRecord> out;
    std::uint32_t name_len = 0;
    while (detail::get_u32(is, name_len)) {
        CheckpointRecord r;
        r.name.resize(name_len);
        if (!is.read(r.name.data(), name_len)) throw data_error("truncated record name in " + path);
        std::uint32_t rank = 0;
        if (!detail::get_u32(is, rank)) throw data_error("truncated record rank in " + path);
        long n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t e = 0;
            if (!detail::get_u32(is, e)) throw data_error("truncated record shape in " + path);
            r.shape.push_back(static_cast<long>(e));
            n *= static_cast<long>(e);
        }
        r.values.resize(static_cast<std::size_t>(n));
        if (!is.read(reinterpret_cast<char*>(r.values.data()), n * 4))
            throw data_error("truncated record data in " + path);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config <-> records.

inline void append_config_records(std::vector<CheckpointRecord>& recs, const ModelConfig& cfg) {
    auto scalar = [&](const std::string& name, double v) {
        recs.push_back({"~config/" + name, {1}, {static_cast<float>(v)}});
    };
    scalar("patch_size", static_cast<double>(cfg.patch_size));
    scalar("embed_dim", static_cast<double>(cfg.embed_dim));
    scalar("window", static_cast<double>(cfg.window));
    scalar("num_classes", static_cast<double>(cfg.num_classes));
    scalar("rel_bias", cfg.rel_bias ? 1.0 : 0.0);
    scalar("dta_enabled", cfg.dta_enabled ? 1.0 : 0.0);
    scalar("dta_stage", static_cast<double>(cfg.dta_stage));
    CheckpointRecord depths{"~config/stage_depths", {4}, {}};
    CheckpointRecord heads{"~config/stage_heads", {4}, {}};
    for (int i = 0; i < 4; ++i) {
        depths.values.push_back(static_cast<float>(cfg.stage_depths[static_cast<std::size_t>(i)]));
        heads.values.push_back(static_cast<float>(cfg.stage_heads[static_cast<std::size_t>(i)]));
    }
    recs.push_back(std::move(depths));
    recs.push_back(std::move(heads));
}

inline ModelConfig config_from_records(const std::vector<CheckpointRecord>& recs) {
    std::map<std::string, const CheckpointRecord*> by_name;
    for (const auto& r : recs) by_name[r.name] = &r;
    auto need = [&](const std::string& name) -> const CheckpointRecord& {
        auto it = by_name.find("~config/" + name);
        if (it == by_name.end())
            throw data_error("checkpoint missing config record '~config/" + name +
                             "' (version " + std::to_string(kCheckpointVersion) + ")");
        return *it->second;
    };
    ModelConfig cfg;
    cfg.patch_size = static_cast<long>(need("patch_size").values[0]);
    cfg.embed_dim = static_cast<long>(need("embed_dim").values[0]);
    cfg.window = static_cast<long>(need("window").values[0]);
    cfg.num_classes = static_cast<long>(need("num_classes").values[0]);
    cfg.rel_bias = need("rel_bias").values[0] != 0.0f;
    cfg.dta_enabled = need("dta_enabled").values[0] != 0.0f;
    cfg.dta_stage = static_cast<int>(need("dta_stage").values[0]);
    const auto& d = need("stage_depths");
    const auto& h = need("stage_heads");
    for (int i = 0; i < 4; ++i) {
        cfg.stage_depths[static_cast<std::size_t>(i)] = static_cast<long>(d.values[static_cast<std::size_t>(i)]);
        cfg.stage_heads[static_cast<std::size_t>(i)] = static_cast<long>(h.values[static_cast<std::size_t>(i)]);
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Whole-trainer snapshots (float models).

struct TrainerSnapshot {
    ModelConfig cfg;
    double w_seg = 1.0, w_depth = 1.0;
    bool gradnorm_initialized = false;
    double l0_seg = 0.0, l0_depth = 0.0;
    long optimizer_steps = 0;
    long epoch = 0;
    long global_step = 0;
};

inline void save_model_checkpoint(const std::string& path, const ModelConfig& cfg,
                                  const ParamStore<float>& params, const AdamW<float>* opt = nullptr,
                                  const TrainerSnapshot* state = nullptr) {
    std::vector<CheckpointRecord> recs;
    append_config_records(recs, cfg);
    params.for_each([&](const std::string& name, const TensorT<float>& v) {
        recs.push_back({name, v.shape, *v.store});
    });
    if (opt) {
        for (const auto& [name, m] : opt->first_moments())
            recs.push_back({"~adamw/m/" + name, {static_cast<long>(m.size())}, m});
        for (const auto& [name, v] : opt->second_moments())
            recs.push_back({"~adamw/v/" + name, {static_cast<long>(v.size())}, v});
        recs.push_back({"~adamw/t", {1}, {static_cast<float>(opt->step_count())}});
    }
    if (state) {
        recs.push_back({"~train/w_seg", {1}, {static_cast<float>(state->w_seg)}});
        recs.push_back({"~train/w_depth", {1}, {static_cast<float>(state->w_depth)}});
        recs.push_back({"~train/gradnorm_init", {1}, {state->gradnorm_initialized ? 1.0f : 0.0f}});
        recs.push_back({"~train/l0_seg", {1}, {static_cast<float>(state->l0_seg)}});
        recs.push_back({"~train/l0_depth", {1}, {static_cast<float>(state->l0_depth)}});
        recs.push_back({"~train/epoch", {1}, {static_cast<float>(state->epoch)}});
        recs.push_back({"~train/step", {1}, {static_cast<float>(state->global_step)}});
    }
    save_checkpoint(path, recs);
}

// Restores parameters (and optionally optimizer/trainer state) into an empty
// or matching store. Returns the embedded config.
inline ModelConfig load_model_checkpoint(const std::string& path, ParamStore<float>& params,
                                         AdamW<float>* opt = nullptr, TrainerSnapshot* state = nullptr) {
    const auto recs = load_checkpoint(path);
    ModelConfig cfg = config_from_records(recs);
    std::map<std::string, std::vector<float>> m, v;
    long opt_t = 0;
    for (const auto& r : recs) {
        if (r.name.rfind("~adamw/m/", 0) == 0) {
            m[r.name.substr(9)] = r.values;
        } else if (r.name.rfind("~adamw/v/", 0) == 0) {
            v[r.name.substr(9)] = r.values;
        } else if (r.name == "~adamw/t") {
            opt_t = static_cast<long>(r.values[0]);
        } else if (r.name.rfind("~", 0) == 0) {
            if (state) {
                if (r.name == "~train/w_seg") state->w_seg = r.values[0];
                if (r.name == "~train/w_depth") state->w_depth = r.values[0];
                if (r.name == "~train/gradnorm_init") state->gradnorm_initialized = r.values[0] != 0.0f;
                if (r.name == "~train/l0_seg") state->l0_seg = r.values[0];
                if (r.name == "~train/l0_depth") state->l0_depth = r.values[0];
                if (r.name == "~train/epoch") state->epoch = static_cast<long>(r.values[0]);
                if (r.name == "~train/step") state->global_step = static_cast<long>(r.values[0]);
            }
        } else {
            TensorT<float>& p = params.get_or_create(r.name, r.shape, Init::Zeros);
            if (p.size() != static_cast<long>(r.values.size()))
                throw data_error("checkpoint record '" + r.name + "' does not match the model (version " +
                                 std::to_string(kCheckpointVersion) + ")");
            *p.store = r.values;
        }
    }
    if (opt) opt->restore_state(std::move(m), std::move(v), opt_t);
    if (state) state->cfg = cfg;
    return cfg;
}

}  // namespace panelkit
