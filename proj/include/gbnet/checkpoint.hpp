#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gbnet/model.hpp"

namespace gbnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
    const std::uint64_t lo = get_u32(in, what);
    const std::uint64_t hi = get_u32(in, what);
    return lo | (hi << 32);
}

inline void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline float get_f32(std::istream& in, const char* what) {
    const std::uint32_t bits = get_u32(in, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

inline double get_f64(std::istream& in, const char* what) {
    const std::uint64_t bits = get_u64(in, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void put_name(std::ostream& out, const std::string& name) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

inline std::string get_name(std::istream& in) {
    const std::uint32_t len = get_u32(in, "name length");
    if (len > 4096) throw IoError("checkpoint: implausible name length " + std::to_string(len));
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError("checkpoint truncated reading a name");
    return name;
}

struct StagedTensor {
    Shape shape;
    std::vector<float> data;
};

template <typename S>
void put_tensor_record(std::ostream& out, const Param<S>& p) {
    put_name(out, p.name);
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (S v : p.tensor.data()) put_f32(out, static_cast<float>(v));
}

inline std::pair<std::string, StagedTensor> get_tensor_record(std::istream& in) {
    auto name = get_name(in);
    const std::uint32_t rank = get_u32(in, "tensor rank");
    if (rank > 8) throw IoError("checkpoint: implausible rank " + std::to_string(rank));
    StagedTensor t;
    std::int64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
        const auto d = static_cast<std::int64_t>(get_u64(in, "tensor dim"));
        t.shape.push_back(d);
        numel *= d;
    }
    if (numel < 0 || numel > (1ll << 32))
        throw IoError("checkpoint: implausible tensor size");
    t.data.resize(static_cast<std::size_t>(numel));
    for (auto& v : t.data) v = get_f32(in, "tensor data");
    return {std::move(name), std::move(t)};
}

}  // namespace detail

// Layout: "GBNC", u32 version, model config, dropout RNG state, then
// length-prefixed name/shape/data records for parameters, BN buffers, and
// optimizer velocities.
template <typename S>
void checkpoint_save(GbnetModel<S>& model, const std::string& path,
                     const SgdMomentum<S>* opt = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("GBNC", 4);
    detail::put_u32(out, kCheckpointVersion);

    const auto& c = model.cfg;
    detail::put_u32(out, static_cast<std::uint32_t>(c.classes));
    detail::put_u32(out, static_cast<std::uint32_t>(c.points));
    detail::put_u32(out, static_cast<std::uint32_t>(c.k));
    detail::put_u32(out, static_cast<std::uint32_t>(c.ratio));
    detail::put_u32(out, static_cast<std::uint32_t>(c.descriptor_form));
    detail::put_f64(out, c.dropout);
    detail::put_u32(out, c.use_prominent ? 1 : 0);
    detail::put_u32(out, c.use_fine_grained ? 1 : 0);
    detail::put_u32(out, static_cast<std::uint32_t>(c.scales.size()));
    for (auto s : c.scales) detail::put_u32(out, static_cast<std::uint32_t>(s));

    detail::put_u64(out, model.dropout_rng.state());
    detail::put_u64(out, model.dropout_rng.inc());

    std::vector<Param<S>> params;
    model.collect(params);
    detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) detail::put_tensor_record(out, p);

    std::vector<Param<S>> bufs;
    model.collect_buffers(bufs);
    detail::put_u32(out, static_cast<std::uint32_t>(bufs.size()));
    for (const auto& p : bufs) detail::put_tensor_record(out, p);

    detail::put_f64(out, opt ? opt->momentum : 0.0);
    detail::put_u32(out, opt ? static_cast<std::uint32_t>(opt->velocity.size()) : 0);
    if (opt)
        for (std::size_t t = 0; t < opt->velocity.size(); ++t) {
            detail::put_name(out, params[t].name);
            detail::put_u32(out, static_cast<std::uint32_t>(opt->velocity[t].size()));
            for (S v : opt->velocity[t]) detail::put_f32(out, static_cast<float>(v));
        }
    if (!out) throw IoError("write failed for " + path);
}

inline ModelConfig checkpoint_read_config(std::istream& in, const std::string& path) {
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "GBNC")
        throw IoError("checkpoint " + path + ": bad magic, expected GBNC");
    const std::uint32_t version = detail::get_u32(in, "version");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint " + path + ": version " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
    ModelConfig c;
    c.classes = detail::get_u32(in, "classes");
    c.points = detail::get_u32(in, "points");
    c.k = detail::get_u32(in, "k");
    c.ratio = detail::get_u32(in, "ratio");
    c.descriptor_form = static_cast<int>(detail::get_u32(in, "descriptor form"));
    c.dropout = detail::get_f64(in, "dropout");
    c.use_prominent = detail::get_u32(in, "prominent flag") != 0;
    c.use_fine_grained = detail::get_u32(in, "fine-grained flag") != 0;
    const std::uint32_t n_scales = detail::get_u32(in, "scale count");
    if (n_scales > 64) throw IoError("checkpoint: implausible scale count");
    c.scales.clear();
    for (std::uint32_t i = 0; i < n_scales; ++i)
        c.scales.push_back(detail::get_u32(in, "scale"));
    return c;
}

// Peeks only the stored configuration, so a model can be built to fit.
inline ModelConfig checkpoint_peek_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return checkpoint_read_config(in, path);
}

// The model must already be initialized with a matching configuration. The
// whole file is read and validated before any model state changes.
template <typename S>
void checkpoint_load(GbnetModel<S>& model, const std::string& path,
                     SgdMomentum<S>* opt = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const ModelConfig stored = checkpoint_read_config(in, path);

    const auto& c = model.cfg;
    if (stored.classes != c.classes)
        throw ValueError("checkpoint " + path + ": built for " + std::to_string(stored.classes) +
                         " classes, model expects " + std::to_string(c.classes));
    if (stored.points != c.points || stored.k != c.k || stored.ratio != c.ratio ||
        stored.descriptor_form != c.descriptor_form || stored.scales != c.scales ||
        stored.use_prominent != c.use_prominent ||
        stored.use_fine_grained != c.use_fine_grained)
        throw ValueError("checkpoint " + path + ": model configuration does not match");

    const std::uint64_t rng_state = detail::get_u64(in, "rng state");
    const std::uint64_t rng_inc = detail::get_u64(in, "rng inc");

    const std::uint32_t n_params = detail::get_u32(in, "parameter count");
    std::map<std::string, detail::StagedTensor> staged_params;
    for (std::uint32_t i = 0; i < n_params; ++i) staged_params.insert(detail::get_tensor_record(in));

    const std::uint32_t n_bufs = detail::get_u32(in, "buffer count");
    std::map<std::string, detail::StagedTensor> staged_bufs;
    for (std::uint32_t i = 0; i < n_bufs; ++i) staged_bufs.insert(detail::get_tensor_record(in));

    const double stored_momentum = detail::get_f64(in, "momentum");
    const std::uint32_t n_vel = detail::get_u32(in, "velocity count");
    std::map<std::string, std::vector<float>> staged_vel;
    for (std::uint32_t i = 0; i < n_vel; ++i) {
        auto name = detail::get_name(in);
        const std::uint32_t len = detail::get_u32(in, "velocity length");
        std::vector<float> v(len);
        for (auto& x : v) x = detail::get_f32(in, "velocity data");
        staged_vel.emplace(std::move(name), std::move(v));
    }
    if (in.get() != std::ifstream::traits_type::eof())
        throw IoError("checkpoint " + path + ": trailing bytes");

    std::vector<Param<S>> params;
    model.collect(params);
    if (params.size() != staged_params.size())
        throw ValueError("checkpoint " + path + ": " + std::to_string(staged_params.size()) +
                         " parameters stored, model has " + std::to_string(params.size()));
    for (const auto& p : params) {
        const auto it = staged_params.find(p.name);
        if (it == staged_params.end())
            throw ValueError("checkpoint " + path + ": missing parameter " + p.name);
        if (it->second.shape != p.tensor.shape())
            throw ValueError("checkpoint " + path + ": parameter " + p.name + " has shape " +
                             shape_str(it->second.shape) + ", model expects " +
                             shape_str(p.tensor.shape()));
    }
    std::vector<Param<S>> bufs;
    model.collect_buffers(bufs);
    if (bufs.size() != staged_bufs.size())
        throw ValueError("checkpoint " + path + ": buffer count mismatch");
    for (const auto& p : bufs) {
        const auto it = staged_bufs.find(p.name);
        if (it == staged_bufs.end())
            throw ValueError("checkpoint " + path + ": missing buffer " + p.name);
        if (it->second.shape != p.tensor.shape())
            throw ValueError("checkpoint " + path + ": buffer " + p.name + " shape mismatch");
    }
    if (opt && n_vel > 0) {
        if (n_vel != params.size())
            throw ValueError("checkpoint " + path + ": velocity count mismatch");
        for (const auto& p : params) {
            const auto it = staged_vel.find(p.name);
            if (it == staged_vel.end())
                throw ValueError("checkpoint " + path + ": missing velocity for " + p.name);
            if (it->second.size() != static_cast<std::size_t>(p.tensor.numel()))
                throw ValueError("checkpoint " + path + ": velocity size mismatch for " + p.name);
        }
    }

    // everything is present and well-formed; now assign
    for (auto& p : params) {
        const auto& src = staged_params[p.name].data;
        for (std::size_t i = 0; i < src.size(); ++i) p.tensor.data()[i] = static_cast<S>(src[i]);
    }
    for (auto& p : bufs) {
        const auto& src = staged_bufs[p.name].data;
        for (std::size_t i = 0; i < src.size(); ++i) p.tensor.data()[i] = static_cast<S>(src[i]);
    }
    if (opt) {
        opt->momentum = stored_momentum;
        opt->velocity.assign(params.size(), {});
        for (std::size_t t = 0; t < params.size(); ++t) {
            auto& v = opt->velocity[t];
            v.assign(static_cast<std::size_t>(params[t].tensor.numel()), S(0));
            if (n_vel > 0) {
                const auto& src = staged_vel[params[t].name];
                for (std::size_t i = 0; i < src.size(); ++i) v[i] = static_cast<S>(src[i]);
            }
        }
    }
    model.dropout_rng.restore(rng_state, rng_inc);
    model.cfg.dropout = stored.dropout;
}

}  // namespace gbnet
