#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gbnet/geometry.hpp"
#include "gbnet/rng.hpp"

namespace gbnet {

struct Mesh {
    std::vector<float> vertices;      // V x 3
    std::vector<std::int64_t> faces;  // F x 3

    std::int64_t n_vertices() const { return static_cast<std::int64_t>(vertices.size()) / 3; }
    std::int64_t n_faces() const { return static_cast<std::int64_t>(faces.size()) / 3; }
};

template <typename S>
struct Dataset {
    std::vector<PointCloud<S>> clouds;
    std::vector<std::string> class_names;
    std::string split;

    std::int64_t size() const { return static_cast<std::int64_t>(clouds.size()); }
};

namespace detail {

// Token reader that remembers the source line of every token, for error
// messages that point at the offending spot.
struct OffScanner {
    std::vector<std::pair<std::string, std::int64_t>> tokens;
    std::size_t pos = 0;
    std::string path;

    explicit OffScanner(const std::string& path_) : path(path_) {
        std::ifstream in(path_);
        if (!in) throw IoError("cannot open " + path_);
        std::string line;
        std::int64_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            std::istringstream ls(line);
            std::string tok;
            while (ls >> tok) tokens.emplace_back(tok, line_no);
        }
    }

    [[noreturn]] void fail(const std::string& what, std::int64_t line_no) const {
        throw IoError(path + ":" + std::to_string(line_no) + ": " + what);
    }

    std::pair<std::string, std::int64_t> next(const char* what) {
        if (pos >= tokens.size())
            fail(std::string("unexpected end of file, expected ") + what,
                 tokens.empty() ? 1 : tokens.back().second);
        return tokens[pos++];
    }

    std::int64_t next_int(const char* what) {
        auto [tok, line_no] = next(what);
        try {
            std::size_t used = 0;
            const long long v = std::stoll(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            fail("expected " + std::string(what) + ", got '" + tok + "'", line_no);
        }
    }

    float next_float(const char* what) {
        auto [tok, line_no] = next(what);
        try {
            std::size_t used = 0;
            const float v = std::stof(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            fail("expected " + std::string(what) + ", got '" + tok + "'", line_no);
        }
    }
};

}  // namespace detail

// Reads an ASCII OFF mesh. Accepts both the standard two-line opening and
// the fused variant where the vertex count is glued to the header token
// ("OFF492 1000 0"), which appears throughout ModelNet.
inline Mesh load_off(const std::string& path) {
    detail::OffScanner sc(path);
    auto [header, header_line] = sc.next("OFF header");
    if (header.rfind("OFF", 0) != 0)
        sc.fail("expected OFF header, got '" + header + "'", header_line);

    std::int64_t n_vertices = 0;
    if (header.size() > 3) {
        const std::string glued = header.substr(3);
        try {
            std::size_t used = 0;
            n_vertices = std::stoll(glued, &used);
            if (used != glued.size()) throw std::invalid_argument(glued);
        } catch (const std::exception&) {
            sc.fail("malformed fused header '" + header + "'", header_line);
        }
    } else {
        n_vertices = sc.next_int("vertex count");
    }
    const std::int64_t n_faces = sc.next_int("face count");
    sc.next_int("edge count");
    if (n_vertices < 0 || n_faces < 0)
        sc.fail("negative counts", header_line);

    Mesh mesh;
    mesh.vertices.reserve(static_cast<std::size_t>(n_vertices) * 3);
    for (std::int64_t v = 0; v < n_vertices; ++v)
        for (int c = 0; c < 3; ++c) mesh.vertices.push_back(sc.next_float("vertex coordinate"));

    mesh.faces.reserve(static_cast<std::size_t>(n_faces) * 3);
    for (std::int64_t f = 0; f < n_faces; ++f) {
        const auto where = sc.pos < sc.tokens.size() ? sc.tokens[sc.pos].second : -1;
        const std::int64_t arity = sc.next_int("face vertex count");
        if (arity != 3)
            sc.fail("face with " + std::to_string(arity) + " vertices, only triangles supported",
                    where);
        for (int c = 0; c < 3; ++c) {
            const std::int64_t idx = sc.next_int("face vertex index");
            if (idx < 0 || idx >= n_vertices)
                sc.fail("face vertex index " + std::to_string(idx) + " outside [0, " +
                            std::to_string(n_vertices) + ")",
                        where);
            mesh.faces.push_back(idx);
        }
    }
    return mesh;
}

// Area-weighted uniform surface sampling: face by inverse-CDF over areas,
// position by folded barycentric coordinates.
inline PointCloud<float> sample_mesh_surface(const Mesh& mesh, std::int64_t n_points,
                                             Pcg32& rng) {
    if (n_points < 1)
        throw ValueError("sample_mesh_surface: need at least 1 point");
    const std::int64_t nf = mesh.n_faces();
    std::vector<double> cum(static_cast<std::size_t>(nf));
    double total = 0;
    for (std::int64_t f = 0; f < nf; ++f) {
        const float* a = mesh.vertices.data() + mesh.faces[static_cast<std::size_t>(3 * f)] * 3;
        const float* b = mesh.vertices.data() + mesh.faces[static_cast<std::size_t>(3 * f + 1)] * 3;
        const float* c = mesh.vertices.data() + mesh.faces[static_cast<std::size_t>(3 * f + 2)] * 3;
        const double e1[3] = {double(b[0]) - a[0], double(b[1]) - a[1], double(b[2]) - a[2]};
        const double e2[3] = {double(c[0]) - a[0], double(c[1]) - a[1], double(c[2]) - a[2]};
        const double cx = e1[1] * e2[2] - e1[2] * e2[1];
        const double cy = e1[2] * e2[0] - e1[0] * e2[2];
        const double cz = e1[0] * e2[1] - e1[1] * e2[0];
        total += 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
        cum[static_cast<std::size_t>(f)] = total;
    }
    if (!(total > 1e-12))
        throw ValueError("sample_mesh_surface: mesh has zero surface area");

    auto cloud = Tensor<float>::uninit({n_points, 3});
    for (std::int64_t i = 0; i < n_points; ++i) {
        const double pick = rng.uniform() * total;
        const auto it = std::upper_bound(cum.begin(), cum.end(), pick);
        const std::int64_t f = std::min<std::int64_t>(it - cum.begin(), nf - 1);
        double u = rng.uniform();
        double v = rng.uniform();
        if (u + v > 1) {
            u = 1 - u;
            v = 1 - v;
        }
        const float* a = mesh.vertices.data() + mesh.faces[static_cast<std::size_t>(3 * f)] * 3;
        const float* b = mesh.vertices.data() + mesh.faces[static_cast<std::size_t>(3 * f + 1)] * 3;
        const float* c = mesh.vertices.data() + mesh.faces[static_cast<std::size_t>(3 * f + 2)] * 3;
        for (int d = 0; d < 3; ++d)
            cloud.data()[static_cast<std::size_t>(i * 3 + d)] =
                static_cast<float>(a[d] + u * (double(b[d]) - a[d]) + v * (double(c[d]) - a[d]));
    }
    return {cloud, -1};
}

enum class SynthClass { sphere, cube, cylinder, cone, torus, plane };

inline const std::vector<std::string>& synth_class_names() {
    static const std::vector<std::string> names = {"sphere", "cube",  "cylinder",
                                                   "cone",   "torus", "plane"};
    return names;
}

inline SynthClass synth_class_from_name(const std::string& name) {
    const auto& names = synth_class_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<SynthClass>(i);
    throw ValueError("unknown synthetic class '" + name + "'");
}

namespace detail {

inline void synth_point(SynthClass kind, Pcg32& rng, float* p) {
    switch (kind) {
        case SynthClass::sphere: {
            double x, y, z, n;
            do {
                x = rng.gaussian();
                y = rng.gaussian();
                z = rng.gaussian();
                n = std::sqrt(x * x + y * y + z * z);
            } while (n < 1e-9);
            p[0] = static_cast<float>(x / n);
            p[1] = static_cast<float>(y / n);
            p[2] = static_cast<float>(z / n);
            return;
        }
        case SynthClass::cube: {
            const std::uint32_t face = rng.bounded(6);
            const double u = rng.uniform(-1, 1);
            const double v = rng.uniform(-1, 1);
            const int axis = static_cast<int>(face) / 2;
            const float side = face % 2 == 0 ? -1.0f : 1.0f;
            p[axis] = side;
            p[(axis + 1) % 3] = static_cast<float>(u);
            p[(axis + 2) % 3] = static_cast<float>(v);
            return;
        }
        case SynthClass::cylinder: {
            // r = 1, z in [-1, 1]: side area 4pi, each cap pi
            const double pick = rng.uniform() * 6.0;
            if (pick < 4.0) {
                const double theta = rng.uniform() * 2 * M_PI;
                p[0] = static_cast<float>(std::cos(theta));
                p[1] = static_cast<float>(std::sin(theta));
                p[2] = static_cast<float>(rng.uniform(-1, 1));
            } else {
                const double theta = rng.uniform() * 2 * M_PI;
                const double r = std::sqrt(rng.uniform());
                p[0] = static_cast<float>(r * std::cos(theta));
                p[1] = static_cast<float>(r * std::sin(theta));
                p[2] = pick < 5.0 ? -1.0f : 1.0f;
            }
            return;
        }
        case SynthClass::cone: {
            // apex (0,0,1), unit base circle at z = -1; lateral area pi*sqrt(5)
            const double lateral = M_PI * std::sqrt(5.0);
            const double pick = rng.uniform() * (lateral + M_PI);
            const double theta = rng.uniform() * 2 * M_PI;
            if (pick < lateral) {
                const double t = std::sqrt(rng.uniform());  // fraction from apex
                p[0] = static_cast<float>(t * std::cos(theta));
                p[1] = static_cast<float>(t * std::sin(theta));
                p[2] = static_cast<float>(1 - 2 * t);
            } else {
                const double r = std::sqrt(rng.uniform());
                p[0] = static_cast<float>(r * std::cos(theta));
                p[1] = static_cast<float>(r * std::sin(theta));
                p[2] = -1.0f;
            }
            return;
        }
        case SynthClass::torus: {
            // major R = 1, minor r = 0.35; minor angle needs density (R + r cos phi)
            const double R = 1.0, r = 0.35;
            const double theta = rng.uniform() * 2 * M_PI;
            double phi;
            for (;;) {
                phi = rng.uniform() * 2 * M_PI;
                if (rng.uniform() * (R + r) <= R + r * std::cos(phi)) break;
            }
            const double ring = R + r * std::cos(phi);
            p[0] = static_cast<float>(ring * std::cos(theta));
            p[1] = static_cast<float>(ring * std::sin(theta));
            p[2] = static_cast<float>(r * std::sin(phi));
            return;
        }
        case SynthClass::plane: {
            p[0] = static_cast<float>(rng.uniform(-1, 1));
            p[1] = static_cast<float>(rng.uniform(-1, 1));
            p[2] = 0.0f;
            return;
        }
    }
    throw ValueError("unknown synthetic class");
}

}  // namespace detail

// Parametric shape sampled uniformly on its surface, jittered, randomly
// rotated, then scaled to fit the unit sphere. Shapes are built centered at
// the origin and the pose is a pure rotation, so the scaling never shifts
// the center (a sphere stays a unit sphere).
inline PointCloud<float> generate_synthetic(SynthClass kind, std::int64_t n_points, float jitter,
                                            Pcg32& rng) {
    if (n_points < 16)
        throw ValueError("generate_synthetic: need at least 16 points, got " +
                         std::to_string(n_points));
    auto pts = Tensor<float>::uninit({n_points, 3});
    for (std::int64_t i = 0; i < n_points; ++i)
        detail::synth_point(kind, rng, pts.data().data() + i * 3);

    if (jitter > 0)
        for (auto& v : pts.data()) v += static_cast<float>(rng.gaussian()) * jitter;

    // rotation from a random unit axis and angle
    double ax, ay, az, n;
    do {
        ax = rng.gaussian();
        ay = rng.gaussian();
        az = rng.gaussian();
        n = std::sqrt(ax * ax + ay * ay + az * az);
    } while (n < 1e-9);
    ax /= n;
    ay /= n;
    az /= n;
    const double ang = rng.uniform() * 2 * M_PI;
    const double c = std::cos(ang), s = std::sin(ang), t = 1 - c;
    const double rot[3][3] = {
        {t * ax * ax + c, t * ax * ay - s * az, t * ax * az + s * ay},
        {t * ax * ay + s * az, t * ay * ay + c, t * ay * az - s * ax},
        {t * ax * az - s * ay, t * ay * az + s * ax, t * az * az + c},
    };
    double max_sq = 0;
    for (std::int64_t i = 0; i < n_points; ++i) {
        float* p = pts.data().data() + i * 3;
        const double x = p[0], y = p[1], z = p[2];
        double q[3];
        double sq = 0;
        for (int d = 0; d < 3; ++d) {
            q[d] = rot[d][0] * x + rot[d][1] * y + rot[d][2] * z;
            sq += q[d] * q[d];
        }
        for (int d = 0; d < 3; ++d) p[d] = static_cast<float>(q[d]);
        max_sq = std::max(max_sq, sq);
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(max_sq));
    for (auto& v : pts.data()) v *= inv;
    return {pts, static_cast<std::int64_t>(kind)};
}

// Per-axis random scale plus global translation, the standard train-time jig.
template <typename S>
PointCloud<S> augment(const PointCloud<S>& cloud, Pcg32& rng,
                      std::pair<double, double> scale_range = {2.0 / 3.0, 1.5},
                      std::pair<double, double> translate_range = {-0.2, 0.2}) {
    if (scale_range.first > scale_range.second || translate_range.first > translate_range.second)
        throw ValueError("augment: invalid range");
    S scale[3], shift[3];
    for (int c = 0; c < 3; ++c)
        scale[c] = static_cast<S>(rng.uniform(scale_range.first, scale_range.second));
    for (int c = 0; c < 3; ++c)
        shift[c] = static_cast<S>(rng.uniform(translate_range.first, translate_range.second));

    auto out = Tensor<S>::uninit(cloud.points.shape());
    const std::int64_t n = cloud.points.dim(0);
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            out.data()[static_cast<std::size_t>(i * 3 + c)] =
                cloud.points.data()[static_cast<std::size_t>(i * 3 + c)] * scale[c] + shift[c];
    return {out, cloud.label};
}

// Six-shape benchmark. Every cloud draws from its own stream derived from
// (seed, split, class, index), so content is independent of generation order.
inline Dataset<float> make_synthetic_dataset(const std::string& split, std::int64_t per_class,
                                             std::int64_t n_points, float jitter,
                                             std::uint64_t seed) {
    if (split != "train" && split != "test")
        throw ValueError("make_synthetic_dataset: split must be train or test, got '" + split +
                         "'");
    Dataset<float> ds;
    ds.class_names = synth_class_names();
    ds.split = split;
    const std::uint64_t split_base = split == "test" ? 1u << 20 : 0;
    const Pcg32 root(seed, rng_stream::kData);
    for (std::size_t cls = 0; cls < ds.class_names.size(); ++cls)
        for (std::int64_t i = 0; i < per_class; ++i) {
            Pcg32 stream = root.split(split_base + (static_cast<std::uint64_t>(cls) << 14) +
                                      static_cast<std::uint64_t>(i));
            ds.clouds.push_back(
                generate_synthetic(static_cast<SynthClass>(cls), n_points, jitter, stream));
        }
    return ds;
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw IoError(std::string("pack truncated reading ") + what);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

inline constexpr std::uint32_t kPackVersion = 1;

template <typename S>
void pack_write(const Dataset<S>& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("GBPC", 4);
    detail::put_u32(out, kPackVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ds.clouds.size()));
    for (const auto& cloud : ds.clouds) {
        if (cloud.points.rank() != 2 || cloud.points.dim(1) != 3)
            shape_error("pack_write: clouds must be [N x 3], got " +
                        shape_str(cloud.points.shape()));
        detail::put_u32(out, static_cast<std::uint32_t>(cloud.points.dim(0)));
        // unlabeled clouds (-1) use the all-ones sentinel
        detail::put_u32(out, static_cast<std::uint32_t>(cloud.label));
        for (S v : cloud.points.data()) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
    }
    if (!out) throw IoError("write failed for " + path);
}

inline Dataset<float> pack_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "GBPC")
        throw IoError("pack " + path + ": bad magic, not a GBPC file");
    const std::uint32_t version = detail::get_u32(in, "version");
    if (version != kPackVersion)
        throw IoError("pack " + path + ": unsupported version " + std::to_string(version));
    const std::uint32_t count = detail::get_u32(in, "cloud count");

    Dataset<float> ds;
    ds.clouds.reserve(count);
    for (std::uint32_t c = 0; c < count; ++c) {
        const std::uint32_t n = detail::get_u32(in, "point count");
        const std::uint32_t label = detail::get_u32(in, "label");
        auto pts = Tensor<float>::uninit({static_cast<std::int64_t>(n), 3});
        for (auto& v : pts.data()) {
            const std::uint32_t bits = detail::get_u32(in, "point data");
            std::memcpy(&v, &bits, 4);
        }
        ds.clouds.push_back(
            {pts, label == 0xffffffffu ? -1 : static_cast<std::int64_t>(label)});
    }
    if (in.get() != std::ifstream::traits_type::eof())
        throw IoError("pack " + path + ": trailing bytes after last cloud");
    return ds;
}

}  // namespace gbnet
