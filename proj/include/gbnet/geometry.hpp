#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gbnet/ops.hpp"

namespace gbnet {

enum class NbrSpace { coordinate, feature };

// Row-major N x k table of neighbor indices, each row sorted by ascending
// distance with ties broken by ascending index. Self is never a neighbor.
struct NeighborIndex {
    std::int64_t n = 0;
    std::int64_t k = 0;
    NbrSpace space = NbrSpace::coordinate;
    std::vector<std::int64_t> indices;

    std::int64_t at(std::int64_t i, std::int64_t j) const {
        return indices[static_cast<std::size_t>(i * k + j)];
    }
};

template <typename S>
struct PointCloud {
    Tensor<S> points;  // [N x 3]
    std::int64_t label = -1;
};

namespace detail {

// Core brute-force pass; writes row-major n x k indices (no offset applied).
template <typename S>
void knn_rows(const S* p, std::int64_t n, std::int64_t d, std::int64_t k,
              std::int64_t* out_indices) {
    std::vector<std::pair<S, std::int64_t>> cand(static_cast<std::size_t>(n - 1));
    for (std::int64_t i = 0; i < n; ++i) {
        const S* pi = p + i * d;
        std::size_t w = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const S* pj = p + j * d;
            S dist = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const S diff = pi[c] - pj[c];
                dist += diff * diff;
            }
            cand[w++] = {dist, j};
        }
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        for (std::int64_t j = 0; j < k; ++j)
            out_indices[i * k + j] = cand[static_cast<std::size_t>(j)].second;
    }
}

}  // namespace detail

// Exact brute-force kNN under squared Euclidean distance.
template <typename S>
NeighborIndex knn_search(const Tensor<S>& feats, std::int64_t k,
                         NbrSpace space = NbrSpace::coordinate) {
    if (feats.rank() != 2)
        shape_error("knn_search: features must be rank 2, got " + shape_str(feats.shape()));
    const std::int64_t n = feats.dim(0);
    const std::int64_t d = feats.dim(1);
    if (k < 1 || k >= n)
        throw ValueError("knn_search: k = " + std::to_string(k) + " needs 1 <= k < N = " +
                         std::to_string(n));
    NeighborIndex out;
    out.n = n;
    out.k = k;
    out.space = space;
    out.indices.resize(static_cast<std::size_t>(n * k));
    detail::knn_rows(feats.data().data(), n, d, k, out.indices.data());
    return out;
}

// kNN restricted to each cloud of a stack of equally sized clouds; neighbor
// indices are global row numbers so the table drives ops on the whole stack.
template <typename S>
NeighborIndex knn_search_stacked(const Tensor<S>& feats, std::int64_t n_per_cloud,
                                 std::int64_t k, NbrSpace space) {
    if (feats.rank() != 2)
        shape_error("knn_search_stacked: features must be rank 2, got " +
                    shape_str(feats.shape()));
    const std::int64_t rows = feats.dim(0);
    const std::int64_t d = feats.dim(1);
    if (n_per_cloud < 2 || rows % n_per_cloud != 0)
        throw ValueError("knn_search_stacked: " + std::to_string(rows) +
                         " rows do not stack clouds of " + std::to_string(n_per_cloud));
    if (k < 1 || k >= n_per_cloud)
        throw ValueError("knn_search_stacked: k = " + std::to_string(k) +
                         " needs 1 <= k < N = " + std::to_string(n_per_cloud));
    NeighborIndex out;
    out.n = rows;
    out.k = k;
    out.space = space;
    out.indices.resize(static_cast<std::size_t>(rows * k));
    const S* p = feats.data().data();
    for (std::int64_t b = 0; b < rows / n_per_cloud; ++b) {
        const std::int64_t base = b * n_per_cloud;
        std::int64_t* slot = out.indices.data() + base * k;
        detail::knn_rows(p + base * d, n_per_cloud, d, k, slot);
        for (std::int64_t t = 0; t < n_per_cloud * k; ++t) slot[t] += base;
    }
    return out;
}

// Gather [x_i, x_j - x_i] rows over a prebuilt neighbor table.
template <typename S>
Tensor<S> build_edge_features(const Tensor<S>& feats, const NeighborIndex& nbr) {
    if (feats.dim(0) != nbr.n)
        shape_error("build_edge_features: " + std::to_string(nbr.n) +
                    "-point neighbor table for " + std::to_string(feats.dim(0)) + " points");
    return edge_features(feats, nbr.indices, nbr.k);
}

inline std::int64_t descriptor_length(int form_id) {
    static constexpr std::array<std::int64_t, 8> lengths = {3, 8, 11, 11, 12, 14, 18, 24};
    if (form_id < 1 || form_id > 8)
        throw ValueError("descriptor: form " + std::to_string(form_id) + " not in 1..8");
    return lengths[static_cast<std::size_t>(form_id - 1)];
}

// Column labels in the exact order geometric_descriptor writes them.
inline std::vector<std::string> descriptor_column_names(int form_id) {
    using V = std::vector<std::string>;
    auto cat = [](std::initializer_list<V> parts) {
        V out;
        for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
        return out;
    };
    const V p = {"x", "y", "z"};
    const V nm = {"nx", "ny", "nz"};
    const V e1 = {"e1x", "e1y", "e1z"}, e2 = {"e2x", "e2y", "e2z"}, e3 = {"e3x", "e3y", "e3z"};
    const V j1 = {"j1x", "j1y", "j1z"}, j2 = {"j2x", "j2y", "j2z"};
    const V n1 = {"n1x", "n1y", "n1z"}, n2 = {"n2x", "n2y", "n2z"};
    switch (form_id) {
        case 1: return p;
        case 2: return cat({p, nm, {"len1", "len2"}});
        case 3: return cat({p, e1, e2, {"len1", "len2"}});
        case 4: return cat({p, j1, j2, {"len1", "len2"}});
        case 5: return cat({p, nm, e1, e2});
        case 6: return cat({p, nm, e1, e2, {"len1", "len2"}});
        case 7: return cat({p, nm, n1, n2, e1, e2});
        case 8: return cat({p, nm, n1, n2, e1, e2, e3, {"len1", "len2", "len3"}});
    }
    throw ValueError("descriptor: form " + std::to_string(form_id) + " not in 1..8");
}

// Per-point low-level geometry from the two nearest neighbors. Rows follow
// the form's item order; the normal is the raw cross product edge1 x edge2
// (zero for collinear neighborhoods, sign fixed by neighbor order).
template <typename S>
Tensor<S> geometric_descriptor(const Tensor<S>& points, int form_id) {
    if (points.rank() != 2 || points.dim(1) != 3)
        shape_error("descriptor: points must be [N x 3], got " + shape_str(points.shape()));
    const std::int64_t n = points.dim(0);
    if (n < 3) throw ValueError("descriptor: need at least 3 points, got " + std::to_string(n));
    const std::int64_t m = descriptor_length(form_id);

    const NeighborIndex nbr = knn_search(points, 2);
    auto out = Tensor<S>::uninit({n, m});
    const S* p = points.data().data();
    S* rows = out.data().data();

    auto cross = [](const S* a, const S* b, S* r) {
        r[0] = a[1] * b[2] - a[2] * b[1];
        r[1] = a[2] * b[0] - a[0] * b[2];
        r[2] = a[0] * b[1] - a[1] * b[0];
    };
    auto norm3 = [](const S* a) {
        return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    };

    for (std::int64_t i = 0; i < n; ++i) {
        const S* pi = p + i * 3;
        const S* pj1 = p + nbr.at(i, 0) * 3;
        const S* pj2 = p + nbr.at(i, 1) * 3;
        S e1[3], e2[3], e3[3], nm[3], nj1[3], nj2[3];
        for (int c = 0; c < 3; ++c) {
            e1[c] = pj1[c] - pi[c];
            e2[c] = pj2[c] - pi[c];
            e3[c] = pj1[c] - pj2[c];
        }
        cross(e1, e2, nm);
        const S neg_e1[3] = {-e1[0], -e1[1], -e1[2]};
        const S neg_e2[3] = {-e2[0], -e2[1], -e2[2]};
        const S neg_e3[3] = {-e3[0], -e3[1], -e3[2]};
        cross(neg_e1, neg_e3, nj1);
        cross(neg_e2, e3, nj2);
        const S l1 = norm3(e1), l2 = norm3(e2), l3 = norm3(e3);

        S* r = rows + i * m;
        auto put3 = [&r](const S* v) {
            *r++ = v[0];
            *r++ = v[1];
            *r++ = v[2];
        };
        auto put1 = [&r](S v) { *r++ = v; };
        switch (form_id) {
            case 1:
                put3(pi);
                break;
            case 2:
                put3(pi), put3(nm), put1(l1), put1(l2);
                break;
            case 3:
                put3(pi), put3(e1), put3(e2), put1(l1), put1(l2);
                break;
            case 4:
                put3(pi), put3(pj1), put3(pj2), put1(l1), put1(l2);
                break;
            case 5:
                put3(pi), put3(nm), put3(e1), put3(e2);
                break;
            case 6:
                put3(pi), put3(nm), put3(e1), put3(e2), put1(l1), put1(l2);
                break;
            case 7:
                put3(pi), put3(nm), put3(nj1), put3(nj2), put3(e1), put3(e2);
                break;
            case 8:
                put3(pi), put3(nm), put3(nj1), put3(nj2), put3(e1), put3(e2), put3(e3),
                    put1(l1), put1(l2), put1(l3);
                break;
        }
    }
    return out;
}

// Center at the origin and scale so the farthest point sits on the unit
// sphere. Idempotent up to rounding.
template <typename S>
Tensor<S> normalize_to_unit_sphere(const Tensor<S>& points) {
    if (points.rank() != 2 || points.dim(1) != 3)
        shape_error("normalize: points must be [N x 3], got " + shape_str(points.shape()));
    const std::int64_t n = points.dim(0);
    if (n < 1) throw ValueError("normalize: empty cloud");
    const S* p = points.data().data();
    double cx = 0, cy = 0, cz = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        cx += p[i * 3];
        cy += p[i * 3 + 1];
        cz += p[i * 3 + 2];
    }
    cx /= n;
    cy /= n;
    cz /= n;
    double max_norm = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = p[i * 3] - cx, y = p[i * 3 + 1] - cy, z = p[i * 3 + 2] - cz;
        max_norm = std::max(max_norm, std::sqrt(x * x + y * y + z * z));
    }
    if (max_norm < 1e-12)
        throw ValueError("normalize: all points identical, zero scale");
    auto out = Tensor<S>::uninit(points.shape());
    S* q = out.data().data();
    const double inv = 1.0 / max_norm;
    for (std::int64_t i = 0; i < n; ++i) {
        q[i * 3] = static_cast<S>((p[i * 3] - cx) * inv);
        q[i * 3 + 1] = static_cast<S>((p[i * 3 + 1] - cy) * inv);
        q[i * 3 + 2] = static_cast<S>((p[i * 3 + 2] - cz) * inv);
    }
    return out;
}

}  // namespace gbnet
