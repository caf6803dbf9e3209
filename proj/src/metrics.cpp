#include "lrgt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include "lrgt/rng.hpp"

namespace lrgt {

VoxelGrid VoxelGrid::empty(int resolution) {
    VoxelGrid g;
    g.resolution = resolution;
    g.occupancy.assign(static_cast<std::size_t>(resolution) * resolution * resolution, 0);
    return g;
}

std::int64_t VoxelGrid::count() const {
    std::int64_t n = 0;
    for (auto v : occupancy) n += (v != 0);
    return n;
}

double VoxelGrid::fraction() const {
    return occupancy.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(cells());
}

// ---- dice -------------------------------------------------------------------

Tensor dice_loss(const Tensor& probs, const VoxelGrid& target, double eps) {
    const std::int64_t v = target.cells();
    if (probs.numel() != v) {
        throw ShapeError("dice_loss: prediction has " + std::to_string(probs.numel()) +
                         " cells, target has " + std::to_string(v));
    }
    DVec gdata(target.occupancy.size());
    for (std::size_t i = 0; i < gdata.size(); ++i) gdata[i] = target.occupancy[i] ? 1.0 : 0.0;
    Tensor g = Tensor::from_data({v}, std::move(gdata));
    Tensor p = reshape(probs, {v});
    const double sg = static_cast<double>(target.count());
    const double vd = static_cast<double>(v);

    Tensor s1 = sum(mul(p, g));
    Tensor sp = sum(p);
    // Occupied-side overlap: (sum pg + eps) / (sum p + sum g + 2 eps).
    Tensor term1 = divide(add_const(s1, eps), add_const(sp, sg + 2.0 * eps));
    // Empty-side overlap, using sum (1-p)(1-g) = V - sum p - sum g + sum pg.
    Tensor s3 = add_const(sub(s1, sp), vd - sg);
    Tensor term2 = divide(add_const(s3, eps), add_const(scale(sp, -1.0), 2.0 * vd - sg + 2.0 * eps));
    return add_const(scale(add(term1, term2), -1.0), 1.0);
}

// ---- iou --------------------------------------------------------------------

double iou(const Tensor& probs, const VoxelGrid& target, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ContractError("iou threshold must lie in (0, 1)");
    }
    if (probs.numel() != target.cells()) {
        throw ShapeError("iou: prediction and target resolutions differ");
    }
    std::int64_t inter = 0, uni = 0;
    const auto& pv = probs.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const bool p = pv[i] > threshold;
        const bool g = target.occupancy[i] != 0;
        inter += (p && g);
        uni += (p || g);
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double iou(const VoxelGrid& pred, const VoxelGrid& target) {
    if (pred.resolution != target.resolution) {
        throw ShapeError("iou: prediction and target resolutions differ");
    }
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.occupancy.size(); ++i) {
        const bool p = pred.occupancy[i] != 0;
        const bool g = target.occupancy[i] != 0;
        inter += (p && g);
        uni += (p || g);
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- marching cubes -----------------------------------------------------------

namespace {

// Corner i sits at (i & 1, i >> 1 & 1, i >> 2 & 1).
constexpr int kEdgeCorners[12][2] = {
    {0, 1}, {2, 3}, {4, 5}, {6, 7},  // x edges
    {0, 2}, {1, 3}, {4, 6}, {5, 7},  // y edges
    {0, 4}, {1, 5}, {2, 6}, {3, 7},  // z edges
};

// Face corner loops, counterclockwise as seen from outside the cube.
constexpr int kFaceLoops[6][4] = {
    {1, 3, 7, 5},  // +x
    {0, 4, 6, 2},  // -x
    {2, 6, 7, 3},  // +y
    {0, 1, 5, 4},  // -y
    {4, 5, 7, 6},  // +z
    {0, 2, 3, 1},  // -z
};

int edge_between(int a, int b) {
    for (int e = 0; e < 12; ++e) {
        if ((kEdgeCorners[e][0] == a && kEdgeCorners[e][1] == b) ||
            (kEdgeCorners[e][0] == b && kEdgeCorners[e][1] == a)) {
            return e;
        }
    }
    throw ContractError("corners are not edge-adjacent");
}

// Contour cycles for all 256 corner configurations, built by tracing the
// iso-contour over the cube faces. Segment pairing depends only on each
// face's corner signs (crossings bounding every contiguous inside run), so
// adjacent cells always agree on their shared face and meshes close up.
// Cycles longer than a triangle are triangulated around a per-cycle center
// vertex; fan diagonals between two face vertices could coincide with a
// neighboring cell's diagonals and stack four triangles on one edge.
std::vector<std::vector<std::vector<int>>> build_cycle_table() {
    std::vector<std::vector<std::vector<int>>> table(256);
    for (int config = 0; config < 256; ++config) {
        const auto inside = [&](int corner) { return (config >> corner) & 1; };
        // Directed contour segments: entry crossing -> exit crossing per
        // inside run, walking each face loop counterclockwise from outside.
        std::array<int, 12> next_from;
        next_from.fill(-1);
        int segment_count = 0;
        for (const auto& loop : kFaceLoops) {
            int entry = -1, first_exit = -1;
            bool first_entry_pending = false;
            for (int s = 0; s < 4; ++s) {
                const int a = loop[s], b = loop[(s + 1) % 4];
                if (inside(a) == inside(b)) continue;
                const int e = edge_between(a, b);
                if (!inside(a) && inside(b)) {  // entering the inside run
                    entry = e;
                } else {  // leaving it
                    if (entry >= 0) {
                        next_from[static_cast<std::size_t>(entry)] = e;
                        ++segment_count;
                        entry = -1;
                    } else {
                        first_exit = e;  // run wraps around the loop start
                        first_entry_pending = true;
                    }
                }
            }
            if (first_entry_pending) {
                if (entry < 0) throw ContractError("unbalanced face crossings");
                next_from[static_cast<std::size_t>(entry)] = first_exit;
                ++segment_count;
            }
        }
        // Chain segments head-to-tail into closed cycles.
        std::array<bool, 12> used;
        used.fill(false);
        int consumed = 0;
        for (int start = 0; start < 12; ++start) {
            if (next_from[static_cast<std::size_t>(start)] < 0 || used[static_cast<std::size_t>(start)]) continue;
            std::vector<int> cycle;
            int cur = start;
            do {
                cycle.push_back(cur);
                used[static_cast<std::size_t>(cur)] = true;
                ++consumed;
                cur = next_from[static_cast<std::size_t>(cur)];
                if (cur < 0) throw ContractError("contour chain broke");
            } while (cur != start);
            table[static_cast<std::size_t>(config)].push_back(std::move(cycle));
        }
        if (consumed != segment_count) throw ContractError("contour segments left unchained");
    }
    return table;
}

const std::vector<std::vector<std::vector<int>>>& cycle_table() {
    static const auto table = build_cycle_table();
    return table;
}

}  // namespace

SurfaceMesh marching_cubes(const std::vector<double>& values, int resolution, double iso) {
    const std::int64_t r = resolution;
    if (r < 1 || static_cast<std::int64_t>(values.size()) != r * r * r) {
        throw ShapeError("marching_cubes: expected " + std::to_string(r * r * r) + " values");
    }
    SurfaceMesh mesh;
    bool any_in = false, any_out = false;
    for (double v : values) {
        (v > iso ? any_in : any_out) = true;
    }
    if (!any_in || !any_out) {
        mesh.degenerate_input = true;  // no surface exists; callers score F = 0
        return mesh;
    }

    const std::int64_t n = r + 2;  // padded nodes per axis
    auto node_value = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
        if (i < 1 || j < 1 || k < 1 || i > r || j > r || k > r) return 0.0;
        return values[static_cast<std::size_t>(((i - 1) * r + (j - 1)) * r + (k - 1))];
    };
    // Padded node a (0-based) samples the voxel center (a - 1 + 0.5) / r.
    auto node_coord = [&](std::int64_t a) {
        return (static_cast<double>(a) - 0.5) / static_cast<double>(r);
    };

    // Shared vertices: one per crossing cube edge, keyed by (lower node, axis).
    std::unordered_map<std::uint64_t, std::int32_t> edge_vertex;
    const auto& table = cycle_table();
    for (std::int64_t ci = 0; ci + 1 < n; ++ci) {
        for (std::int64_t cj = 0; cj + 1 < n; ++cj) {
            for (std::int64_t ck = 0; ck + 1 < n; ++ck) {
                int config = 0;
                double corner_vals[8];
                for (int c = 0; c < 8; ++c) {
                    const std::int64_t i = ci + (c & 1);
                    const std::int64_t j = cj + ((c >> 1) & 1);
                    const std::int64_t k = ck + ((c >> 2) & 1);
                    corner_vals[c] = node_value(i, j, k);
                    if (corner_vals[c] > iso) config |= 1 << c;
                }
                const auto& cycles = table[static_cast<std::size_t>(config)];
                if (cycles.empty()) continue;
                auto vertex_on_edge = [&](int e) -> std::int32_t {
                    const int ca = kEdgeCorners[e][0], cb = kEdgeCorners[e][1];
                    const std::int64_t ai = ci + (ca & 1), aj = cj + ((ca >> 1) & 1),
                                       ak = ck + ((ca >> 2) & 1);
                    const int axis = e / 4;
                    const std::uint64_t key =
                        static_cast<std::uint64_t>((ai * n + aj) * n + ak) * 3 +
                        static_cast<std::uint64_t>(axis);
                    auto it = edge_vertex.find(key);
                    if (it != edge_vertex.end()) return it->second;
                    const double va = corner_vals[ca], vb = corner_vals[cb];
                    const double t = (iso - va) / (vb - va);
                    std::array<double, 3> pos{node_coord(ai), node_coord(aj), node_coord(ak)};
                    pos[static_cast<std::size_t>(axis)] += t / static_cast<double>(r);
                    for (auto& c : pos) c = std::min(1.0, std::max(0.0, c));  // pad ring only
                    const std::int32_t id = static_cast<std::int32_t>(mesh.vertices.size());
                    mesh.vertices.push_back(pos);
                    edge_vertex.emplace(key, id);
                    return id;
                };
                for (const auto& cycle : cycles) {
                    std::vector<std::int32_t> ring(cycle.size());
                    for (std::size_t i = 0; i < cycle.size(); ++i) {
                        ring[i] = vertex_on_edge(cycle[i]);
                    }
                    if (ring.size() == 3) {
                        mesh.triangles.push_back({ring[0], ring[1], ring[2]});
                        continue;
                    }
                    std::array<double, 3> center{0, 0, 0};
                    for (std::int32_t vi : ring) {
                        for (int a = 0; a < 3; ++a) {
                            center[static_cast<std::size_t>(a)] +=
                                mesh.vertices[static_cast<std::size_t>(vi)][static_cast<std::size_t>(a)];
                        }
                    }
                    for (auto& c : center) c /= static_cast<double>(ring.size());
                    const std::int32_t cid = static_cast<std::int32_t>(mesh.vertices.size());
                    mesh.vertices.push_back(center);
                    for (std::size_t i = 0; i < ring.size(); ++i) {
                        mesh.triangles.push_back(
                            {cid, ring[i], ring[(i + 1) % ring.size()]});
                    }
                }
            }
        }
    }
    return mesh;
}

SurfaceMesh marching_cubes(const VoxelGrid& grid, double iso) {
    std::vector<double> values(grid.occupancy.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = grid.occupancy[i] ? 1.0 : 0.0;
    return marching_cubes(values, grid.resolution, iso);
}

SurfaceMesh marching_cubes(const Tensor& probs, double iso) {
    const std::int64_t r = probs.dim(0);
    if (probs.ndim() != 3 || probs.dim(1) != r || probs.dim(2) != r) {
        throw ShapeError("marching_cubes expects a cubic [R, R, R] tensor");
    }
    std::vector<double> values(probs.values().begin(), probs.values().end());
    return marching_cubes(values, static_cast<int>(r), iso);
}

double SurfaceMesh::area() const {
    double total = 0.0;
    for (const auto& t : triangles) {
        const auto& a = vertices[static_cast<std::size_t>(t[0])];
        const auto& b = vertices[static_cast<std::size_t>(t[1])];
        const auto& c = vertices[static_cast<std::size_t>(t[2])];
        const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
        const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
        const double cx = uy * vz - uz * vy;
        const double cy = uz * vx - ux * vz;
        const double cz = ux * vy - uy * vx;
        total += 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
    }
    return total;
}

double SurfaceMesh::signed_volume() const {
    double total = 0.0;
    for (const auto& t : triangles) {
        const auto& a = vertices[static_cast<std::size_t>(t[0])];
        const auto& b = vertices[static_cast<std::size_t>(t[1])];
        const auto& c = vertices[static_cast<std::size_t>(t[2])];
        total += (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) +
                  a[2] * (b[0] * c[1] - b[1] * c[0])) /
                 6.0;
    }
    return total;
}

bool is_watertight(const SurfaceMesh& mesh) {
    if (mesh.empty()) return false;
    std::map<std::pair<std::int32_t, std::int32_t>, std::pair<int, int>> edges;  // fwd, rev counts
    for (const auto& t : mesh.triangles) {
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) return false;
        for (int s = 0; s < 3; ++s) {
            std::int32_t a = t[static_cast<std::size_t>(s)];
            std::int32_t b = t[static_cast<std::size_t>((s + 1) % 3)];
            const bool fwd = a < b;
            if (!fwd) std::swap(a, b);
            auto& entry = edges[{a, b}];
            (fwd ? entry.first : entry.second) += 1;
        }
    }
    for (const auto& [edge, counts] : edges) {
        if (counts.first != 1 || counts.second != 1) return false;
    }
    return true;
}

// ---- surface sampling -----------------------------------------------------------

PointCloud sample_surface(const SurfaceMesh& mesh, int count, std::uint64_t seed) {
    if (mesh.empty()) {
        throw ContractError("sample_surface: empty mesh (score the reconstruction as F = 0)");
    }
    std::vector<double> cumulative(mesh.triangles.size());
    double total = 0.0;
    for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
        const auto& t = mesh.triangles[i];
        const auto& a = mesh.vertices[static_cast<std::size_t>(t[0])];
        const auto& b = mesh.vertices[static_cast<std::size_t>(t[1])];
        const auto& c = mesh.vertices[static_cast<std::size_t>(t[2])];
        const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
        const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
        const double cx = uy * vz - uz * vy;
        const double cy = uz * vx - ux * vz;
        const double cz = ux * vy - uy * vx;
        total += 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
        cumulative[i] = total;
    }
    if (total <= 0.0) {
        throw ContractError("sample_surface: zero-area mesh");
    }
    Rng rng(seed);
    PointCloud cloud;
    cloud.points.reserve(static_cast<std::size_t>(count));
    for (int s = 0; s < count; ++s) {
        const double pick = rng.uniform() * total;
        const std::size_t ti = static_cast<std::size_t>(
            std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
        const auto& t = mesh.triangles[std::min(ti, mesh.triangles.size() - 1)];
        const auto& a = mesh.vertices[static_cast<std::size_t>(t[0])];
        const auto& b = mesh.vertices[static_cast<std::size_t>(t[1])];
        const auto& c = mesh.vertices[static_cast<std::size_t>(t[2])];
        const double r1 = std::sqrt(rng.uniform());
        const double r2 = rng.uniform();
        const double wa = 1.0 - r1, wb = r1 * (1.0 - r2), wc = r1 * r2;
        cloud.points.push_back({wa * a[0] + wb * b[0] + wc * c[0],
                                wa * a[1] + wb * b[1] + wc * c[1],
                                wa * a[2] + wb * b[2] + wc * c[2]});
    }
    return cloud;
}

// ---- F-score ----------------------------------------------------------------------

namespace {

double sq_dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

// Fraction of `from` points strictly within d of some `to` point.
double coverage_hashed(const std::vector<std::array<double, 3>>& from,
                       const std::vector<std::array<double, 3>>& to, double d) {
    const double inv = 1.0 / d;
    auto cell_of = [&](double x) { return static_cast<std::int64_t>(std::floor(x * inv)); };
    auto key_of = [&](std::int64_t cx, std::int64_t cy, std::int64_t cz) {
        // coordinates are bounded, so 21 bits per axis is plenty
        const std::uint64_t ux = static_cast<std::uint64_t>(cx + (1 << 20));
        const std::uint64_t uy = static_cast<std::uint64_t>(cy + (1 << 20));
        const std::uint64_t uz = static_cast<std::uint64_t>(cz + (1 << 20));
        return (ux << 42) | (uy << 21) | uz;
    };
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < to.size(); ++i) {
        buckets[key_of(cell_of(to[i][0]), cell_of(to[i][1]), cell_of(to[i][2]))].push_back(i);
    }
    const double d2 = d * d;
    std::size_t hits = 0;
    for (const auto& p : from) {
        const std::int64_t cx = cell_of(p[0]), cy = cell_of(p[1]), cz = cell_of(p[2]);
        bool found = false;
        for (std::int64_t dx = -1; dx <= 1 && !found; ++dx) {
            for (std::int64_t dy = -1; dy <= 1 && !found; ++dy) {
                for (std::int64_t dz = -1; dz <= 1 && !found; ++dz) {
                    auto it = buckets.find(key_of(cx + dx, cy + dy, cz + dz));
                    if (it == buckets.end()) continue;
                    for (std::size_t j : it->second) {
                        if (sq_dist(p, to[j]) < d2) {
                            found = true;
                            break;
                        }
                    }
                }
            }
        }
        hits += found;
    }
    return from.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(from.size());
}

double coverage_bruteforce(const std::vector<std::array<double, 3>>& from,
                           const std::vector<std::array<double, 3>>& to, double d) {
    const double d2 = d * d;
    std::size_t hits = 0;
    for (const auto& p : from) {
        for (const auto& q : to) {
            if (sq_dist(p, q) < d2) {
                ++hits;
                break;
            }
        }
    }
    return from.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(from.size());
}

FScore combine(double precision, double recall) {
    FScore s;
    s.precision = precision;
    s.recall = recall;
    s.f = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    return s;
}

void check_clouds(const PointCloud& rec, const PointCloud& gt, double d) {
    if (rec.points.empty() || gt.points.empty()) {
        throw ContractError("f_score requires non-empty point clouds");
    }
    if (!(d > 0.0)) throw ContractError("f_score distance threshold must be positive");
}

}  // namespace

FScore f_score(const PointCloud& rec, const PointCloud& gt, double d) {
    check_clouds(rec, gt, d);
    return combine(coverage_hashed(rec.points, gt.points, d),
                   coverage_hashed(gt.points, rec.points, d));
}

FScore f_score_bruteforce(const PointCloud& rec, const PointCloud& gt, double d) {
    check_clouds(rec, gt, d);
    return combine(coverage_bruteforce(rec.points, gt.points, d),
                   coverage_bruteforce(gt.points, rec.points, d));
}

}  // namespace lrgt
