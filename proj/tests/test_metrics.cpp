#include <doctest.h>

#include <cmath>

#include "lrgt/metrics.hpp"
#include "lrgt/rng.hpp"
#include "testutil.hpp"

using namespace lrgt;

namespace {

VoxelGrid random_grid(int resolution, double fill, Rng& rng) {
    VoxelGrid g = VoxelGrid::empty(resolution);
    for (auto& v : g.occupancy) v = rng.uniform() < fill ? 1 : 0;
    return g;
}

Tensor probs_from(const VoxelGrid& g, double hi = 1.0, double lo = 0.0) {
    DVec v(g.occupancy.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = g.occupancy[i] ? hi : lo;
    return Tensor::from_data({g.resolution, g.resolution, g.resolution}, std::move(v));
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("dice loss is zero on exact agreement and one on disagreement") {
    Rng rng(3);
    VoxelGrid g = random_grid(8, 0.3, rng);
    REQUIRE(g.count() > 0);
    REQUIRE(g.count() < g.cells());

    CHECK(std::fabs(dice_loss(probs_from(g), g).item()) <= 1e-12);

    Tensor inverted = probs_from(g, 0.0, 1.0);
    CHECK(dice_loss(inverted, g).item() >= 1.0 - 1e-8);
    CHECK(dice_loss(inverted, g).item() <= 1.0);
}

TEST_CASE("dice loss of a uniform half prediction against half occupancy is 0.5") {
    VoxelGrid g = VoxelGrid::empty(8);
    for (std::int64_t i = 0; i < g.cells() / 2; ++i) g.occupancy[static_cast<std::size_t>(i)] = 1;
    Tensor p = Tensor::full({8, 8, 8}, 0.5);
    CHECK(dice_loss(p, g).item() == doctest::Approx(0.5).epsilon(1e-7));
}

TEST_CASE("dice loss stays within [0, 1] on random inputs") {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        VoxelGrid g = random_grid(4, rng.uniform(), rng);
        DVec pv(static_cast<std::size_t>(g.cells()));
        for (auto& x : pv) x = rng.uniform();
        Tensor p = Tensor::from_data({4, 4, 4}, std::move(pv));
        const double loss = dice_loss(p, g).item();
        CHECK(loss >= 0.0);
        CHECK(loss <= 1.0);
    }
}

TEST_CASE("dice loss gradient vs finite differences") {
    Rng rng(11);
    VoxelGrid g = random_grid(4, 0.4, rng);
    DVec pv(static_cast<std::size_t>(g.cells()));
    for (auto& x : pv) x = 0.1 + 0.8 * rng.uniform();
    Tensor p = Tensor::from_data({4, 4, 4}, std::move(pv)).set_requires_grad(true);
    Rng coords(13);
    const double err = testutil::max_grad_rel_err([&]() { return dice_loss(p, g); }, {p}, 20,
                                                  coords);
    CHECK(err <= 1e-6);
}

TEST_CASE("dice loss rejects resolution mismatch") {
    CHECK_THROWS_AS(dice_loss(Tensor::zeros({4, 4, 4}), VoxelGrid::empty(8)), ShapeError);
}

TEST_CASE("iou on closed-form cases") {
    VoxelGrid gt = VoxelGrid::empty(4);
    gt.set(1, 1, 1, true);

    VoxelGrid both = gt;
    CHECK(iou(both, gt) == 1.0);

    VoxelGrid pred = VoxelGrid::empty(4);
    pred.set(1, 1, 1, true);
    pred.set(2, 2, 2, true);  // pred {a, b} vs gt {b}
    CHECK(iou(pred, gt) == 0.5);

    VoxelGrid disjoint = VoxelGrid::empty(4);
    disjoint.set(0, 0, 0, true);
    CHECK(iou(disjoint, gt) == 0.0);

    CHECK(iou(VoxelGrid::empty(4), VoxelGrid::empty(4)) == 1.0);
}

TEST_CASE("iou over probabilities thresholds strictly") {
    VoxelGrid gt = VoxelGrid::empty(2);
    gt.set(0, 0, 0, true);
    Tensor p = Tensor::zeros({2, 2, 2});
    p.raw()[0] = 0.7;
    CHECK(iou(p, gt, 0.5) == 1.0);
    CHECK(iou(p, gt, 0.7) == 0.0);  // strict >
    CHECK_THROWS_AS(iou(p, gt, 0.0), ContractError);
    CHECK_THROWS_AS(iou(p, gt, 1.0), ContractError);
}

TEST_CASE("iou is symmetric on binary grids and monotone in correct cells") {
    Rng rng(17);
    VoxelGrid a = random_grid(6, 0.3, rng);
    VoxelGrid b = random_grid(6, 0.3, rng);
    CHECK(iou(a, b) == iou(b, a));

    // adding a correctly-predicted cell never hurts
    VoxelGrid pred = VoxelGrid::empty(6);
    double prev = iou(pred, a);
    for (int i = 0; i < 6 && prev < 1.0; ++i) {
        for (int j = 0; j < 6; ++j) {
            for (int k = 0; k < 6; ++k) {
                if (a.at(i, j, k) && !pred.at(i, j, k)) {
                    pred.set(i, j, k, true);
                    const double now = iou(pred, a);
                    CHECK(now >= prev);
                    prev = now;
                }
            }
        }
    }
}

TEST_CASE("marching cubes on a single voxel yields a closed outward surface") {
    VoxelGrid g = VoxelGrid::empty(8);
    g.set(3, 4, 2, true);
    SurfaceMesh mesh = marching_cubes(g, 0.5);
    CHECK_FALSE(mesh.empty());
    CHECK(mesh.area() > 0.0);
    CHECK(is_watertight(mesh));
    CHECK(mesh.signed_volume() > 0.0);
    // vertices stay within the voxel's one-cell neighborhood
    const double cx = (3 + 0.5) / 8.0, cy = (4 + 0.5) / 8.0, cz = (2 + 0.5) / 8.0;
    for (const auto& v : mesh.vertices) {
        CHECK(std::fabs(v[0] - cx) <= 1.0 / 8.0 + 1e-12);
        CHECK(std::fabs(v[1] - cy) <= 1.0 / 8.0 + 1e-12);
        CHECK(std::fabs(v[2] - cz) <= 1.0 / 8.0 + 1e-12);
    }
}

TEST_CASE("marching cubes box area matches the analytic area within 5%") {
    VoxelGrid g = VoxelGrid::empty(32);
    for (int i = 8; i < 24; ++i) {
        for (int j = 8; j < 24; ++j) {
            for (int k = 8; k < 24; ++k) g.set(i, j, k, true);
        }
    }
    SurfaceMesh mesh = marching_cubes(g, 0.5);
    const double analytic = 6.0 * 0.5 * 0.5;  // 16-voxel box side = 0.5 of the grid
    CHECK(std::fabs(mesh.area() - analytic) / analytic <= 0.05);
    CHECK(is_watertight(mesh));
    // enclosed volume close to the analytic 0.5^3 (corners bevel slightly)
    CHECK(mesh.signed_volume() == doctest::Approx(0.125).epsilon(0.05));
}

TEST_CASE("marching cubes degenerate grids signal an empty mesh") {
    SurfaceMesh below = marching_cubes(VoxelGrid::empty(8), 0.5);
    CHECK(below.empty());
    CHECK(below.degenerate_input);

    VoxelGrid full = VoxelGrid::empty(8);
    std::fill(full.occupancy.begin(), full.occupancy.end(), 1);
    SurfaceMesh above = marching_cubes(full, 0.5);
    CHECK(above.empty());
    CHECK(above.degenerate_input);

    std::vector<double> uniform(27, 0.2);
    CHECK(marching_cubes(uniform, 3, 0.5).empty());
}

TEST_CASE("marching cubes is watertight for all 256 local configurations") {
    // every 2x2x2 occupancy pattern, padded, must close up (255 is the
    // all-full grid, which is signaled as degenerate instead)
    for (int config = 1; config < 255; ++config) {
        VoxelGrid g = VoxelGrid::empty(2);
        for (int c = 0; c < 8; ++c) {
            if (config & (1 << c)) g.set(c & 1, (c >> 1) & 1, (c >> 2) & 1, true);
        }
        SurfaceMesh mesh = marching_cubes(g, 0.5);
        CHECK(is_watertight(mesh));
        CHECK(mesh.signed_volume() > 0.0);
    }
}

TEST_CASE("marching cubes is watertight on random grids and probability fields") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        VoxelGrid g = random_grid(8, 0.2 + 0.6 * rng.uniform(), rng);
        if (g.count() == 0 || g.count() == g.cells()) continue;
        SurfaceMesh mesh = marching_cubes(g, 0.5);
        CHECK(is_watertight(mesh));
    }
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> field(16 * 16 * 16);
        for (auto& v : field) v = rng.uniform();
        SurfaceMesh mesh = marching_cubes(field, 16, 0.5);
        CHECK(is_watertight(mesh));
    }
}

TEST_CASE("surface sampling stays on the mesh and respects areas") {
    SurfaceMesh mesh;
    mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {1, 0, 1}};
    mesh.triangles = {{0, 1, 2}};  // area 0.5 in z = 0

    PointCloud cloud = sample_surface(mesh, 256, 99);
    CHECK(cloud.points.size() == 256);
    for (const auto& p : cloud.points) {
        CHECK(p[2] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(p[0] >= -1e-12);
        CHECK(p[1] >= -1e-12);
        CHECK(p[0] + p[1] <= 1.0 + 1e-12);
    }

    PointCloud again = sample_surface(mesh, 256, 99);
    CHECK(again.points == cloud.points);

    // second triangle with 3x the area must draw ~3x the samples
    SurfaceMesh two = mesh;
    two.vertices.push_back({0, 0, 3});  // (1,0,0),(1,1,0),(1,0,3)-ish tall triangle
    two.triangles = {{0, 1, 2}, {1, 3, 4}};
    // triangle 2: corners (1,0,0),(1,1,0),(1,0,1)... use explicit area check
    const int n = 8192;
    PointCloud mixed = sample_surface(two, n, 7);
    int on_first = 0;
    for (const auto& p : mixed.points) on_first += (std::fabs(p[2]) <= 1e-12 && p[0] + p[1] <= 1.0 + 1e-9);
    const double a1 = 0.5;
    double a2;
    {
        SurfaceMesh only2 = two;
        only2.triangles = {{1, 3, 4}};
        a2 = only2.area();
    }
    const double expect = static_cast<double>(n) * a1 / (a1 + a2);
    const double sigma = std::sqrt(static_cast<double>(n) * (a1 / (a1 + a2)) * (a2 / (a1 + a2)));
    CHECK(std::fabs(on_first - expect) <= 6.0 * sigma);

    SurfaceMesh empty;
    CHECK_THROWS_WITH_AS(sample_surface(empty, 10, 0), doctest::Contains("F = 0"), ContractError);
}

TEST_CASE("f-score closed forms") {
    PointCloud a, b;
    a.points = {{0.1, 0.1, 0.1}, {0.5, 0.5, 0.5}};
    b.points = a.points;
    FScore same = f_score(a, b, 0.01);
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    CHECK(same.f == 1.0);

    PointCloud far;
    far.points = {{0.9, 0.9, 0.9}};
    FScore none = f_score(a, far, 0.01);
    CHECK(none.f == 0.0);

    // P = 1, R = 0.5 -> F = 2/3
    PointCloud rec, gt;
    rec.points = {{0.2, 0.2, 0.2}};
    gt.points = {{0.2, 0.2, 0.2}, {0.8, 0.8, 0.8}};
    FScore mixed = f_score(rec, gt, 0.01);
    CHECK(mixed.precision == 1.0);
    CHECK(mixed.recall == 0.5);
    CHECK(mixed.f == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    CHECK_THROWS_AS(f_score(PointCloud{}, gt, 0.01), ContractError);
    CHECK_THROWS_AS(f_score(rec, gt, 0.0), ContractError);
}

TEST_CASE("spatial hash matches brute force exactly") {
    Rng rng(29);
    for (int trial = 0; trial < 15; ++trial) {
        const int nr = 1 + static_cast<int>(rng.uniform_below(400));
        const int ng = 1 + static_cast<int>(rng.uniform_below(400));
        PointCloud rec, gt;
        for (int i = 0; i < nr; ++i) rec.points.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        for (int i = 0; i < ng; ++i) gt.points.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        const double d = 0.01 + 0.05 * rng.uniform();
        FScore fast = f_score(rec, gt, d);
        FScore slow = f_score_bruteforce(rec, gt, d);
        CHECK(fast.precision == slow.precision);
        CHECK(fast.recall == slow.recall);
        CHECK(fast.f == slow.f);
    }
}

TEST_CASE("f-score at 1% of a shared shape surface is high") {
    VoxelGrid g = VoxelGrid::empty(32);
    for (int i = 10; i < 22; ++i) {
        for (int j = 8; j < 20; ++j) {
            for (int k = 12; k < 26; ++k) g.set(i, j, k, true);
        }
    }
    SurfaceMesh mesh = marching_cubes(g, 0.5);
    PointCloud rec = sample_surface(mesh, 8192, 1);
    PointCloud gt = sample_surface(mesh, 8192, 2);
    FScore s = f_score(rec, gt, 0.01);
    CHECK(s.f >= 0.9);
}

TEST_SUITE_END();
