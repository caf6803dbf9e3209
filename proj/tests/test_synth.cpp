#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lrgt/rng.hpp"
#include "lrgt/synth.hpp"

using namespace lrgt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("lrgt_test_" + std::to_string(Rng(std::random_device{}()).next_u64()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Independent silhouette oracle: a pixel is lit iff its ray crosses the
// interior of some occupied voxel (per-voxel slab test).
bool slab_hit(const VoxelGrid& grid, const std::array<double, 3>& dir, int image_size, int px,
              int py) {
    std::array<double, 3> u{}, v{};
    camera_basis(dir, u, v);
    const double res = grid.resolution;
    const double scale = res / static_cast<double>(image_size);
    const double ox = (px + 0.5 - image_size / 2.0) * scale;
    const double oy = (py + 0.5 - image_size / 2.0) * scale;
    double origin[3], rd[3];
    for (int a = 0; a < 3; ++a) {
        origin[a] = res / 2.0 + ox * u[a] + oy * v[a] + 2.0 * res * dir[a];
        rd[a] = -dir[a];
    }
    for (int i = 0; i < grid.resolution; ++i) {
        for (int j = 0; j < grid.resolution; ++j) {
            for (int k = 0; k < grid.resolution; ++k) {
                if (!grid.at(i, j, k)) continue;
                const double lo[3] = {double(i), double(j), double(k)};
                double t0 = -1e300, t1 = 1e300;
                bool miss = false;
                for (int a = 0; a < 3; ++a) {
                    if (rd[a] == 0.0) {
                        if (origin[a] <= lo[a] || origin[a] >= lo[a] + 1.0) miss = true;
                        continue;
                    }
                    double ta = (lo[a] - origin[a]) / rd[a];
                    double tb = (lo[a] + 1.0 - origin[a]) / rd[a];
                    if (ta > tb) std::swap(ta, tb);
                    t0 = std::max(t0, ta);
                    t1 = std::min(t1, tb);
                }
                if (!miss && t0 < t1) return true;
            }
        }
    }
    return false;
}

}  // namespace

TEST_SUITE_BEGIN("synth");

TEST_CASE("shape generation is deterministic per seed") {
    SynthShape a = generate_shape(42);
    SynthShape b = generate_shape(42);
    CHECK(a.voxels.occupancy == b.voxels.occupancy);
    CHECK(a.recipe == b.recipe);
    SynthShape c = generate_shape(43);
    CHECK(a.voxels.occupancy != c.voxels.occupancy);
}

TEST_CASE("occupancy stays in the generator band across many seeds") {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        SynthShape s = generate_shape(seed);
        CHECK(s.voxels.fraction() >= kMinOccupancy);
        CHECK(s.voxels.fraction() <= kMaxOccupancy);
    }
}

TEST_CASE("a centered 16-voxel box occupies exactly 4096 cells") {
    VoxelGrid g = VoxelGrid::empty(32);
    add_box(g, 16, 16, 16, 8, 8, 8);
    CHECK(g.count() == 4096);
    add_box(g, 16, 16, 16, 8, 8, 8, true);
    CHECK(g.count() == 0);
}

TEST_CASE("renders of an empty grid are all zero") {
    VoxelGrid g = VoxelGrid::empty(32);
    for (int dir = 0; dir < 20; ++dir) {
        RenderedView view = render_view(g, dir, 32);
        for (float p : view.pixels) CHECK(p == 0.0f);
    }
}

TEST_CASE("axis-aligned view of a full cube covers the whole silhouette") {
    VoxelGrid g = VoxelGrid::empty(32);
    std::fill(g.occupancy.begin(), g.occupancy.end(), 1);
    RenderedView view = render_along(g, {0.0, 0.0, 1.0}, 32);
    for (float p : view.pixels) {
        CHECK(p >= 0.25f);
        CHECK(p <= 1.0f);
    }
}

TEST_CASE("depth shading is brighter for nearer surfaces") {
    VoxelGrid g = VoxelGrid::empty(32);
    add_box(g, 16, 16, 24, 6, 6, 4);  // slab near z = 24
    RenderedView near_view = render_along(g, {0.0, 0.0, 1.0}, 32);
    VoxelGrid g2 = VoxelGrid::empty(32);
    add_box(g2, 16, 16, 8, 6, 6, 4);  // same slab farther from the +z camera
    RenderedView far_view = render_along(g2, {0.0, 0.0, 1.0}, 32);
    float near_max = 0.0f, far_max = 0.0f;
    for (float p : near_view.pixels) near_max = std::max(near_max, p);
    for (float p : far_view.pixels) far_max = std::max(far_max, p);
    CHECK(near_max > far_max);
}

TEST_CASE("view list order is metadata only") {
    SynthShape s = generate_shape(7);
    std::vector<RenderedView> views = render_views(s, 5, 11, 32);
    CHECK(views.size() == 5);
    for (const auto& v : views) {
        RenderedView direct = render_view(s.voxels, v.direction_id, 32);
        CHECK(direct.pixels == v.pixels);
    }
    // distinct directions
    for (std::size_t i = 0; i < views.size(); ++i) {
        for (std::size_t j = i + 1; j < views.size(); ++j) {
            CHECK(views[i].direction_id != views[j].direction_id);
        }
    }
    CHECK_THROWS_AS(render_views(s, 0, 1, 32), ContractError);
    CHECK_THROWS_AS(render_views(s, 21, 1, 32), ContractError);
}

TEST_CASE("rendered silhouettes agree with the per-voxel projection oracle") {
    for (std::uint64_t seed : {1ULL, 9ULL}) {
        SynthShape s = generate_shape(seed, 16);
        for (int dir = 0; dir < 20; ++dir) {
            const auto& d = view_directions()[static_cast<std::size_t>(dir)];
            RenderedView view = render_view(s.voxels, dir, 16);
            for (int py = 0; py < 16; ++py) {
                for (int px = 0; px < 16; ++px) {
                    const bool lit = view.pixels[static_cast<std::size_t>(py) * 16 + px] > 0.0f;
                    CHECK(lit == slab_hit(s.voxels, d, 16, px, py));
                }
            }
        }
    }
}

TEST_CASE("voxel and view files round trip bit-identically") {
    TempDir tmp;
    SynthShape s = generate_shape(5);
    const fs::path vpath = tmp.path / "voxels.bin";
    write_voxels(vpath, s.voxels);
    VoxelGrid loaded = read_voxels(vpath);
    CHECK(loaded.resolution == s.voxels.resolution);
    CHECK(loaded.occupancy == s.voxels.occupancy);

    RenderedView view = render_view(s.voxels, 3, 32);
    const fs::path ipath = tmp.path / "view.img";
    write_view(ipath, view);
    RenderedView iv = read_view(ipath);
    CHECK(iv.size == view.size);
    CHECK(iv.direction_id == 3);
    CHECK(iv.pixels == view.pixels);

    // second write produces identical bytes
    const fs::path vpath2 = tmp.path / "voxels2.bin";
    write_voxels(vpath2, loaded);
    std::ifstream f1(vpath, std::ios::binary), f2(vpath2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("corrupted files are rejected with a position") {
    TempDir tmp;
    const fs::path vpath = tmp.path / "voxels.bin";
    write_voxels(vpath, generate_shape(6).voxels);
    {
        std::fstream f(vpath, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXXXXX", 8);
    }
    CHECK_THROWS_WITH_AS(read_voxels(vpath), doctest::Contains("byte 0"), IoError);

    const fs::path tpath = tmp.path / "trunc.img";
    write_view(tpath, render_view(generate_shape(6).voxels, 0, 8));
    fs::resize_file(tpath, 30);
    CHECK_THROWS_AS(read_view(tpath), IoError);
}

TEST_CASE("corpus writes a readable manifest and stays small") {
    TempDir tmp;
    auto entries = write_corpus(tmp.path, 100, 4, 32);
    CHECK(entries.size() == 4);
    auto loaded = read_manifest(tmp.path);
    REQUIRE(loaded.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(loaded[i].id == entries[i].id);
        CHECK(loaded[i].recipe == entries[i].recipe);
        VoxelGrid g = read_voxels(shape_dir(tmp.path, loaded[i].id) / "voxels.bin");
        CHECK(g.fraction() == doctest::Approx(loaded[i].occupancy).epsilon(1e-9));
    }
    // per-shape footprint implies a 64-shape, 20-view corpus far below 50 MB
    std::uintmax_t per_shape = 0;
    for (const auto& f : fs::recursive_directory_iterator(shape_dir(tmp.path, loaded[0].id))) {
        if (f.is_regular_file()) per_shape += f.file_size();
    }
    CHECK(per_shape * 64 < 50ull * 1024 * 1024);
}

TEST_CASE("manifest header is validated") {
    TempDir tmp;
    std::ofstream(tmp.path / "manifest.txt") << "not-a-corpus\n";
    CHECK_THROWS_AS(read_manifest(tmp.path), IoError);
}

TEST_SUITE_END();
