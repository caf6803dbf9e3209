#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lrgt/metrics.hpp"

namespace lrgt {

// Procedurally generated training shape: a seeded composition of 2-5 solid
// primitives with unions and subtractions, rejection-sampled into an
// occupancy band that keeps grids sparse but non-trivial.
struct SynthShape {
    std::uint64_t id = 0;  // the generator seed
    VoxelGrid voxels;
    std::string recipe;
};

constexpr double kMinOccupancy = 0.02;
constexpr double kMaxOccupancy = 0.60;

SynthShape generate_shape(std::uint64_t seed, int resolution = 32);

// Solid primitives over voxel centers, exposed for direct construction.
void add_box(VoxelGrid& g, double cx, double cy, double cz, double hx, double hy, double hz,
             bool subtract = false);
void add_sphere(VoxelGrid& g, double cx, double cy, double cz, double r, bool subtract = false);
void add_cylinder(VoxelGrid& g, double cx, double cy, double cz, int axis, double r, double hh,
                  bool subtract = false);

// The fixed candidate camera set: the 20 dodecahedron vertex directions.
const std::array<std::array<double, 3>, 20>& view_directions();

struct RenderedView {
    int direction_id = 0;
    int size = 32;
    std::vector<float> pixels;  // size * size in [0, 1]; 0 = background
};

// Deterministic right-handed image-plane basis for a view direction.
void camera_basis(const std::array<double, 3>& dir, std::array<double, 3>& u,
                  std::array<double, 3>& v);

// Orthographic render along -direction: silhouette shaded by hit depth
// (nearer surfaces brighter). The image plane spans the grid cube's width, so
// an axis-aligned view of a full cube covers every pixel. Pixel (px, py) casts
// a ray from center + ((px+0.5) - S/2)*scale*u + ((py+0.5) - S/2)*scale*v
// + 2*res*dir toward -dir, with scale = res / S.
RenderedView render_along(const VoxelGrid& grid, const std::array<double, 3>& dir, int image_size,
                          int direction_id_tag = -1);
RenderedView render_view(const VoxelGrid& grid, int direction_id, int image_size);

// k distinct directions drawn by a seeded partial shuffle of the fixed set.
std::vector<RenderedView> render_views(const SynthShape& shape, int k, std::uint64_t seed,
                                       int image_size);

// ---- corpus ------------------------------------------------------------------
// Layout: <dir>/manifest.txt plus <dir>/shape_<id>/voxels.bin and
// <dir>/shape_<id>/view_<k>.img (one per fixed direction). All binary files
// are little-endian with magic + version headers.

void write_voxels(const std::filesystem::path& path, const VoxelGrid& grid);
VoxelGrid read_voxels(const std::filesystem::path& path);
void write_view(const std::filesystem::path& path, const RenderedView& view);
RenderedView read_view(const std::filesystem::path& path);

struct CorpusEntry {
    std::uint64_t id = 0;
    double occupancy = 0.0;
    std::string recipe;
};

std::filesystem::path shape_dir(const std::filesystem::path& corpus, std::uint64_t id);

// Generates `count` shapes from consecutive seeds starting at seed0, renders
// all 20 views of each, and writes the corpus. Returns the manifest entries.
std::vector<CorpusEntry> write_corpus(const std::filesystem::path& dir, std::uint64_t seed0,
                                      int count, int image_size);
// Entries sorted by id regardless of on-disk order.
std::vector<CorpusEntry> read_manifest(const std::filesystem::path& dir);

}  // namespace lrgt
