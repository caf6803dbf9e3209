#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lrgt/tensor.hpp"

namespace lrgt {

// Binary occupancy grid. Index layout matches a [R, R, R] tensor: (i, j, k)
// row-major.
struct VoxelGrid {
    int resolution = 32;
    std::vector<std::uint8_t> occupancy;

    static VoxelGrid empty(int resolution = 32);

    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * resolution + j) * resolution + k;
    }
    bool at(int i, int j, int k) const { return occupancy[index(i, j, k)] != 0; }
    void set(int i, int j, int k, bool v) { occupancy[index(i, j, k)] = v ? 1 : 0; }
    std::int64_t count() const;
    double fraction() const;
    std::int64_t cells() const {
        return static_cast<std::int64_t>(resolution) * resolution * resolution;
    }
};

// Two-sided Dice loss of probabilities against a binary target, smoothed so
// exact agreement scores exactly 0 and the value stays in [0, 1].
// Differentiable in probs.
Tensor dice_loss(const Tensor& probs, const VoxelGrid& target, double eps = 1e-6);

// Volumetric IoU of the thresholded prediction against the target.
// Empty-union-empty counts as 1.
double iou(const Tensor& probs, const VoxelGrid& target, double threshold);
double iou(const VoxelGrid& pred, const VoxelGrid& target);

struct SurfaceMesh {
    std::vector<std::array<double, 3>> vertices;  // in [0, 1]^3
    std::vector<std::array<std::int32_t, 3>> triangles;
    bool degenerate_input = false;  // grid was uniformly above/below iso

    bool empty() const { return triangles.empty(); }
    double area() const;
    double signed_volume() const;
};

// Marching cubes over voxel-center samples with one layer of empty padding so
// surfaces close at the boundary; vertices found by linear interpolation on
// cell edges; winding is consistently outward (away from the > iso region).
// A uniformly-inside or uniformly-outside grid yields an empty mesh with
// degenerate_input set.
SurfaceMesh marching_cubes(const std::vector<double>& values, int resolution, double iso);
SurfaceMesh marching_cubes(const VoxelGrid& grid, double iso = 0.5);
SurfaceMesh marching_cubes(const Tensor& probs, double iso);

// Every undirected edge is used by exactly two triangles, once per direction.
bool is_watertight(const SurfaceMesh& mesh);

struct PointCloud {
    std::vector<std::array<double, 3>> points;
};

// Area-weighted uniform surface sampling via barycentric coordinates.
// Throws ContractError on an empty mesh; callers score F = 0 in that case.
PointCloud sample_surface(const SurfaceMesh& mesh, int count, std::uint64_t seed);

struct FScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

// precision: fraction of reconstruction points strictly within d of some
// ground-truth point; recall the converse; f their harmonic mean (0 when
// both are 0). Neighbor search uses a uniform spatial hash with cell size d.
FScore f_score(const PointCloud& reconstruction, const PointCloud& ground_truth, double d);
// All-pairs reference implementation; exact same comparisons as f_score.
FScore f_score_bruteforce(const PointCloud& reconstruction, const PointCloud& ground_truth,
                          double d);

}  // namespace lrgt
