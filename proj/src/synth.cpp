#include "lrgt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lrgt/rng.hpp"

namespace lrgt {

namespace fs = std::filesystem;

// ---- primitives -----------------------------------------------------------------

namespace {

template <typename Pred>
void rasterize(VoxelGrid& g, bool subtract, Pred&& inside) {
    const int r = g.resolution;
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < r; ++j) {
            for (int k = 0; k < r; ++k) {
                if (inside(i + 0.5, j + 0.5, k + 0.5)) g.set(i, j, k, !subtract);
            }
        }
    }
}

}  // namespace

void add_box(VoxelGrid& g, double cx, double cy, double cz, double hx, double hy, double hz,
             bool subtract) {
    rasterize(g, subtract, [&](double x, double y, double z) {
        return std::fabs(x - cx) <= hx && std::fabs(y - cy) <= hy && std::fabs(z - cz) <= hz;
    });
}

void add_sphere(VoxelGrid& g, double cx, double cy, double cz, double r, bool subtract) {
    rasterize(g, subtract, [&](double x, double y, double z) {
        const double dx = x - cx, dy = y - cy, dz = z - cz;
        return dx * dx + dy * dy + dz * dz <= r * r;
    });
}

void add_cylinder(VoxelGrid& g, double cx, double cy, double cz, int axis, double r, double hh,
                  bool subtract) {
    rasterize(g, subtract, [&](double x, double y, double z) {
        const double d[3] = {x - cx, y - cy, z - cz};
        const double along = d[axis];
        const double p0 = d[(axis + 1) % 3], p1 = d[(axis + 2) % 3];
        return std::fabs(along) <= hh && p0 * p0 + p1 * p1 <= r * r;
    });
}

SynthShape generate_shape(std::uint64_t seed, int resolution) {
    const double span = static_cast<double>(resolution);
    for (int attempt = 0; attempt < 100; ++attempt) {
        Rng rng = Rng::derive(seed, {0x73686170ULL, static_cast<std::uint64_t>(attempt)});
        VoxelGrid g = VoxelGrid::empty(resolution);
        std::ostringstream recipe;
        const int parts = 2 + static_cast<int>(rng.uniform_below(4));
        for (int p = 0; p < parts; ++p) {
            const bool subtract = p > 0 && rng.uniform() < 0.3;
            const auto coord = [&]() {
                return static_cast<int>(span * 0.25) +
                       static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(span * 0.5) + 1));
            };
            const auto extent = [&](double lo, double hi) {
                return static_cast<int>(lo * span / 32.0) +
                       static_cast<int>(rng.uniform_below(
                           static_cast<std::uint64_t>((hi - lo) * span / 32.0) + 1));
            };
            const int cx = coord(), cy = coord(), cz = coord();
            if (p > 0) recipe << (subtract ? '-' : '+');
            switch (rng.uniform_below(3)) {
                case 0: {
                    const int hx = extent(3, 10), hy = extent(3, 10), hz = extent(3, 10);
                    add_box(g, cx, cy, cz, hx, hy, hz, subtract);
                    recipe << "box(" << cx << ',' << cy << ',' << cz << ';' << hx << ',' << hy
                           << ',' << hz << ')';
                    break;
                }
                case 1: {
                    const int r = extent(4, 10);
                    add_sphere(g, cx, cy, cz, r, subtract);
                    recipe << "sph(" << cx << ',' << cy << ',' << cz << ';' << r << ')';
                    break;
                }
                default: {
                    const int axis = static_cast<int>(rng.uniform_below(3));
                    const int r = extent(3, 9), hh = extent(4, 12);
                    add_cylinder(g, cx, cy, cz, axis, r, hh, subtract);
                    recipe << "cyl(" << cx << ',' << cy << ',' << cz << ';' << axis << ';' << r
                           << ';' << hh << ')';
                    break;
                }
            }
        }
        const double occ = g.fraction();
        if (occ >= kMinOccupancy && occ <= kMaxOccupancy) {
            SynthShape shape;
            shape.id = seed;
            shape.voxels = std::move(g);
            shape.recipe = recipe.str();
            return shape;
        }
    }
    throw Error("generate_shape: no shape within the occupancy band after 100 attempts (seed " +
                std::to_string(seed) + ")");
}

// ---- rendering -----------------------------------------------------------------

const std::array<std::array<double, 3>, 20>& view_directions() {
    static const auto dirs = [] {
        const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
        const double inv = 1.0 / phi;
        std::array<std::array<double, 3>, 20> d{};
        std::size_t n = 0;
        for (int sx : {-1, 1}) {
            for (int sy : {-1, 1}) {
                for (int sz : {-1, 1}) d[n++] = {double(sx), double(sy), double(sz)};
            }
        }
        for (int sa : {-1, 1}) {
            for (int sb : {-1, 1}) {
                d[n++] = {0.0, sa * inv, sb * phi};
                d[n++] = {sa * inv, sb * phi, 0.0};
                d[n++] = {sa * phi, 0.0, sb * inv};
            }
        }
        for (auto& v : d) {
            const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            for (auto& c : v) c /= norm;
        }
        return d;
    }();
    return dirs;
}

void camera_basis(const std::array<double, 3>& d, std::array<double, 3>& u,
                  std::array<double, 3>& v) {
    int m = 0;
    for (int a = 1; a < 3; ++a) {
        if (std::fabs(d[a]) < std::fabs(d[m])) m = a;
    }
    double helper[3] = {0, 0, 0};
    helper[m] = 1.0;
    u = {helper[1] * d[2] - helper[2] * d[1], helper[2] * d[0] - helper[0] * d[2],
         helper[0] * d[1] - helper[1] * d[0]};
    const double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    for (auto& c : u) c /= un;
    v = {d[1] * u[2] - d[2] * u[1], d[2] * u[0] - d[0] * u[2], d[0] * u[1] - d[1] * u[0]};
}

RenderedView render_along(const VoxelGrid& grid, const std::array<double, 3>& d, int image_size,
                          int direction_id_tag) {
    if (image_size < 1) throw ContractError("image size must be positive");
    const double res = grid.resolution;
    const double half = res / 2.0;

    std::array<double, 3> u{}, v{};
    camera_basis(d, u, v);

    const double rd[3] = {-d[0], -d[1], -d[2]};  // camera sits on the +direction side
    const double diag = res * std::sqrt(3.0);
    const double scale = res / static_cast<double>(image_size);

    RenderedView view;
    view.direction_id = direction_id_tag;
    view.size = image_size;
    view.pixels.assign(static_cast<std::size_t>(image_size) * image_size, 0.0f);

    for (int py = 0; py < image_size; ++py) {
        for (int px = 0; px < image_size; ++px) {
            const double ox = (px + 0.5 - image_size / 2.0) * scale;
            const double oy = (py + 0.5 - image_size / 2.0) * scale;
            double origin[3];
            for (int a = 0; a < 3; ++a) {
                origin[a] = half + ox * u[a] + oy * v[a] + 2.0 * res * d[a];
            }
            // cube slab [0, res]^3
            double t0 = -1e300, t1 = 1e300;
            bool miss = false;
            for (int a = 0; a < 3 && !miss; ++a) {
                if (rd[a] == 0.0) {
                    if (origin[a] <= 0.0 || origin[a] >= res) miss = true;
                    continue;
                }
                double lo = (0.0 - origin[a]) / rd[a];
                double hi = (res - origin[a]) / rd[a];
                if (lo > hi) std::swap(lo, hi);
                t0 = std::max(t0, lo);
                t1 = std::min(t1, hi);
            }
            if (miss || !(t0 < t1)) continue;

            // voxel traversal; ties step every tied axis at once so only cells
            // crossed with positive interior length are visited
            int cell[3];
            int step[3];
            double t_max[3];
            double t_hit = -1.0;
            for (int a = 0; a < 3; ++a) {
                const double pos = origin[a] + t0 * rd[a];
                double fl = std::floor(pos);
                if (rd[a] < 0.0 && fl == pos) fl -= 1.0;  // entering a lower cell exactly at its top face
                cell[a] = static_cast<int>(std::min(std::max(fl, 0.0), res - 1));
                step[a] = rd[a] > 0.0 ? 1 : (rd[a] < 0.0 ? -1 : 0);
                if (step[a] > 0) {
                    t_max[a] = (static_cast<double>(cell[a] + 1) - origin[a]) / rd[a];
                } else if (step[a] < 0) {
                    t_max[a] = (static_cast<double>(cell[a]) - origin[a]) / rd[a];
                } else {
                    t_max[a] = 1e300;
                }
            }
            double t_cur = t0;
            while (true) {
                if (grid.at(cell[0], cell[1], cell[2])) {
                    t_hit = t_cur;
                    break;
                }
                const double t_next = std::min({t_max[0], t_max[1], t_max[2]});
                if (!(t_next < t1)) break;
                bool out = false;
                for (int a = 0; a < 3; ++a) {
                    if (t_max[a] == t_next) {
                        cell[a] += step[a];
                        if (cell[a] < 0 || cell[a] >= grid.resolution) out = true;
                        t_max[a] = (static_cast<double>(step[a] > 0 ? cell[a] + 1 : cell[a]) -
                                    origin[a]) /
                                   rd[a];
                    }
                }
                if (out) break;
                t_cur = t_next;
            }
            if (t_hit >= 0.0) {
                double hp[3];
                for (int a = 0; a < 3; ++a) hp[a] = origin[a] + t_hit * rd[a];
                const double toward_camera = (hp[0] - half) * d[0] + (hp[1] - half) * d[1] +
                                             (hp[2] - half) * d[2];
                const double shade = 0.25 + 0.75 * (toward_camera + diag / 2.0) / diag;
                view.pixels[static_cast<std::size_t>(py) * image_size + px] =
                    static_cast<float>(std::min(1.0, std::max(0.25, shade)));
            }
        }
    }
    return view;
}

RenderedView render_view(const VoxelGrid& grid, int direction_id, int image_size) {
    if (direction_id < 0 || direction_id >= 20) {
        throw ContractError("direction id must be in [0, 20)");
    }
    return render_along(grid, view_directions()[static_cast<std::size_t>(direction_id)],
                        image_size, direction_id);
}

std::vector<RenderedView> render_views(const SynthShape& shape, int k, std::uint64_t seed,
                                       int image_size) {
    if (k < 1 || k > 20) throw ContractError("view count must be in [1, 20]");
    std::vector<std::int64_t> ids(20);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng = Rng::derive(seed, {0x76696577ULL, shape.id});
    rng.shuffle(ids);
    std::vector<RenderedView> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        out.push_back(render_view(shape.voxels, static_cast<int>(ids[static_cast<std::size_t>(i)]),
                                  image_size));
    }
    return out;
}

// ---- binary I/O -----------------------------------------------------------------

namespace {

constexpr char kVoxelMagic[8] = {'L', 'R', 'G', 'T', 'V', 'O', 'X', '1'};
constexpr char kViewMagic[8] = {'L', 'R', 'G', 'T', 'I', 'M', 'G', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const fs::path& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError(path.string() + ": truncated at byte " + std::to_string(is.tellg()));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

float get_f32(std::istream& is, const fs::path& path) {
    const std::uint32_t v = get_u32(is, path);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

void check_magic(std::istream& is, const char (&magic)[8], const fs::path& path) {
    char buf[8];
    if (!is.read(buf, 8)) throw IoError(path.string() + ": truncated at byte 0");
    if (std::memcmp(buf, magic, 8) != 0) {
        throw IoError(path.string() + ": bad magic at byte 0 (expected " +
                      std::string(magic, 8) + ")");
    }
}

void check_version(std::istream& is, const fs::path& path) {
    const std::uint32_t version = get_u32(is, path);
    if (version != kFormatVersion) {
        throw IoError(path.string() + ": unsupported format version " + std::to_string(version) +
                      " at byte 8");
    }
}

}  // namespace

void write_voxels(const fs::path& path, const VoxelGrid& grid) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kVoxelMagic, 8);
    put_u32(os, kFormatVersion);
    put_u32(os, static_cast<std::uint32_t>(grid.resolution));
    const std::size_t cells = grid.occupancy.size();
    std::vector<unsigned char> packed((cells + 7) / 8, 0);
    for (std::size_t i = 0; i < cells; ++i) {
        if (grid.occupancy[i]) packed[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    }
    os.write(reinterpret_cast<const char*>(packed.data()),
             static_cast<std::streamsize>(packed.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

VoxelGrid read_voxels(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    check_magic(is, kVoxelMagic, path);
    check_version(is, path);
    const std::uint32_t res = get_u32(is, path);
    if (res == 0 || res > 1024) {
        throw IoError(path.string() + ": implausible resolution " + std::to_string(res));
    }
    VoxelGrid g = VoxelGrid::empty(static_cast<int>(res));
    const std::size_t cells = g.occupancy.size();
    std::vector<unsigned char> packed((cells + 7) / 8);
    if (!is.read(reinterpret_cast<char*>(packed.data()),
                 static_cast<std::streamsize>(packed.size()))) {
        throw IoError(path.string() + ": truncated voxel payload at byte 16");
    }
    for (std::size_t i = 0; i < cells; ++i) {
        g.occupancy[i] = (packed[i / 8] >> (i % 8)) & 1u;
    }
    return g;
}

void write_view(const fs::path& path, const RenderedView& view) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kViewMagic, 8);
    put_u32(os, kFormatVersion);
    put_u32(os, static_cast<std::uint32_t>(view.size));
    put_u32(os, static_cast<std::uint32_t>(view.direction_id));
    for (float p : view.pixels) put_f32(os, p);
    if (!os) throw IoError("failed writing " + path.string());
}

RenderedView read_view(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    check_magic(is, kViewMagic, path);
    check_version(is, path);
    RenderedView view;
    view.size = static_cast<int>(get_u32(is, path));
    if (view.size < 1 || view.size > 4096) {
        throw IoError(path.string() + ": implausible image size");
    }
    view.direction_id = static_cast<int>(get_u32(is, path));
    view.pixels.resize(static_cast<std::size_t>(view.size) * view.size);
    for (auto& p : view.pixels) p = get_f32(is, path);
    return view;
}

// ---- corpus -----------------------------------------------------------------------

std::filesystem::path shape_dir(const fs::path& corpus, std::uint64_t id) {
    return corpus / ("shape_" + std::to_string(id));
}

std::vector<CorpusEntry> write_corpus(const fs::path& dir, std::uint64_t seed0, int count,
                                      int image_size) {
    fs::create_directories(dir);
    std::vector<CorpusEntry> entries;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t seed = seed0 + static_cast<std::uint64_t>(i);
        SynthShape shape = generate_shape(seed);
        const fs::path sdir = shape_dir(dir, shape.id);
        fs::create_directories(sdir);
        write_voxels(sdir / "voxels.bin", shape.voxels);
        for (int v = 0; v < 20; ++v) {
            RenderedView view = render_view(shape.voxels, v, image_size);
            char name[16];
            std::snprintf(name, sizeof(name), "view_%02d.img", v);
            write_view(sdir / name, view);
        }
        entries.push_back({shape.id, shape.voxels.fraction(), shape.recipe});
    }
    std::sort(entries.begin(), entries.end(),
              [](const CorpusEntry& a, const CorpusEntry& b) { return a.id < b.id; });
    std::ofstream os(dir / "manifest.txt");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << "lrgt-corpus v1\n";
    os.precision(17);
    for (const auto& e : entries) {
        os << e.id << ' ' << e.occupancy << ' ' << e.recipe << '\n';
    }
    return entries;
}

std::vector<CorpusEntry> read_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.txt";
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::string header;
    std::getline(is, header);
    if (header != "lrgt-corpus v1") {
        throw IoError(path.string() + ": unrecognized corpus header '" + header + "'");
    }
    std::vector<CorpusEntry> entries;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        CorpusEntry e;
        if (!(ls >> e.id >> e.occupancy >> e.recipe)) {
            throw IoError(path.string() + ": malformed manifest line '" + line + "'");
        }
        entries.push_back(std::move(e));
    }
    std::sort(entries.begin(), entries.end(),
              [](const CorpusEntry& a, const CorpusEntry& b) { return a.id < b.id; });
    return entries;
}

}  // namespace lrgt
