#include "lrgt/grouping.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "lrgt/rng.hpp"

namespace lrgt {

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::kNone: return "none";
        case Strategy::kFra: return "fra";
        case Strategy::kTga: return "tga";
        case Strategy::kSga: return "sga";
        case Strategy::kLga: return "lga";
        case Strategy::kRandom: return "random";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "none") return Strategy::kNone;
    if (name == "fra") return Strategy::kFra;
    if (name == "tga") return Strategy::kTga;
    if (name == "sga") return Strategy::kSga;
    if (name == "lga") return Strategy::kLga;
    if (name == "random") return Strategy::kRandom;
    throw ConfigError("unknown strategy '" + name + "' (expected none|fra|tga|sga|lga|random)");
}

namespace {

void check_grid(const TokenGrid& grid) {
    if (grid.views < 1 || grid.rows < 1 || grid.cols < 1) {
        throw ConfigError("token grid must have views, rows, cols >= 1");
    }
}

// All (gr, gc) with gr*gc == g, gr | rows, gc | cols.
std::vector<std::pair<int, int>> valid_factorizations(const TokenGrid& grid, int g) {
    std::vector<std::pair<int, int>> out;
    for (int gr = 1; gr <= g; ++gr) {
        if (g % gr != 0) continue;
        const int gc = g / gr;
        if (grid.rows % gr == 0 && grid.cols % gc == 0) out.emplace_back(gr, gc);
    }
    return out;
}

std::pair<int, int> pick_factorization(const TokenGrid& grid, int g, const char* op) {
    if (g < 1) throw ConfigError(std::string(op) + ": group count must be >= 1");
    const auto options = valid_factorizations(grid, g);
    if (options.empty()) {
        std::ostringstream os;
        os << op << ": g=" << g << " does not tile a " << grid.rows << "x" << grid.cols
           << " token grid; valid group counts are those of the form gr*gc with gr | " << grid.rows
           << " and gc | " << grid.cols;
        throw ConfigError(os.str());
    }
    // Square grids with square g take the symmetric split; otherwise the
    // factorization must be unambiguous or given explicitly.
    for (const auto& [gr, gc] : options) {
        if (gr == gc) return {gr, gc};
    }
    if (options.size() == 1) return options[0];
    std::ostringstream os;
    os << op << ": g=" << g << " factors ambiguously against a " << grid.rows << "x" << grid.cols
       << " grid; pass (group_rows, group_cols) explicitly. Valid choices:";
    for (const auto& [gr, gc] : options) os << " " << gr << "x" << gc;
    throw ConfigError(os.str());
}

GroupAssignment make_lattice(const TokenGrid& grid, int gr, int gc, Strategy strategy) {
    check_grid(grid);
    const char* op = strategy == Strategy::kLga ? "build_lga" : "build_sga";
    if (gr < 1 || gc < 1 || grid.rows % gr != 0 || grid.cols % gc != 0) {
        std::ostringstream os;
        os << op << ": group grid " << gr << "x" << gc << " does not tile token grid " << grid.rows
           << "x" << grid.cols;
        throw ConfigError(os.str());
    }
    const int sub_rows = grid.rows / gr;
    const int sub_cols = grid.cols / gc;
    GroupAssignment out;
    out.strategy = strategy;
    out.group_count = gr * gc;
    out.views = grid.views;
    out.tokens_per_view = grid.tokens();
    out.subgrid_rows = sub_rows;
    out.subgrid_cols = sub_cols;
    out.groups.resize(static_cast<std::size_t>(out.group_count));
    for (int a = 0; a < gr; ++a) {
        for (int b = 0; b < gc; ++b) {
            auto& members = out.groups[static_cast<std::size_t>(a * gc + b)];
            members.reserve(static_cast<std::size_t>(grid.views * sub_rows * sub_cols));
            for (int v = 0; v < grid.views; ++v) {
                for (int sr = 0; sr < sub_rows; ++sr) {
                    for (int sc = 0; sc < sub_cols; ++sc) {
                        int r, c;
                        if (strategy == Strategy::kLga) {
                            r = a + sr * gr;  // strided lattice, same-view tokens non-adjacent
                            c = b + sc * gc;
                        } else {
                            r = a * sub_rows + sr;  // contiguous block
                            c = b * sub_cols + sc;
                        }
                        members.emplace_back(v, r * grid.cols + c);
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

GroupAssignment build_fra(const TokenGrid& grid) {
    // The degenerate 1x1 lattice: one group containing every token of every view.
    GroupAssignment out = make_lattice(grid, 1, 1, Strategy::kLga);
    out.strategy = Strategy::kFra;
    return out;
}

GroupAssignment build_tga(const TokenGrid& grid) {
    check_grid(grid);
    GroupAssignment out;
    out.strategy = Strategy::kTga;
    out.group_count = grid.tokens();
    out.views = grid.views;
    out.tokens_per_view = grid.tokens();
    out.groups.resize(static_cast<std::size_t>(out.group_count));
    for (int p = 0; p < grid.tokens(); ++p) {
        auto& members = out.groups[static_cast<std::size_t>(p)];
        members.reserve(static_cast<std::size_t>(grid.views));
        for (int v = 0; v < grid.views; ++v) members.emplace_back(v, p);
    }
    return out;
}

GroupAssignment build_lga(const TokenGrid& grid, int g) {
    check_grid(grid);
    const auto [gr, gc] = pick_factorization(grid, g, "build_lga");
    return make_lattice(grid, gr, gc, Strategy::kLga);
}

GroupAssignment build_lga(const TokenGrid& grid, int group_rows, int group_cols) {
    return make_lattice(grid, group_rows, group_cols, Strategy::kLga);
}

GroupAssignment build_sga(const TokenGrid& grid, int g) {
    check_grid(grid);
    const auto [gr, gc] = pick_factorization(grid, g, "build_sga");
    return make_lattice(grid, gr, gc, Strategy::kSga);
}

GroupAssignment build_sga(const TokenGrid& grid, int group_rows, int group_cols) {
    return make_lattice(grid, group_rows, group_cols, Strategy::kSga);
}

GroupAssignment build_random(const TokenGrid& grid, int g, std::uint64_t seed) {
    check_grid(grid);
    const int p = grid.tokens();
    if (g < 1 || p % g != 0) {
        throw ConfigError("build_random: g=" + std::to_string(g) + " must divide P=" +
                          std::to_string(p));
    }
    const int quota = p / g;
    GroupAssignment out;
    out.strategy = Strategy::kRandom;
    out.group_count = g;
    out.views = grid.views;
    out.tokens_per_view = p;
    out.groups.resize(static_cast<std::size_t>(g));
    for (auto& members : out.groups) {
        members.reserve(static_cast<std::size_t>(grid.views * quota));
    }
    for (int v = 0; v < grid.views; ++v) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(p));
        std::iota(order.begin(), order.end(), 0);
        Rng rng = Rng::derive(seed, {0x72616e64ULL, static_cast<std::uint64_t>(v)});
        rng.shuffle(order);
        for (int j = 0; j < g; ++j) {
            for (int q = 0; q < quota; ++q) {
                out.groups[static_cast<std::size_t>(j)].emplace_back(
                    v, static_cast<int>(order[static_cast<std::size_t>(j * quota + q)]));
            }
        }
    }
    return out;
}

GroupAssignment build_assignment(const TokenGrid& grid, Strategy strategy, int g,
                                 std::uint64_t seed) {
    switch (strategy) {
        case Strategy::kFra: return build_fra(grid);
        case Strategy::kTga: return build_tga(grid);
        case Strategy::kSga: return build_sga(grid, g);
        case Strategy::kLga: return build_lga(grid, g);
        case Strategy::kRandom: return build_random(grid, g, seed);
        case Strategy::kNone:
            throw ContractError("strategy 'none' has no group assignment");
    }
    throw ContractError("unreachable strategy");
}

AttentionCost attention_flops(const TokenGrid& grid, const GroupAssignment& assignment, int d_e,
                              int heads) {
    if (heads < 1 || d_e < 1 || d_e % heads != 0) {
        throw ConfigError("attention_flops: d_e must be a positive multiple of heads");
    }
    AttentionCost cost;
    for (const auto& members : assignment.groups) {
        const std::uint64_t m = members.size();
        // H heads of width d_e/H each cost m^2 * d_e/H, so the head count cancels.
        cost.qk_flops += m * m * static_cast<std::uint64_t>(d_e);
    }
    cost.av_flops = cost.qk_flops;
    cost.total = cost.qk_flops + cost.av_flops;
    const std::uint64_t np = static_cast<std::uint64_t>(grid.views) *
                             static_cast<std::uint64_t>(grid.tokens());
    const std::uint64_t fra_total = 2 * np * np * static_cast<std::uint64_t>(d_e);
    cost.ratio_vs_fra = fra_total == 0 ? 1.0
                                       : static_cast<double>(cost.total) /
                                             static_cast<double>(fra_total);
    return cost;
}

std::string to_text(const GroupAssignment& assignment) {
    std::ostringstream os;
    for (const auto& members : assignment.groups) {
        for (std::size_t i = 0; i < members.size(); ++i) {
            if (i) os << ' ';
            os << members[i].first << ':' << members[i].second;
        }
        os << '\n';
    }
    return os.str();
}

void validate_partition(const GroupAssignment& assignment, const TokenGrid& grid) {
    const std::size_t total = static_cast<std::size_t>(grid.views) *
                              static_cast<std::size_t>(grid.tokens());
    std::vector<bool> seen(total, false);
    std::size_t count = 0;
    for (const auto& members : assignment.groups) {
        for (const auto& [v, t] : members) {
            if (v < 0 || v >= grid.views || t < 0 || t >= grid.tokens()) {
                throw ContractError("assignment member out of range");
            }
            const std::size_t key = static_cast<std::size_t>(v) *
                                        static_cast<std::size_t>(grid.tokens()) +
                                    static_cast<std::size_t>(t);
            if (seen[key]) throw ContractError("assignment contains a duplicate (view, token) pair");
            seen[key] = true;
            ++count;
        }
    }
    if (count != total) {
        throw ContractError("assignment covers " + std::to_string(count) + " of " +
                            std::to_string(total) + " (view, token) pairs");
    }
}

}  // namespace lrgt
