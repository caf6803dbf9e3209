#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lrgt/errors.hpp"

namespace lrgt {

// Attention strategies over multi-view token sets. "none" is the
// no-communication baseline where the inter-view slot runs a plain per-view
// block and no assignment exists.
enum class Strategy { kNone, kFra, kTga, kSga, kLga, kRandom };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct TokenGrid {
    int views = 1;
    int rows = 1;
    int cols = 1;

    int tokens() const { return rows * cols; }
};

// A partition of (view, token) pairs into attention groups. Token indices are
// row-major on the per-view grid. Member order inside a group is view-major;
// within one view, tokens appear in row-major order of the group's sub-grid,
// which is what the feature-signature convolution relies on.
struct GroupAssignment {
    Strategy strategy = Strategy::kFra;
    int group_count = 1;
    std::vector<std::vector<std::pair<int, int>>> groups;  // (view, token)

    int views = 0;
    int tokens_per_view = 0;
    // Per-view sub-grid dims of every group; 0x0 when groups are not
    // rectangular per view (tga, random).
    int subgrid_rows = 0;
    int subgrid_cols = 0;

    bool ifs_eligible() const { return subgrid_rows > 0 && subgrid_cols > 0; }
};

GroupAssignment build_fra(const TokenGrid& grid);
GroupAssignment build_tga(const TokenGrid& grid);
// Strided-lattice grouping: group (a, b) holds tokens at rows === a (mod gr)
// and cols === b (mod gc) from every view, so same-view members are never
// adjacent once gr, gc >= 2.
GroupAssignment build_lga(const TokenGrid& grid, int g);
GroupAssignment build_lga(const TokenGrid& grid, int group_rows, int group_cols);
// Contiguous-block grouping: group (a, b) holds the (rows/gr) x (cols/gc)
// block of tokens from every view.
GroupAssignment build_sga(const TokenGrid& grid, int g);
GroupAssignment build_sga(const TokenGrid& grid, int group_rows, int group_cols);
// Seeded per-view shuffle split into g equal parts; part j of every view is
// merged into group j, so each view contributes exactly P/g members per group.
GroupAssignment build_random(const TokenGrid& grid, int g, std::uint64_t seed);

GroupAssignment build_assignment(const TokenGrid& grid, Strategy strategy, int g,
                                 std::uint64_t seed);

// Analytic multiply-add counts for one grouped attention layer, summed over
// all heads of total width d_e.
struct AttentionCost {
    std::uint64_t qk_flops = 0;
    std::uint64_t av_flops = 0;
    std::uint64_t total = 0;
    double ratio_vs_fra = 1.0;
};

AttentionCost attention_flops(const TokenGrid& grid, const GroupAssignment& assignment, int d_e,
                              int heads);

// One group per line of space-separated view:token pairs.
std::string to_text(const GroupAssignment& assignment);

// Throws ContractError if the assignment is not an exact partition of the
// grid's (view, token) pairs.
void validate_partition(const GroupAssignment& assignment, const TokenGrid& grid);

}  // namespace lrgt
