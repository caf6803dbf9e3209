#pragma once

#include "lrgt/attention.hpp"
#include "lrgt/grouping.hpp"

namespace lrgt {

struct EncoderConfig {
    int image_size = 32;
    int patch_size = 8;
    int in_channels = 1;
    int d_model = 64;  // D_e
    int heads = 4;
    int n1 = 2;  // independent per-view blocks
    int n2 = 2;  // basic units: intra-view block + inter-view grouped block
    Strategy strategy = Strategy::kLga;
    int groups = 4;  // g
    int group_rows = 0;  // explicit (gr, gc) factorization; 0 = derive from g
    int group_cols = 0;
    bool use_ifs = true;
    int mlp_ratio = 2;
    int merged_tokens = 64;  // M, the decoder seed token count
    int d_decoder = 128;     // width of the merged tokens handed to the decoder

    int grid_side() const { return image_size / patch_size; }
    int tokens_per_view() const { return grid_side() * grid_side(); }
    void validate() const;

    TokenGrid grid_for(int views) const;
    GroupAssignment assignment_for(int views, std::uint64_t seed = 0) const;
};

struct MergerWeights {
    int heads = 1;
    Tensor queries;  // [M, D_e] learned queries
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor out_w, out_b;  // D_e -> D_dec

    static MergerWeights init(int d_model, int heads, int merged_tokens, int d_decoder, Rng& rng);
    void register_params(const std::string& prefix, NamedParams& out);
};

struct EncoderWeights {
    EncoderConfig config;
    Tensor patch_w;  // [C * ps * ps, D_e]
    Tensor patch_b;
    Tensor pos;  // [P, D_e], one table shared by every view
    std::vector<BlockWeights> stage1;
    std::vector<BlockWeights> unit_intra;
    std::vector<BlockWeights> unit_inter;
    MergerWeights merger;

    static EncoderWeights init(const EncoderConfig& config, Rng& rng);
    void register_params(NamedParams& out);
};

// images: [N, C, H, W] -> per-view tokens [N, P, D_e] with the shared
// positional table added.
Tensor patch_embed(const Tensor& images, const EncoderWeights& w);

// Learned-query cross-attention pooling of all view tokens down to M tokens,
// followed by a linear map to the decoder width. Invariant to token order.
Tensor merge_tokens(const Tensor& all_tokens /* [T, D_e] */, const MergerWeights& w);

// Full encoder: n1 per-view blocks, then n2 units of (intra-view block,
// inter-view grouped block), then the merger. assignment may be null only for
// Strategy::kNone, where the inter-view slot runs per-view.
Tensor encode(const Tensor& images, const EncoderWeights& w, const GroupAssignment* assignment);

}  // namespace lrgt
