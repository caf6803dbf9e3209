#include "lrgt/encoder.hpp"

#include <cmath>

namespace lrgt {

void EncoderConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
        throw ConfigError("image size " + std::to_string(image_size) +
                          " must be a positive multiple of patch size " +
                          std::to_string(patch_size));
    }
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (d_model < 1 || heads < 1 || d_model % heads != 0) {
        throw ConfigError("d_model must be a positive multiple of heads");
    }
    if (n1 < 0 || n2 < 0) throw ConfigError("block counts must be >= 0");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (merged_tokens < 1 || d_decoder < 1) {
        throw ConfigError("merged_tokens and d_decoder must be >= 1");
    }
    if (strategy != Strategy::kNone && n2 > 0) {
        assignment_for(1);  // surfaces invalid grouping geometry early
    }
}

TokenGrid EncoderConfig::grid_for(int views) const {
    if (views < 1) throw ConfigError("need at least one view");
    return TokenGrid{views, grid_side(), grid_side()};
}

GroupAssignment EncoderConfig::assignment_for(int views, std::uint64_t seed) const {
    const TokenGrid grid = grid_for(views);
    if ((strategy == Strategy::kLga || strategy == Strategy::kSga) && group_rows > 0 &&
        group_cols > 0) {
        return strategy == Strategy::kLga ? build_lga(grid, group_rows, group_cols)
                                          : build_sga(grid, group_rows, group_cols);
    }
    return build_assignment(grid, strategy, groups, seed);
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
    DVec v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.trunc_normal(stddev);
    return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

MergerWeights MergerWeights::init(int d_model, int heads, int merged_tokens, int d_decoder,
                                  Rng& rng) {
    MergerWeights w;
    w.heads = heads;
    w.queries = trunc_normal({merged_tokens, d_model}, rng).set_requires_grad(true);
    w.wq = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bq = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wk = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bk = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wv = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bv = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wo = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bo = Tensor::zeros({d_model}).set_requires_grad(true);
    w.out_w = trunc_normal({d_model, d_decoder}, rng).set_requires_grad(true);
    w.out_b = Tensor::zeros({d_decoder}).set_requires_grad(true);
    return w;
}

void MergerWeights::register_params(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".queries", queries);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
    out.emplace_back(prefix + ".out_w", out_w);
    out.emplace_back(prefix + ".out_b", out_b);
}

EncoderWeights EncoderWeights::init(const EncoderConfig& config, Rng& rng) {
    config.validate();
    EncoderWeights w;
    w.config = config;
    const int d = config.d_model;
    const int hidden = config.mlp_ratio * d;
    w.patch_w = trunc_normal({config.in_channels * config.patch_size * config.patch_size, d}, rng)
                    .set_requires_grad(true);
    w.patch_b = Tensor::zeros({d}).set_requires_grad(true);
    w.pos = trunc_normal({config.tokens_per_view(), d}, rng).set_requires_grad(true);
    for (int i = 0; i < config.n1; ++i) {
        w.stage1.push_back(BlockWeights::init(d, config.heads, hidden, rng));
    }
    int ifs_k = 0;
    if (config.use_ifs && config.strategy != Strategy::kNone && config.n2 > 0) {
        const GroupAssignment probe = config.assignment_for(1);
        if (probe.ifs_eligible()) {
            ifs_k = ifs_kernel_size_for(probe.subgrid_rows, probe.subgrid_cols);
        }
    }
    for (int i = 0; i < config.n2; ++i) {
        w.unit_intra.push_back(BlockWeights::init(d, config.heads, hidden, rng));
        w.unit_inter.push_back(BlockWeights::init(
            d, config.heads, hidden, rng, config.strategy == Strategy::kNone ? 0 : ifs_k));
    }
    w.merger = MergerWeights::init(d, config.heads, config.merged_tokens, config.d_decoder, rng);
    return w;
}

void EncoderWeights::register_params(NamedParams& out) {
    out.emplace_back("encoder.patch.w", patch_w);
    out.emplace_back("encoder.patch.b", patch_b);
    out.emplace_back("encoder.pos", pos);
    for (std::size_t i = 0; i < stage1.size(); ++i) {
        stage1[i].register_params("encoder.stage1." + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < unit_intra.size(); ++i) {
        unit_intra[i].register_params("encoder.unit" + std::to_string(i) + ".intra", out);
        unit_inter[i].register_params("encoder.unit" + std::to_string(i) + ".inter", out);
    }
    merger.register_params("encoder.merger", out);
}

Tensor patch_embed(const Tensor& images, const EncoderWeights& w) {
    const EncoderConfig& cfg = w.config;
    if (images.ndim() != 4 || images.dim(1) != cfg.in_channels ||
        images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
        throw ShapeError("patch_embed expects [N, " + std::to_string(cfg.in_channels) + ", " +
                         std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) +
                         "], got " + shape_str(images.shape()));
    }
    const std::int64_t n = images.dim(0);
    const std::int64_t c = cfg.in_channels;
    const std::int64_t side = cfg.grid_side();
    const std::int64_t ps = cfg.patch_size;
    Tensor x = reshape(images, {n, c, side, ps, side, ps});
    x = permute(x, {0, 2, 4, 1, 3, 5});  // [N, side, side, C, ps, ps]
    x = reshape(x, {n, side * side, c * ps * ps});
    Tensor tokens = linear(x, w.patch_w, w.patch_b);
    return add(tokens, w.pos);  // same positional table for every view
}

Tensor merge_tokens(const Tensor& all_tokens, const MergerWeights& w) {
    if (all_tokens.ndim() != 2) {
        throw ShapeError("merge_tokens expects [T, D], got " + shape_str(all_tokens.shape()));
    }
    const std::int64_t t = all_tokens.dim(0);
    const std::int64_t d = all_tokens.dim(1);
    const std::int64_t m = w.queries.dim(0);
    const int heads = w.heads;
    const std::int64_t dh = d / heads;
    detail::note_attention(m, t, false);  // M x T score matrix, never T x T

    Tensor q = linear(w.queries, w.wq, w.bq);                       // [M, D]
    Tensor k = linear(all_tokens, w.wk, w.bk);                      // [T, D]
    Tensor v = linear(all_tokens, w.wv, w.bv);
    Tensor qh = permute(reshape(q, {m, heads, dh}), {1, 0, 2});     // [H, M, dh]
    Tensor kh = permute(reshape(k, {t, heads, dh}), {1, 2, 0});     // [H, dh, T]
    Tensor vh = permute(reshape(v, {t, heads, dh}), {1, 0, 2});     // [H, T, dh]
    Tensor attn = softmax(scale(matmul(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
    Tensor ctx = reshape(permute(matmul(attn, vh), {1, 0, 2}), {m, d});
    Tensor merged = linear(ctx, w.wo, w.bo);
    return linear(merged, w.out_w, w.out_b);  // [M, D_dec]
}

Tensor encode(const Tensor& images, const EncoderWeights& w, const GroupAssignment* assignment) {
    const EncoderConfig& cfg = w.config;
    if (cfg.strategy != Strategy::kNone && cfg.n2 > 0 && assignment == nullptr) {
        throw ContractError("encode requires a group assignment for strategy " +
                            strategy_name(cfg.strategy));
    }
    Tensor t = patch_embed(images, w);
    for (const auto& block : w.stage1) t = standard_block(t, block);
    for (std::size_t u = 0; u < w.unit_intra.size(); ++u) {
        t = standard_block(t, w.unit_intra[u]);
        if (cfg.strategy == Strategy::kNone) {
            t = standard_block(t, w.unit_inter[u]);
        } else {
            t = grouped_block(t, *assignment, w.unit_inter[u]);
        }
    }
    const std::int64_t n = t.dim(0);
    const std::int64_t p = t.dim(1);
    return merge_tokens(reshape(t, {n * p, cfg.d_model}), w.merger);
}

}  // namespace lrgt
