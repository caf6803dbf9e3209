#include "lrgt/decoder.hpp"

namespace lrgt {

void DecoderConfig::validate() const {
    if (units.empty()) throw ConfigError("decoder needs at least one unit");
    if (d_input < 1 || seed_side < 1) throw ConfigError("decoder d_input/seed_side must be >= 1");
    if (heads < 1 || mlp_ratio < 1) throw ConfigError("decoder heads/mlp_ratio must be >= 1");
    int s = seed_side;
    for (std::size_t i = 0; i < units.size(); ++i) {
        const DecoderUnitSpec& u = units[i];
        const int expected = u.upsample ? 2 * s : s;
        if (u.out_resolution != expected) {
            throw ConfigError("decoder unit " + std::to_string(i) + " resolution " +
                              std::to_string(u.out_resolution) + " does not follow from " +
                              std::to_string(s) + (u.upsample ? " with" : " without") +
                              " upsampling");
        }
        if (u.out_resolution < s) throw ConfigError("decoder resolutions must be non-decreasing");
        if (u.channels < 1) throw ConfigError("decoder unit channels must be >= 1");
        if (u.kind == UnitKind::kHR) {
            if (u.group_factor < 1 || u.out_resolution % u.group_factor != 0) {
                throw ConfigError("decoder unit " + std::to_string(i) + ": group factor " +
                                  std::to_string(u.group_factor) + " must divide resolution " +
                                  std::to_string(u.out_resolution));
            }
        } else if (u.group_factor != 1) {
            throw ConfigError("LR units have no voxel grouping");
        }
        if (u.attention_tokens() > token_budget) {
            throw ConfigError(
                "decoder unit " + std::to_string(i) + " would attend over " +
                std::to_string(u.attention_tokens()) + " tokens (budget " +
                std::to_string(token_budget) +
                (u.kind == UnitKind::kLR ? "); use an HR unit with a suitable group factor"
                                         : "); increase the group factor"));
        }
        if (u.token_width() % heads != 0) {
            throw ConfigError("decoder unit " + std::to_string(i) + " token width " +
                              std::to_string(u.token_width()) + " not divisible by heads");
        }
        s = u.out_resolution;
    }
    if (s != output_resolution) {
        throw ConfigError("decoder ends at " + std::to_string(s) + "^3, expected " +
                          std::to_string(output_resolution) + "^3");
    }
}

DecoderConfig DecoderConfig::standard_schedule(int d_input, const std::vector<int>& widths,
                                               int heads, int mlp_ratio, int token_budget) {
    if (widths.size() != 4) throw ConfigError("standard decoder schedule takes 4 channel widths");
    DecoderConfig cfg;
    cfg.d_input = d_input;
    cfg.seed_side = 4;
    cfg.heads = heads;
    cfg.mlp_ratio = mlp_ratio;
    cfg.token_budget = token_budget;
    cfg.units = {
        {UnitKind::kLR, 4, widths[0], 1, false},
        {UnitKind::kLR, 8, widths[1], 1, true},
        {UnitKind::kHR, 16, widths[2], 2, true},
        {UnitKind::kHR, 32, widths[3], 4, true},
    };
    cfg.validate();
    return cfg;
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
    DVec v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.trunc_normal(stddev);
    return Tensor::from_data(std::move(shape), std::move(v));
}

// [C, S^3] -> [S^3, C] token-major and back.
Tensor to_tokens(const Tensor& v) {
    const std::int64_t c = v.dim(0);
    const std::int64_t s3 = v.numel() / c;
    return permute(reshape(v, {c, s3}), {1, 0});
}

Tensor to_volume(const Tensor& tokens, int resolution) {
    const std::int64_t s = resolution;
    const std::int64_t c = tokens.dim(1);
    return reshape(permute(tokens, {1, 0}), {c, s, s, s});
}

Tensor deconv_with_bias(const Tensor& v, const DecoderUnitWeights& w) {
    const int stride = w.spec.upsample ? 2 : 1;
    const int padding = w.spec.upsample ? 0 : 1;
    Tensor d = conv_transpose3d(v, w.deconv_w, stride, padding);
    Tensor tok = add(to_tokens(d), w.deconv_b);
    return to_volume(tok, w.spec.out_resolution);
}

Tensor run_blocks(const Tensor& tokens, const DecoderUnitWeights& w) {
    const std::int64_t t = tokens.dim(0);
    const std::int64_t d = tokens.dim(1);
    Tensor x = reshape(tokens, {1, t, d});
    x = standard_block(x, w.block1);
    x = standard_block(x, w.block2);
    return reshape(x, {t, d});
}

}  // namespace

Tensor group_voxels(const Tensor& v, int group_factor) {
    if (v.ndim() != 4) throw ShapeError("group_voxels expects [C, S, S, S]");
    const std::int64_t c = v.dim(0);
    const std::int64_t s = v.dim(1);
    if (v.dim(2) != s || v.dim(3) != s) throw ShapeError("group_voxels expects a cubic volume");
    const std::int64_t i = group_factor;
    if (i < 1 || s % i != 0) {
        throw ConfigError("group factor " + std::to_string(group_factor) +
                          " must divide resolution " + std::to_string(s));
    }
    const std::int64_t sb = s / i;
    Tensor x = reshape(v, {c, sb, i, sb, i, sb, i});
    x = permute(x, {1, 3, 5, 2, 4, 6, 0});  // [sb, sb, sb, i, i, i, c]
    return reshape(x, {sb * sb * sb, i * i * i * c});
}

Tensor ungroup_voxels(const Tensor& t, int channels, int resolution, int group_factor) {
    const std::int64_t c = channels;
    const std::int64_t s = resolution;
    const std::int64_t i = group_factor;
    if (i < 1 || s % i != 0) {
        throw ConfigError("group factor " + std::to_string(group_factor) +
                          " must divide resolution " + std::to_string(resolution));
    }
    const std::int64_t sb = s / i;
    if (t.ndim() != 2 || t.dim(0) != sb * sb * sb || t.dim(1) != i * i * i * c) {
        throw ShapeError("ungroup_voxels: token tensor " + shape_str(t.shape()) +
                         " does not match C=" + std::to_string(channels) + " S=" +
                         std::to_string(resolution) + " I=" + std::to_string(group_factor));
    }
    Tensor x = reshape(t, {sb, sb, sb, i, i, i, c});
    x = permute(x, {6, 0, 3, 1, 4, 2, 5});  // [c, sb, i, sb, i, sb, i]
    return reshape(x, {c, s, s, s});
}

Tensor lr_unit(const Tensor& v, const DecoderUnitWeights& w) {
    Tensor u = deconv_with_bias(v, w);
    Tensor tokens = run_blocks(to_tokens(u), w);
    return to_volume(tokens, w.spec.out_resolution);
}

Tensor hr_unit(const Tensor& v, const DecoderUnitWeights& w) {
    Tensor u = deconv_with_bias(v, w);
    Tensor grouped = group_voxels(u, w.spec.group_factor);
    Tensor tokens = run_blocks(grouped, w);
    Tensor restored = ungroup_voxels(tokens, w.spec.channels, w.spec.out_resolution,
                                     w.spec.group_factor);
    return add(u, restored);  // deconv features rejoin the transformer output
}

DecoderWeights DecoderWeights::init(const DecoderConfig& config, Rng& rng) {
    config.validate();
    DecoderWeights w;
    w.config = config;
    int c_in = config.d_input;
    for (const DecoderUnitSpec& spec : config.units) {
        DecoderUnitWeights uw;
        uw.spec = spec;
        const int k = spec.upsample ? 2 : 3;
        uw.deconv_w = trunc_normal({c_in, spec.channels, k, k, k}, rng).set_requires_grad(true);
        uw.deconv_b = Tensor::zeros({spec.channels}).set_requires_grad(true);
        const int width = static_cast<int>(spec.token_width());
        uw.block1 = BlockWeights::init(width, config.heads, config.mlp_ratio * width, rng);
        uw.block2 = BlockWeights::init(width, config.heads, config.mlp_ratio * width, rng);
        w.units.push_back(std::move(uw));
        c_in = spec.channels;
    }
    w.head_w = trunc_normal({c_in, 1}, rng).set_requires_grad(true);
    w.head_b = Tensor::zeros({1}).set_requires_grad(true);
    return w;
}

void DecoderWeights::register_params(NamedParams& out) {
    for (std::size_t i = 0; i < units.size(); ++i) {
        const std::string prefix = "decoder.unit" + std::to_string(i);
        out.emplace_back(prefix + ".deconv.w", units[i].deconv_w);
        out.emplace_back(prefix + ".deconv.b", units[i].deconv_b);
        units[i].block1.register_params(prefix + ".block1", out);
        units[i].block2.register_params(prefix + ".block2", out);
    }
    out.emplace_back("decoder.head.w", head_w);
    out.emplace_back("decoder.head.b", head_b);
}

Tensor decode(const Tensor& seed, const DecoderWeights& w) {
    const DecoderConfig& cfg = w.config;
    const std::int64_t m = static_cast<std::int64_t>(cfg.seed_side) * cfg.seed_side * cfg.seed_side;
    if (seed.ndim() != 2 || seed.dim(0) != m || seed.dim(1) != cfg.d_input) {
        throw ShapeError("decode expects seed [" + std::to_string(m) + ", " +
                         std::to_string(cfg.d_input) + "], got " + shape_str(seed.shape()));
    }
    Tensor x = to_volume(seed, cfg.seed_side);
    for (const DecoderUnitWeights& unit : w.units) {
        x = unit.spec.kind == UnitKind::kLR ? lr_unit(x, unit) : hr_unit(x, unit);
    }
    Tensor tokens = to_tokens(x);  // [R^3, C_last]
    Tensor logits = linear(tokens, w.head_w, w.head_b);
    const std::int64_t r = cfg.output_resolution;
    return reshape(sigmoid(logits), {r, r, r});
}

}  // namespace lrgt
