#pragma once

#include "lrgt/attention.hpp"

namespace lrgt {

enum class UnitKind { kLR, kHR };

struct DecoderUnitSpec {
    UnitKind kind = UnitKind::kLR;
    int out_resolution = 4;  // S after this unit
    int channels = 32;       // D_r after this unit
    int group_factor = 1;    // I; HR units only
    bool upsample = true;    // stride-2 kernel-2 deconv; else stride-1 kernel-3

    // Token count its transformer blocks attend over.
    std::int64_t attention_tokens() const {
        const std::int64_t side = out_resolution / (kind == UnitKind::kHR ? group_factor : 1);
        return side * side * side;
    }
    std::int64_t token_width() const {
        return kind == UnitKind::kHR
                   ? static_cast<std::int64_t>(group_factor) * group_factor * group_factor *
                         channels
                   : channels;
    }
};

struct DecoderConfig {
    int d_input = 128;  // width of the encoder's merged tokens
    int seed_side = 4;  // merged tokens reshape to seed_side^3
    int heads = 2;
    int mlp_ratio = 2;
    int token_budget = 512;
    int output_resolution = 32;
    std::vector<DecoderUnitSpec> units;

    void validate() const;

    // The 4-unit reference schedule: a stride-1 unit at the seed resolution,
    // one LR upsample, then HR upsamples with I=2 and I=4.
    static DecoderConfig standard_schedule(int d_input, const std::vector<int>& widths, int heads,
                                           int mlp_ratio, int token_budget = 512);
};

struct DecoderUnitWeights {
    DecoderUnitSpec spec;
    Tensor deconv_w;  // [C_in, C_out, k, k, k]
    Tensor deconv_b;  // [C_out]
    BlockWeights block1, block2;
};

struct DecoderWeights {
    DecoderConfig config;
    std::vector<DecoderUnitWeights> units;
    Tensor head_w;  // [C_last, 1]
    Tensor head_b;  // [1]

    static DecoderWeights init(const DecoderConfig& config, Rng& rng);
    void register_params(NamedParams& out);
};

// Voxel block grouping: every I^3 block of adjacent voxels becomes one token
// whose feature vector concatenates the block's voxel features in raster
// order. Exact inverse of ungroup_voxels.
Tensor group_voxels(const Tensor& v /* [C, S, S, S] */, int group_factor);
Tensor ungroup_voxels(const Tensor& t /* [T', I^3*C] */, int channels, int resolution,
                      int group_factor);

// Deconv (+bias), then two transformer blocks over the S^3 voxel tokens.
Tensor lr_unit(const Tensor& v, const DecoderUnitWeights& w);
// Deconv (+bias), group I^3 voxels per token, two transformer blocks, ungroup,
// then add the saved deconv output.
Tensor hr_unit(const Tensor& v, const DecoderUnitWeights& w);

// seed: [seed_side^3, d_input] merged tokens -> occupancy probabilities
// [R, R, R] in (0, 1).
Tensor decode(const Tensor& seed, const DecoderWeights& w);

}  // namespace lrgt
