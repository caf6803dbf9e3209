#include <doctest.h>

#include <cmath>

#include "lrgt/decoder.hpp"
#include "testutil.hpp"

using namespace lrgt;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

namespace {

void zero_block(BlockWeights& b) {
    for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                      &b.bo, &b.ln2_gain, &b.ln2_bias, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) {
        std::fill(t->raw().begin(), t->raw().end(), 0.0);
    }
}

}  // namespace

TEST_SUITE_BEGIN("decoder");

TEST_CASE("standard schedule geometry and token counts") {
    DecoderConfig cfg = DecoderConfig::standard_schedule(128, {32, 16, 8, 2}, 2, 2);
    REQUIRE(cfg.units.size() == 4);
    CHECK(cfg.units[0].out_resolution == 4);
    CHECK(cfg.units[1].out_resolution == 8);
    CHECK(cfg.units[2].out_resolution == 16);
    CHECK(cfg.units[3].out_resolution == 32);
    CHECK(cfg.units[0].attention_tokens() == 64);
    CHECK(cfg.units[1].attention_tokens() == 512);  // 4^3 -> 8^3 doubles to 512 tokens
    CHECK(cfg.units[2].attention_tokens() == 512);  // (16/2)^3
    CHECK(cfg.units[3].attention_tokens() == 512);  // (32/4)^3
    for (const auto& u : cfg.units) CHECK(u.attention_tokens() <= cfg.token_budget);
    // reference-scale widths keep the same token geometry
    DecoderConfig ref = DecoderConfig::standard_schedule(384, {384, 192, 96, 48}, 4, 4);
    CHECK(ref.units[2].attention_tokens() == 512);
    CHECK(ref.units[3].attention_tokens() == 512);
}

TEST_CASE("group and ungroup formulas") {
    Rng rng(3);
    Tensor v32 = random_tensor({2, 32, 32, 32}, rng);
    Tensor g32 = group_voxels(v32, 4);
    CHECK(g32.shape() == Shape{512, 64 * 2});

    Tensor v16 = random_tensor({3, 16, 16, 16}, rng);
    Tensor g16 = group_voxels(v16, 2);
    CHECK(g16.shape() == Shape{512, 8 * 3});

    // I = 1 is the plain voxel-major flatten
    Tensor v4 = random_tensor({5, 4, 4, 4}, rng);
    Tensor g1 = group_voxels(v4, 1);
    CHECK(g1.shape() == Shape{64, 5});
    Tensor manual = permute(reshape(v4, {5, 64}), {1, 0});
    CHECK(g1.values() == manual.values());

    CHECK_THROWS_AS(group_voxels(v4, 3), ConfigError);
}

TEST_CASE("group/ungroup round trip is bit-exact") {
    Rng rng(5);
    for (auto [s, i] : {std::pair{8, 2}, {16, 2}, {32, 4}}) {
        Tensor v = random_tensor({3, s, s, s}, rng);
        Tensor back = ungroup_voxels(group_voxels(v, i), 3, s, i);
        CHECK(back.values() == v.values());
    }
}

TEST_CASE("block layout concatenates adjacent voxels channel-wise in raster order") {
    // one channel, 2^3 volume, I=2: the single token must be the raster scan
    Tensor v = Tensor::from_data({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    Tensor g = group_voxels(v, 2);
    CHECK(g.shape() == Shape{1, 8});
    CHECK(testutil::vec(g) == std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("zero transformer weights reduce lr units to the deconvolution") {
    DecoderUnitWeights uw;
    uw.spec = {UnitKind::kLR, 8, 6, 1, true};
    Rng rng(7);
    uw.deconv_w = random_tensor({4, 6, 2, 2, 2}, rng);
    uw.deconv_b = random_tensor({6}, rng);
    uw.block1 = BlockWeights::init(6, 2, 12, rng);
    uw.block2 = BlockWeights::init(6, 2, 12, rng);
    zero_block(uw.block1);
    zero_block(uw.block2);

    Tensor v = random_tensor({4, 4, 4, 4}, rng);
    Tensor out = lr_unit(v, uw);
    Tensor d = conv_transpose3d(v, uw.deconv_w, 2, 0);
    Tensor expect = reshape(permute(add(permute(reshape(d, {6, 512}), {1, 0}), uw.deconv_b),
                                    {1, 0}),
                            {6, 8, 8, 8});
    CHECK(out.values() == expect.values());
}

TEST_CASE("zero transformer weights leave hr units with the doubled skip path") {
    // Pre-layernorm blocks with zero weights are the identity, so the grouped
    // branch returns the deconv output and the additive skip doubles it.
    DecoderUnitWeights uw;
    uw.spec = {UnitKind::kHR, 8, 4, 2, true};
    Rng rng(11);
    uw.deconv_w = random_tensor({4, 4, 2, 2, 2}, rng);
    uw.deconv_b = random_tensor({4}, rng);
    uw.block1 = BlockWeights::init(32, 2, 64, rng);
    uw.block2 = BlockWeights::init(32, 2, 64, rng);
    zero_block(uw.block1);
    zero_block(uw.block2);

    Tensor v = random_tensor({4, 4, 4, 4}, rng);
    Tensor out = hr_unit(v, uw);
    Tensor d = conv_transpose3d(v, uw.deconv_w, 2, 0);
    Tensor biased = reshape(permute(add(permute(reshape(d, {4, 512}), {1, 0}), uw.deconv_b),
                                    {1, 0}),
                            {4, 8, 8, 8});
    Tensor expect = scale(biased, 2.0);
    for (std::size_t i = 0; i < out.values().size(); ++i) {
        CHECK(out.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-14));
    }
}

TEST_CASE("hr unit differs from its skipless variant") {
    DecoderUnitWeights uw;
    uw.spec = {UnitKind::kHR, 8, 4, 2, true};
    Rng rng(13);
    uw.deconv_w = random_tensor({4, 4, 2, 2, 2}, rng, 0.2);
    uw.deconv_b = random_tensor({4}, rng, 0.2);
    uw.block1 = BlockWeights::init(32, 2, 64, rng);
    uw.block2 = BlockWeights::init(32, 2, 64, rng);
    Tensor v = random_tensor({4, 4, 4, 4}, rng);
    Tensor with_skip = hr_unit(v, uw);

    Tensor u = conv_transpose3d(v, uw.deconv_w, 2, 0);
    Tensor biased = reshape(permute(add(permute(reshape(u, {4, 512}), {1, 0}), uw.deconv_b),
                                    {1, 0}),
                            {4, 8, 8, 8});
    Tensor grouped = group_voxels(biased, 2);
    Tensor tokens = reshape(standard_block(
                                standard_block(reshape(grouped, {1, 64, 32}), uw.block1),
                                uw.block2),
                            {64, 32});
    Tensor without_skip = ungroup_voxels(tokens, 4, 8, 2);
    double diff = 0.0;
    for (std::size_t i = 0; i < with_skip.values().size(); ++i) {
        diff = std::max(diff, std::fabs(with_skip.values()[i] - without_skip.values()[i]));
    }
    CHECK(diff > 1e-6);
}

TEST_CASE("decode emits a 32^3 probability grid") {
    DecoderConfig cfg = DecoderConfig::standard_schedule(16, {8, 8, 4, 2}, 2, 1);
    Rng rng(17);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    Tensor seed = random_tensor({64, 16}, rng);
    reset_attention_stats();
    Tensor out = decode(seed, w);
    CHECK(out.shape() == Shape{32, 32, 32});
    for (double p : out.values()) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
    CHECK(max_attention_tokens() == 512);
}

TEST_CASE("zero head weight gives a constant sigmoid(bias) grid") {
    DecoderConfig cfg = DecoderConfig::standard_schedule(16, {8, 8, 4, 2}, 2, 1);
    Rng rng(19);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    std::fill(w.head_w.raw().begin(), w.head_w.raw().end(), 0.0);
    w.head_b.raw()[0] = -0.4;
    Tensor out = decode(random_tensor({64, 16}, rng), w);
    const double expect = 1.0 / (1.0 + std::exp(0.4));
    for (double p : out.values()) CHECK(p == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("decode validates seed shape") {
    DecoderConfig cfg = DecoderConfig::standard_schedule(16, {8, 8, 4, 2}, 2, 1);
    Rng rng(23);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    CHECK_THROWS_AS(decode(Tensor::zeros({64, 8}), w), ShapeError);
    CHECK_THROWS_AS(decode(Tensor::zeros({32, 16}), w), ShapeError);
}

TEST_CASE("decoder config validation") {
    // budget exceeded on an LR unit points to HR
    DecoderConfig lr_heavy;
    lr_heavy.d_input = 8;
    lr_heavy.seed_side = 8;
    lr_heavy.units = {{UnitKind::kLR, 16, 4, 1, true},
                      {UnitKind::kHR, 32, 2, 4, true}};
    CHECK_THROWS_WITH_AS(lr_heavy.validate(), doctest::Contains("HR"), ConfigError);

    // group factor must divide the resolution
    DecoderConfig bad_i;
    bad_i.d_input = 8;
    bad_i.seed_side = 16;
    bad_i.output_resolution = 32;
    bad_i.units = {{UnitKind::kHR, 32, 2, 3, true}};
    CHECK_THROWS_AS(bad_i.validate(), ConfigError);

    // resolution chain must land on the output resolution
    DecoderConfig short_chain;
    short_chain.d_input = 8;
    short_chain.units = {{UnitKind::kLR, 8, 4, 1, true}};
    CHECK_THROWS_AS(short_chain.validate(), ConfigError);
}

TEST_CASE("decoder gradients vs finite differences on a small chain") {
    DecoderConfig cfg;
    cfg.d_input = 6;
    cfg.seed_side = 2;
    cfg.heads = 1;
    cfg.mlp_ratio = 1;
    cfg.output_resolution = 8;
    cfg.units = {{UnitKind::kLR, 4, 4, 1, true}, {UnitKind::kHR, 8, 3, 2, true}};
    Rng rng(29);
    DecoderWeights w = DecoderWeights::init(cfg, rng);
    Tensor seed = random_tensor({8, 6}, rng).set_requires_grad(true);
    Tensor m = random_tensor({8, 8, 8}, rng);
    NamedParams named;
    w.register_params(named);
    std::vector<Tensor> params{seed};
    for (auto& [name, t] : named) params.push_back(t);
    Rng coords(31);
    const double err =
        max_grad_rel_err([&]() { return sum(mul(decode(seed, w), m)); }, params, 2, coords);
    CHECK(err <= 1e-4);
}

TEST_SUITE_END();
