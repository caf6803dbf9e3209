#include <doctest.h>

#include <cmath>

#include "lrgt/attention.hpp"
#include "testutil.hpp"

using namespace lrgt;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

namespace {

BlockWeights random_block(int d, int heads, int hidden, std::uint64_t seed, int ifs_k = 0) {
    Rng rng(seed);
    return BlockWeights::init(d, heads, hidden, rng, ifs_k);
}

void set_identity(Tensor& t, int d) {
    auto& v = t.raw();
    std::fill(v.begin(), v.end(), 0.0);
    for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i * d + i)] = 1.0;
}

BlockWeights identity_projection_block(int d) {
    Rng rng(0);
    BlockWeights w = BlockWeights::init(d, 1, d, rng);
    set_identity(w.wq, d);
    set_identity(w.wk, d);
    set_identity(w.wv, d);
    set_identity(w.wo, d);
    return w;
}

std::vector<Tensor> block_params(BlockWeights& w) {
    NamedParams named;
    w.register_params("b", named);
    std::vector<Tensor> out;
    for (auto& [name, t] : named) out.push_back(t);
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("attention");

TEST_CASE("mhsa on a single token is the projected value") {
    const int d = 4;
    BlockWeights w = random_block(d, 2, 8, 3);
    Rng rng(5);
    Tensor x = random_tensor({1, 1, d}, rng);
    Tensor y = mhsa(x, w);
    // softmax over one key gives weight 1, so the context is exactly V.
    Tensor expect = linear(linear(x, w.wv, w.bv), w.wo, w.bo);
    REQUIRE(y.shape() == expect.shape());
    for (std::size_t i = 0; i < y.values().size(); ++i) {
        CHECK(y.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-14));
    }
}

TEST_CASE("mhsa maps identical tokens to identical rows") {
    const int d = 6;
    BlockWeights w = random_block(d, 3, 12, 7);
    Rng rng(9);
    std::vector<double> row(static_cast<std::size_t>(d));
    for (auto& v : row) v = rng.normal();
    std::vector<double> data;
    for (int t = 0; t < 4; ++t) data.insert(data.end(), row.begin(), row.end());
    Tensor y = mhsa(Tensor::from_data({1, 4, d}, data), w);
    for (int t = 1; t < 4; ++t) {
        for (int c = 0; c < d; ++c) {
            CHECK(y.values()[static_cast<std::size_t>(t * d + c)] ==
                  doctest::Approx(y.values()[static_cast<std::size_t>(c)]).epsilon(1e-14));
        }
    }
}

TEST_CASE("mhsa two-token closed form with identity projections") {
    BlockWeights w = identity_projection_block(2);
    Tensor x = Tensor::from_data({1, 2, 2}, {1, 0, 0, 1});
    Tensor y = mhsa(x, w);
    const double s = 1.0 / std::sqrt(2.0);
    const double p = std::exp(s) / (std::exp(s) + 1.0);  // weight on the matching token
    CHECK(y.values()[0] == doctest::Approx(p).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(1.0 - p).epsilon(1e-12));
    CHECK(y.values()[2] == doctest::Approx(1.0 - p).epsilon(1e-12));
    CHECK(y.values()[3] == doctest::Approx(p).epsilon(1e-12));
}

TEST_CASE("mhsa rejects head counts that do not divide the width") {
    Rng rng(1);
    CHECK_THROWS_AS(BlockWeights::init(6, 4, 12, rng), ConfigError);
    BlockWeights w = random_block(6, 3, 12, 2);
    w.heads = 4;
    CHECK_THROWS_AS(mhsa(Tensor::zeros({1, 2, 6}), w), ConfigError);
}

TEST_CASE("feature signatures with identity kernel reproduce the values") {
    const int d = 5;
    Rng rng(11);
    Tensor vals = random_tensor({3, 12, d}, rng);  // 3 views, 3x4 sub-grid
    Tensor kernel = Tensor::zeros({d, 3, 3});
    for (int c = 0; c < d; ++c) kernel.raw()[static_cast<std::size_t>(c * 9 + 4)] = 1.0;  // center tap
    Tensor out = ifs(vals, 3, 4, kernel);
    CHECK(out.values() == vals.values());
}

TEST_CASE("feature signatures on a 1x1 sub-grid are per-token channel scaling") {
    const int d = 4;
    Rng rng(13);
    Tensor vals = random_tensor({2, 1, d}, rng);
    Tensor kernel = Tensor::from_data({d, 1, 1}, {2, 3, -1, 0.5});
    Tensor out = ifs(vals, 1, 1, kernel);
    for (int v = 0; v < 2; ++v) {
        for (int c = 0; c < d; ++c) {
            const std::size_t i = static_cast<std::size_t>(v * d + c);
            CHECK(out.values()[i] ==
                  doctest::Approx(vals.values()[i] * kernel.values()[static_cast<std::size_t>(c)])
                      .epsilon(1e-15));
        }
    }
}

TEST_CASE("feature signatures average neighbors on the sub-grid") {
    // 2x2 sub-grid, kernel k=2 anchored at the token itself: out(y,x) sums
    // taps (dy,dx) in {0,1}^2 of in(y+dy, x+dx).
    const int d = 1;
    Tensor vals = Tensor::from_data({1, 4, d}, {1, 2, 3, 4});
    Tensor kernel = Tensor::full({1, 2, 2}, 1.0);
    Tensor out = ifs(vals, 2, 2, kernel);
    CHECK(out.values()[0] == doctest::Approx(10.0));  // 1+2+3+4
    CHECK(out.values()[1] == doctest::Approx(6.0));   // 2+4
    CHECK(out.values()[2] == doctest::Approx(7.0));   // 3+4
    CHECK(out.values()[3] == doctest::Approx(4.0));   // 4
}

TEST_CASE("zero feature-signature kernel reduces to plain grouped attention") {
    const int d = 8;
    TokenGrid grid{2, 4, 4};
    GroupAssignment a = build_lga(grid, 4);
    BlockWeights with_ifs = random_block(d, 2, 16, 17, ifs_kernel_size_for(2, 2));
    std::fill(with_ifs.ifs_kernel.raw().begin(), with_ifs.ifs_kernel.raw().end(), 0.0);
    BlockWeights without = with_ifs;
    without.ifs_kernel = Tensor();

    Rng rng(19);
    Tensor x = random_tensor({2, 16, d}, rng);
    Tensor y1 = grouped_block(x, a, with_ifs);
    Tensor y2 = grouped_block(x, a, without);
    CHECK(y1.values() == y2.values());
}

TEST_CASE("grouped block with g=1 and zeroed signatures equals full-range attention") {
    const int d = 8;
    const int n = 3, p = 16;
    TokenGrid grid{n, 4, 4};
    GroupAssignment fra = build_fra(grid);
    BlockWeights w = random_block(d, 2, 16, 23);

    Rng rng(29);
    Tensor x = random_tensor({n, p, d}, rng);
    Tensor grouped = grouped_block(x, fra, w);
    Tensor full = standard_block(reshape(x, {1, n * p, d}), w);
    CHECK(grouped.values() == reshape(full, {n, p, d}).values());  // bit-exact
}

TEST_CASE("grouped attention never materializes more than N*P/g tokens") {
    const int d = 8;
    TokenGrid grid{4, 4, 4};
    GroupAssignment a = build_lga(grid, 4);
    BlockWeights w = random_block(d, 2, 16, 31);
    Rng rng(37);
    Tensor x = random_tensor({4, 16, d}, rng);
    reset_attention_stats();
    grouped_block(x, a, w);
    CHECK(max_attention_tokens() == 4 * 16 / 4);
}

TEST_CASE("grouped block is equivariant to view permutation") {
    const int d = 8;
    const int n = 4;
    TokenGrid grid{n, 4, 4};
    Rng rng(41);
    Tensor x = random_tensor({n, 16, d}, rng);
    std::vector<std::int64_t> pi{2, 0, 3, 1};

    for (Strategy s : {Strategy::kLga, Strategy::kSga, Strategy::kTga, Strategy::kFra}) {
        GroupAssignment a = build_assignment(grid, s, 4, 0);
        const int ik = a.ifs_eligible()
                           ? ifs_kernel_size_for(a.subgrid_rows, a.subgrid_cols)
                           : 0;
        BlockWeights w = random_block(d, 2, 16, 43, ik);
        Tensor y = grouped_block(x, a, w);
        Tensor xp = gather_rows(x, pi);
        Tensor yp = grouped_block(xp, a, w);
        Tensor y_perm = gather_rows(y, pi);
        double worst = 0.0;
        for (std::size_t i = 0; i < yp.values().size(); ++i) {
            worst = std::max(worst, std::fabs(yp.values()[i] - y_perm.values()[i]));
        }
        CHECK(worst <= 1e-9);
    }
}

TEST_CASE("feature signatures rejected for non-rectangular groups") {
    TokenGrid grid{2, 4, 4};
    GroupAssignment rnd = build_random(grid, 4, 7);
    BlockWeights w = random_block(8, 2, 16, 47, 2);
    Rng rng(53);
    Tensor x = random_tensor({2, 16, 8}, rng);
    CHECK_THROWS_AS(grouped_block(x, rnd, w), ContractError);
    // same weights without the kernel are fine
    w.ifs_kernel = Tensor();
    CHECK_NOTHROW(grouped_block(x, rnd, w));
}

TEST_CASE("grouped block validates assignment geometry") {
    TokenGrid grid{2, 4, 4};
    GroupAssignment a = build_lga(grid, 4);
    BlockWeights w = random_block(8, 2, 16, 59);
    CHECK_THROWS_AS(grouped_block(Tensor::zeros({3, 16, 8}), a, w), ContractError);
    CHECK_THROWS_AS(grouped_block(Tensor::zeros({2, 8, 8}), a, w), ContractError);
}

TEST_CASE("standard block with zeroed output projections is the identity") {
    const int d = 6;
    BlockWeights w = random_block(d, 2, 12, 61);
    std::fill(w.wo.raw().begin(), w.wo.raw().end(), 0.0);
    std::fill(w.bo.raw().begin(), w.bo.raw().end(), 0.0);
    std::fill(w.fc2_w.raw().begin(), w.fc2_w.raw().end(), 0.0);
    std::fill(w.fc2_b.raw().begin(), w.fc2_b.raw().end(), 0.0);
    Rng rng(67);
    Tensor x = random_tensor({2, 5, d}, rng);
    Tensor y = standard_block(x, w);
    CHECK(y.values() == x.values());
}

TEST_CASE("standard block treats views as independent batch entries") {
    const int d = 6;
    BlockWeights w = random_block(d, 3, 12, 71);
    Rng rng(73);
    Tensor x = random_tensor({3, 4, d}, rng);
    Tensor batched = standard_block(x, w);
    for (std::int64_t v = 0; v < 3; ++v) {
        Tensor one = standard_block(reshape(gather_rows(x, {v}), {1, 4, d}), w);
        for (std::size_t i = 0; i < one.values().size(); ++i) {
            CHECK(one.values()[i] == batched.values()[static_cast<std::size_t>(v * 4 * d) + i]);
        }
    }
}

TEST_CASE("standard block gradients vs finite differences") {
    const int d = 4;
    BlockWeights w = random_block(d, 2, 8, 79);
    Rng rng(83);
    Tensor x = random_tensor({1, 3, d}, rng).set_requires_grad(true);
    Tensor m = random_tensor({1, 3, d}, rng);
    auto params = block_params(w);
    params.push_back(x);
    Rng coords(84);
    const double err = max_grad_rel_err(
        [&]() { return sum(mul(standard_block(x, w), m)); }, params, 4, coords);
    CHECK(err <= 1e-5);
}

TEST_CASE("grouped block gradients vs finite differences, signatures included") {
    const int d = 4;
    TokenGrid grid{2, 2, 2};
    GroupAssignment a = build_lga(grid, 1, 2);
    BlockWeights w = random_block(d, 2, 8, 89,
                                  ifs_kernel_size_for(a.subgrid_rows, a.subgrid_cols));
    Rng rng(97);
    Tensor x = random_tensor({2, 4, d}, rng).set_requires_grad(true);
    Tensor m = random_tensor({2, 4, d}, rng);
    auto params = block_params(w);
    params.push_back(x);
    Rng coords(98);
    const double err = max_grad_rel_err(
        [&]() { return sum(mul(grouped_block(x, a, w), m)); }, params, 4, coords);
    CHECK(err <= 1e-5);
}

TEST_SUITE_END();
