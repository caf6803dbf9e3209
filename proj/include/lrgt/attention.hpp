#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lrgt/grouping.hpp"
#include "lrgt/rng.hpp"
#include "lrgt/tensor.hpp"

namespace lrgt {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Weights of one pre-layernorm transformer block. The same struct serves
// standard blocks and grouped-attention blocks; only the latter may carry a
// feature-signature kernel.
struct BlockWeights {
    int heads = 1;
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor fc1_w, fc1_b, fc2_w, fc2_b;
    Tensor ifs_kernel;  // [D, k, k]; undefined when the block has no IFS term

    static BlockWeights init(int d_model, int heads, int mlp_hidden, Rng& rng,
                             int ifs_kernel_size = 0);
    void register_params(const std::string& prefix, NamedParams& out);
    int d_model() const { return static_cast<int>(ln1_gain.numel()); }
};

// Kernel side used for a sub-grid of the given dims: 3 capped by the shorter side.
int ifs_kernel_size_for(int sub_rows, int sub_cols);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// y = x @ w_q/k/v heads, softmax(Q K^T / sqrt(d_head)) V, merged and projected.
Tensor mhsa(const Tensor& tokens /* [B, T, D] */, const BlockWeights& w);

// Pre-layernorm ViT block: x + MHSA(LN(x)), then x + MLP(LN(x)).
Tensor standard_block(const Tensor& tokens /* [B, T, D] */, const BlockWeights& w);

// Feature signatures for one group: values [N, Pg, D] hold the
// value-projected tokens of each view laid out row-major on an
// sub_rows x sub_cols grid; a depthwise kernel [D, k, k] with zero padding is
// applied per view.
Tensor ifs(const Tensor& values, int sub_rows, int sub_cols, const Tensor& kernel);

// Grouped-attention transformer block over all views jointly. Gathers each
// group's tokens (across views) into one attention instance with weights
// shared across groups, adds the feature-signature term when the assignment
// is rectangular and a kernel is present, and scatters results back.
Tensor grouped_block(const Tensor& view_tokens /* [N, P, D] */, const GroupAssignment& assignment,
                     const BlockWeights& w);

// Instrumentation (per thread, since the last reset): the largest token count
// handed to any self-attention instance, and the largest score-matrix size
// (rows * cols) materialized by any attention including cross-attention.
void reset_attention_stats();
std::int64_t max_attention_tokens();
std::int64_t max_attention_matrix();

namespace detail {
void note_attention(std::int64_t rows, std::int64_t cols, bool self_attention);
}

}  // namespace lrgt
