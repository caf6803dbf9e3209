#include "lrgt/attention.hpp"

#include <cmath>

namespace lrgt {

namespace {

thread_local std::int64_t tl_max_attention_tokens = 0;
thread_local std::int64_t tl_max_attention_matrix = 0;

Tensor trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.trunc_normal(stddev);
    return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

void reset_attention_stats() {
    tl_max_attention_tokens = 0;
    tl_max_attention_matrix = 0;
}
std::int64_t max_attention_tokens() { return tl_max_attention_tokens; }
std::int64_t max_attention_matrix() { return tl_max_attention_matrix; }

namespace detail {
void note_attention(std::int64_t rows, std::int64_t cols, bool self_attention) {
    if (self_attention && cols > tl_max_attention_tokens) tl_max_attention_tokens = cols;
    if (rows * cols > tl_max_attention_matrix) tl_max_attention_matrix = rows * cols;
}
}  // namespace detail

int ifs_kernel_size_for(int sub_rows, int sub_cols) {
    return std::min(3, std::min(sub_rows, sub_cols));
}

BlockWeights BlockWeights::init(int d_model, int heads, int mlp_hidden, Rng& rng,
                                int ifs_kernel_size) {
    if (d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    }
    BlockWeights w;
    w.heads = heads;
    w.ln1_gain = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    w.ln1_bias = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wq = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bq = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wk = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bk = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wv = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bv = Tensor::zeros({d_model}).set_requires_grad(true);
    w.wo = trunc_normal({d_model, d_model}, rng).set_requires_grad(true);
    w.bo = Tensor::zeros({d_model}).set_requires_grad(true);
    w.ln2_gain = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    w.ln2_bias = Tensor::zeros({d_model}).set_requires_grad(true);
    w.fc1_w = trunc_normal({d_model, mlp_hidden}, rng).set_requires_grad(true);
    w.fc1_b = Tensor::zeros({mlp_hidden}).set_requires_grad(true);
    w.fc2_w = trunc_normal({mlp_hidden, d_model}, rng).set_requires_grad(true);
    w.fc2_b = Tensor::zeros({d_model}).set_requires_grad(true);
    if (ifs_kernel_size > 0) {
        w.ifs_kernel = trunc_normal({d_model, ifs_kernel_size, ifs_kernel_size}, rng)
                           .set_requires_grad(true);
    }
    return w;
}

void BlockWeights::register_params(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".ln1.gain", ln1_gain);
    out.emplace_back(prefix + ".ln1.bias", ln1_bias);
    out.emplace_back(prefix + ".attn.wq", wq);
    out.emplace_back(prefix + ".attn.bq", bq);
    out.emplace_back(prefix + ".attn.wk", wk);
    out.emplace_back(prefix + ".attn.bk", bk);
    out.emplace_back(prefix + ".attn.wv", wv);
    out.emplace_back(prefix + ".attn.bv", bv);
    out.emplace_back(prefix + ".attn.wo", wo);
    out.emplace_back(prefix + ".attn.bo", bo);
    out.emplace_back(prefix + ".ln2.gain", ln2_gain);
    out.emplace_back(prefix + ".ln2.bias", ln2_bias);
    out.emplace_back(prefix + ".mlp.fc1_w", fc1_w);
    out.emplace_back(prefix + ".mlp.fc1_b", fc1_b);
    out.emplace_back(prefix + ".mlp.fc2_w", fc2_w);
    out.emplace_back(prefix + ".mlp.fc2_b", fc2_b);
    if (ifs_kernel.defined()) out.emplace_back(prefix + ".ifs.kernel", ifs_kernel);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

namespace {

// Q/K/V head split + scaled dot-product + merge, with F optionally added to
// the pre-projection attention output. tokens: [B, T, D].
Tensor attention_core(const Tensor& tokens, const BlockWeights& w, const Tensor* signatures) {
    const std::int64_t batch = tokens.dim(0);
    const std::int64_t t = tokens.dim(1);
    const std::int64_t d = tokens.dim(2);
    const int heads = w.heads;
    if (d % heads != 0) {
        throw ConfigError("token width " + std::to_string(d) + " not divisible by heads " +
                          std::to_string(heads));
    }
    const std::int64_t dh = d / heads;
    detail::note_attention(t, t, true);

    Tensor q = linear(tokens, w.wq, w.bq);
    Tensor k = linear(tokens, w.wk, w.bk);
    Tensor v = linear(tokens, w.wv, w.bv);

    auto split = [&](const Tensor& x) {
        return permute(reshape(x, {batch, t, heads, dh}), {0, 2, 1, 3});  // [B, H, T, dh]
    };
    Tensor qh = split(q);
    Tensor kh = permute(reshape(k, {batch, t, heads, dh}), {0, 2, 3, 1});  // [B, H, dh, T]
    Tensor vh = split(v);

    Tensor scores = scale(matmul(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, -1);
    Tensor ctx = matmul(attn, vh);                                    // [B, H, T, dh]
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {batch, t, d});
    if (signatures) merged = add(merged, *signatures);
    return linear(merged, w.wo, w.bo);
}

Tensor mlp_residual(const Tensor& x, const BlockWeights& w) {
    Tensor h = layernorm(x, w.ln2_gain, w.ln2_bias);
    h = linear(h, w.fc1_w, w.fc1_b);
    h = gelu(h);
    h = linear(h, w.fc2_w, w.fc2_b);
    return add(x, h);
}

// Depthwise 2D convolution over [rows_outer, sr, sc, D] grids, zero padded,
// composed from gather/scatter/mul so the kernel gradient comes for free.
Tensor depthwise_grid_conv(const Tensor& grids, int outer, int sr, int sc, const Tensor& kernel) {
    const std::int64_t d = grids.dim(-1);
    if (kernel.ndim() != 3 || kernel.dim(0) != d || kernel.dim(1) != kernel.dim(2)) {
        throw ShapeError("feature-signature kernel must be [D, k, k], got " +
                         shape_str(kernel.shape()));
    }
    const int k = static_cast<int>(kernel.dim(1));
    const int pb = (k - 1) / 2;
    const std::int64_t rows = static_cast<std::int64_t>(outer) * sr * sc;
    Tensor flat = reshape(grids, {rows, d});
    Tensor kflat = reshape(kernel, {d * k * k, 1});

    Tensor out;
    for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
            // dst (y, x) reads src (y - pb + dy, x - pb + dx)
            std::vector<std::int64_t> src, dst;
            for (int o = 0; o < outer; ++o) {
                for (int y = 0; y < sr; ++y) {
                    const int ys = y - pb + dy;
                    if (ys < 0 || ys >= sr) continue;
                    for (int x = 0; x < sc; ++x) {
                        const int xs = x - pb + dx;
                        if (xs < 0 || xs >= sc) continue;
                        src.push_back((static_cast<std::int64_t>(o) * sr + ys) * sc + xs);
                        dst.push_back((static_cast<std::int64_t>(o) * sr + y) * sc + x);
                    }
                }
            }
            if (src.empty()) continue;
            Tensor shifted = scatter_rows(gather_rows(flat, src), dst, rows);
            std::vector<std::int64_t> tap_idx(static_cast<std::size_t>(d));
            for (std::int64_t c = 0; c < d; ++c) {
                tap_idx[static_cast<std::size_t>(c)] = c * k * k + dy * k + dx;
            }
            Tensor tap = reshape(gather_rows(kflat, tap_idx), {d});
            Tensor term = mul(shifted, tap);
            out = out.defined() ? add(out, term) : term;
        }
    }
    return reshape(out, grids.shape());
}

}  // namespace

Tensor mhsa(const Tensor& tokens, const BlockWeights& w) {
    if (tokens.ndim() != 3) {
        throw ShapeError("mhsa expects [B, T, D], got " + shape_str(tokens.shape()));
    }
    return attention_core(tokens, w, nullptr);
}

Tensor standard_block(const Tensor& tokens, const BlockWeights& w) {
    if (tokens.ndim() != 3) {
        throw ShapeError("standard_block expects [B, T, D], got " + shape_str(tokens.shape()));
    }
    Tensor normed = layernorm(tokens, w.ln1_gain, w.ln1_bias);
    Tensor x = add(tokens, attention_core(normed, w, nullptr));
    return mlp_residual(x, w);
}

Tensor ifs(const Tensor& values, int sub_rows, int sub_cols, const Tensor& kernel) {
    if (values.ndim() != 3) {
        throw ShapeError("ifs expects [N, Pg, D], got " + shape_str(values.shape()));
    }
    if (values.dim(1) != static_cast<std::int64_t>(sub_rows) * sub_cols) {
        throw ContractError("ifs: group tokens do not form a " + std::to_string(sub_rows) + "x" +
                            std::to_string(sub_cols) + " sub-grid");
    }
    return depthwise_grid_conv(values, static_cast<int>(values.dim(0)), sub_rows, sub_cols,
                               kernel);
}

Tensor grouped_block(const Tensor& view_tokens, const GroupAssignment& assignment,
                     const BlockWeights& w) {
    if (view_tokens.ndim() != 3) {
        throw ShapeError("grouped_block expects [N, P, D], got " + shape_str(view_tokens.shape()));
    }
    const std::int64_t n = view_tokens.dim(0);
    const std::int64_t p = view_tokens.dim(1);
    const std::int64_t d = view_tokens.dim(2);
    if (assignment.views != n || assignment.tokens_per_view != p) {
        throw ContractError("assignment geometry (" + std::to_string(assignment.views) + " views, " +
                            std::to_string(assignment.tokens_per_view) + " tokens) does not match tensor " +
                            shape_str(view_tokens.shape()));
    }
    TokenGrid echo{static_cast<int>(n), 1, static_cast<int>(p)};
    validate_partition(assignment, echo);  // covers exactly N x P pairs

    const std::int64_t g = assignment.group_count;
    const std::int64_t m = n * p / g;
    for (const auto& members : assignment.groups) {
        if (static_cast<std::int64_t>(members.size()) != m) {
            throw ContractError("grouped_block requires equal-size groups");
        }
    }
    std::vector<std::int64_t> order;
    order.reserve(static_cast<std::size_t>(n * p));
    for (const auto& members : assignment.groups) {
        for (const auto& [v, t] : members) {
            order.push_back(static_cast<std::int64_t>(v) * p + t);
        }
    }

    const bool use_ifs = w.ifs_kernel.defined();
    if (use_ifs && !assignment.ifs_eligible()) {
        throw ContractError("feature signatures require rectangular per-view groups (lga/sga/fra)");
    }

    Tensor normed = layernorm(view_tokens, w.ln1_gain, w.ln1_bias);
    Tensor grouped = reshape(gather_rows(reshape(normed, {n * p, d}), order), {g, m, d});

    Tensor signatures;
    if (use_ifs) {
        const int sr = assignment.subgrid_rows;
        const int sc = assignment.subgrid_cols;
        if (static_cast<std::int64_t>(sr) * sc != m / n) {
            throw ContractError("assignment sub-grid does not match group size per view");
        }
        // phi shares the value projection of this block.
        Tensor v_proj = linear(grouped, w.wv, w.bv);
        signatures = depthwise_grid_conv(reshape(v_proj, {g * n, m / n, d}),
                                         static_cast<int>(g * n), sr, sc, w.ifs_kernel);
        signatures = reshape(signatures, {g, m, d});
    }
    Tensor attn_out = attention_core(grouped, w, use_ifs ? &signatures : nullptr);
    Tensor scattered = reshape(scatter_rows(reshape(attn_out, {g * m, d}), order, n * p), {n, p, d});
    Tensor x = add(view_tokens, scattered);
    return mlp_residual(x, w);
}

}  // namespace lrgt
