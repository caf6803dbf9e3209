#include "lrgt/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace lrgt {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

namespace detail {

void Storage::ensure_grad(std::size_t n) {
    if (grad.size() != n) grad.assign(n, 0.0);
}

void Storage::accumulate(const double* g, std::size_t n) {
    ensure_grad(n);
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
}

}  // namespace detail

// ---- Tensor -----------------------------------------------------------------

static void validate_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("dimension sizes must be positive, got " + shape_str(shape));
    }
}

Tensor Tensor::zeros(Shape shape) {
    validate_shape(shape);
    auto st = std::make_shared<detail::Storage>();
    st->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return wrap(std::move(st), std::move(shape));
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.st_->value.begin(), t.st_->value.end(), v);
    return t;
}

Tensor Tensor::from_data(Shape shape, DVec data) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto st = std::make_shared<detail::Storage>();
    st->value = std::move(data);
    return wrap(std::move(st), std::move(shape));
}

Tensor Tensor::from_data(Shape shape, const std::vector<double>& data) {
    return from_data(std::move(shape), DVec(data.begin(), data.end()));
}

Tensor Tensor::from_data(Shape shape, std::initializer_list<double> data) {
    return from_data(std::move(shape), DVec(data.begin(), data.end()));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::wrap(std::shared_ptr<detail::Storage> st, Shape shape) {
    Tensor t;
    t.st_ = std::move(st);
    t.shape_ = std::move(shape);
    return t;
}

std::int64_t Tensor::dim(int i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim()) throw IndexError("dim index out of range");
    return shape_[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return st_ ? static_cast<std::int64_t>(st_->value.size()) : 0; }

const DVec& Tensor::values() const {
    if (!st_) throw ContractError("values() on empty tensor");
    return st_->value;
}

DVec& Tensor::raw() {
    if (!st_) throw ContractError("raw() on empty tensor");
    return st_->value;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar, shape is " + shape_str(shape_));
    return st_->value[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    if (!st_) throw ContractError("set_requires_grad on empty tensor");
    st_->requires_grad = rg;
    return *this;
}

const DVec& Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return st_->grad;
}

DVec& Tensor::grad_raw() {
    if (!st_) throw ContractError("grad_raw() on empty tensor");
    st_->ensure_grad(st_->value.size());
    return st_->grad;
}

void Tensor::zero_grad() {
    if (st_) st_->grad.clear();
}

Tensor Tensor::reshaped(Shape new_shape) const {
    validate_shape(new_shape);
    if (shape_numel(new_shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
    }
    return wrap(st_, std::move(new_shape));
}

// ---- Tape -------------------------------------------------------------------

namespace {
thread_local Tape* tl_active_tape = nullptr;
thread_local bool tl_in_backward = false;
std::atomic<std::uint64_t> g_tape_epoch{1};
std::atomic<bool> g_nan_check{true};
}  // namespace

Tape::Tape() {
    if (tl_active_tape) throw ContractError("a tape is already active on this thread");
    epoch_ = g_tape_epoch.fetch_add(1) + 1;
    tl_active_tape = this;
}

Tape::~Tape() {
    if (tl_active_tape == this) tl_active_tape = nullptr;
}

Tape* Tape::active() { return tl_in_backward ? nullptr : tl_active_tape; }

void Tape::record(std::string op_name, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(op_name), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
    }
    loss.storage()->grad.assign(1, 1.0);
    tl_in_backward = true;
    try {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    } catch (...) {
        tl_in_backward = false;
        throw;
    }
    tl_in_backward = false;
}

void set_nan_check(bool enabled) { g_nan_check.store(enabled); }
bool nan_check_enabled() { return g_nan_check.load(); }

bool tracked(const Tensor& x) {
    if (!x.defined()) return false;
    if (x.requires_grad()) return true;
    Tape* t = tl_active_tape;
    return t && x.storage()->tape_epoch == t->epoch();
}

// ---- op plumbing ------------------------------------------------------------

namespace {

void nan_scan(const char* op, const DVec& v) {
    if (!g_nan_check.load(std::memory_order_relaxed)) return;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError(std::string("non-finite value produced by op '") + op +
                               "' at flat index " + std::to_string(i));
        }
    }
}

// Finalizes an op result: wraps it, scans for non-finite values, and marks it
// as tape-tracked so a subsequently recorded closure will be reached.
Tensor finish(const char* op, Shape shape, DVec data, bool any_tracked) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    nan_scan(op, out.values());
    Tape* t = Tape::active();
    if (t && any_tracked) out.storage()->tape_epoch = t->epoch();
    return out;
}

const DVec* out_grad(const std::shared_ptr<detail::Storage>& so) {
    return so->grad.empty() ? nullptr : &so->grad;
}

// 0: identical shapes; 1: b broadcasts (suffix of a); 2: a broadcasts.
int broadcast_mode(const Shape& a, const Shape& b, const char* op) {
    auto is_suffix = [](const Shape& small, const Shape& big) {
        if (small.size() > big.size()) return false;
        return std::equal(small.rbegin(), small.rend(), big.rbegin());
    };
    if (a == b) return 0;
    if (is_suffix(b, a)) return 1;
    if (is_suffix(a, b)) return 2;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                     " are not equal and neither is a leading-broadcast suffix of the other");
}

struct BinarySpec {
    double (*f)(double, double);
    double (*dfda)(double, double);
    double (*dfdb)(double, double);
};

Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, const BinarySpec& spec) {
    const int mode = broadcast_mode(a.shape(), b.shape(), op);
    const Tensor& big = (mode == 2) ? b : a;
    const std::size_t n = static_cast<std::size_t>(big.numel());
    const std::size_t na = static_cast<std::size_t>(a.numel());
    const std::size_t nb = static_cast<std::size_t>(b.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    DVec out(n);
    if (mode == 0) {
        for (std::size_t i = 0; i < n; ++i) out[i] = spec.f(av[i], bv[i]);
    } else if (mode == 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = spec.f(av[i], bv[i % nb]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = spec.f(av[i % na], bv[i]);
    }

    const bool ta = tracked(a), tb = tracked(b);
    auto sa = a.storage(), sb = b.storage();
    Tensor out_t = Tensor::from_data(big.shape(), std::move(out));
    nan_scan(op, out_t.values());
    Tape* tape = Tape::active();
    if (tape && (ta || tb)) {
        auto so = out_t.storage();
        so->tape_epoch = tape->epoch();
        tape->record(op, [spec, mode, n, na, nb, ta, tb, sa, sb, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            const auto& av = sa->value;
            const auto& bv = sb->value;
            if (ta) sa->ensure_grad(na);
            if (tb) sb->ensure_grad(nb);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ia = (mode == 2) ? i % na : i;
                const std::size_t ib = (mode == 1) ? i % nb : i;
                if (ta) sa->grad[ia] += (*g)[i] * spec.dfda(av[ia], bv[ib]);
                if (tb) sb->grad[ib] += (*g)[i] * spec.dfdb(av[ia], bv[ib]);
            }
        });
    }
    return out_t;
}

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Raw n-d transpose used by the forward op and, with the inverse permutation,
// by its backward closure.
void permute_kernel(const double* in, double* out, const Shape& in_shape,
                    const std::vector<int>& perm) {
    const int nd = static_cast<int>(in_shape.size());
    const auto in_strides = contiguous_strides(in_shape);
    Shape out_shape(nd);
    std::vector<std::int64_t> step(nd);  // stride in input space per output axis
    for (int d = 0; d < nd; ++d) {
        out_shape[d] = in_shape[static_cast<std::size_t>(perm[d])];
        step[d] = in_strides[static_cast<std::size_t>(perm[d])];
    }
    const std::int64_t n = shape_numel(in_shape);
    if (nd == 0) {
        out[0] = in[0];
        return;
    }
    std::vector<std::int64_t> coord(nd, 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        out[o] = in[src];
        for (int d = nd - 1; d >= 0; --d) {
            if (++coord[d] < out_shape[d]) {
                src += step[d];
                break;
            }
            src -= step[d] * (out_shape[d] - 1);
            coord[d] = 0;
        }
    }
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul requires rank >= 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(-2), ka = a.dim(-1);
    const std::int64_t kb = b.dim(-2), nn = b.dim(-1);
    if (ka != kb) {
        throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    if (!ba.empty() && !bb.empty() && ba != bb) {
        throw ShapeError("matmul batch dimensions must match or be absent: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const Shape& batch = ba.empty() ? bb : ba;
    const std::int64_t nbatch = shape_numel(batch);
    const bool a_bcast = ba.empty() && !bb.empty();
    const bool b_bcast = bb.empty() && !ba.empty();

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(nn);
    DVec out(static_cast<std::size_t>(nbatch * m * nn));
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    for (std::int64_t i = 0; i < nbatch; ++i) {
        ConstMatMap A(ap + (a_bcast ? 0 : i * m * ka), m, ka);
        ConstMatMap B(bp + (b_bcast ? 0 : i * ka * nn), ka, nn);
        MatMap C(out.data() + i * m * nn, m, nn);
        C.noalias() = A * B;
    }

    const bool ta = tracked(a), tb = tracked(b);
    auto sa = a.storage(), sb = b.storage();
    Tensor out_t = finish("matmul", std::move(out_shape), std::move(out), ta || tb);
    Tape* tape = Tape::active();
    if (tape && (ta || tb)) {
        auto so = out_t.storage();
        tape->record("matmul", [m, ka, nn, nbatch, a_bcast, b_bcast, ta, tb, sa, sb, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            const double* gp = g->data();
            if (ta) {
                sa->ensure_grad(sa->value.size());
                for (std::int64_t i = 0; i < nbatch; ++i) {
                    ConstMatMap G(gp + i * m * nn, m, nn);
                    ConstMatMap B(sb->value.data() + (b_bcast ? 0 : i * ka * nn), ka, nn);
                    MatMap dA(sa->grad.data() + (a_bcast ? 0 : i * m * ka), m, ka);
                    dA.noalias() += G * B.transpose();
                }
            }
            if (tb) {
                sb->ensure_grad(sb->value.size());
                for (std::int64_t i = 0; i < nbatch; ++i) {
                    ConstMatMap G(gp + i * m * nn, m, nn);
                    ConstMatMap A(sa->value.data() + (a_bcast ? 0 : i * m * ka), m, ka);
                    MatMap dB(sb->grad.data() + (b_bcast ? 0 : i * ka * nn), ka, nn);
                    dB.noalias() += A.transpose() * G;
                }
            }
        });
    }
    return out_t;
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) {
        throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
    }
    const std::int64_t len = x.shape()[static_cast<std::size_t>(axis)];
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.shape()[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= x.shape()[static_cast<std::size_t>(d)];

    DVec out(static_cast<std::size_t>(x.numel()));
    const double* xp = x.values().data();
    if (inner == 1) {
        for (std::int64_t o = 0; o < outer; ++o) {
            ConstArrMap row(xp + o * len, len);
            ArrMap y(out.data() + o * len, len);
            y = (row - row.maxCoeff()).exp();
            y /= y.sum();
        }
    } else {
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const double* base = xp + o * len * inner + in;
                double mx = base[0];
                for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, base[l * inner]);
                double s = 0.0;
                double* ob = out.data() + o * len * inner + in;
                for (std::int64_t l = 0; l < len; ++l) {
                    ob[l * inner] = std::exp(base[l * inner] - mx);
                    s += ob[l * inner];
                }
                for (std::int64_t l = 0; l < len; ++l) ob[l * inner] /= s;
            }
        }
    }

    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish("softmax", x.shape(), std::move(out), tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        auto so = out_t.storage();
        tape->record("softmax", [outer, len, inner, sx, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(sx->value.size());
            const double* yp = so->value.data();
            const double* gp = g->data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::int64_t l = 0; l < len; ++l) {
                        dot += gp[base + l * inner] * yp[base + l * inner];
                    }
                    for (std::int64_t l = 0; l < len; ++l) {
                        const std::int64_t i = base + l * inner;
                        sx->grad[i] += yp[i] * (gp[i] - dot);
                    }
                }
            }
        });
    }
    return out_t;
}

// ---- layernorm ----------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::int64_t d = x.dim(-1);
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layernorm gain/bias must have " + std::to_string(d) + " elements");
    }
    const std::int64_t rows = x.numel() / d;
    DVec out(static_cast<std::size_t>(x.numel()));
    DVec xhat(static_cast<std::size_t>(x.numel()));
    DVec inv_std(static_cast<std::size_t>(rows));
    const double* xp = x.values().data();
    const double* gp = gain.values().data();
    const double* bp = bias.values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        ConstArrMap row(xp + r * d, d);
        const double mu = row.mean();
        const double var = (row - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        ArrMap xh(xhat.data() + r * d, d);
        xh = (row - mu) * is;
        ArrMap y(out.data() + r * d, d);
        y = xh * ConstArrMap(gp, d) + ConstArrMap(bp, d);
    }

    const bool tx = tracked(x), tg = tracked(gain), tb = tracked(bias);
    auto sx = x.storage(), sg = gain.storage(), sb = bias.storage();
    Tensor out_t = finish("layernorm", x.shape(), std::move(out), tx || tg || tb);
    Tape* tape = Tape::active();
    if (tape && (tx || tg || tb)) {
        auto so = out_t.storage();
        tape->record("layernorm", [rows, d, tx, tg, tb, sx, sg, sb, so, xhat = std::move(xhat),
                                   inv_std = std::move(inv_std)]() {
            const auto* g = out_grad(so);
            if (!g) return;
            const double* gp = g->data();
            const double* gainp = sg->value.data();
            if (tg) sg->ensure_grad(static_cast<std::size_t>(d));
            if (tb) sb->ensure_grad(static_cast<std::size_t>(d));
            if (tx) sx->ensure_grad(sx->value.size());
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = gp + r * d;
                const double* xh = xhat.data() + r * d;
                if (tg) {
                    for (std::int64_t i = 0; i < d; ++i) sg->grad[i] += gy[i] * xh[i];
                }
                if (tb) {
                    for (std::int64_t i = 0; i < d; ++i) sb->grad[i] += gy[i];
                }
                if (tx) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        const double dxh = gy[i] * gainp[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[i];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    const double is = inv_std[static_cast<std::size_t>(r)];
                    double* gx = sx->grad.data() + r * d;
                    for (std::int64_t i = 0; i < d; ++i) {
                        const double dxh = gy[i] * gainp[i];
                        gx[i] += is * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out_t;
}

// ---- conv_transpose3d ---------------------------------------------------------

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (x.ndim() != 4) throw ShapeError("conv_transpose3d input must be [C,S,S,S], got " + shape_str(x.shape()));
    if (w.ndim() != 5) throw ShapeError("conv_transpose3d weight must be [Cin,Cout,k,k,k], got " + shape_str(w.shape()));
    const std::int64_t cin = x.dim(0), s = x.dim(1);
    if (x.dim(2) != s || x.dim(3) != s) throw ShapeError("conv_transpose3d input must be cubic");
    if (w.dim(0) != cin) {
        throw ShapeError("conv_transpose3d channel mismatch: input " + shape_str(x.shape()) +
                         ", weight " + shape_str(w.shape()));
    }
    const std::int64_t cout = w.dim(1), k = w.dim(2);
    if (w.dim(3) != k || w.dim(4) != k) throw ShapeError("conv_transpose3d kernel must be cubic");
    if (stride < 1 || padding < 0) throw ConfigError("conv_transpose3d: stride must be >= 1 and padding >= 0");
    const std::int64_t so = (s - 1) * stride - 2 * static_cast<std::int64_t>(padding) + k;
    if (so < 1) {
        throw ConfigError("conv_transpose3d: output size " + std::to_string(so) +
                          " is not positive for S=" + std::to_string(s) + " k=" + std::to_string(k) +
                          " stride=" + std::to_string(stride) + " padding=" + std::to_string(padding));
    }

    const std::int64_t sv = s * s * s;      // input voxels
    const std::int64_t ov = so * so * so;   // output voxels
    const std::int64_t kk = k * k * k;

    // Gather input to voxel-major [S^3, Cin], run one GEMM against the weight
    // viewed as [Cin, Cout*k^3], then scatter taps into the output volume.
    DVec xg(static_cast<std::size_t>(sv * cin));
    {
        const double* xp = x.values().data();
        for (std::int64_t c = 0; c < cin; ++c) {
            for (std::int64_t v = 0; v < sv; ++v) xg[v * cin + c] = xp[c * sv + v];
        }
    }
    DVec taps(static_cast<std::size_t>(sv * cout * kk));
    {
        ConstMatMap X(xg.data(), sv, cin);
        ConstMatMap W(w.values().data(), cin, cout * kk);
        MatMap T(taps.data(), sv, cout * kk);
        T.noalias() = X * W;
    }
    DVec out(static_cast<std::size_t>(cout * ov), 0.0);
    for (std::int64_t i = 0; i < s; ++i) {
        for (std::int64_t j = 0; j < s; ++j) {
            for (std::int64_t l = 0; l < s; ++l) {
                const std::int64_t v = (i * s + j) * s + l;
                const double* trow = taps.data() + v * cout * kk;
                for (std::int64_t a = 0; a < k; ++a) {
                    const std::int64_t oi = i * stride - padding + a;
                    if (oi < 0 || oi >= so) continue;
                    for (std::int64_t b = 0; b < k; ++b) {
                        const std::int64_t oj = j * stride - padding + b;
                        if (oj < 0 || oj >= so) continue;
                        for (std::int64_t c = 0; c < k; ++c) {
                            const std::int64_t ol = l * stride - padding + c;
                            if (ol < 0 || ol >= so) continue;
                            const std::int64_t o = (oi * so + oj) * so + ol;
                            const std::int64_t t = (a * k + b) * k + c;
                            for (std::int64_t co = 0; co < cout; ++co) {
                                out[co * ov + o] += trow[co * kk + t];
                            }
                        }
                    }
                }
            }
        }
    }

    const bool txx = tracked(x), tw = tracked(w);
    auto sx = x.storage(), sw = w.storage();
    Tensor out_t = finish("conv_transpose3d", Shape{cout, so, so, so}, std::move(out), txx || tw);
    Tape* tape = Tape::active();
    if (tape && (txx || tw)) {
        auto sot = out_t.storage();
        tape->record("conv_transpose3d", [cin, cout, s, so, k, stride, padding, sv, ov, kk, txx, tw,
                                          sx, sw, sot]() {
            const auto* g = out_grad(sot);
            if (!g) return;
            const double* gp = g->data();
            // dT[v, co*kk + t] = dOut[co, o(v, t)]
            DVec dtaps(static_cast<std::size_t>(sv * cout * kk), 0.0);
            for (std::int64_t i = 0; i < s; ++i) {
                for (std::int64_t j = 0; j < s; ++j) {
                    for (std::int64_t l = 0; l < s; ++l) {
                        const std::int64_t v = (i * s + j) * s + l;
                        double* drow = dtaps.data() + v * cout * kk;
                        for (std::int64_t a = 0; a < k; ++a) {
                            const std::int64_t oi = i * stride - padding + a;
                            if (oi < 0 || oi >= so) continue;
                            for (std::int64_t b = 0; b < k; ++b) {
                                const std::int64_t oj = j * stride - padding + b;
                                if (oj < 0 || oj >= so) continue;
                                for (std::int64_t c = 0; c < k; ++c) {
                                    const std::int64_t ol = l * stride - padding + c;
                                    if (ol < 0 || ol >= so) continue;
                                    const std::int64_t o = (oi * so + oj) * so + ol;
                                    const std::int64_t t = (a * k + b) * k + c;
                                    for (std::int64_t co = 0; co < cout; ++co) {
                                        drow[co * kk + t] = gp[co * ov + o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (txx) {
                sx->ensure_grad(sx->value.size());
                DVec dxg(static_cast<std::size_t>(sv * cin));
                ConstMatMap dT(dtaps.data(), sv, cout * kk);
                ConstMatMap W(sw->value.data(), cin, cout * kk);
                MatMap dX(dxg.data(), sv, cin);
                dX.noalias() = dT * W.transpose();
                for (std::int64_t c = 0; c < cin; ++c) {
                    for (std::int64_t v = 0; v < sv; ++v) sx->grad[c * sv + v] += dxg[v * cin + c];
                }
            }
            if (tw) {
                sw->ensure_grad(sw->value.size());
                DVec xg(static_cast<std::size_t>(sv * cin));
                const double* xp = sx->value.data();
                for (std::int64_t c = 0; c < cin; ++c) {
                    for (std::int64_t v = 0; v < sv; ++v) xg[v * cin + c] = xp[c * sv + v];
                }
                ConstMatMap X(xg.data(), sv, cin);
                ConstMatMap dT(dtaps.data(), sv, cout * kk);
                MatMap dW(sw->grad.data(), cin, cout * kk);
                dW.noalias() += X.transpose() * dT;
            }
        });
    }
    return out_t;
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    static const BinarySpec spec{[](double x, double y) { return x + y; },
                                 [](double, double) { return 1.0; },
                                 [](double, double) { return 1.0; }};
    return binary_ew("add", a, b, spec);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    static const BinarySpec spec{[](double x, double y) { return x - y; },
                                 [](double, double) { return 1.0; },
                                 [](double, double) { return -1.0; }};
    return binary_ew("sub", a, b, spec);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    static const BinarySpec spec{[](double x, double y) { return x * y; },
                                 [](double, double y) { return y; },
                                 [](double x, double) { return x; }};
    return binary_ew("mul", a, b, spec);
}

Tensor divide(const Tensor& a, const Tensor& b) {
    static const BinarySpec spec{[](double x, double y) { return x / y; },
                                 [](double, double y) { return 1.0 / y; },
                                 [](double x, double y) { return -x / (y * y); }};
    return binary_ew("div", a, b, spec);
}

namespace {

Tensor affine_unary(const char* op, const Tensor& a, double c, double d) {
    const std::size_t n = static_cast<std::size_t>(a.numel());
    DVec out(n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = c * av[i] + d;
    const bool ta = tracked(a);
    auto sa = a.storage();
    Tensor out_t = finish(op, a.shape(), std::move(out), ta);
    Tape* tape = Tape::active();
    if (tape && ta) {
        auto so = out_t.storage();
        tape->record(op, [c, n, sa, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sa->ensure_grad(n);
            for (std::size_t i = 0; i < n; ++i) sa->grad[i] += c * (*g)[i];
        });
    }
    return out_t;
}

}  // namespace

Tensor scale(const Tensor& a, double c) { return affine_unary("scale", a, c, 0.0); }
Tensor add_const(const Tensor& a, double c) { return affine_unary("add_const", a, 1.0, c); }

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
    // tanh form; the backward differentiates this same approximation so
    // finite-difference checks are exact against it.
    const std::size_t n = static_cast<std::size_t>(x.numel());
    DVec out(n);
    {
        ConstArrMap xv(x.values().data(), static_cast<std::int64_t>(n));
        ArrMap y(out.data(), static_cast<std::int64_t>(n));
        y = 0.5 * xv * (1.0 + (kGeluC * (xv + kGeluA * xv.cube())).tanh());
    }
    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish("gelu", x.shape(), std::move(out), tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        auto so = out_t.storage();
        tape->record("gelu", [n, sx, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(n);
            ConstArrMap xv(sx->value.data(), static_cast<std::int64_t>(n));
            ConstArrMap gv(g->data(), static_cast<std::int64_t>(n));
            Eigen::ArrayXd inner = kGeluC * (xv + kGeluA * xv.cube());
            Eigen::ArrayXd t = inner.tanh();
            Eigen::ArrayXd dt = (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * xv.square());
            ArrMap gx(sx->grad.data(), static_cast<std::int64_t>(n));
            gx += gv * (0.5 * (1.0 + t) + 0.5 * xv * dt);
        });
    }
    return out_t;
}

Tensor sigmoid(const Tensor& x) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    DVec out(n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = xv[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish("sigmoid", x.shape(), std::move(out), tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        auto so = out_t.storage();
        tape->record("sigmoid", [n, sx, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(n);
            const double* yp = so->value.data();
            for (std::size_t i = 0; i < n; ++i) {
                sx->grad[i] += (*g)[i] * yp[i] * (1.0 - yp[i]);
            }
        });
    }
    return out_t;
}

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) { return x.reshaped(std::move(new_shape)); }

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) {
        throw ShapeError("permute: permutation length " + std::to_string(perm.size()) +
                         " does not match rank " + std::to_string(nd));
    }
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (int p : perm) {
        if (p < 0 || p >= nd || seen[static_cast<std::size_t>(p)]) {
            throw IndexError("permute: invalid permutation");
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(nd));
    for (int d = 0; d < nd; ++d) out_shape[static_cast<std::size_t>(d)] = x.dim(perm[static_cast<std::size_t>(d)]);
    DVec out(static_cast<std::size_t>(x.numel()));
    permute_kernel(x.values().data(), out.data(), x.shape(), perm);

    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish("permute", std::move(out_shape), std::move(out), tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        std::vector<int> inv(perm.size());
        for (int d = 0; d < nd; ++d) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])] = d;
        auto so = out_t.storage();
        Shape o_shape = out_t.shape();
        tape->record("permute", [sx, so, inv = std::move(inv), o_shape = std::move(o_shape)]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(sx->value.size());
            DVec tmp(g->size());
            permute_kernel(g->data(), tmp.data(), o_shape, inv);
            for (std::size_t i = 0; i < tmp.size(); ++i) sx->grad[i] += tmp[i];
        });
    }
    return out_t;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const int nd = parts[0].ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("concat axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw ShapeError("concat rank mismatch");
        for (int d = 0; d < nd; ++d) {
            if (d != axis && p.dim(d) != parts[0].dim(d)) {
                throw ShapeError("concat shape mismatch at axis " + std::to_string(d));
            }
        }
        axis_total += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= parts[0].dim(d);
    for (int d = axis + 1; d < nd; ++d) inner *= parts[0].dim(d);

    DVec out(static_cast<std::size_t>(outer * axis_total * inner));
    std::int64_t offset = 0;
    bool any_tracked = false;
    for (const auto& p : parts) {
        const std::int64_t alen = p.dim(axis);
        const double* pp = p.values().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * axis_total + offset) * inner, pp + o * alen * inner,
                        static_cast<std::size_t>(alen * inner) * sizeof(double));
        }
        offset += alen;
        any_tracked = any_tracked || tracked(p);
    }

    std::vector<std::shared_ptr<detail::Storage>> stores;
    std::vector<std::int64_t> alens;
    std::vector<bool> tflags;
    for (const auto& p : parts) {
        stores.push_back(p.storage());
        alens.push_back(p.dim(axis));
        tflags.push_back(tracked(p));
    }
    Tensor out_t = finish("concat", std::move(out_shape), std::move(out), any_tracked);
    Tape* tape = Tape::active();
    if (tape && any_tracked) {
        auto so = out_t.storage();
        tape->record("concat", [outer, inner, axis_total, stores = std::move(stores),
                                alens = std::move(alens), tflags = std::move(tflags), so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            std::int64_t offset = 0;
            for (std::size_t pi = 0; pi < stores.size(); ++pi) {
                const std::int64_t alen = alens[pi];
                if (tflags[pi]) {
                    auto& s = stores[pi];
                    s->ensure_grad(s->value.size());
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = g->data() + (o * axis_total + offset) * inner;
                        double* dst = s->grad.data() + o * alen * inner;
                        for (std::int64_t i = 0; i < alen * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += alen;
            }
        });
    }
    return out_t;
}

// ---- gather / scatter ----------------------------------------------------------

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices) {
    if (x.ndim() < 1) throw ShapeError("gather_rows requires rank >= 1");
    const std::int64_t rows = x.dim(0);
    const std::int64_t rs = x.numel() / rows;  // row size
    for (auto i : indices) {
        if (i < 0 || i >= rows) {
            throw IndexError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(rows) + ")");
        }
    }
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<std::int64_t>(indices.size());
    DVec out(static_cast<std::size_t>(out_shape[0] * rs));
    const double* xp = x.values().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(out.data() + static_cast<std::int64_t>(i) * rs, xp + indices[i] * rs,
                    static_cast<std::size_t>(rs) * sizeof(double));
    }
    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish("gather_rows", std::move(out_shape), std::move(out), tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        auto so = out_t.storage();
        tape->record("gather_rows", [rs, sx, so, indices]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(sx->value.size());
            for (std::size_t i = 0; i < indices.size(); ++i) {
                const double* src = g->data() + static_cast<std::int64_t>(i) * rs;
                double* dst = sx->grad.data() + indices[i] * rs;
                for (std::int64_t j = 0; j < rs; ++j) dst[j] += src[j];
            }
        });
    }
    return out_t;
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices,
                    std::int64_t out_rows) {
    if (x.ndim() < 1) throw ShapeError("scatter_rows requires rank >= 1");
    const std::int64_t rows = x.dim(0);
    if (static_cast<std::int64_t>(indices.size()) != rows) {
        throw ShapeError("scatter_rows: need one index per input row");
    }
    const std::int64_t rs = x.numel() / rows;
    std::vector<bool> used(static_cast<std::size_t>(out_rows), false);
    for (auto i : indices) {
        if (i < 0 || i >= out_rows) {
            throw IndexError("scatter_rows: index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(out_rows) + ")");
        }
        if (used[static_cast<std::size_t>(i)]) {
            throw IndexError("scatter_rows: duplicate index " + std::to_string(i) +
                             " (indices must be unique)");
        }
        used[static_cast<std::size_t>(i)] = true;
    }
    Shape out_shape = x.shape();
    out_shape[0] = out_rows;
    DVec out(static_cast<std::size_t>(out_rows * rs), 0.0);
    const double* xp = x.values().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(out.data() + indices[i] * rs, xp + static_cast<std::int64_t>(i) * rs,
                    static_cast<std::size_t>(rs) * sizeof(double));
    }
    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish("scatter_rows", std::move(out_shape), std::move(out), tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        auto so = out_t.storage();
        tape->record("scatter_rows", [rs, sx, so, indices]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(sx->value.size());
            for (std::size_t i = 0; i < indices.size(); ++i) {
                const double* src = g->data() + indices[i] * rs;
                double* dst = sx->grad.data() + static_cast<std::int64_t>(i) * rs;
                for (std::int64_t j = 0; j < rs; ++j) dst[j] += src[j];
            }
        });
    }
    return out_t;
}

// ---- reductions ----------------------------------------------------------------

namespace {

Tensor full_reduce(const char* op, const Tensor& x, bool average) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double denom = average ? static_cast<double>(n) : 1.0;
    const bool tx = tracked(x);
    auto sx = x.storage();
    Tensor out_t = finish(op, Shape{1}, {acc / denom}, tx);
    Tape* tape = Tape::active();
    if (tape && tx) {
        auto so = out_t.storage();
        tape->record(op, [n, denom, sx, so]() {
            const auto* g = out_grad(so);
            if (!g) return;
            sx->ensure_grad(n);
            const double gv = (*g)[0] / denom;
            for (std::size_t i = 0; i < n; ++i) sx->grad[i] += gv;
        });
    }
    return out_t;
}

}  // namespace

Tensor sum(const Tensor& x) { return full_reduce("sum", x, false); }
Tensor mean(const Tensor& x) { return full_reduce("mean", x, true); }

}  // namespace lrgt
