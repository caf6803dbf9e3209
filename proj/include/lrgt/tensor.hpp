#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "lrgt/errors.hpp"

namespace lrgt {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// All tensor buffers are 64-byte aligned. SIMD code paths (Eigen's packet
// peeling in particular) round differently for differently-aligned pointers;
// fixing the alignment makes every forward pass bit-reproducible regardless
// of heap history.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}

    T* allocate(std::size_t n) {
        const std::size_t bytes = (n * sizeof(T) + Align - 1) / Align * Align;
        void* p = std::aligned_alloc(Align, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) { std::free(p); }

    template <typename U>
    bool operator==(const AlignedAllocator<U, Align>&) const {
        return true;
    }
};

using DVec = std::vector<double, AlignedAllocator<double>>;

namespace detail {

// Value + gradient buffers. Shared between tensors that alias the same data
// (reshape); the gradient therefore aliases too, which is exactly what a
// shape-only view needs.
struct Storage {
    DVec value;
    DVec grad;  // empty until backward touches it
    bool requires_grad = false;
    std::uint64_t tape_epoch = 0;  // epoch of the tape whose op produced this

    void accumulate(const double* g, std::size_t n);
    void ensure_grad(std::size_t n);
};

}  // namespace detail

// Dense row-major tensor of doubles. Cheap to copy (shared storage).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_data(Shape shape, DVec data);
    static Tensor from_data(Shape shape, const std::vector<double>& data);
    static Tensor from_data(Shape shape, std::initializer_list<double> data);
    static Tensor scalar(double v);

    bool defined() const { return st_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const;
    std::int64_t numel() const;

    const DVec& values() const;
    // Mutable access to the raw buffer; intended for initialization and
    // in-place optimizer updates, not for tensors participating in a live tape.
    DVec& raw();
    double item() const;

    bool requires_grad() const { return st_ && st_->requires_grad; }
    Tensor& set_requires_grad(bool rg);
    bool has_grad() const { return st_ && !st_->grad.empty(); }
    const DVec& grad() const;
    DVec& grad_raw();
    void zero_grad();

    // Shares storage; no tape node is needed because gradients alias as well.
    Tensor reshaped(Shape new_shape) const;

    std::shared_ptr<detail::Storage> storage() const { return st_; }

    static Tensor wrap(std::shared_ptr<detail::Storage> st, Shape shape);

private:
    std::shared_ptr<detail::Storage> st_;
    Shape shape_;
};

// Reverse-mode tape. Construct one per forward pass (RAII: active while
// alive, one per thread); every differentiable op records a backward closure.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // d(loss)/d(leaf) for every requires_grad leaf reachable from loss.
    // loss must be scalar. Each recorded node is visited exactly once, in
    // reverse construction order.
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t epoch() const { return epoch_; }

    // Extension point (also used by tests to model corrupted backward rules).
    void record(std::string op_name, std::function<void()> backward_fn);

    static Tape* active();

private:
    struct Node {
        std::string name;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
    std::uint64_t epoch_ = 0;
};

// When enabled (default), every op scans its output and throws NumericError
// naming the op if a non-finite value appears.
void set_nan_check(bool enabled);
bool nan_check_enabled();

// True if x should be tracked by the active tape.
bool tracked(const Tensor& x);

// ---- operations ------------------------------------------------------------
// All ops record gradient rules when a tape is active and any input is
// tracked. Binary ops broadcast over leading dimensions only: the smaller
// shape must be a suffix of the larger one.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// x: [C_in, S, S, S], w: [C_in, C_out, k, k, k] -> [C_out, S', S', S'],
// S' = (S - 1) * stride - 2 * padding + k.
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, int stride, int padding);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// out[i, ...] = x[indices[i], ...]
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices);
// out[indices[i], ...] = x[i, ...]; indices must be unique (a permutation
// when out_rows == x rows). Unfilled rows are zero.
Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices,
                    std::int64_t out_rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace lrgt
