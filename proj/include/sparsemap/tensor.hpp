#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace sparsemap {

// Dense 64-bit float tensor participating in reverse-mode differentiation.
// Copying a Tensor copies the handle; value and grad storage are shared.
class Tensor {
public:
    struct Data {
        std::vector<std::size_t> shape;
        std::vector<double> value;
        std::vector<double> grad; // same length as value once grad is required
        bool requires_grad = false;
    };

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    // Validates that every entry is finite.
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> value);
    static Tensor scalar(double v);

    // Marks this tensor as a differentiable leaf and allocates its grad buffer.
    Tensor& set_requires_grad(bool on = true);

    bool defined() const { return d_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t size() const { return d_->value.size(); }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    const std::vector<double>& value() const { return d_->value; }
    std::vector<double>& value() { return d_->value; }
    const std::vector<double>& grad() const { return d_->grad; }
    std::vector<double>& grad() { return d_->grad; }
    bool requires_grad() const { return d_ && d_->requires_grad; }

    double at(std::size_t i) const { return d_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return d_->value[r * cols() + c]; }
    double item() const; // scalar tensors only

    void zero_grad();
    // Value-only copy, no grad history. The stop-gradient primitive.
    Tensor detach() const;
    void check_finite(const char* where) const;

    std::shared_ptr<Data> ptr() const { return d_; }

private:
    std::shared_ptr<Data> d_;
    static Tensor make(std::vector<std::size_t> shape);
    friend Tensor make_op_output(std::vector<std::size_t> shape, bool requires_grad);
};

// Ordered record of executed operations. Ops append themselves in execution
// order, so entries are always topologically sorted; backward() replays them
// exactly once in reverse. One tape per thread is active at a time (RAII
// scope); a tape must never be shared across threads.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from loss. Single use per tape.
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return true; }

    static Tape* active();
    static void record(std::function<void()> backward_fn);

private:
    std::vector<std::function<void()>> nodes_;
    Tape* prev_ = nullptr;
    bool consumed_ = false;
};

// Thread-local multiply-accumulate counter, incremented by the matmul family.
// The sparse-expert layer reads deltas around expert evaluation to assert the
// T*K compute bound.
std::uint64_t mac_count();
void add_macs(std::uint64_t n);

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);    // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // [m,k]x[n,k]^T -> [m,n]
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scaled(const Tensor& a, const Tensor& b, double c); // a + c*b

Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);
// Accumulates rows into a fresh [out_rows, cols] tensor; duplicate indices add.
Tensor scatter_add_rows(const Tensor& rows, const std::vector<std::size_t>& idx, std::size_t out_rows);
// Per-row column gather: out[t,k] = a[t, idx[t*k_count+k]]. Gradient flows only
// into the gathered entries (hard top-k mask).
Tensor gather_cols_per_row(const Tensor& a, const std::vector<std::size_t>& idx, std::size_t k_count);

Tensor scale_rows(const Tensor& a, const Tensor& s); // s: [rows] or [rows,1]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& a);  // -> scalar
Tensor mean(const Tensor& a); // -> scalar
Tensor mean_axis0(const Tensor& a); // [r,c] -> [c]

// 3x3 window unfold over a row-major HxW grid stored as [(H*W), C];
// out is [(H*W), 9*C], zero-padded at the border. Backward is the fold.
Tensor unfold3x3(const Tensor& x, std::size_t grid_h, std::size_t grid_w);

} // namespace sparsemap
