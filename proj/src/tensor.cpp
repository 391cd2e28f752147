#include "sparsemap/tensor.hpp"

#include "sparsemap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

namespace sparsemap {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_mac_count = 0;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) {
        if (s == 0) throw ShapeError("tensor dimension must be positive");
        n *= s;
    }
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch");
}

void require_rank2(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw ShapeError(std::string(op) + ": rank-2 tensor required");
}

#ifdef SPARSEMAP_CHECK_FINITE
constexpr bool kCheckOps = true;
#else
constexpr bool kCheckOps = false;
#endif

// dst[m,n] += A[m,k] * B[k,n]
void mm_nn_acc(const double* a, const double* b, double* dst, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* drow = dst + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * brow[j];
        }
    }
    g_mac_count += static_cast<std::uint64_t>(m) * k * n;
}

// dst[m,n] += A[m,k] * B[n,k]^T
void mm_nt_acc(const double* a, const double* b, double* dst, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* drow = dst + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            drow[j] += acc;
        }
    }
    g_mac_count += static_cast<std::uint64_t>(m) * k * n;
}

// dst[k,n] += A[m,k]^T * B[m,n]
void mm_tn_acc(const double* a, const double* b, double* dst, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* drow = dst + p * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * brow[j];
        }
    }
    g_mac_count += static_cast<std::uint64_t>(m) * k * n;
}

} // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::make(std::vector<std::size_t> shape) {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(shape_product(t.d_->shape), 0.0);
    return t;
}

Tensor make_op_output(std::vector<std::size_t> shape, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return make(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t = make(std::move(shape));
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> value) {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    if (shape_product(t.d_->shape) != value.size())
        throw ShapeError("from_data: shape does not match value length");
    t.d_->value = std::move(value);
    t.check_finite("from_data");
    return t;
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor& Tensor::set_requires_grad(bool on) {
    d_->requires_grad = on;
    if (on && d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), 0.0);
    return *this;
}

std::size_t Tensor::rows() const {
    require_rank2(*this, "rows");
    return d_->shape[0];
}

std::size_t Tensor::cols() const {
    require_rank2(*this, "cols");
    return d_->shape[1];
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor is not scalar");
    return d_->value[0];
}

void Tensor::zero_grad() {
    if (d_ && d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    return t;
}

void Tensor::check_finite(const char* where) const {
    for (double v : d_->value)
        if (!std::isfinite(v)) throw NumericError(std::string(where) + ": non-finite value");
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
    if (g_active_tape) g_active_tape->nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
    if (!loss.requires_grad()) throw ContractError("backward: loss is not on the tape");
    if (consumed_) throw ContractError("backward: tape already consumed");
    consumed_ = true;
    loss.ptr()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

std::uint64_t mac_count() { return g_mac_count; }
void add_macs(std::uint64_t n) { g_mac_count += n; }

// ---- op helpers ------------------------------------------------------------

namespace {

bool want_grad(const Tensor& a) { return Tape::active() && a.requires_grad(); }
bool want_grad(const Tensor& a, const Tensor& b) {
    return Tape::active() && (a.requires_grad() || b.requires_grad());
}

Tensor finish(Tensor out, const char* where) {
    if constexpr (kCheckOps) out.check_finite(where);
    return out;
}

} // namespace

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) throw ShapeError("matmul: inner dimensions differ");
    Tensor out = make_op_output({m, n}, want_grad(a, b));
    mm_nn_acc(a.value().data(), b.value().data(), out.value().data(), m, k, n);
    if (out.requires_grad()) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::record([ad, bd, od, m, k, n] {
            if (ad->requires_grad) mm_nt_acc(od->grad.data(), bd->value.data(), ad->grad.data(), m, n, k);
            if (bd->requires_grad) mm_tn_acc(ad->value.data(), od->grad.data(), bd->grad.data(), m, k, n);
        });
    }
    return finish(out, "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k) throw ShapeError("matmul_nt: inner dimensions differ");
    Tensor out = make_op_output({m, n}, want_grad(a, b));
    mm_nt_acc(a.value().data(), b.value().data(), out.value().data(), m, k, n);
    if (out.requires_grad()) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::record([ad, bd, od, m, k, n] {
            if (ad->requires_grad) mm_nn_acc(od->grad.data(), bd->value.data(), ad->grad.data(), m, n, k);
            if (bd->requires_grad) mm_tn_acc(od->grad.data(), ad->value.data(), bd->grad.data(), m, n, k);
        });
    }
    return finish(out, "matmul_nt");
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor out = make_op_output({c, r}, want_grad(a));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.value()[j * r + i] = a.value()[i * c + j];
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, r, c] {
            if (!ad->requires_grad) return;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ad->grad[i * c + j] += od->grad[j * r + i];
        });
    }
    return out;
}

// ---- elementwise binary ------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, name);
    Tensor out = make_op_output(a.shape(), want_grad(a, b));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = fwd(a.value()[i], b.value()[i]);
    if (out.requires_grad()) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::record([ad, bd, od, n, bwd] {
            for (std::size_t i = 0; i < n; ++i) {
                const double g = od->grad[i];
                if (g == 0.0) continue;
                auto [da, db] = bwd(ad->value[i], bd->value[i]);
                if (ad->requires_grad) ad->grad[i] += g * da;
                if (bd->requires_grad) bd->grad[i] += g * db;
            }
        });
    }
    return finish(out, name);
}

struct Pair { double first, second; };

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double) { return Pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double) { return Pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double x, double y) { return Pair{y, x}; });
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double c) {
    return binary_op(a, b, "add_scaled", [c](double x, double y) { return x + c * y; },
                     [c](double, double) { return Pair{1.0, c}; });
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = make_op_output(a.shape(), want_grad(a));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = c * a.value()[i];
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, n, c] {
            for (std::size_t i = 0; i < n; ++i) ad->grad[i] += c * od->grad[i];
        });
    }
    return finish(out, "scale");
}

// ---- elementwise unary -------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    Tensor out = make_op_output(a.shape(), want_grad(a));
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = fwd(a.value()[i]);
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, n, bwd] {
            for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * bwd(ad->value[i], od->value[i]);
        });
    }
    return finish(out, name);
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, "sigmoid", sigmoid_scalar,
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
    return unary_op(a, "silu", [](double x) { return x * sigmoid_scalar(x); },
                    [](double x, double) {
                        const double s = sigmoid_scalar(x);
                        return s * (1.0 + x * (1.0 - s));
                    });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor log(const Tensor& a) {
    return unary_op(a, "log", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, "exp", [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

// ---- structure ops -----------------------------------------------------------

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank2(a, "concat_cols");
    require_rank2(b, "concat_cols");
    if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
    const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor out = make_op_output({r, ca + cb}, want_grad(a, b));
    for (std::size_t i = 0; i < r; ++i) {
        std::memcpy(out.value().data() + i * (ca + cb), a.value().data() + i * ca, ca * sizeof(double));
        std::memcpy(out.value().data() + i * (ca + cb) + ca, b.value().data() + i * cb, cb * sizeof(double));
    }
    if (out.requires_grad()) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape::record([ad, bd, od, r, ca, cb] {
            for (std::size_t i = 0; i < r; ++i) {
                const double* g = od->grad.data() + i * (ca + cb);
                if (ad->requires_grad)
                    for (std::size_t j = 0; j < ca; ++j) ad->grad[i * ca + j] += g[j];
                if (bd->requires_grad)
                    for (std::size_t j = 0; j < cb; ++j) bd->grad[i * cb + j] += g[ca + j];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    require_rank2(a, "slice_rows");
    if (r0 >= r1 || r1 > a.rows()) throw IndexError("slice_rows: bad range");
    const std::size_t c = a.cols(), nr = r1 - r0;
    Tensor out = make_op_output({nr, c}, want_grad(a));
    std::memcpy(out.value().data(), a.value().data() + r0 * c, nr * c * sizeof(double));
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, r0, nr, c] {
            for (std::size_t i = 0; i < nr * c; ++i) ad->grad[r0 * c + i] += od->grad[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    require_rank2(a, "slice_cols");
    if (c0 >= c1 || c1 > a.cols()) throw IndexError("slice_cols: bad range");
    const std::size_t r = a.rows(), c = a.cols(), nc = c1 - c0;
    Tensor out = make_op_output({r, nc}, want_grad(a));
    for (std::size_t i = 0; i < r; ++i)
        std::memcpy(out.value().data() + i * nc, a.value().data() + i * c + c0, nc * sizeof(double));
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, r, c, c0, nc] {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < nc; ++j) ad->grad[i * c + c0 + j] += od->grad[i * nc + j];
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    require_rank2(a, "gather_rows");
    const std::size_t c = a.cols(), r = a.rows();
    for (std::size_t i : idx)
        if (i >= r) throw IndexError("gather_rows: row index out of bounds");
    Tensor out = make_op_output({idx.size(), c}, want_grad(a));
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::memcpy(out.value().data() + i * c, a.value().data() + idx[i] * c, c * sizeof(double));
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, idx, c] {
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) ad->grad[idx[i] * c + j] += od->grad[i * c + j];
        });
    }
    return out;
}

Tensor scatter_add_rows(const Tensor& rows, const std::vector<std::size_t>& idx, std::size_t out_rows) {
    require_rank2(rows, "scatter_add_rows");
    if (idx.size() != rows.rows()) throw ShapeError("scatter_add_rows: index count != row count");
    const std::size_t c = rows.cols();
    for (std::size_t i : idx)
        if (i >= out_rows) throw IndexError("scatter_add_rows: row index out of bounds");
    Tensor out = make_op_output({out_rows, c}, want_grad(rows));
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) out.value()[idx[i] * c + j] += rows.value()[i * c + j];
    if (out.requires_grad()) {
        auto rd = rows.ptr();
        auto od = out.ptr();
        Tape::record([rd, od, idx, c] {
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) rd->grad[i * c + j] += od->grad[idx[i] * c + j];
        });
    }
    return out;
}

Tensor gather_cols_per_row(const Tensor& a, const std::vector<std::size_t>& idx, std::size_t k_count) {
    require_rank2(a, "gather_cols_per_row");
    const std::size_t r = a.rows(), c = a.cols();
    if (idx.size() != r * k_count) throw ShapeError("gather_cols_per_row: index size != rows*k");
    for (std::size_t i : idx)
        if (i >= c) throw IndexError("gather_cols_per_row: column index out of bounds");
    Tensor out = make_op_output({r, k_count}, want_grad(a));
    for (std::size_t t = 0; t < r; ++t)
        for (std::size_t k = 0; k < k_count; ++k) out.value()[t * k_count + k] = a.value()[t * c + idx[t * k_count + k]];
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od, idx, k_count, c] {
            const std::size_t r2 = od->shape[0];
            for (std::size_t t = 0; t < r2; ++t)
                for (std::size_t k = 0; k < k_count; ++k)
                    ad->grad[t * c + idx[t * k_count + k]] += od->grad[t * k_count + k];
        });
    }
    return out;
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
    require_rank2(a, "scale_rows");
    const std::size_t r = a.rows(), c = a.cols();
    if (s.size() != r) throw ShapeError("scale_rows: scale length != row count");
    Tensor out = make_op_output({r, c}, want_grad(a, s));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.value()[i * c + j] = a.value()[i * c + j] * s.value()[i];
    if (out.requires_grad()) {
        auto ad = a.ptr(), sd = s.ptr(), od = out.ptr();
        Tape::record([ad, sd, od, r, c] {
            for (std::size_t i = 0; i < r; ++i) {
                const double sv = sd->value[i];
                double srow = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double g = od->grad[i * c + j];
                    if (ad->requires_grad) ad->grad[i * c + j] += g * sv;
                    srow += g * ad->value[i * c + j];
                }
                if (sd->requires_grad) sd->grad[i] += srow;
            }
        });
    }
    return finish(out, "scale_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank2(x, "layer_norm");
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.size() != c || bias.size() != c) throw ShapeError("layer_norm: affine parameter length != cols");
    Tensor out = make_op_output({r, c}, want_grad(x, gain) || want_grad(bias));
    std::vector<double> inv_std(r), mu(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x.value().data() + i * c;
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += xr[j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        mu[i] = m;
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j)
            out.value()[i * c + j] = (xr[j] - m) * is * gain.value()[j] + bias.value()[j];
    }
    if (out.requires_grad()) {
        auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
        Tape::record([xd, gd, bd, od, r, c, mu, inv_std] {
            for (std::size_t i = 0; i < r; ++i) {
                const double* xr = xd->value.data() + i * c;
                const double* go = od->grad.data() + i * c;
                const double is = inv_std[i], m = mu[i];
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xhat = (xr[j] - m) * is;
                    const double dxhat = go[j] * gd->value[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gd->requires_grad) gd->grad[j] += go[j] * xhat;
                    if (bd->requires_grad) bd->grad[j] += go[j];
                }
                if (xd->requires_grad) {
                    const double n = static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double xhat = (xr[j] - m) * is;
                        const double dxhat = go[j] * gd->value[j];
                        xd->grad[i * c + j] += is * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        });
    }
    return finish(out, "layer_norm");
}

Tensor softmax(const Tensor& x, int axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw ShapeError("softmax: axis out of range for rank-1 tensor");
    } else if (x.rank() == 2) {
        if (axis != 0 && axis != 1) throw ShapeError("softmax: axis out of range");
    } else {
        throw ShapeError("softmax: rank-1 or rank-2 tensor required");
    }
    const bool row_wise = (x.rank() == 1) || (axis == 1);
    const std::size_t vecs = (x.rank() == 1) ? 1 : (row_wise ? x.rows() : x.cols());
    const std::size_t len = (x.rank() == 1) ? x.size() : (row_wise ? x.cols() : x.rows());
    const std::size_t vstride = row_wise ? ((x.rank() == 1) ? 0 : len) : 1;
    const std::size_t estride = row_wise ? 1 : x.cols();

    Tensor out = make_op_output(x.shape(), want_grad(x));
    for (std::size_t v = 0; v < vecs; ++v) {
        const double* src = x.value().data() + v * (row_wise ? vstride : 1);
        double* dst = out.value().data() + v * (row_wise ? vstride : 1);
        double mx = src[0];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, src[j * estride]);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            const double e = std::exp(src[j * estride] - mx);
            dst[j * estride] = e;
            z += e;
        }
        for (std::size_t j = 0; j < len; ++j) dst[j * estride] /= z;
    }
    if (out.requires_grad()) {
        auto xd = x.ptr();
        auto od = out.ptr();
        Tape::record([xd, od, vecs, len, vstride, estride, row_wise] {
            for (std::size_t v = 0; v < vecs; ++v) {
                const std::size_t base = v * (row_wise ? vstride : 1);
                double dotp = 0.0;
                for (std::size_t j = 0; j < len; ++j)
                    dotp += od->grad[base + j * estride] * od->value[base + j * estride];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t k = base + j * estride;
                    xd->grad[k] += od->value[k] * (od->grad[k] - dotp);
                }
            }
        });
    }
    return finish(out, "softmax");
}

Tensor sum(const Tensor& a) {
    Tensor out = make_op_output({1}, want_grad(a));
    out.value()[0] = std::accumulate(a.value().begin(), a.value().end(), 0.0);
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        Tape::record([ad, od] {
            const double g = od->grad[0];
            for (double& v : ad->grad) v += g;
        });
    }
    return finish(out, "sum");
}

Tensor mean(const Tensor& a) {
    Tensor out = make_op_output({1}, want_grad(a));
    out.value()[0] = std::accumulate(a.value().begin(), a.value().end(), 0.0) / static_cast<double>(a.size());
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        const double inv_n = 1.0 / static_cast<double>(a.size());
        Tape::record([ad, od, inv_n] {
            const double g = od->grad[0] * inv_n;
            for (double& v : ad->grad) v += g;
        });
    }
    return finish(out, "mean");
}

Tensor mean_axis0(const Tensor& a) {
    require_rank2(a, "mean_axis0");
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out = make_op_output({c}, want_grad(a));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.value()[j] += a.value()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out.value()[j] /= static_cast<double>(r);
    if (out.requires_grad()) {
        auto ad = a.ptr();
        auto od = out.ptr();
        const double inv_r = 1.0 / static_cast<double>(r);
        Tape::record([ad, od, r, c, inv_r] {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ad->grad[i * c + j] += od->grad[j] * inv_r;
        });
    }
    return finish(out, "mean_axis0");
}

Tensor unfold3x3(const Tensor& x, std::size_t grid_h, std::size_t grid_w) {
    require_rank2(x, "unfold3x3");
    if (x.rows() != grid_h * grid_w) throw ShapeError("unfold3x3: rows != grid_h*grid_w");
    const std::size_t c = x.cols();
    Tensor out = make_op_output({grid_h * grid_w, 9 * c}, want_grad(x));
    for (std::size_t r = 0; r < grid_h; ++r) {
        for (std::size_t q = 0; q < grid_w; ++q) {
            double* dst = out.value().data() + (r * grid_w + q) * 9 * c;
            std::size_t w = 0;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dq = -1; dq <= 1; ++dq, ++w) {
                    const long rr = static_cast<long>(r) + dr, qq = static_cast<long>(q) + dq;
                    if (rr < 0 || qq < 0 || rr >= static_cast<long>(grid_h) || qq >= static_cast<long>(grid_w))
                        continue; // zero padding
                    const double* src = x.value().data() + (static_cast<std::size_t>(rr) * grid_w + qq) * c;
                    std::memcpy(dst + w * c, src, c * sizeof(double));
                }
            }
        }
    }
    if (out.requires_grad()) {
        auto xd = x.ptr();
        auto od = out.ptr();
        Tape::record([xd, od, grid_h, grid_w, c] {
            for (std::size_t r = 0; r < grid_h; ++r) {
                for (std::size_t q = 0; q < grid_w; ++q) {
                    const double* g = od->grad.data() + (r * grid_w + q) * 9 * c;
                    std::size_t w = 0;
                    for (int dr = -1; dr <= 1; ++dr) {
                        for (int dq = -1; dq <= 1; ++dq, ++w) {
                            const long rr = static_cast<long>(r) + dr, qq = static_cast<long>(q) + dq;
                            if (rr < 0 || qq < 0 || rr >= static_cast<long>(grid_h) || qq >= static_cast<long>(grid_w))
                                continue;
                            double* dst = xd->grad.data() + (static_cast<std::size_t>(rr) * grid_w + qq) * c;
                            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += g[w * c + ch];
                        }
                    }
                }
            }
        });
    }
    return out;
}

} // namespace sparsemap
