#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "common.hpp"

namespace ab {

// Dense row-major tensor with reverse-mode autodiff. Two element types are
// supported at runtime: f32 for training/attacks, f64 for gradient checks.
// Tensors are immutable after creation except for their grad buffer; the
// graph is recorded onto the currently active Tape (one per thread).

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }
inline size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

class Tape;

namespace detail {

struct TensorData {
    std::vector<size_t> shape;
    Dtype dtype = Dtype::F32;
    std::vector<float> f32;
    std::vector<double> f64;
    bool requires_grad = false;
    std::vector<float> grad_f32;   // allocated on demand, same extent as data
    std::vector<double> grad_f64;
    Tape* tape = nullptr;  // tape that produced this tensor; null for leaves

    size_t numel() const {
        size_t n = 1;
        for (size_t e : shape) n *= e;
        return n;
    }

    template <class T> std::vector<T>& store();
    template <class T> const std::vector<T>& store() const;
    template <class T> std::vector<T>& grad_store();
    template <class T> const std::vector<T>& grad_store() const;

    bool grad_allocated() const { return !grad_f32.empty() || !grad_f64.empty(); }
    void ensure_grad();
    void zero_grad();
};

template <> inline std::vector<float>& TensorData::store<float>() { return f32; }
template <> inline std::vector<double>& TensorData::store<double>() { return f64; }
template <> inline const std::vector<float>& TensorData::store<float>() const { return f32; }
template <> inline const std::vector<double>& TensorData::store<double>() const { return f64; }
template <> inline std::vector<float>& TensorData::grad_store<float>() { return grad_f32; }
template <> inline std::vector<double>& TensorData::grad_store<double>() { return grad_f64; }
template <> inline const std::vector<float>& TensorData::grad_store<float>() const { return grad_f32; }
template <> inline const std::vector<double>& TensorData::grad_store<double>() const { return grad_f64; }

}  // namespace detail

class Tensor {
public:
    Tensor() = default;  // null handle

    static Tensor zeros(std::vector<size_t> shape, Dtype dtype = Dtype::F32,
                        bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, double value, Dtype dtype = Dtype::F32,
                       bool requires_grad = false);
    static Tensor scalar(double value, Dtype dtype = Dtype::F32);
    static Tensor from(std::vector<size_t> shape, std::span<const double> values,
                       Dtype dtype = Dtype::F32, bool requires_grad = false);
    static Tensor from(std::vector<size_t> shape, std::initializer_list<double> values,
                       Dtype dtype = Dtype::F32, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<size_t>& shape() const { return d_->shape; }
    size_t rank() const { return d_->shape.size(); }
    size_t numel() const { return d_->numel(); }
    size_t extent(size_t axis) const { return d_->shape.at(axis); }
    Dtype dtype() const { return d_->dtype; }
    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }
    Tape* tape() const { return d_->tape; }

    template <class T> std::span<T> data() { return d_->store<T>(); }
    template <class T> std::span<const T> data() const { return d_->store<T>(); }

    // Dtype-erased element access; handy in glue code and tests.
    double at(size_t flat_index) const;
    void set(size_t flat_index, double value);

    bool grad_allocated() const { return d_->grad_allocated(); }
    void ensure_grad() { d_->ensure_grad(); }
    void zero_grad() { d_->zero_grad(); }
    template <class T> std::span<T> grad() { return d_->grad_store<T>(); }
    template <class T> std::span<const T> grad() const { return d_->grad_store<T>(); }
    double grad_at(size_t flat_index) const;

    // Deep copy of the values (no grad, no tape).
    Tensor clone(bool requires_grad = false) const;
    // Value-preserving dtype conversion; result is a fresh leaf.
    Tensor to(Dtype dtype) const;
    std::vector<double> to_doubles() const;

    // Identity comparison (same underlying buffer).
    bool same_data(const Tensor& other) const { return d_ == other.d_; }

    detail::TensorData* impl() const { return d_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<detail::TensorData> d_;

    friend Tensor make_tensor_like(const std::vector<size_t>&, Dtype);
};

Tensor make_tensor_like(const std::vector<size_t>& shape, Dtype dtype);

// ---------------------------------------------------------------------------
// Tape: ordered record of applied primitives. Constructing a Tape makes it the
// active tape for the current thread (stack discipline, RAII); ops record a
// backward step when any input requires grad. backward() replays the steps in
// exact reverse application order and may run once per reset().

class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Tensor& loss);
    void reset();
    bool consumed() const { return consumed_; }
    size_t recorded_ops() const { return steps_.size(); }

    static Tape* active();
    void record(std::function<void()> step);

private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
    Tape* previous_ = nullptr;
};

// ---------------------------------------------------------------------------
// Primitive ops. All ops validate shapes, reject non-finite results, and are
// differentiable w.r.t. every floating input unless noted.

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding);
Tensor maxpool2d(const Tensor& input, int window, int stride);
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class EwKind { Relu, Exp, Log, Neg, Add, Sub, Mul, Div, Square };

Tensor elementwise(EwKind kind, const Tensor& a);                    // unary kinds
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b);   // binary kinds

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor softmax_lastdim(const Tensor& a);
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int64_t> labels);
Tensor sum(const Tensor& a);                       // -> scalar
Tensor global_avg_pool(const Tensor& input);       // [N,C,H,W] -> [N,C]
Tensor reshape(const Tensor& a, std::vector<size_t> new_shape);

// ANFIS primitives (log-domain Gaussian firing and first-order TSK mixing).
// log_firing[n,r] = -1/2 * sum_j ((x[n,j]-centers[r,j]) * exp(-log_widths[r,j]))^2
Tensor log_firing_strengths(const Tensor& features, const Tensor& centers,
                            const Tensor& log_widths);
// logits[n,k] = sum_r normalized[n,r] * (sum_j w[r,k,j]*x[n,j] + b[r,k])
Tensor tsk_combine(const Tensor& normalized, const Tensor& features, const Tensor& w,
                   const Tensor& b);

// ---------------------------------------------------------------------------
// Versioned binary serialization: "FTNS", u32 version, u8 dtype, u32 rank,
// u64 extents, raw little-endian data.

void write_tensor(std::vector<uint8_t>& out, const Tensor& t);
Tensor read_tensor(ByteReader& in);
std::vector<uint8_t> tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(std::span<const uint8_t> bytes);

namespace detail {

// Helpers shared by op implementations (anfis.cpp adds its own primitives).
Tensor op_result(std::vector<size_t> shape, Dtype dtype,
                 std::initializer_list<const Tensor*> inputs);
void check_finite(const Tensor& t, const char* op_name);
std::string shape_str(const std::vector<size_t>& shape);

template <class F>
auto dispatch(Dtype dt, F&& f) {
    if (dt == Dtype::F32) return f(float{});
    return f(double{});
}

}  // namespace detail

}  // namespace ab
