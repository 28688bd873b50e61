#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ab {

namespace detail {

void TensorData::ensure_grad() {
    if (grad_allocated()) return;
    if (dtype == Dtype::F32)
        grad_f32.assign(numel(), 0.0f);
    else
        grad_f64.assign(numel(), 0.0);
}

void TensorData::zero_grad() {
    std::fill(grad_f32.begin(), grad_f32.end(), 0.0f);
    std::fill(grad_f64.begin(), grad_f64.end(), 0.0);
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

}  // namespace detail

using detail::dispatch;
using detail::shape_str;

// --------------------------------------------------------------------------
// construction / access

Tensor make_tensor_like(const std::vector<size_t>& shape, Dtype dtype) {
    auto d = std::make_shared<detail::TensorData>();
    d->shape = shape;
    d->dtype = dtype;
    if (dtype == Dtype::F32)
        d->f32.assign(d->numel(), 0.0f);
    else
        d->f64.assign(d->numel(), 0.0);
    return Tensor(std::move(d));
}

Tensor Tensor::zeros(std::vector<size_t> shape, Dtype dtype, bool requires_grad) {
    Tensor t = make_tensor_like(shape, dtype);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<size_t> shape, double value, Dtype dtype, bool requires_grad) {
    Tensor t = zeros(std::move(shape), dtype, requires_grad);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto s = t.data<T>();
        std::fill(s.begin(), s.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) { return full({1}, value, dtype); }

Tensor Tensor::from(std::vector<size_t> shape, std::span<const double> values, Dtype dtype,
                    bool requires_grad) {
    Tensor t = zeros(std::move(shape), dtype, requires_grad);
    if (t.numel() != values.size())
        fail(ErrorKind::ShapeMismatch,
             "tensor shape " + shape_str(t.shape()) + " expects " + std::to_string(t.numel()) +
                 " values, got " + std::to_string(values.size()));
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto s = t.data<T>();
        for (size_t i = 0; i < values.size(); ++i) s[i] = static_cast<T>(values[i]);
    });
    return t;
}

Tensor Tensor::from(std::vector<size_t> shape, std::initializer_list<double> values, Dtype dtype,
                    bool requires_grad) {
    return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype,
                requires_grad);
}

double Tensor::at(size_t i) const {
    if (i >= numel()) fail(ErrorKind::InvalidArgument, "tensor index out of range");
    return d_->dtype == Dtype::F32 ? static_cast<double>(d_->f32[i]) : d_->f64[i];
}

void Tensor::set(size_t i, double v) {
    if (i >= numel()) fail(ErrorKind::InvalidArgument, "tensor index out of range");
    if (d_->dtype == Dtype::F32)
        d_->f32[i] = static_cast<float>(v);
    else
        d_->f64[i] = v;
}

double Tensor::grad_at(size_t i) const {
    if (!grad_allocated()) fail(ErrorKind::InvalidArgument, "gradient not allocated");
    if (i >= numel()) fail(ErrorKind::InvalidArgument, "tensor index out of range");
    return d_->dtype == Dtype::F32 ? static_cast<double>(d_->grad_f32[i]) : d_->grad_f64[i];
}

Tensor Tensor::clone(bool requires_grad) const {
    Tensor t = make_tensor_like(d_->shape, d_->dtype);
    t.d_->f32 = d_->f32;
    t.d_->f64 = d_->f64;
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::to(Dtype dtype) const {
    if (dtype == d_->dtype) return clone(false);
    Tensor t = make_tensor_like(d_->shape, dtype);
    if (dtype == Dtype::F64) {
        for (size_t i = 0; i < numel(); ++i) t.d_->f64[i] = static_cast<double>(d_->f32[i]);
    } else {
        for (size_t i = 0; i < numel(); ++i) t.d_->f32[i] = static_cast<float>(d_->f64[i]);
    }
    return t;
}

std::vector<double> Tensor::to_doubles() const {
    std::vector<double> out(numel());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = d_->dtype == Dtype::F32 ? static_cast<double>(d_->f32[i]) : d_->f64[i];
    return out;
}

// --------------------------------------------------------------------------
// tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> step) { steps_.push_back(std::move(step)); }

void Tape::reset() {
    steps_.clear();
    consumed_ = false;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined()) fail(ErrorKind::InvalidArgument, "backward: loss tensor is null");
    if (loss.numel() != 1)
        fail(ErrorKind::InvalidArgument,
             "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (loss.tape() != this)
        fail(ErrorKind::InvalidArgument, "backward: loss was not recorded on this tape");
    if (consumed_)
        fail(ErrorKind::InvalidArgument, "backward called twice on the same tape without reset");
    consumed_ = true;
    const_cast<Tensor&>(loss).ensure_grad();
    if (loss.dtype() == Dtype::F32)
        loss.impl()->grad_f32[0] = 1.0f;
    else
        loss.impl()->grad_f64[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

// --------------------------------------------------------------------------
// op plumbing

namespace detail {

void check_finite(const Tensor& t, const char* op_name) {
    dispatch(t.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto s = t.data<T>();
        for (size_t i = 0; i < s.size(); ++i)
            if (!std::isfinite(s[i]))
                fail(ErrorKind::NonFinite, std::string(op_name) + " produced a non-finite value at index " +
                                               std::to_string(i));
    });
}

// Validates inputs and decides whether this op records onto the active tape.
struct OpSetup {
    bool recording = false;
    Tape* tape = nullptr;
    Dtype dtype = Dtype::F32;
};

OpSetup begin_op(const char* op_name, std::initializer_list<const Tensor*> inputs) {
    OpSetup s;
    bool any_grad = false;
    bool first = true;
    for (const Tensor* t : inputs) {
        if (!t->defined()) fail(ErrorKind::InvalidArgument, std::string(op_name) + ": null tensor argument");
        if (t->numel() == 0)
            fail(ErrorKind::ShapeMismatch, std::string(op_name) + ": zero-extent input " +
                                               shape_str(t->shape()));
        if (first) {
            s.dtype = t->dtype();
            first = false;
        } else if (t->dtype() != s.dtype) {
            fail(ErrorKind::InvalidArgument, std::string(op_name) + ": mixed dtypes (" +
                                                 dtype_name(s.dtype) + " vs " +
                                                 dtype_name(t->dtype()) + ")");
        }
        any_grad = any_grad || t->requires_grad();
    }
    s.tape = Tape::active();
    s.recording = any_grad && s.tape != nullptr;
    return s;
}

// Marks the result as produced by this tape and pre-allocates grad buffers so
// backward closures can always read/accumulate them.
void finish_op(const OpSetup& s, Tensor& result, std::initializer_list<Tensor*> grad_inputs,
               std::function<void()> backward_step) {
    if (!s.recording) return;
    result.set_requires_grad(true);
    result.impl()->tape = s.tape;
    result.ensure_grad();
    for (Tensor* t : grad_inputs)
        if (t->requires_grad()) t->ensure_grad();
    s.tape->record(std::move(backward_step));
}

}  // namespace detail

using detail::begin_op;
using detail::check_finite;
using detail::finish_op;
using detail::OpSetup;

// --------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
    OpSetup s = begin_op("conv2d", {&input, &kernel, &bias});
    if (input.rank() != 4 || kernel.rank() != 4 || bias.rank() != 1)
        fail(ErrorKind::ShapeMismatch, "conv2d expects input[N,C,H,W], kernel[F,C,kH,kW], bias[F]; got " +
                                           shape_str(input.shape()) + ", " + shape_str(kernel.shape()) +
                                           ", " + shape_str(bias.shape()));
    const size_t N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
    const size_t F = kernel.extent(0), kC = kernel.extent(1), kH = kernel.extent(2),
                 kW = kernel.extent(3);
    if (kC != C)
        fail(ErrorKind::ShapeMismatch, "conv2d channel mismatch: input has " + std::to_string(C) +
                                           ", kernel expects " + std::to_string(kC));
    if (bias.extent(0) != F)
        fail(ErrorKind::ShapeMismatch, "conv2d bias extent " + std::to_string(bias.extent(0)) +
                                           " != filter count " + std::to_string(F));
    if (stride < 1) fail(ErrorKind::InvalidArgument, "conv2d stride must be >= 1");
    if (padding < 0) fail(ErrorKind::InvalidArgument, "conv2d padding must be >= 0");
    if (kH > H + 2 * static_cast<size_t>(padding) || kW > W + 2 * static_cast<size_t>(padding))
        fail(ErrorKind::ShapeMismatch, "conv2d kernel " + shape_str(kernel.shape()) +
                                           " larger than padded input " + shape_str(input.shape()));
    const size_t OH = (H + 2 * padding - kH) / stride + 1;
    const size_t OW = (W + 2 * padding - kW) / stride + 1;

    Tensor out = make_tensor_like({N, F, OH, OW}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* in = input.data<T>().data();
        const T* ker = kernel.data<T>().data();
        const T* b = bias.data<T>().data();
        T* o = out.data<T>().data();
        const int istride = stride, ipad = padding;
        for (size_t n = 0; n < N; ++n)
            for (size_t f = 0; f < F; ++f)
                for (size_t oh = 0; oh < OH; ++oh) {
                    const int ih0 = static_cast<int>(oh) * istride - ipad;
                    const int khlo = std::max(0, -ih0);
                    const int khhi = std::min<int>(kH, static_cast<int>(H) - ih0);
                    for (size_t ow = 0; ow < OW; ++ow) {
                        const int iw0 = static_cast<int>(ow) * istride - ipad;
                        const int kwlo = std::max(0, -iw0);
                        const int kwhi = std::min<int>(kW, static_cast<int>(W) - iw0);
                        T acc = b[f];
                        for (size_t c = 0; c < C; ++c) {
                            const T* in_c = in + ((n * C + c) * H) * W;
                            const T* k_c = ker + ((f * C + c) * kH) * kW;
                            for (int kh = khlo; kh < khhi; ++kh) {
                                const T* in_row = in_c + (ih0 + kh) * W + iw0;
                                const T* k_row = k_c + kh * kW;
                                T a = 0;
                                for (int kw = kwlo; kw < kwhi; ++kw) a += in_row[kw] * k_row[kw];
                                acc += a;
                            }
                        }
                        o[((n * F + f) * OH + oh) * OW + ow] = acc;
                    }
                }
    });
    check_finite(out, "conv2d");

    Tensor in_t = input, ker_t = kernel, bias_t = bias;
    finish_op(s, out, {&in_t, &ker_t, &bias_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* in = in_t.data<T>().data();
            const T* ker = ker_t.data<T>().data();
            T* din = in_t.requires_grad() ? in_t.grad<T>().data() : nullptr;
            T* dker = ker_t.requires_grad() ? ker_t.grad<T>().data() : nullptr;
            T* dbias = bias_t.requires_grad() ? bias_t.grad<T>().data() : nullptr;
            for (size_t n = 0; n < N; ++n)
                for (size_t f = 0; f < F; ++f)
                    for (size_t oh = 0; oh < OH; ++oh) {
                        const int ih0 = static_cast<int>(oh) * stride - padding;
                        const int khlo = std::max(0, -ih0);
                        const int khhi = std::min<int>(kH, static_cast<int>(H) - ih0);
                        for (size_t ow = 0; ow < OW; ++ow) {
                            const T gv = g[((n * F + f) * OH + oh) * OW + ow];
                            if (gv == T(0)) continue;
                            const int iw0 = static_cast<int>(ow) * stride - padding;
                            const int kwlo = std::max(0, -iw0);
                            const int kwhi = std::min<int>(kW, static_cast<int>(W) - iw0);
                            if (dbias) dbias[f] += gv;
                            for (size_t c = 0; c < C; ++c) {
                                const T* in_c = in + ((n * C + c) * H) * W;
                                const T* k_c = ker + ((f * C + c) * kH) * kW;
                                T* din_c = din ? din + ((n * C + c) * H) * W : nullptr;
                                T* dk_c = dker ? dker + ((f * C + c) * kH) * kW : nullptr;
                                for (int kh = khlo; kh < khhi; ++kh) {
                                    const size_t row = (ih0 + kh) * W + iw0;
                                    const T* in_row = in_c + row;
                                    if (dk_c) {
                                        T* dk_row = dk_c + kh * kW;
                                        for (int kw = kwlo; kw < kwhi; ++kw)
                                            dk_row[kw] += gv * in_row[kw];
                                    }
                                    if (din_c) {
                                        const T* k_row = k_c + kh * kW;
                                        T* din_row = din_c + row;
                                        for (int kw = kwlo; kw < kwhi; ++kw)
                                            din_row[kw] += gv * k_row[kw];
                                    }
                                }
                            }
                        }
                    }
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// maxpool2d

Tensor maxpool2d(const Tensor& input, int window, int stride) {
    OpSetup s = begin_op("maxpool2d", {&input});
    if (input.rank() != 4)
        fail(ErrorKind::ShapeMismatch,
             "maxpool2d expects input[N,C,H,W], got " + shape_str(input.shape()));
    if (window < 1 || stride < 1)
        fail(ErrorKind::InvalidArgument, "maxpool2d window and stride must be >= 1");
    const size_t N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
    if (static_cast<size_t>(window) > H || static_cast<size_t>(window) > W)
        fail(ErrorKind::ShapeMismatch, "maxpool2d window " + std::to_string(window) +
                                           " larger than input " + shape_str(input.shape()));
    const size_t OH = (H - window) / stride + 1;
    const size_t OW = (W - window) / stride + 1;

    Tensor out = make_tensor_like({N, C, OH, OW}, s.dtype);
    // Argmax indices (flat, into the input) for gradient routing; ties go to
    // the first cell in row-major window order.
    auto argmax = std::make_shared<std::vector<size_t>>(out.numel());
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* in = input.data<T>().data();
        T* o = out.data<T>().data();
        size_t oi = 0;
        for (size_t n = 0; n < N; ++n)
            for (size_t c = 0; c < C; ++c) {
                const T* in_c = in + ((n * C + c) * H) * W;
                const size_t base = ((n * C + c) * H) * W;
                for (size_t oh = 0; oh < OH; ++oh)
                    for (size_t ow = 0; ow < OW; ++ow, ++oi) {
                        const size_t ih0 = oh * stride, iw0 = ow * stride;
                        T best = in_c[ih0 * W + iw0];
                        size_t best_idx = ih0 * W + iw0;
                        for (int kh = 0; kh < window; ++kh)
                            for (int kw = 0; kw < window; ++kw) {
                                const size_t idx = (ih0 + kh) * W + (iw0 + kw);
                                if (in_c[idx] > best) {
                                    best = in_c[idx];
                                    best_idx = idx;
                                }
                            }
                        o[oi] = best;
                        (*argmax)[oi] = base + best_idx;
                    }
            }
    });
    check_finite(out, "maxpool2d");

    Tensor in_t = input;
    finish_op(s, out, {&in_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            T* din = in_t.grad<T>().data();
            for (size_t i = 0; i < argmax->size(); ++i) din[(*argmax)[i]] += g[i];
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// linear

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    OpSetup s = begin_op("linear", {&input, &weight, &bias});
    if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1)
        fail(ErrorKind::ShapeMismatch, "linear expects input[N,D], weight[K,D], bias[K]; got " +
                                           shape_str(input.shape()) + ", " + shape_str(weight.shape()) +
                                           ", " + shape_str(bias.shape()));
    const size_t N = input.extent(0), D = input.extent(1);
    const size_t K = weight.extent(0);
    if (weight.extent(1) != D)
        fail(ErrorKind::ShapeMismatch, "linear inner dimension mismatch: input D=" + std::to_string(D) +
                                           ", weight D=" + std::to_string(weight.extent(1)));
    if (bias.extent(0) != K)
        fail(ErrorKind::ShapeMismatch, "linear bias extent " + std::to_string(bias.extent(0)) +
                                           " != output dim " + std::to_string(K));

    Tensor out = make_tensor_like({N, K}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* in = input.data<T>().data();
        const T* w = weight.data<T>().data();
        const T* b = bias.data<T>().data();
        T* o = out.data<T>().data();
        for (size_t n = 0; n < N; ++n) {
            const T* x = in + n * D;
            for (size_t k = 0; k < K; ++k) {
                const T* wr = w + k * D;
                T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                size_t d = 0;
                for (; d + 4 <= D; d += 4) {
                    a0 += x[d] * wr[d];
                    a1 += x[d + 1] * wr[d + 1];
                    a2 += x[d + 2] * wr[d + 2];
                    a3 += x[d + 3] * wr[d + 3];
                }
                T acc = (a0 + a1) + (a2 + a3);
                for (; d < D; ++d) acc += x[d] * wr[d];
                o[n * K + k] = acc + b[k];
            }
        }
    });
    check_finite(out, "linear");

    Tensor in_t = input, w_t = weight, b_t = bias;
    finish_op(s, out, {&in_t, &w_t, &b_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* in = in_t.data<T>().data();
            const T* w = w_t.data<T>().data();
            T* din = in_t.requires_grad() ? in_t.grad<T>().data() : nullptr;
            T* dw = w_t.requires_grad() ? w_t.grad<T>().data() : nullptr;
            T* db = b_t.requires_grad() ? b_t.grad<T>().data() : nullptr;
            for (size_t n = 0; n < N; ++n)
                for (size_t k = 0; k < K; ++k) {
                    const T gv = g[n * K + k];
                    if (gv == T(0)) continue;
                    if (db) db[k] += gv;
                    if (dw) {
                        const T* x = in + n * D;
                        T* dwr = dw + k * D;
                        for (size_t d = 0; d < D; ++d) dwr[d] += gv * x[d];
                    }
                    if (din) {
                        const T* wr = w + k * D;
                        T* dx = din + n * D;
                        for (size_t d = 0; d < D; ++d) dx[d] += gv * wr[d];
                    }
                }
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// elementwise

namespace {

const char* ew_name(EwKind k) {
    switch (k) {
        case EwKind::Relu: return "relu";
        case EwKind::Exp: return "exp";
        case EwKind::Log: return "log";
        case EwKind::Neg: return "neg";
        case EwKind::Add: return "add";
        case EwKind::Sub: return "sub";
        case EwKind::Mul: return "mul";
        case EwKind::Div: return "div";
        case EwKind::Square: return "square";
    }
    return "?";
}

bool ew_is_unary(EwKind k) {
    return k == EwKind::Relu || k == EwKind::Exp || k == EwKind::Log || k == EwKind::Neg ||
           k == EwKind::Square;
}

}  // namespace

Tensor elementwise(EwKind kind, const Tensor& a) {
    if (!ew_is_unary(kind))
        fail(ErrorKind::InvalidArgument, std::string("elementwise: ") + ew_name(kind) +
                                             " is binary, one argument given");
    OpSetup s = begin_op(ew_name(kind), {&a});
    Tensor out = make_tensor_like(a.shape(), s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto o = out.data<T>();
        switch (kind) {
            case EwKind::Relu:
                for (size_t i = 0; i < x.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
                break;
            case EwKind::Exp:
                for (size_t i = 0; i < x.size(); ++i) o[i] = std::exp(x[i]);
                break;
            case EwKind::Log:
                for (size_t i = 0; i < x.size(); ++i) {
                    if (x[i] <= T(0))
                        fail(ErrorKind::Domain,
                             "log of non-positive input at index " + std::to_string(i));
                    o[i] = std::log(x[i]);
                }
                break;
            case EwKind::Neg:
                for (size_t i = 0; i < x.size(); ++i) o[i] = -x[i];
                break;
            case EwKind::Square:
                for (size_t i = 0; i < x.size(); ++i) o[i] = x[i] * x[i];
                break;
            default: break;
        }
    });
    check_finite(out, ew_name(kind));

    Tensor a_t = a;
    finish_op(s, out, {&a_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* x = a_t.data<T>().data();
            const T* y = out.data<T>().data();
            T* da = a_t.grad<T>().data();
            const size_t n = a_t.numel();
            switch (kind) {
                case EwKind::Relu:
                    for (size_t i = 0; i < n; ++i) da[i] += x[i] > T(0) ? g[i] : T(0);
                    break;
                case EwKind::Exp:
                    for (size_t i = 0; i < n; ++i) da[i] += g[i] * y[i];
                    break;
                case EwKind::Log:
                    for (size_t i = 0; i < n; ++i) da[i] += g[i] / x[i];
                    break;
                case EwKind::Neg:
                    for (size_t i = 0; i < n; ++i) da[i] -= g[i];
                    break;
                case EwKind::Square:
                    for (size_t i = 0; i < n; ++i) da[i] += g[i] * T(2) * x[i];
                    break;
                default: break;
            }
        });
    });
    return out;
}

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b) {
    if (ew_is_unary(kind))
        fail(ErrorKind::InvalidArgument, std::string("elementwise: ") + ew_name(kind) +
                                             " is unary, two arguments given");
    OpSetup s = begin_op(ew_name(kind), {&a, &b});
    // Broadcasting is restricted to scalar-with-tensor and exact-shape.
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        fail(ErrorKind::ShapeMismatch, std::string(ew_name(kind)) + ": shape mismatch " +
                                           shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const Tensor& big = a_scalar ? b : a;
    Tensor out = make_tensor_like(big.shape(), s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        auto xa = a.data<T>();
        auto xb = b.data<T>();
        auto o = out.data<T>();
        const size_t n = o.size();
        auto ai = [&](size_t i) { return a_scalar ? xa[0] : xa[i]; };
        auto bi = [&](size_t i) { return b_scalar ? xb[0] : xb[i]; };
        switch (kind) {
            case EwKind::Add:
                for (size_t i = 0; i < n; ++i) o[i] = ai(i) + bi(i);
                break;
            case EwKind::Sub:
                for (size_t i = 0; i < n; ++i) o[i] = ai(i) - bi(i);
                break;
            case EwKind::Mul:
                for (size_t i = 0; i < n; ++i) o[i] = ai(i) * bi(i);
                break;
            case EwKind::Div:
                for (size_t i = 0; i < n; ++i) {
                    if (bi(i) == T(0))
                        fail(ErrorKind::Domain, "div by zero at index " + std::to_string(i));
                    o[i] = ai(i) / bi(i);
                }
                break;
            default: break;
        }
    });
    check_finite(out, ew_name(kind));

    Tensor a_t = a, b_t = b;
    finish_op(s, out, {&a_t, &b_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* xa = a_t.data<T>().data();
            const T* xb = b_t.data<T>().data();
            T* da = a_t.requires_grad() ? a_t.grad<T>().data() : nullptr;
            T* db = b_t.requires_grad() ? b_t.grad<T>().data() : nullptr;
            const size_t n = out.numel();
            auto av = [&](size_t i) { return a_scalar ? xa[0] : xa[i]; };
            auto bv = [&](size_t i) { return b_scalar ? xb[0] : xb[i]; };
            auto acc_a = [&](size_t i, T v) { da[a_scalar ? 0 : i] += v; };
            auto acc_b = [&](size_t i, T v) { db[b_scalar ? 0 : i] += v; };
            switch (kind) {
                case EwKind::Add:
                    for (size_t i = 0; i < n; ++i) {
                        if (da) acc_a(i, g[i]);
                        if (db) acc_b(i, g[i]);
                    }
                    break;
                case EwKind::Sub:
                    for (size_t i = 0; i < n; ++i) {
                        if (da) acc_a(i, g[i]);
                        if (db) acc_b(i, -g[i]);
                    }
                    break;
                case EwKind::Mul:
                    for (size_t i = 0; i < n; ++i) {
                        if (da) acc_a(i, g[i] * bv(i));
                        if (db) acc_b(i, g[i] * av(i));
                    }
                    break;
                case EwKind::Div:
                    for (size_t i = 0; i < n; ++i) {
                        if (da) acc_a(i, g[i] / bv(i));
                        if (db) acc_b(i, -g[i] * av(i) / (bv(i) * bv(i)));
                    }
                    break;
                default: break;
            }
        });
    });
    return out;
}

Tensor relu(const Tensor& a) { return elementwise(EwKind::Relu, a); }
Tensor exp(const Tensor& a) { return elementwise(EwKind::Exp, a); }
Tensor log(const Tensor& a) { return elementwise(EwKind::Log, a); }
Tensor neg(const Tensor& a) { return elementwise(EwKind::Neg, a); }
Tensor square(const Tensor& a) { return elementwise(EwKind::Square, a); }
Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Div, a, b); }

Tensor add_scalar(const Tensor& a, double sc) {
    return elementwise(EwKind::Add, a, Tensor::scalar(sc, a.dtype()));
}

Tensor mul_scalar(const Tensor& a, double sc) {
    return elementwise(EwKind::Mul, a, Tensor::scalar(sc, a.dtype()));
}

// --------------------------------------------------------------------------
// softmax over the last axis (stable)

Tensor softmax_lastdim(const Tensor& a) {
    OpSetup s = begin_op("softmax", {&a});
    if (a.rank() < 1)
        fail(ErrorKind::ShapeMismatch, "softmax expects rank >= 1");
    const size_t R = a.extent(a.rank() - 1);
    const size_t rows = a.numel() / R;
    Tensor out = make_tensor_like(a.shape(), s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* x = a.data<T>().data();
        T* y = out.data<T>().data();
        for (size_t r = 0; r < rows; ++r) {
            const T* xr = x + r * R;
            T* yr = y + r * R;
            T m = xr[0];
            for (size_t i = 1; i < R; ++i) m = std::max(m, xr[i]);
            T total = 0;
            for (size_t i = 0; i < R; ++i) {
                yr[i] = std::exp(xr[i] - m);
                total += yr[i];
            }
            for (size_t i = 0; i < R; ++i) yr[i] /= total;
        }
    });
    check_finite(out, "softmax");

    Tensor a_t = a;
    finish_op(s, out, {&a_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* y = out.data<T>().data();
            T* da = a_t.grad<T>().data();
            for (size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * R;
                const T* yr = y + r * R;
                T dot = 0;
                for (size_t i = 0; i < R; ++i) dot += gr[i] * yr[i];
                T* dr = da + r * R;
                for (size_t i = 0; i < R; ++i) dr[i] += yr[i] * (gr[i] - dot);
            }
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// softmax cross-entropy (fused, mean over batch)

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int64_t> labels) {
    OpSetup s = begin_op("softmax_cross_entropy", {&logits});
    if (logits.rank() != 2)
        fail(ErrorKind::ShapeMismatch,
             "softmax_cross_entropy expects logits[N,K], got " + shape_str(logits.shape()));
    const size_t N = logits.extent(0), K = logits.extent(1);
    if (labels.size() != N)
        fail(ErrorKind::ShapeMismatch, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                           " labels for batch of " + std::to_string(N));
    for (size_t n = 0; n < N; ++n)
        if (labels[n] < 0 || static_cast<size_t>(labels[n]) >= K)
            fail(ErrorKind::Domain, "label " + std::to_string(labels[n]) + " out of range [0," +
                                        std::to_string(K) + ") at sample " + std::to_string(n));

    Tensor out = make_tensor_like({1}, s.dtype);
    // Softmax probabilities saved for the backward pass.
    Tensor probs = make_tensor_like({N, K}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* x = logits.data<T>().data();
        T* p = probs.data<T>().data();
        double loss = 0.0;
        for (size_t n = 0; n < N; ++n) {
            const T* xr = x + n * K;
            T* pr = p + n * K;
            T m = xr[0];
            for (size_t k = 1; k < K; ++k) m = std::max(m, xr[k]);
            T total = 0;
            for (size_t k = 0; k < K; ++k) {
                pr[k] = std::exp(xr[k] - m);
                total += pr[k];
            }
            for (size_t k = 0; k < K; ++k) pr[k] /= total;
            // -log softmax[label] = logsumexp - logit[label] = m + log(total) - logit[label]
            loss += static_cast<double>(m) + std::log(static_cast<double>(total)) -
                    static_cast<double>(xr[labels[n]]);
        }
        out.data<T>()[0] = static_cast<T>(loss / static_cast<double>(N));
    });
    check_finite(out, "softmax_cross_entropy");

    std::vector<int64_t> labels_copy(labels.begin(), labels.end());
    Tensor logits_t = logits;
    finish_op(s, out, {&logits_t}, [=, labels = std::move(labels_copy)]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T gscale = out.grad<T>()[0];
            const T* p = probs.data<T>().data();
            T* dl = logits_t.grad<T>().data();
            const T invn = T(1) / static_cast<T>(N);
            for (size_t n = 0; n < N; ++n)
                for (size_t k = 0; k < K; ++k) {
                    T v = p[n * K + k];
                    if (static_cast<size_t>(labels[n]) == k) v -= T(1);
                    dl[n * K + k] += gscale * v * invn;
                }
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// reductions and shape ops

Tensor sum(const Tensor& a) {
    OpSetup s = begin_op("sum", {&a});
    Tensor out = make_tensor_like({1}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        T acc = 0;
        for (size_t i = 0; i < x.size(); ++i) acc += x[i];
        out.data<T>()[0] = acc;
    });
    check_finite(out, "sum");

    Tensor a_t = a;
    finish_op(s, out, {&a_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T g = out.grad<T>()[0];
            T* da = a_t.grad<T>().data();
            for (size_t i = 0; i < a_t.numel(); ++i) da[i] += g;
        });
    });
    return out;
}

Tensor global_avg_pool(const Tensor& input) {
    OpSetup s = begin_op("global_avg_pool", {&input});
    if (input.rank() != 4)
        fail(ErrorKind::ShapeMismatch,
             "global_avg_pool expects input[N,C,H,W], got " + shape_str(input.shape()));
    const size_t N = input.extent(0), C = input.extent(1), H = input.extent(2),
                 W = input.extent(3);
    Tensor out = make_tensor_like({N, C}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* x = input.data<T>().data();
        T* o = out.data<T>().data();
        const T scale = T(1) / static_cast<T>(H * W);
        for (size_t nc = 0; nc < N * C; ++nc) {
            const T* plane = x + nc * H * W;
            T acc = 0;
            for (size_t i = 0; i < H * W; ++i) acc += plane[i];
            o[nc] = acc * scale;
        }
    });
    check_finite(out, "global_avg_pool");

    Tensor in_t = input;
    finish_op(s, out, {&in_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            T* din = in_t.grad<T>().data();
            const T scale = T(1) / static_cast<T>(H * W);
            for (size_t nc = 0; nc < N * C; ++nc) {
                const T gv = g[nc] * scale;
                T* plane = din + nc * H * W;
                for (size_t i = 0; i < H * W; ++i) plane[i] += gv;
            }
        });
    });
    return out;
}

Tensor reshape(const Tensor& a, std::vector<size_t> new_shape) {
    OpSetup s = begin_op("reshape", {&a});
    size_t n = 1;
    for (size_t e : new_shape) n *= e;
    if (n != a.numel())
        fail(ErrorKind::ShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " +
                                           shape_str(new_shape) + " changes element count");
    Tensor out = make_tensor_like(new_shape, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto o = out.data<T>();
        std::copy(x.begin(), x.end(), o.begin());
    });

    Tensor a_t = a;
    finish_op(s, out, {&a_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            T* da = a_t.grad<T>().data();
            for (size_t i = 0; i < a_t.numel(); ++i) da[i] += g[i];
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// ANFIS primitives

Tensor log_firing_strengths(const Tensor& features, const Tensor& centers,
                            const Tensor& log_widths) {
    OpSetup s = begin_op("log_firing_strengths", {&features, &centers, &log_widths});
    if (features.rank() != 2 || centers.rank() != 2 || log_widths.rank() != 2)
        fail(ErrorKind::ShapeMismatch,
             "log_firing_strengths expects features[N,D], centers[R,D], log_widths[R,D]");
    const size_t N = features.extent(0), D = features.extent(1);
    const size_t R = centers.extent(0);
    if (centers.extent(1) != D || log_widths.extent(0) != R || log_widths.extent(1) != D)
        fail(ErrorKind::ShapeMismatch, "log_firing_strengths dimension mismatch: features " +
                                           shape_str(features.shape()) + ", centers " +
                                           shape_str(centers.shape()) + ", log_widths " +
                                           shape_str(log_widths.shape()));

    Tensor out = make_tensor_like({N, R}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* x = features.data<T>().data();
        const T* c = centers.data<T>().data();
        const T* lw = log_widths.data<T>().data();
        T* o = out.data<T>().data();
        // 1/sigma precomputed once per call; exp dominates otherwise.
        std::vector<T> inv_sigma(R * D);
        for (size_t i = 0; i < R * D; ++i) inv_sigma[i] = std::exp(-lw[i]);
        for (size_t n = 0; n < N; ++n) {
            const T* xr = x + n * D;
            for (size_t r = 0; r < R; ++r) {
                const T* cr = c + r * D;
                const T* ir = inv_sigma.data() + r * D;
                T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                size_t j = 0;
                for (; j + 4 <= D; j += 4) {
                    T z0 = (xr[j] - cr[j]) * ir[j];
                    T z1 = (xr[j + 1] - cr[j + 1]) * ir[j + 1];
                    T z2 = (xr[j + 2] - cr[j + 2]) * ir[j + 2];
                    T z3 = (xr[j + 3] - cr[j + 3]) * ir[j + 3];
                    a0 += z0 * z0;
                    a1 += z1 * z1;
                    a2 += z2 * z2;
                    a3 += z3 * z3;
                }
                T acc = (a0 + a1) + (a2 + a3);
                for (; j < D; ++j) {
                    T z = (xr[j] - cr[j]) * ir[j];
                    acc += z * z;
                }
                o[n * R + r] = T(-0.5) * acc;
            }
        }
    });
    check_finite(out, "log_firing_strengths");

    Tensor x_t = features, c_t = centers, lw_t = log_widths;
    finish_op(s, out, {&x_t, &c_t, &lw_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* x = x_t.data<T>().data();
            const T* c = c_t.data<T>().data();
            const T* lw = lw_t.data<T>().data();
            T* dx = x_t.requires_grad() ? x_t.grad<T>().data() : nullptr;
            T* dc = c_t.requires_grad() ? c_t.grad<T>().data() : nullptr;
            T* dlw = lw_t.requires_grad() ? lw_t.grad<T>().data() : nullptr;
            std::vector<T> inv_sigma(R * D);
            for (size_t i = 0; i < R * D; ++i) inv_sigma[i] = std::exp(-lw[i]);
            for (size_t n = 0; n < N; ++n) {
                const T* xr = x + n * D;
                for (size_t r = 0; r < R; ++r) {
                    const T gv = g[n * R + r];
                    if (gv == T(0)) continue;
                    const T* cr = c + r * D;
                    const T* ir = inv_sigma.data() + r * D;
                    for (size_t j = 0; j < D; ++j) {
                        const T z = (xr[j] - cr[j]) * ir[j];
                        const T ziz = gv * z * ir[j];
                        if (dx) dx[n * D + j] -= ziz;
                        if (dc) dc[r * D + j] += ziz;
                        if (dlw) dlw[r * D + j] += gv * z * z;
                    }
                }
            }
        });
    });
    return out;
}

Tensor tsk_combine(const Tensor& normalized, const Tensor& features, const Tensor& w,
                   const Tensor& b) {
    OpSetup s = begin_op("tsk_combine", {&normalized, &features, &w, &b});
    if (normalized.rank() != 2 || features.rank() != 2 || w.rank() != 3 || b.rank() != 2)
        fail(ErrorKind::ShapeMismatch,
             "tsk_combine expects normalized[N,R], features[N,D], w[R,K,D], b[R,K]");
    const size_t N = normalized.extent(0), R = normalized.extent(1);
    const size_t D = features.extent(1), K = w.extent(1);
    if (features.extent(0) != N || w.extent(0) != R || w.extent(2) != D || b.extent(0) != R ||
        b.extent(1) != K)
        fail(ErrorKind::ShapeMismatch, "tsk_combine dimension mismatch: normalized " +
                                           shape_str(normalized.shape()) + ", features " +
                                           shape_str(features.shape()) + ", w " + shape_str(w.shape()) +
                                           ", b " + shape_str(b.shape()));

    Tensor out = make_tensor_like({N, K}, s.dtype);
    dispatch(s.dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* nf = normalized.data<T>().data();
        const T* x = features.data<T>().data();
        const T* wp = w.data<T>().data();
        const T* bp = b.data<T>().data();
        T* o = out.data<T>().data();
        for (size_t n = 0; n < N; ++n) {
            const T* xr = x + n * D;
            const T* nr = nf + n * R;
            T* orow = o + n * K;
            for (size_t k = 0; k < K; ++k) orow[k] = 0;
            for (size_t r = 0; r < R; ++r) {
                const T gate = nr[r];
                for (size_t k = 0; k < K; ++k) {
                    const T* wr = wp + (r * K + k) * D;
                    T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                    size_t j = 0;
                    for (; j + 4 <= D; j += 4) {
                        a0 += wr[j] * xr[j];
                        a1 += wr[j + 1] * xr[j + 1];
                        a2 += wr[j + 2] * xr[j + 2];
                        a3 += wr[j + 3] * xr[j + 3];
                    }
                    T dot = (a0 + a1) + (a2 + a3);
                    for (; j < D; ++j) dot += wr[j] * xr[j];
                    orow[k] += gate * (dot + bp[r * K + k]);
                }
            }
        }
    });
    check_finite(out, "tsk_combine");

    Tensor nf_t = normalized, x_t = features, w_t = w, b_t = b;
    finish_op(s, out, {&nf_t, &x_t, &w_t, &b_t}, [=]() mutable {
        dispatch(out.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = out.grad<T>().data();
            const T* nf = nf_t.data<T>().data();
            const T* x = x_t.data<T>().data();
            const T* wp = w_t.data<T>().data();
            const T* bp = b_t.data<T>().data();
            T* dnf = nf_t.requires_grad() ? nf_t.grad<T>().data() : nullptr;
            T* dx = x_t.requires_grad() ? x_t.grad<T>().data() : nullptr;
            T* dw = w_t.requires_grad() ? w_t.grad<T>().data() : nullptr;
            T* db = b_t.requires_grad() ? b_t.grad<T>().data() : nullptr;
            for (size_t n = 0; n < N; ++n) {
                const T* xr = x + n * D;
                const T* nr = nf + n * R;
                const T* gr = g + n * K;
                for (size_t r = 0; r < R; ++r) {
                    const T gate = nr[r];
                    for (size_t k = 0; k < K; ++k) {
                        const T gv = gr[k];
                        if (gv == T(0)) continue;
                        const T* wr = wp + (r * K + k) * D;
                        const T coef = gv * gate;
                        T dot = 0;
                        T* dwr = dw ? dw + (r * K + k) * D : nullptr;
                        T* dxr = dx ? dx + n * D : nullptr;
                        for (size_t j = 0; j < D; ++j) {
                            if (dnf) dot += wr[j] * xr[j];
                            if (dwr) dwr[j] += coef * xr[j];
                            if (dxr) dxr[j] += coef * wr[j];
                        }
                        if (db) db[r * K + k] += coef;
                        if (dnf) dnf[n * R + r] += gv * (dot + bp[r * K + k]);
                    }
                }
            }
        });
    });
    return out;
}

// --------------------------------------------------------------------------
// serialization: "FTNS", u32 version, u8 dtype, u32 rank, u64 extents, data

namespace {
constexpr uint32_t kTensorVersion = 1;
constexpr char kTensorMagic[4] = {'F', 'T', 'N', 'S'};
}  // namespace

void write_tensor(std::vector<uint8_t>& out, const Tensor& t) {
    if (!t.defined()) fail(ErrorKind::InvalidArgument, "write_tensor: null tensor");
    out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
    put_u32(out, kTensorVersion);
    put_u8(out, static_cast<uint8_t>(t.dtype()));
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (size_t e : t.shape()) put_u64(out, e);
    if (t.dtype() == Dtype::F32) {
        for (float v : t.data<float>()) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        }
    } else {
        for (double v : t.data<double>()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(out, bits);
        }
    }
}

Tensor read_tensor(ByteReader& in) {
    auto magic = in.take(4);
    if (std::memcmp(magic.data(), kTensorMagic, 4) != 0)
        fail(ErrorKind::Parse, "tensor magic mismatch (expected FTNS)");
    const uint32_t version = in.u32();
    if (version != kTensorVersion)
        fail(ErrorKind::Parse, "unsupported tensor version " + std::to_string(version));
    const uint8_t dtype_code = in.u8();
    if (dtype_code > 1)
        fail(ErrorKind::Parse, "unknown tensor dtype code " + std::to_string(dtype_code));
    const Dtype dtype = static_cast<Dtype>(dtype_code);
    const uint32_t rank = in.u32();
    if (rank > 8) fail(ErrorKind::Parse, "tensor rank " + std::to_string(rank) + " too large");
    std::vector<size_t> shape(rank);
    size_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        uint64_t e = in.u64();
        if (e == 0 || e > (1ull << 32))
            fail(ErrorKind::Parse, "tensor extent " + std::to_string(e) + " out of range");
        shape[i] = static_cast<size_t>(e);
        if (numel > (1ull << 33) / shape[i])
            fail(ErrorKind::Parse, "tensor too large");
        numel *= shape[i];
    }
    // Validate the payload length before allocating anything header-sized.
    if (in.remaining() < numel * dtype_size(dtype))
        fail(ErrorKind::Parse, "tensor payload truncated: need " +
                                   std::to_string(numel * dtype_size(dtype)) + " bytes, have " +
                                   std::to_string(in.remaining()));
    Tensor t = make_tensor_like(shape, dtype);
    if (dtype == Dtype::F32) {
        auto s = t.data<float>();
        for (size_t i = 0; i < numel; ++i) {
            uint32_t bits = in.u32();
            std::memcpy(&s[i], &bits, 4);
        }
    } else {
        auto s = t.data<double>();
        for (size_t i = 0; i < numel; ++i) {
            uint64_t bits = in.u64();
            std::memcpy(&s[i], &bits, 8);
        }
    }
    return t;
}

std::vector<uint8_t> tensor_to_bytes(const Tensor& t) {
    std::vector<uint8_t> out;
    write_tensor(out, t);
    return out;
}

Tensor tensor_from_bytes(std::span<const uint8_t> bytes) {
    ByteReader in(bytes);
    Tensor t = read_tensor(in);
    if (in.remaining() != 0)
        fail(ErrorKind::Parse,
             "trailing bytes after tensor payload: " + std::to_string(in.remaining()));
    return t;
}

}  // namespace ab
