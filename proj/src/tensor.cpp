#include "xdseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace xdseg {

namespace {

bool g_debug_checks = true;
thread_local Tape* g_active_tape = nullptr;

void check_finite(const TensorImpl& t, const char* op) {
    if (!g_debug_checks) return;
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
        }
    }
}

void ensure_grad_buffer(TensorImpl& t) {
    if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Registers `node` and marks the output differentiable. Inputs that do not
// require grad keep grad-free; closures must skip them.
void record_node(std::vector<Tensor> inputs, Tensor& output,
                 std::function<void()> backward, const char* op) {
    output.impl()->requires_grad = true;
    ensure_grad_buffer(*output.impl());
    for (const Tensor& in : inputs) {
        if (in.requires_grad()) ensure_grad_buffer(*in.impl());
    }
    Tape::Node node;
    node.inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node.inputs.push_back(in.impl());
    node.output = output.impl();
    node.backward = std::move(backward);
    node.op = op;
    g_active_tape->record(std::move(node));
}

void validate_axes(const Shape& shape, const std::vector<int>& axes) {
    if (axes.empty()) throw std::invalid_argument("reduce: empty axis set");
    std::vector<bool> seen(shape.size(), false);
    for (int a : axes) {
        if (a < 0 || a >= static_cast<int>(shape.size()))
            throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                        " out of range for " + shape_str(shape));
        if (seen[static_cast<std::size_t>(a)])
            throw std::invalid_argument("reduce: duplicate axis");
        seen[static_cast<std::size_t>(a)] = true;
    }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

Tensor make_tensor(Shape shape, bool requires_grad) {
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<std::size_t>(numel(impl->shape)), 0.0);
    impl->requires_grad = requires_grad;
    if (requires_grad) ensure_grad_buffer(*impl);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) { return make_tensor(std::move(shape), false); }

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = make_tensor(std::move(shape), false);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
        throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(shape));
    Tensor t = make_tensor(std::move(shape), false);
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

void Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    if (value) ensure_grad_buffer(*impl_);
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank())
        throw std::invalid_argument("at(): index rank mismatch");
    std::int64_t flat = 0;
    int axis = 0;
    for (int i : idx) {
        const int extent = impl_->shape[static_cast<std::size_t>(axis)];
        if (i < 0 || i >= extent) throw std::out_of_range("at(): index out of range");
        flat = flat * extent + i;
        ++axis;
    }
    return impl_->data[static_cast<std::size_t>(flat)];
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
Tape* active_tape() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar tensor");
    std::unordered_map<const TensorImpl*, std::size_t> producer;
    producer.reserve(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) producer[nodes_[i].output.get()] = i;

    auto it = producer.find(loss.impl().get());
    if (it == producer.end())
        throw std::invalid_argument("backward: loss was not produced on this tape");

    std::vector<bool> needed(nodes_.size(), false);
    needed[it->second] = true;
    // Tape order is topological, so one reverse sweep marks the full ancestry.
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (!needed[i]) continue;
        for (const auto& in : nodes_[i].inputs) {
            auto p = producer.find(in.get());
            if (p != producer.end()) needed[p->second] = true;
        }
    }

    std::unordered_set<TensorImpl*> touched;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!needed[i]) continue;
        for (const auto& in : nodes_[i].inputs) {
            if (in->requires_grad && touched.insert(in.get()).second)
                std::fill(in->grad.begin(), in->grad.end(), 0.0);
        }
        TensorImpl* out = nodes_[i].output.get();
        if (touched.insert(out).second) std::fill(out->grad.begin(), out->grad.end(), 0.0);
    }
    loss.impl()->grad[0] = 1.0;

    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (needed[i]) nodes_[i].backward();
    }
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 shifted into (0, 1] so the log stays finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

int Rng::uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

Tensor randn(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    return randn(std::move(shape), rng);
}

Tensor randn(Shape shape, Rng& rng) {
    Tensor t = make_tensor(std::move(shape), false);
    for (double& v : t.mutable_data()) v = rng.gaussian();
    return t;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

// Broadcast layout of b into a: stride 0 on expanded axes.
struct BroadcastPlan {
    std::vector<std::int64_t> a_strides;
    std::vector<std::int64_t> b_strides;
    Shape out_shape;
};

BroadcastPlan plan_broadcast(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    BroadcastPlan plan;
    plan.out_shape = sa;
    if (b.size() == 1) {
        plan.b_strides.assign(sa.size(), 0);
    } else if (sa.size() == sb.size()) {
        plan.b_strides.resize(sa.size());
        std::int64_t stride = 1;
        for (std::size_t i = sa.size(); i-- > 0;) {
            if (sb[i] == sa[i]) {
                plan.b_strides[i] = stride;
            } else if (sb[i] == 1) {
                plan.b_strides[i] = 0;
            } else {
                throw std::invalid_argument("elementwise: shapes " + shape_str(sa) + " vs " +
                                            shape_str(sb) + " not broadcastable");
            }
            stride *= sb[i];
        }
    } else {
        throw std::invalid_argument("elementwise: shapes " + shape_str(sa) + " vs " +
                                    shape_str(sb) + " not broadcastable");
    }
    plan.a_strides.resize(sa.size());
    std::int64_t stride = 1;
    for (std::size_t i = sa.size(); i-- > 0;) {
        plan.a_strides[i] = stride;
        stride *= sa[i];
    }
    return plan;
}

// Calls fn(flat_a, flat_b) for every position of the output.
template <typename Fn>
void for_each_broadcast(const Shape& shape, const BroadcastPlan& plan, Fn&& fn) {
    const std::int64_t n = numel(shape);
    const int rank = static_cast<int>(shape.size());
    std::vector<int> counter(shape.size(), 0);
    std::int64_t ib = 0;
    for (std::int64_t ia = 0; ia < n; ++ia) {
        fn(ia, ib);
        for (int axis = rank - 1; axis >= 0; --axis) {
            const auto u = static_cast<std::size_t>(axis);
            if (++counter[u] < shape[u]) {
                ib += plan.b_strides[u];
                break;
            }
            counter[u] = 0;
            ib -= plan.b_strides[u] * (shape[u] - 1);
        }
    }
}

const char* ew_name(EwOp op) {
    switch (op) {
        case EwOp::Add: return "add";
        case EwOp::Sub: return "sub";
        case EwOp::Mul: return "mul";
        case EwOp::Div: return "div";
    }
    return "?";
}

}  // namespace

Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op) {
    const bool same_shape = a.shape() == b.shape();
    BroadcastPlan plan;
    if (!same_shape) plan = plan_broadcast(a, b);

    if (op == EwOp::Div && g_debug_checks) {
        for (double v : b.data()) {
            if (v == 0.0) throw std::invalid_argument("div: division by exact zero");
        }
    }

    Tensor out = make_tensor(a.shape(), false);
    const auto* pa = a.data().data();
    const auto* pb = b.data().data();
    auto* po = out.mutable_data().data();
    const std::int64_t n = out.size();

    auto apply = [op](double x, double y) {
        switch (op) {
            case EwOp::Add: return x + y;
            case EwOp::Sub: return x - y;
            case EwOp::Mul: return x * y;
            case EwOp::Div: return x / y;
        }
        return 0.0;
    };

    if (same_shape) {
        for (std::int64_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
    } else {
        for_each_broadcast(a.shape(), plan, [&](std::int64_t ia, std::int64_t ib) {
            po[ia] = apply(pa[ia], pb[ib]);
        });
    }
    check_finite(*out.impl(), ew_name(op));

    if (should_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        auto backward = [ai, bi, oi, op, same_shape, plan]() {
            const auto* g = oi->grad.data();
            const auto* xa = ai->data.data();
            const auto* xb = bi->data.data();
            auto accum = [&](std::int64_t ia, std::int64_t ib) {
                if (ai->requires_grad) {
                    switch (op) {
                        case EwOp::Add:
                        case EwOp::Sub: ai->grad[ia] += g[ia]; break;
                        case EwOp::Mul: ai->grad[ia] += g[ia] * xb[ib]; break;
                        case EwOp::Div: ai->grad[ia] += g[ia] / xb[ib]; break;
                    }
                }
                if (bi->requires_grad) {
                    switch (op) {
                        case EwOp::Add: bi->grad[ib] += g[ia]; break;
                        case EwOp::Sub: bi->grad[ib] -= g[ia]; break;
                        case EwOp::Mul: bi->grad[ib] += g[ia] * xa[ia]; break;
                        case EwOp::Div: bi->grad[ib] -= g[ia] * xa[ia] / (xb[ib] * xb[ib]); break;
                    }
                }
            };
            if (same_shape) {
                const std::int64_t n2 = static_cast<std::int64_t>(oi->data.size());
                for (std::int64_t i = 0; i < n2; ++i) accum(i, i);
            } else {
                BroadcastPlan p2 = plan;
                for_each_broadcast(oi->shape, p2, accum);
            }
        };
        record_node({a, b}, out, std::move(backward), ew_name(op));
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Div); }

namespace {

Tensor unary_op(const Tensor& a, const char* name, const std::function<double(double)>& f,
                const std::function<double(double, double, double)>& df /* (x, y, g) */) {
    Tensor out = make_tensor(a.shape(), false);
    const auto* pa = a.data().data();
    auto* po = out.mutable_data().data();
    const std::int64_t n = out.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    check_finite(*out.impl(), name);
    if (should_record({&a})) {
        auto ai = a.impl(), oi = out.impl();
        record_node({a}, out,
                    [ai, oi, df]() {
                        const std::int64_t n2 = static_cast<std::int64_t>(oi->data.size());
                        for (std::int64_t i = 0; i < n2; ++i)
                            ai->grad[i] += df(ai->data[i], oi->data[i], oi->grad[i]);
                    },
                    name);
    }
    return out;
}

}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, "add_scalar", [s](double x) { return x + s; },
                    [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(a, "mul_scalar", [s](double x) { return x * s; },
                    [s](double, double, double g) { return g * s; });
}

namespace {

Tensor channel_form(const Tensor& a, const Tensor& v, EwOp op) {
    if (a.rank() != 4) throw std::invalid_argument("channel broadcast expects a 4-D tensor");
    if (v.rank() != 1 || v.dim(0) != a.dim(1))
        throw std::invalid_argument("channel vector " + shape_str(v.shape()) +
                                    " does not match channels of " + shape_str(a.shape()));
    return elementwise(a, reshape(v, {1, a.dim(1), 1, 1}), op);
}

}  // namespace

Tensor add_channel(const Tensor& a, const Tensor& v) { return channel_form(a, v, EwOp::Add); }
Tensor sub_channel(const Tensor& a, const Tensor& v) { return channel_form(a, v, EwOp::Sub); }
Tensor mul_channel(const Tensor& a, const Tensor& v) { return channel_form(a, v, EwOp::Mul); }
Tensor div_channel(const Tensor& a, const Tensor& v) { return channel_form(a, v, EwOp::Div); }

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " and weight " +
                                    shape_str(weight.shape()) + " must be 4-D");
    const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != Cin)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                    " input channels, input has " + std::to_string(Cin));
    if (weight.dim(3) != k || k % 2 == 0)
        throw std::invalid_argument("conv2d: kernel must be square with odd extent, got " +
                                    shape_str(weight.shape()));
    if (bias.rank() != 1 || bias.dim(0) != Cout)
        throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) +
                                    " does not match Cout=" + std::to_string(Cout));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    const int eh = H + 2 * padding - k;
    const int ew = W + 2 * padding - k;
    if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0)
        throw std::invalid_argument("conv2d: non-integral output extent for input " +
                                    shape_str(input.shape()) + " kernel " + std::to_string(k) +
                                    " stride " + std::to_string(stride) + " padding " +
                                    std::to_string(padding));
    const int Ho = eh / stride + 1;
    const int Wo = ew / stride + 1;

    Tensor out = make_tensor({B, Cout, Ho, Wo}, false);
    const double* in = input.data().data();
    const double* w = weight.data().data();
    const double* bs = bias.data().data();
    double* o = out.mutable_data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Cout; ++co) {
            double* oplane = o + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) oplane[i] = bs[co];
            for (int ci = 0; ci < Cin; ++ci) {
                const double* iplane = in + (static_cast<std::int64_t>(b) * Cin + ci) * H * W;
                const double* wplane = w + ((static_cast<std::int64_t>(co) * Cin + ci) * k) * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = wplane[ky * k + kx];
                        if (wv == 0.0) continue;
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            const double* irow = iplane + static_cast<std::int64_t>(iy) * W;
                            double* orow = oplane + static_cast<std::int64_t>(oy) * Wo;
                            // ox range with ix = ox*stride - padding + kx inside [0, W)
                            int ox0 = 0, ox1 = Wo;
                            if (padding - kx > 0) ox0 = (padding - kx + stride - 1) / stride;
                            const int limit = W - 1 + padding - kx;
                            if (limit / stride + 1 < ox1 && limit >= 0) ox1 = limit / stride + 1;
                            if (limit < 0) ox1 = 0;
                            if (stride == 1) {
                                const double* ir = irow - padding + kx;
                                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * ir[ox];
                            } else {
                                for (int ox = ox0; ox < ox1; ++ox)
                                    orow[ox] += wv * irow[ox * stride - padding + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    check_finite(*out.impl(), "conv2d");

    if (should_record({&input, &weight, &bias})) {
        auto ii = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
        auto backward = [ii, wi, bi, oi, B, Cin, Cout, H, W, Ho, Wo, k, stride, padding]() {
            const double* g = oi->grad.data();
            if (bi->requires_grad) {
                for (int co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (int b = 0; b < B; ++b) {
                        const double* gp = g + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += gp[i];
                    }
                    bi->grad[static_cast<std::size_t>(co)] += acc;
                }
            }
            if (wi->requires_grad) {
                const double* in = ii->data.data();
#pragma omp parallel for collapse(2) schedule(static)
                for (int co = 0; co < Cout; ++co) {
                    for (int ci = 0; ci < Cin; ++ci) {
                        double* wg = wi->grad.data() + ((static_cast<std::int64_t>(co) * Cin + ci) * k) * k;
                        for (int ky = 0; ky < k; ++ky) {
                            for (int kx = 0; kx < k; ++kx) {
                                double acc = 0.0;
                                for (int b = 0; b < B; ++b) {
                                    const double* gp = g + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
                                    const double* ip = in + (static_cast<std::int64_t>(b) * Cin + ci) * H * W;
                                    for (int oy = 0; oy < Ho; ++oy) {
                                        const int iy = oy * stride - padding + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        const double* irow = ip + static_cast<std::int64_t>(iy) * W;
                                        const double* grow = gp + static_cast<std::int64_t>(oy) * Wo;
                                        for (int ox = 0; ox < Wo; ++ox) {
                                            const int ix = ox * stride - padding + kx;
                                            if (ix < 0 || ix >= W) continue;
                                            acc += grow[ox] * irow[ix];
                                        }
                                    }
                                }
                                wg[ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
            if (ii->requires_grad) {
                const double* w = wi->data.data();
#pragma omp parallel for collapse(2) schedule(static)
                for (int b = 0; b < B; ++b) {
                    for (int ci = 0; ci < Cin; ++ci) {
                        double* igp = ii->grad.data() + (static_cast<std::int64_t>(b) * Cin + ci) * H * W;
                        for (int co = 0; co < Cout; ++co) {
                            const double* gp = g + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
                            const double* wp = w + ((static_cast<std::int64_t>(co) * Cin + ci) * k) * k;
                            for (int ky = 0; ky < k; ++ky) {
                                for (int kx = 0; kx < k; ++kx) {
                                    const double wv = wp[ky * k + kx];
                                    if (wv == 0.0) continue;
                                    for (int oy = 0; oy < Ho; ++oy) {
                                        const int iy = oy * stride - padding + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        double* irow = igp + static_cast<std::int64_t>(iy) * W;
                                        const double* grow = gp + static_cast<std::int64_t>(oy) * Wo;
                                        int ox0 = 0, ox1 = Wo;
                                        if (padding - kx > 0) ox0 = (padding - kx + stride - 1) / stride;
                                        const int limit = W - 1 + padding - kx;
                                        if (limit < 0) ox1 = 0;
                                        else if (limit / stride + 1 < ox1) ox1 = limit / stride + 1;
                                        if (stride == 1) {
                                            double* ir = irow - padding + kx;
                                            for (int ox = ox0; ox < ox1; ++ox) ir[ox] += wv * grow[ox];
                                        } else {
                                            for (int ox = ox0; ox < ox1; ++ox)
                                                irow[ox * stride - padding + kx] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        record_node({input, weight, bias}, out, std::move(backward), "conv2d");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

struct ReducePlan {
    Shape out_shape;          // with keepdims applied
    std::vector<std::int64_t> out_index_of;  // lazily unused; mapping done on the fly
    std::vector<bool> reduced;
    std::int64_t group_size = 1;
};

ReducePlan plan_reduce(const Shape& shape, const std::vector<int>& axes, bool keepdims) {
    validate_axes(shape, axes);
    ReducePlan plan;
    plan.reduced.assign(shape.size(), false);
    for (int a : axes) plan.reduced[static_cast<std::size_t>(a)] = true;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (plan.reduced[i]) {
            plan.group_size *= shape[i];
            if (keepdims) plan.out_shape.push_back(1);
        } else {
            plan.out_shape.push_back(shape[i]);
        }
    }
    return plan;
}

// Iterates the input linearly, invoking fn(in_flat, out_flat).
template <typename Fn>
void for_each_reduce(const Shape& shape, const std::vector<bool>& reduced, Fn&& fn) {
    std::vector<std::int64_t> out_strides(shape.size(), 0);
    std::int64_t stride = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        if (!reduced[i]) {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    const std::int64_t n = numel(shape);
    const int rank = static_cast<int>(shape.size());
    std::vector<int> counter(shape.size(), 0);
    std::int64_t io = 0;
    for (std::int64_t ii = 0; ii < n; ++ii) {
        fn(ii, io);
        for (int axis = rank - 1; axis >= 0; --axis) {
            const auto u = static_cast<std::size_t>(axis);
            if (++counter[u] < shape[u]) {
                io += out_strides[u];
                break;
            }
            counter[u] = 0;
            io -= out_strides[u] * (shape[u] - 1);
        }
    }
}

}  // namespace

Tensor reduce_sum(const Tensor& input, const std::vector<int>& axes, bool keepdims) {
    ReducePlan plan = plan_reduce(input.shape(), axes, keepdims);
    Tensor out = make_tensor(plan.out_shape, false);
    const double* pi = input.data().data();
    double* po = out.mutable_data().data();
    for_each_reduce(input.shape(), plan.reduced, [&](std::int64_t ii, std::int64_t io) { po[io] += pi[ii]; });
    check_finite(*out.impl(), "reduce_sum");
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        auto reduced = plan.reduced;
        record_node({input}, out,
                    [ai, oi, reduced]() {
                        const double* g = oi->grad.data();
                        for_each_reduce(ai->shape, reduced,
                                        [&](std::int64_t ii, std::int64_t io) { ai->grad[ii] += g[io]; });
                    },
                    "reduce_sum");
    }
    return out;
}

Tensor reduce_mean(const Tensor& input, const std::vector<int>& axes, bool keepdims) {
    ReducePlan plan = plan_reduce(input.shape(), axes, keepdims);
    const double inv = 1.0 / static_cast<double>(plan.group_size);
    Tensor out = make_tensor(plan.out_shape, false);
    const double* pi = input.data().data();
    double* po = out.mutable_data().data();
    for_each_reduce(input.shape(), plan.reduced, [&](std::int64_t ii, std::int64_t io) { po[io] += pi[ii]; });
    for (double& v : out.mutable_data()) v *= inv;
    check_finite(*out.impl(), "reduce_mean");
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        auto reduced = plan.reduced;
        record_node({input}, out,
                    [ai, oi, reduced, inv]() {
                        const double* g = oi->grad.data();
                        for_each_reduce(ai->shape, reduced,
                                        [&](std::int64_t ii, std::int64_t io) { ai->grad[ii] += g[io] * inv; });
                    },
                    "reduce_mean");
    }
    return out;
}

Tensor sum_all(const Tensor& input) {
    std::vector<int> axes(input.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    if (axes.empty()) return reshape(input, {});  // already scalar
    return reduce_sum(input, axes, false);
}

Tensor mean_all(const Tensor& input) {
    std::vector<int> axes(input.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    if (axes.empty()) return reshape(input, {});
    return reduce_mean(input, axes, false);
}

std::pair<Tensor, Tensor> reduce_stats(const Tensor& input, const std::vector<int>& axes) {
    ReducePlan plan = plan_reduce(input.shape(), axes, false);
    Tensor mean_keep = reduce_mean(input, axes, true);
    Tensor centered = sub(input, mean_keep);
    Tensor var_keep = reduce_mean(mul(centered, centered), axes, true);
    return {reshape(mean_keep, plan.out_shape), reshape(var_keep, plan.out_shape)};
}

// ---------------------------------------------------------------------------
// Channel concat / slice

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4)
        throw std::invalid_argument("concat_channels: expects 4-D tensors");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()) + " differ outside the channel axis");
    const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor out = make_tensor({B, Ca + Cb, H, W}, false);
    double* po = out.mutable_data().data();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int n = 0; n < B; ++n) {
        std::copy_n(pa + n * Ca * plane, Ca * plane, po + static_cast<std::int64_t>(n) * (Ca + Cb) * plane);
        std::copy_n(pb + n * Cb * plane, Cb * plane,
                    po + static_cast<std::int64_t>(n) * (Ca + Cb) * plane + Ca * plane);
    }
    if (should_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record_node({a, b}, out,
                    [ai, bi, oi, B, Ca, Cb, plane]() {
                        const double* g = oi->grad.data();
                        for (int n = 0; n < B; ++n) {
                            const double* gn = g + static_cast<std::int64_t>(n) * (Ca + Cb) * plane;
                            if (ai->requires_grad) {
                                double* ga = ai->grad.data() + static_cast<std::int64_t>(n) * Ca * plane;
                                for (std::int64_t i = 0; i < Ca * plane; ++i) ga[i] += gn[i];
                            }
                            if (bi->requires_grad) {
                                double* gb = bi->grad.data() + static_cast<std::int64_t>(n) * Cb * plane;
                                for (std::int64_t i = 0; i < Cb * plane; ++i) gb[i] += gn[Ca * plane + i];
                            }
                        }
                    },
                    "concat_channels");
    }
    return out;
}

Tensor slice_channels(const Tensor& input, int begin, int end) {
    if (input.rank() != 4) throw std::invalid_argument("slice_channels: expects a 4-D tensor");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (begin < 0 || end > C || begin >= end)
        throw std::invalid_argument("slice_channels: bad range [" + std::to_string(begin) + "," +
                                    std::to_string(end) + ") for C=" + std::to_string(C));
    const int Cs = end - begin;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor out = make_tensor({B, Cs, H, W}, false);
    double* po = out.mutable_data().data();
    const double* pi = input.data().data();
    for (int n = 0; n < B; ++n)
        std::copy_n(pi + (static_cast<std::int64_t>(n) * C + begin) * plane, Cs * plane,
                    po + static_cast<std::int64_t>(n) * Cs * plane);
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        record_node({input}, out,
                    [ai, oi, B, C, Cs, begin, plane]() {
                        const double* g = oi->grad.data();
                        for (int n = 0; n < B; ++n) {
                            double* ga = ai->grad.data() + (static_cast<std::int64_t>(n) * C + begin) * plane;
                            const double* gn = g + static_cast<std::int64_t>(n) * Cs * plane;
                            for (std::int64_t i = 0; i < Cs * plane; ++i) ga[i] += gn[i];
                        }
                    },
                    "slice_channels");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling

Tensor downsample2(const Tensor& input) {
    if (input.rank() != 4) throw std::invalid_argument("downsample2: expects a 4-D tensor");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("downsample2: spatial extents must be even, got " +
                                    shape_str(input.shape()));
    const int Ho = H / 2, Wo = W / 2;
    Tensor out = make_tensor({B, C, Ho, Wo}, false);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.size()));
    const double* pi = input.data().data();
    double* po = out.mutable_data().data();
    std::int64_t oidx = 0;
    for (int n = 0; n < B * C; ++n) {
        const double* plane = pi + static_cast<std::int64_t>(n) * H * W;
        for (int y = 0; y < Ho; ++y) {
            for (int x = 0; x < Wo; ++x, ++oidx) {
                // first max in scan order wins ties, keeps backward deterministic
                std::int64_t best = static_cast<std::int64_t>(2 * y) * W + 2 * x;
                double bv = plane[best];
                const std::int64_t cands[3] = {best + 1, best + W, best + W + 1};
                for (std::int64_t c : cands) {
                    if (plane[c] > bv) {
                        bv = plane[c];
                        best = c;
                    }
                }
                po[oidx] = bv;
                (*argmax)[static_cast<std::size_t>(oidx)] = static_cast<std::int64_t>(n) * H * W + best;
            }
        }
    }
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        record_node({input}, out,
                    [ai, oi, argmax]() {
                        const double* g = oi->grad.data();
                        for (std::size_t i = 0; i < argmax->size(); ++i)
                            ai->grad[static_cast<std::size_t>((*argmax)[i])] += g[i];
                    },
                    "downsample2");
    }
    return out;
}

Tensor upsample2(const Tensor& input) {
    if (input.rank() != 4) throw std::invalid_argument("upsample2: expects a 4-D tensor");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out = make_tensor({B, C, 2 * H, 2 * W}, false);
    const double* pi = input.data().data();
    double* po = out.mutable_data().data();
    for (int n = 0; n < B * C; ++n) {
        const double* ip = pi + static_cast<std::int64_t>(n) * H * W;
        double* op = po + static_cast<std::int64_t>(n) * 4 * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double v = ip[y * W + x];
                double* row0 = op + static_cast<std::int64_t>(2 * y) * 2 * W + 2 * x;
                row0[0] = v;
                row0[1] = v;
                row0[2 * W] = v;
                row0[2 * W + 1] = v;
            }
        }
    }
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        record_node({input}, out,
                    [ai, oi, B, C, H, W]() {
                        const double* g = oi->grad.data();
                        for (int n = 0; n < B * C; ++n) {
                            double* ga = ai->grad.data() + static_cast<std::int64_t>(n) * H * W;
                            const double* gp = g + static_cast<std::int64_t>(n) * 4 * H * W;
                            for (int y = 0; y < H; ++y) {
                                for (int x = 0; x < W; ++x) {
                                    const double* row0 = gp + static_cast<std::int64_t>(2 * y) * 2 * W + 2 * x;
                                    ga[y * W + x] += row0[0] + row0[1] + row0[2 * W] + row0[2 * W + 1];
                                }
                            }
                        }
                    },
                    "upsample2");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations

Tensor softmax_channels(const Tensor& input) {
    if (input.rank() != 4) throw std::invalid_argument("softmax_channels: expects a 4-D tensor");
    const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (C < 2) throw std::invalid_argument("softmax_channels: needs C >= 2");
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor out = make_tensor(input.shape(), false);
    const double* pi = input.data().data();
    double* po = out.mutable_data().data();
    for (int b = 0; b < B; ++b) {
        const double* ib = pi + static_cast<std::int64_t>(b) * C * plane;
        double* ob = po + static_cast<std::int64_t>(b) * C * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
            double mx = ib[p];
            for (int c = 1; c < C; ++c) mx = std::max(mx, ib[c * plane + p]);
            double denom = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(ib[c * plane + p] - mx);
                ob[c * plane + p] = e;
                denom += e;
            }
            for (int c = 0; c < C; ++c) ob[c * plane + p] /= denom;
        }
    }
    check_finite(*out.impl(), "softmax_channels");
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        record_node({input}, out,
                    [ai, oi, B, C, plane]() {
                        const double* g = oi->grad.data();
                        const double* s = oi->data.data();
                        for (int b = 0; b < B; ++b) {
                            const std::int64_t base = static_cast<std::int64_t>(b) * C * plane;
                            for (std::int64_t p = 0; p < plane; ++p) {
                                double dot = 0.0;
                                for (int c = 0; c < C; ++c)
                                    dot += g[base + c * plane + p] * s[base + c * plane + p];
                                for (int c = 0; c < C; ++c) {
                                    const std::int64_t i = base + c * plane + p;
                                    ai->grad[i] += s[i] * (g[i] - dot);
                                }
                            }
                        }
                    },
                    "softmax_channels");
    }
    return out;
}

Tensor prelu(const Tensor& input, const Tensor& slope) {
    if (input.rank() != 4) throw std::invalid_argument("prelu: expects a 4-D tensor");
    if (slope.rank() != 1 || slope.dim(0) != input.dim(1))
        throw std::invalid_argument("prelu: slope " + shape_str(slope.shape()) +
                                    " does not match channels of " + shape_str(input.shape()));
    const int B = input.dim(0), C = input.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
    Tensor out = make_tensor(input.shape(), false);
    const double* pi = input.data().data();
    const double* pa = slope.data().data();
    double* po = out.mutable_data().data();
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            const double a = pa[c];
            const double* ip = pi + (static_cast<std::int64_t>(b) * C + c) * plane;
            double* op = po + (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) op[i] = ip[i] > 0.0 ? ip[i] : a * ip[i];
        }
    }
    check_finite(*out.impl(), "prelu");
    if (should_record({&input, &slope})) {
        auto ai = input.impl(), si = slope.impl(), oi = out.impl();
        record_node({input, slope}, out,
                    [ai, si, oi, B, C, plane]() {
                        const double* g = oi->grad.data();
                        const double* x = ai->data.data();
                        const double* a = si->data.data();
                        for (int b = 0; b < B; ++b) {
                            for (int c = 0; c < C; ++c) {
                                const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
                                double sacc = 0.0;
                                for (std::int64_t i = 0; i < plane; ++i) {
                                    const double xv = x[base + i];
                                    const double gv = g[base + i];
                                    if (xv > 0.0) {
                                        if (ai->requires_grad) ai->grad[base + i] += gv;
                                    } else {
                                        if (ai->requires_grad) ai->grad[base + i] += gv * a[c];
                                        sacc += gv * xv;
                                    }
                                }
                                if (si->requires_grad) si->grad[static_cast<std::size_t>(c)] += sacc;
                            }
                        }
                    },
                    "prelu");
    }
    return out;
}

Tensor sigmoid(const Tensor& input) {
    Tensor out = make_tensor(input.shape(), false);
    const double* pi = input.data().data();
    double* po = out.mutable_data().data();
    const std::int64_t n = input.size();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = pi[i];
        po[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    check_finite(*out.impl(), "sigmoid");
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        record_node({input}, out,
                    [ai, oi]() {
                        const std::int64_t n2 = static_cast<std::int64_t>(oi->data.size());
                        for (std::int64_t i = 0; i < n2; ++i) {
                            const double s = oi->data[i];
                            ai->grad[i] += oi->grad[i] * s * (1.0 - s);
                        }
                    },
                    "sigmoid");
    }
    return out;
}

Tensor sqrt(const Tensor& input) {
    if (g_debug_checks) {
        for (double v : input.data())
            if (v < 0.0) throw std::invalid_argument("sqrt: negative input");
    }
    return unary_op(input, "sqrt", [](double x) { return std::sqrt(x); },
                    [](double, double y, double g) { return g * 0.5 / y; });
}

Tensor log_clamped(const Tensor& input, double floor) {
    return unary_op(input, "log_clamped",
                    [floor](double x) { return std::log(x > floor ? x : floor); },
                    [floor](double x, double, double g) { return x > floor ? g / x : 0.0; });
}

Tensor reshape(const Tensor& input, Shape new_shape) {
    if (numel(new_shape) != input.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(input.shape()) + " as " +
                                    shape_str(new_shape));
    Tensor out = make_tensor(std::move(new_shape), false);
    std::copy(input.data().begin(), input.data().end(), out.mutable_data().begin());
    if (should_record({&input})) {
        auto ai = input.impl(), oi = out.impl();
        record_node({input}, out,
                    [ai, oi]() {
                        for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
                    },
                    "reshape");
    }
    return out;
}

Tensor detach(const Tensor& input) {
    Tensor out = make_tensor(input.shape(), false);
    std::copy(input.data().begin(), input.data().end(), out.mutable_data().begin());
    return out;
}

}  // namespace xdseg
