// Dense tensor type with reverse-mode tape autodiff. Covers exactly the
// operations the segmentation network needs: conv2d, reductions, elementwise
// arithmetic with restricted broadcasting, channel concat/slice, 2x resampling,
// channel softmax, PReLU, sigmoid. Layout is row-major B,C,H,W throughout.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xdseg {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Runtime toggle for NaN/Inf propagation and div-by-zero checks.
void set_debug_checks(bool enabled);
bool debug_checks();

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated when requires_grad
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->grad; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value);

    double item() const;                       // scalar tensors only
    double at(std::initializer_list<int> idx) const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend Tensor make_tensor(Shape, bool);
};

Tensor make_tensor(Shape shape, bool requires_grad);

// Execution record for one forward pass. Ops append nodes while a TapeScope
// is active; backward() replays the relevant suffix in reverse.
class Tape {
public:
    struct Node {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        std::function<void()> backward;
        const char* op;
    };

    void record(Node node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }

    // Reset-then-fill: zeroes every gradient reachable from `loss`, seeds the
    // loss gradient with 1 and runs the recorded backward closures in reverse
    // topological order. Repeated calls recompute from scratch.
    void backward(const Tensor& loss);

private:
    std::vector<Node> nodes_;
};

// RAII guard installing `tape` as the active recording target.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// Deterministic random stream: mt19937_64 with Box-Muller for gaussians.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    std::uint64_t next_u64() { return gen_(); }
    double uniform();          // [0, 1)
    double gaussian();
    int uniform_int(int lo, int hi);  // inclusive bounds

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

Tensor randn(Shape shape, std::uint64_t seed);
Tensor randn(Shape shape, Rng& rng);

enum class EwOp { Add, Sub, Mul, Div };

// Elementwise with restricted broadcasting: b must have equal rank with each
// extent matching a's or 1, or be a single-element tensor.
Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// Per-channel forms: v has shape (C) and broadcasts over axis 1 of a 4-D a.
Tensor add_channel(const Tensor& a, const Tensor& v);
Tensor sub_channel(const Tensor& a, const Tensor& v);
Tensor mul_channel(const Tensor& a, const Tensor& v);
Tensor div_channel(const Tensor& a, const Tensor& v);

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0);

Tensor reduce_sum(const Tensor& input, const std::vector<int>& axes, bool keepdims);
Tensor reduce_mean(const Tensor& input, const std::vector<int>& axes, bool keepdims);
Tensor sum_all(const Tensor& input);
Tensor mean_all(const Tensor& input);

// (mean, population variance) with the reduced axes collapsed.
std::pair<Tensor, Tensor> reduce_stats(const Tensor& input, const std::vector<int>& axes);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& input, int begin, int end);

Tensor downsample2(const Tensor& input);   // 2x2 max pool, stride 2
Tensor upsample2(const Tensor& input);     // nearest-neighbor x2

Tensor softmax_channels(const Tensor& input);
Tensor prelu(const Tensor& input, const Tensor& slope);  // slope shape (C)
Tensor sigmoid(const Tensor& input);
Tensor sqrt(const Tensor& input);
Tensor log_clamped(const Tensor& input, double floor = 1e-12);

Tensor reshape(const Tensor& input, Shape new_shape);
Tensor detach(const Tensor& input);

}  // namespace xdseg
