#include "xdseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xdseg {

NormKind parse_norm_kind(const std::string& s) {
    if (s == "batch") return NormKind::Batch;
    if (s == "instance") return NormKind::Instance;
    throw std::invalid_argument("norm kind must be one of {batch, instance}, got '" + s + "'");
}

NormOrdering parse_norm_ordering(const std::string& s) {
    if (s == "pre") return NormOrdering::Pre;
    if (s == "post") return NormOrdering::Post;
    throw std::invalid_argument("norm ordering must be one of {pre, post}, got '" + s + "'");
}

std::string to_string(NormKind kind) { return kind == NormKind::Batch ? "batch" : "instance"; }
std::string to_string(NormOrdering o) { return o == NormOrdering::Pre ? "pre" : "post"; }

Tensor apply_normalization(const Tensor& z, const NormSpec& spec, Mode mode,
                           Tensor* running_mean, Tensor* running_var,
                           bool* stats_initialized, double momentum) {
    if (spec.epsilon <= 0.0) throw std::invalid_argument("normalization epsilon must be positive");
    if (z.rank() != 4) throw std::invalid_argument("normalization expects a 4-D tensor");

    if (spec.kind == NormKind::Instance) {
        // per-sample, per-channel statistics in both modes
        Tensor mean_k = reduce_mean(z, {2, 3}, true);
        Tensor centered = sub(z, mean_k);
        Tensor var_k = reduce_mean(mul(centered, centered), {2, 3}, true);
        return div(centered, sqrt(add_scalar(var_k, spec.epsilon)));
    }

    if (mode == Mode::Eval) {
        if (stats_initialized == nullptr || !*stats_initialized)
            throw std::runtime_error("batch normalization: eval mode requested before any train-mode update");
        Tensor centered = sub(z, reshape(*running_mean, {1, z.dim(1), 1, 1}));
        return div(centered, sqrt(add_scalar(reshape(*running_var, {1, z.dim(1), 1, 1}), spec.epsilon)));
    }

    Tensor mean_k = reduce_mean(z, {0, 2, 3}, true);
    Tensor centered = sub(z, mean_k);
    Tensor var_k = reduce_mean(mul(centered, centered), {0, 2, 3}, true);
    if (running_mean != nullptr && running_var != nullptr && stats_initialized != nullptr) {
        auto rm = running_mean->mutable_data();
        auto rv = running_var->mutable_data();
        const auto bm = mean_k.data();
        const auto bv = var_k.data();
        for (std::size_t c = 0; c < rm.size(); ++c) {
            rm[c] = momentum * rm[c] + (1.0 - momentum) * bm[c];
            rv[c] = momentum * rv[c] + (1.0 - momentum) * bv[c];
        }
        *stats_initialized = true;
    }
    return div(centered, sqrt(add_scalar(var_k, spec.epsilon)));
}

ConvBlock::ConvBlock(int in_channels, int out_channels, int kernel_size, NormSpec norm,
                     int stride, Rng& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_size_(kernel_size),
      stride_(stride),
      norm_(norm) {
    // He-style init to pair with PReLU
    const double stddev = std::sqrt(2.0 / (in_channels * kernel_size * kernel_size));
    weight = randn({out_channels, in_channels, kernel_size, kernel_size}, rng);
    for (double& v : weight.mutable_data()) v *= stddev;
    weight.set_requires_grad(true);
    bias = Tensor::zeros({out_channels});
    bias.set_requires_grad(true);
    prelu_slope = Tensor::full({out_channels}, 0.25);
    prelu_slope.set_requires_grad(true);
    if (norm_.kind == NormKind::Batch) {
        const int stat_c = norm_.ordering == NormOrdering::Post ? out_channels : in_channels;
        running_mean = Tensor::zeros({stat_c});
        running_var = Tensor::full({stat_c}, 1.0);
    }
}

Tensor ConvBlock::forward(const Tensor& z, Mode mode) {
    if (z.rank() != 4 || z.dim(1) != in_channels_)
        throw std::invalid_argument("conv block expects " + std::to_string(in_channels_) +
                                    " input channels, got " + shape_str(z.shape()));
    const int pad = kernel_size_ / 2;
    Tensor* rm = norm_.kind == NormKind::Batch ? &running_mean : nullptr;
    Tensor* rv = norm_.kind == NormKind::Batch ? &running_var : nullptr;
    if (norm_.ordering == NormOrdering::Post) {
        Tensor a = conv2d(z, weight, bias, stride_, pad);
        Tensor n = apply_normalization(a, norm_, mode, rm, rv, &stats_initialized_, momentum);
        return prelu(n, prelu_slope);
    }
    Tensor n = apply_normalization(z, norm_, mode, rm, rv, &stats_initialized_, momentum);
    Tensor a = conv2d(n, weight, bias, stride_, pad);
    return prelu(a, prelu_slope);
}

void ConvBlock::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
    out.push_back({prefix + ".prelu_slope", prelu_slope});
}

void ConvBlock::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    if (norm_.kind == NormKind::Batch) {
        out.push_back({prefix + ".running_mean", running_mean});
        out.push_back({prefix + ".running_var", running_var});
    }
}

UNet::UNet(const UNetConfig& config, Rng& rng) : config_(config) {
    if (config.levels < 1) throw std::invalid_argument("unet: levels must be >= 1");
    if (config.num_classes < 2) throw std::invalid_argument("unet: needs num_classes >= 2");
    if (config.in_channels % 2 == 0) throw std::invalid_argument("unet: in_channels S must be odd");
    const int L = config.levels;
    const int k = config.kernel_size;
    for (int i = 0; i < L; ++i) {
        const int ch = config.base_channels << i;
        const int cin = i == 0 ? config.in_channels : (ch >> 1);
        enc_.emplace_back(cin, ch, k, config.norm, 1, rng);
        enc_.emplace_back(ch, ch, k, config.norm, 1, rng);
    }
    const int top = config.base_channels << (L - 1);
    bottleneck_a_ = ConvBlock(top, top * 2, k, config.norm, 1, rng);
    bottleneck_b_ = ConvBlock(top * 2, top * 2, k, config.norm, 1, rng);
    for (int i = L - 1; i >= 0; --i) {
        const int ch = config.base_channels << i;
        Tensor mw = randn({ch, ch * 2, 1, 1}, rng);
        const double stddev = std::sqrt(2.0 / (ch * 2));
        for (double& v : mw.mutable_data()) v *= stddev;
        mw.set_requires_grad(true);
        Tensor mb = Tensor::zeros({ch});
        mb.set_requires_grad(true);
        match_weight_.push_back(mw);
        match_bias_.push_back(mb);
        dec_.emplace_back(ch, ch, k, config.norm, 1, rng);
        dec_.emplace_back(ch, ch, k, config.norm, 1, rng);
    }
    final_weight_ = randn({config.num_classes, config.base_channels, 1, 1}, rng);
    const double stddev = std::sqrt(2.0 / config.base_channels);
    for (double& v : final_weight_.mutable_data()) v *= stddev;
    final_weight_.set_requires_grad(true);
    final_bias_ = Tensor::zeros({config.num_classes});
    final_bias_.set_requires_grad(true);
}

Tensor UNet::forward(const Tensor& x, Mode mode, ActivationTrace* trace) {
    if (x.rank() != 4 || x.dim(1) != config_.in_channels)
        throw std::invalid_argument("unet: expected input (B," + std::to_string(config_.in_channels) +
                                    ",H,W), got " + shape_str(x.shape()));
    const int div = 1 << config_.levels;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
        throw std::invalid_argument("unet: spatial extents of " + shape_str(x.shape()) +
                                    " must be divisible by " + std::to_string(div));
    auto record = [&](const std::string& name, const Tensor& t) {
        if (trace != nullptr) trace->entries.push_back({name, detach(t)});
    };

    const int L = config_.levels;
    std::vector<Tensor> skips;
    Tensor h = x;
    for (int i = 0; i < L; ++i) {
        h = enc_[static_cast<std::size_t>(2 * i)].forward(h, mode);
        record("enc" + std::to_string(i) + ".a", h);
        h = enc_[static_cast<std::size_t>(2 * i + 1)].forward(h, mode);
        record("enc" + std::to_string(i) + ".b", h);
        skips.push_back(h);
        h = downsample2(h);
    }
    h = bottleneck_a_.forward(h, mode);
    record("bottleneck.a", h);
    h = bottleneck_b_.forward(h, mode);
    record("bottleneck.b", h);
    for (int j = 0; j < L; ++j) {
        const int level = L - 1 - j;
        h = upsample2(h);
        h = conv2d(h, match_weight_[static_cast<std::size_t>(j)],
                   match_bias_[static_cast<std::size_t>(j)], 1, 0);
        h = add(h, skips[static_cast<std::size_t>(level)]);
        h = dec_[static_cast<std::size_t>(2 * j)].forward(h, mode);
        record("dec" + std::to_string(level) + ".a", h);
        h = dec_[static_cast<std::size_t>(2 * j + 1)].forward(h, mode);
        record("dec" + std::to_string(level) + ".b", h);
    }
    return conv2d(h, final_weight_, final_bias_, 1, 0);
}

std::vector<NamedTensor> UNet::named_parameters() {
    std::vector<NamedTensor> out;
    for (int i = 0; i < config_.levels; ++i) {
        enc_[static_cast<std::size_t>(2 * i)].collect_parameters("unet.enc" + std::to_string(i) + ".a", out);
        enc_[static_cast<std::size_t>(2 * i + 1)].collect_parameters("unet.enc" + std::to_string(i) + ".b", out);
    }
    bottleneck_a_.collect_parameters("unet.bottleneck.a", out);
    bottleneck_b_.collect_parameters("unet.bottleneck.b", out);
    for (int j = 0; j < config_.levels; ++j) {
        const std::string level = std::to_string(config_.levels - 1 - j);
        out.push_back({"unet.dec" + level + ".match.weight", match_weight_[static_cast<std::size_t>(j)]});
        out.push_back({"unet.dec" + level + ".match.bias", match_bias_[static_cast<std::size_t>(j)]});
        dec_[static_cast<std::size_t>(2 * j)].collect_parameters("unet.dec" + level + ".a", out);
        dec_[static_cast<std::size_t>(2 * j + 1)].collect_parameters("unet.dec" + level + ".b", out);
    }
    out.push_back({"unet.final.weight", final_weight_});
    out.push_back({"unet.final.bias", final_bias_});
    return out;
}

std::vector<NamedTensor> UNet::named_state() {
    std::vector<NamedTensor> out;
    for (int i = 0; i < config_.levels; ++i) {
        enc_[static_cast<std::size_t>(2 * i)].collect_state("unet.enc" + std::to_string(i) + ".a", out);
        enc_[static_cast<std::size_t>(2 * i + 1)].collect_state("unet.enc" + std::to_string(i) + ".b", out);
    }
    bottleneck_a_.collect_state("unet.bottleneck.a", out);
    bottleneck_b_.collect_state("unet.bottleneck.b", out);
    for (int j = 0; j < config_.levels; ++j) {
        const std::string level = std::to_string(config_.levels - 1 - j);
        dec_[static_cast<std::size_t>(2 * j)].collect_state("unet.dec" + level + ".a", out);
        dec_[static_cast<std::size_t>(2 * j + 1)].collect_state("unet.dec" + level + ".b", out);
    }
    return out;
}

bool UNet::stats_initialized() const {
    if (config_.norm.kind != NormKind::Batch) return true;
    return enc_.front().stats_initialized();
}

void UNet::set_stats_initialized(bool v) {
    for (auto& b : enc_) b.set_stats_initialized(v);
    bottleneck_a_.set_stats_initialized(v);
    bottleneck_b_.set_stats_initialized(v);
    for (auto& b : dec_) b.set_stats_initialized(v);
}

std::vector<std::string> UNet::block_names() const {
    std::vector<std::string> names;
    for (int i = 0; i < config_.levels; ++i) {
        names.push_back("enc" + std::to_string(i) + ".a");
        names.push_back("enc" + std::to_string(i) + ".b");
    }
    names.push_back("bottleneck.a");
    names.push_back("bottleneck.b");
    for (int j = 0; j < config_.levels; ++j) {
        const std::string level = std::to_string(config_.levels - 1 - j);
        names.push_back("dec" + level + ".a");
        names.push_back("dec" + level + ".b");
    }
    return names;
}

Discriminator::Discriminator(const DiscriminatorConfig& config, Rng& rng) : config_(config) {
    int cin = config.in_channels;
    for (int w : config.widths) {
        blocks_.emplace_back(cin, w, config.kernel_size, config.norm, 2, rng);
        cin = w;
    }
    head_weight_ = randn({1, cin, 1, 1}, rng);
    const double stddev = std::sqrt(2.0 / cin);
    for (double& v : head_weight_.mutable_data()) v *= stddev;
    head_weight_.set_requires_grad(true);
    head_bias_ = Tensor::zeros({1});
    head_bias_.set_requires_grad(true);
}

Tensor Discriminator::forward(const Tensor& x, const Tensor& y_or_pred, Mode mode) {
    if (x.dim(2) != y_or_pred.dim(2) || x.dim(3) != y_or_pred.dim(3) || x.dim(0) != y_or_pred.dim(0))
        throw std::invalid_argument("discriminator: condition " + shape_str(y_or_pred.shape()) +
                                    " does not align with input " + shape_str(x.shape()));
    Tensor u = concat_channels(x, y_or_pred);
    if (u.dim(1) != config_.in_channels)
        throw std::invalid_argument("discriminator: configured for " +
                                    std::to_string(config_.in_channels) + " channels, got " +
                                    std::to_string(u.dim(1)));
    Tensor h = u;
    for (auto& block : blocks_) h = block.forward(h, mode);
    h = conv2d(h, head_weight_, head_bias_, 1, 0);
    h = reduce_mean(h, {2, 3}, false);  // (B, 1)
    return sigmoid(h);
}

std::vector<NamedTensor> Discriminator::named_parameters() {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].collect_parameters("disc.block" + std::to_string(i), out);
    out.push_back({"disc.head.weight", head_weight_});
    out.push_back({"disc.head.bias", head_bias_});
    return out;
}

std::vector<NamedTensor> Discriminator::named_state() {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].collect_state("disc.block" + std::to_string(i), out);
    return out;
}

double sparsity_fraction(const Tensor& activations) {
    if (activations.size() == 0) throw std::invalid_argument("sparsity_fraction: empty tensor");
    std::int64_t active = 0;
    for (double v : activations.data())
        if (v > 0.0) ++active;
    return static_cast<double>(active) / static_cast<double>(activations.size());
}

namespace {

std::pair<const double*, std::int64_t> channel_slice(const Tensor& t, int kernel_index) {
    if (t.rank() != 4) throw std::invalid_argument("response diagnostics expect 4-D activations");
    if (kernel_index < 0 || kernel_index >= t.dim(1))
        throw std::invalid_argument("kernel index " + std::to_string(kernel_index) +
                                    " out of range for " + shape_str(t.shape()));
    return {t.data().data(), static_cast<std::int64_t>(t.dim(2)) * t.dim(3)};
}

}  // namespace

std::pair<double, double> response_range(const std::vector<Tensor>& activations, int kernel_index) {
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (const Tensor& t : activations) {
        auto [base, plane] = channel_slice(t, kernel_index);
        const int B = t.dim(0), C = t.dim(1);
        for (int b = 0; b < B; ++b) {
            const double* p = base + (static_cast<std::int64_t>(b) * C + kernel_index) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                if (first || p[i] < lo) lo = first ? p[i] : std::min(lo, p[i]);
                if (first || p[i] > hi) hi = first ? p[i] : std::max(hi, p[i]);
                first = false;
            }
        }
    }
    if (first) throw std::invalid_argument("response_range: no activations given");
    return {lo, hi};
}

HistogramRecord response_histogram(const Tensor& activations, const std::string& domain_tag,
                                   int kernel_index, int bins, double lo, double hi) {
    if (bins < 2) throw std::invalid_argument("response_histogram: needs at least 2 bins");
    auto [base, plane] = channel_slice(activations, kernel_index);
    if (hi <= lo) {  // degenerate range: center a unit-wide window on the value
        const double mid = lo;
        lo = mid - 0.5;
        hi = mid + 0.5;
    }
    HistogramRecord rec;
    rec.domain_tag = domain_tag;
    rec.kernel_index = kernel_index;
    rec.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        rec.edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    rec.counts.assign(static_cast<std::size_t>(bins), 0);
    const int B = activations.dim(0), C = activations.dim(1);
    double sum = 0.0;
    std::int64_t n = 0;
    for (int b = 0; b < B; ++b) {
        const double* p = base + (static_cast<std::int64_t>(b) * C + kernel_index) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            int bin = static_cast<int>((p[i] - lo) / (hi - lo) * bins);
            bin = std::clamp(bin, 0, bins - 1);  // out-of-range values land in edge bins
            ++rec.counts[static_cast<std::size_t>(bin)];
            sum += p[i];
            ++n;
        }
    }
    rec.mean = sum / static_cast<double>(n);
    return rec;
}

}  // namespace xdseg
