// Conv blocks with selectable normalization ordering/kind, the shared-parameter
// U-Net segmenter, the conditional discriminator, and the response diagnostics
// (sparsity fractions, per-kernel histograms).
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xdseg/tensor.hpp"

namespace xdseg {

enum class NormKind { Batch, Instance };
enum class NormOrdering { Pre, Post };

NormKind parse_norm_kind(const std::string& s);
NormOrdering parse_norm_ordering(const std::string& s);
std::string to_string(NormKind kind);
std::string to_string(NormOrdering ordering);

struct NormSpec {
    NormKind kind = NormKind::Batch;
    NormOrdering ordering = NormOrdering::Pre;
    double epsilon = 1e-5;
};

enum class Mode { Train, Eval };

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Standalone normalization stage. Batch kind in train mode also updates the
// running statistics (detached from the tape).
Tensor apply_normalization(const Tensor& z, const NormSpec& spec, Mode mode,
                           Tensor* running_mean, Tensor* running_var,
                           bool* stats_initialized, double momentum);

// One convolution + normalization + PReLU unit. `ordering` decides whether the
// statistics are taken from the conv output (Post) or from the block input (Pre).
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(int in_channels, int out_channels, int kernel_size, NormSpec norm,
              int stride, Rng& rng);

    Tensor forward(const Tensor& z, Mode mode);

    int in_channels() const { return in_channels_; }
    int out_channels() const { return out_channels_; }
    const NormSpec& norm() const { return norm_; }

    void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out);
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out);
    bool stats_initialized() const { return stats_initialized_; }
    void set_stats_initialized(bool v) { stats_initialized_ = v; }

    Tensor weight, bias, prelu_slope;
    Tensor running_mean, running_var;  // Batch kind only
    double momentum = 0.9;

private:
    int in_channels_ = 0, out_channels_ = 0, kernel_size_ = 3, stride_ = 1;
    NormSpec norm_;
    bool stats_initialized_ = false;
};

struct UNetConfig {
    int levels = 4;
    int base_channels = 16;
    int in_channels = 3;   // S = 2T + 1
    int num_classes = 2;
    int kernel_size = 3;
    NormSpec norm;
};

// Post-activation responses captured during a forward pass, keyed by block name.
struct ActivationTrace {
    std::vector<std::pair<std::string, Tensor>> entries;
};

// Encoder/decoder with element-wise-summation skips and a single parameter set
// shared across domains: the forward pass takes no modality information.
class UNet {
public:
    UNet() = default;
    UNet(const UNetConfig& config, Rng& rng);

    Tensor forward(const Tensor& x, Mode mode, ActivationTrace* trace = nullptr);

    const UNetConfig& config() const { return config_; }
    std::vector<NamedTensor> named_parameters();
    std::vector<NamedTensor> named_state();
    bool stats_initialized() const;
    void set_stats_initialized(bool v);
    std::vector<std::string> block_names() const;

private:
    UNetConfig config_;
    std::vector<ConvBlock> enc_;        // two per level
    ConvBlock bottleneck_a_, bottleneck_b_;
    std::vector<Tensor> match_weight_, match_bias_;  // 1x1 channel-matching convs
    std::vector<ConvBlock> dec_;        // two per level
    Tensor final_weight_, final_bias_;
};

struct DiscriminatorConfig {
    int in_channels = 5;                // S + C
    std::vector<int> widths = {16, 32, 64};
    int kernel_size = 3;
    NormSpec norm{NormKind::Instance, NormOrdering::Post, 1e-5};
};

// Conditional discriminator: scores concat(x, y_or_pred) with a strided conv
// stack, global average and sigmoid. Output shape (B, 1), values in (0, 1).
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const DiscriminatorConfig& config, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor& y_or_pred, Mode mode);

    const DiscriminatorConfig& config() const { return config_; }
    std::vector<NamedTensor> named_parameters();
    std::vector<NamedTensor> named_state();

private:
    DiscriminatorConfig config_;
    std::vector<ConvBlock> blocks_;
    Tensor head_weight_, head_bias_;
};

// Fraction of elements strictly greater than zero.
double sparsity_fraction(const Tensor& activations);

struct HistogramRecord {
    std::string domain_tag;
    std::string layer;
    int kernel_index = 0;
    std::vector<double> edges;   // bins + 1 ascending
    std::vector<std::int64_t> counts;
    double mean = 0.0;           // mean response of the selected channel
};

// Shared-range helper so multiple domains can be binned over identical edges.
std::pair<double, double> response_range(const std::vector<Tensor>& activations, int kernel_index);

HistogramRecord response_histogram(const Tensor& activations, const std::string& domain_tag,
                                   int kernel_index, int bins, double lo, double hi);

}  // namespace xdseg
