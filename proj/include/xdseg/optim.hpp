// Adam with bias correction, one shared step counter per optimizer instance.
#pragma once

#include <cstdint>
#include <vector>

#include "xdseg/tensor.hpp"

namespace xdseg {

struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, AdamConfig config);

    // Applies one update from the gradients currently stored on the parameters.
    void step();

    std::int64_t iterations() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamConfig config_;
    std::int64_t t_ = 0;
};

}  // namespace xdseg
