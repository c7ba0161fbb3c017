#include "xdseg/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace xdseg {

namespace {

void validate_one_hot(const Tensor& labels) {
    if (labels.rank() != 4) throw std::invalid_argument("labels must be (B,C,H,W)");
    const int B = labels.dim(0), C = labels.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(labels.dim(2)) * labels.dim(3);
    const double* p = labels.data().data();
    for (int b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < plane; ++i) {
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
                const double v = p[(static_cast<std::int64_t>(b) * C + c) * plane + i];
                if (v != 0.0 && v != 1.0)
                    throw std::invalid_argument("labels must be one-hot: found value " + std::to_string(v));
                sum += v;
            }
            if (sum != 1.0) throw std::invalid_argument("labels must be one-hot: pixel channel sum != 1");
        }
    }
}

void validate_scores(const Tensor& scores, const char* what) {
    for (double v : scores.data()) {
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument(std::string(what) + " score outside [0,1]: " + std::to_string(v));
    }
}

// weights (B) against scores (B,1); plain mean when weights are all ones
Tensor weighted_mean_scores(const Tensor& scores, const Tensor& weights) {
    const int B = scores.dim(0);
    Tensor flat = reshape(scores, {B});
    Tensor weighted = mul(flat, weights);
    return mul_scalar(sum_all(weighted), 1.0 / B);
}

}  // namespace

Tensor weighted_cross_entropy_loss(const Tensor& logits, const Tensor& labels,
                                   const Tensor& weights) {
    if (logits.shape() != labels.shape())
        throw std::invalid_argument("cross entropy: logits " + shape_str(logits.shape()) +
                                    " vs labels " + shape_str(labels.shape()));
    validate_one_hot(labels);
    const int B = logits.dim(0);
    if (weights.rank() != 1 || weights.dim(0) != B)
        throw std::invalid_argument("cross entropy: weights must have shape (B)");
    const std::int64_t pixels = static_cast<std::int64_t>(logits.dim(2)) * logits.dim(3);

    Tensor probs = softmax_channels(logits);
    Tensor picked = mul(log_clamped(probs), labels);
    Tensor per_sample = reduce_sum(picked, {1, 2, 3}, false);  // (B)
    Tensor weighted = mul(per_sample, weights);
    return mul_scalar(sum_all(weighted), -1.0 / static_cast<double>(B * pixels));
}

Tensor cross_entropy_loss(const Tensor& logits, const Tensor& labels) {
    return weighted_cross_entropy_loss(logits, labels, Tensor::full({logits.dim(0)}, 1.0));
}

Tensor disc_loss(const Tensor& real_scores, const Tensor& fake_scores) {
    validate_scores(real_scores, "real");
    validate_scores(fake_scores, "fake");
    return add(mean_all(real_scores), mean_all(mul_scalar(add_scalar(fake_scores, -1.0), -1.0)));
}

Tensor weighted_disc_loss(const Tensor& real_scores, const Tensor& fake_scores,
                          const Tensor& weights) {
    validate_scores(real_scores, "real");
    validate_scores(fake_scores, "fake");
    Tensor one_minus_fake = mul_scalar(add_scalar(fake_scores, -1.0), -1.0);
    return add(weighted_mean_scores(real_scores, weights),
               weighted_mean_scores(one_minus_fake, weights));
}

Tensor gen_adv_loss(const Tensor& fake_scores) {
    validate_scores(fake_scores, "fake");
    return mean_all(fake_scores);
}

Tensor weighted_gen_adv_loss(const Tensor& fake_scores, const Tensor& weights) {
    validate_scores(fake_scores, "fake");
    return weighted_mean_scores(fake_scores, weights);
}

double combined_loss(double l_cls, double l_gen, double adv_weight) {
    if (adv_weight < 0.0) throw std::invalid_argument("combined_loss: adv_weight must be >= 0");
    return l_cls + adv_weight * l_gen;
}

}  // namespace xdseg
