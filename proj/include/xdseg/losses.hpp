// Loss functions for the segmentation objective and the conditional
// adversarial pair. All tensor-returning losses are differentiable.
#pragma once

#include "xdseg/tensor.hpp"

namespace xdseg {

// Mean over batch and pixels of -sum_c y_c log softmax(logits)_c.
// `labels` must be one-hot per pixel.
Tensor cross_entropy_loss(const Tensor& logits, const Tensor& labels);

// Per-sample weighted variant: weights has shape (B); the mean normalization
// stays 1/(B*H*W) so all-ones weights reduce to the plain loss.
Tensor weighted_cross_entropy_loss(const Tensor& logits, const Tensor& labels,
                                   const Tensor& weights);

// E[Disc(u)] + E[1 - Disc(u_hat)]; the discriminator ascends this.
Tensor disc_loss(const Tensor& real_scores, const Tensor& fake_scores);
Tensor weighted_disc_loss(const Tensor& real_scores, const Tensor& fake_scores,
                          const Tensor& weights);

// E[Disc(u_hat)]; the generator ascends this.
Tensor gen_adv_loss(const Tensor& fake_scores);
Tensor weighted_gen_adv_loss(const Tensor& fake_scores, const Tensor& weights);

// Reporting arithmetic: L = L_cls + lambda * L_Gen.
double combined_loss(double l_cls, double l_gen, double adv_weight);

}  // namespace xdseg
