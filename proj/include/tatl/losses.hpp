#pragma once

#include <vector>

#include "tatl/mask.hpp"
#include "tatl/tensor.hpp"

namespace tatl {

// Coefficients for the segmentation losses.  `alpha` is the smoothing term
// keeping denominators away from zero, `beta` weighs false negatives against
// false positives inside the Tversky index, and the lambdas blend the two
// losses in combined_loss.
struct loss_config {
    double alpha = 1.0;
    double beta = 0.6;
    double lambda1 = 0.5;
    double lambda2 = 0.5;

    void validate() const;
};

// Loss value plus its analytic gradient with respect to the prediction,
// shaped like the prediction.
struct loss_result {
    double value = 0.0;
    tensor_f grad;
};

// Tversky loss
//   1 - (alpha + <y,p>) / (alpha + <y,p> + beta*<y,1-p> + (1-beta)*<p,1-y>)
// where y is the target and p the predicted probabilities.  beta > 0.5
// penalises false negatives harder than false positives.
loss_result tversky_loss(const tensor_f& pred, const binary_mask& target,
                         const loss_config& cfg = {});

// Soft Jaccard loss
//   1 - (alpha + <y,p>) / (alpha + |y| + |p| - <y,p>)
// with |.| the elementwise L1 norm (entries are nonnegative).
loss_result soft_jaccard_loss(const tensor_f& pred, const binary_mask& target,
                              const loss_config& cfg = {});

// lambda1 * tversky + lambda2 * soft_jaccard, for both value and gradient.
loss_result combined_loss(const tensor_f& pred, const binary_mask& target,
                          const loss_config& cfg = {});

// Mean combined loss over a batch; predictions and targets are paired by
// index.  Used for epoch-level train/validation summaries.
double mean_combined_loss(const std::vector<tensor_f>& preds,
                          const std::vector<binary_mask>& targets,
                          const loss_config& cfg = {});

}  // namespace tatl
