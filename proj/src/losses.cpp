#include "tatl/losses.hpp"

#include <cmath>
#include <string>

namespace tatl {

void loss_config::validate() const {
    if (!(alpha > 0.0)) {
        throw range_error("loss_config: alpha must be positive, got " + std::to_string(alpha));
    }
    if (!(beta > 0.0 && beta < 1.0)) {
        throw range_error("loss_config: beta must lie in (0,1), got " + std::to_string(beta));
    }
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) {
        throw range_error("loss_config: loss weights must be nonnegative");
    }
}

namespace {

struct overlap_sums {
    double intersection = 0.0;  // <y,p>
    double pred_sum = 0.0;      // |p|
    double target_sum = 0.0;    // |y|
};

overlap_sums accumulate(const tensor_f& pred, const binary_mask& target, const char* caller) {
    if (pred.size() != target.size()) {
        throw dimension_error(std::string(caller) + ": prediction has " +
                              std::to_string(pred.size()) + " elements, target has " +
                              std::to_string(target.size()));
    }
    overlap_sums s;
    const double* p = pred.data();
    const std::uint8_t* y = target.bits().data();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!(p[i] >= 0.0 && p[i] <= 1.0)) {
            throw range_error(std::string(caller) + ": prediction outside [0,1]");
        }
        s.pred_sum += p[i];
        if (y[i]) {
            s.target_sum += 1.0;
            s.intersection += p[i];
        }
    }
    return s;
}

}  // namespace

loss_result tversky_loss(const tensor_f& pred, const binary_mask& target,
                         const loss_config& cfg) {
    cfg.validate();
    const overlap_sums s = accumulate(pred, target, "tversky_loss");

    const double false_neg = s.target_sum - s.intersection;  // <y,1-p>
    const double false_pos = s.pred_sum - s.intersection;    // <p,1-y>
    const double num = cfg.alpha + s.intersection;
    const double den = cfg.alpha + s.intersection + cfg.beta * false_neg +
                       (1.0 - cfg.beta) * false_pos;

    loss_result out;
    out.value = 1.0 - num / den;
    out.grad = tensor_f(pred.shape());
    // d(den)/dp_i = y_i - beta*y_i + (1-beta)*(1-y_i) = 1-beta for every i,
    // so only the numerator derivative depends on the target.
    const double dden = 1.0 - cfg.beta;
    const double inv_den2 = 1.0 / (den * den);
    const std::uint8_t* y = target.bits().data();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dnum = y[i] ? 1.0 : 0.0;
        out.grad[i] = -(dnum * den - num * dden) * inv_den2;
    }
    return out;
}

loss_result soft_jaccard_loss(const tensor_f& pred, const binary_mask& target,
                              const loss_config& cfg) {
    cfg.validate();
    const overlap_sums s = accumulate(pred, target, "soft_jaccard_loss");

    const double num = cfg.alpha + s.intersection;
    const double den = cfg.alpha + s.target_sum + s.pred_sum - s.intersection;

    loss_result out;
    out.value = 1.0 - num / den;
    out.grad = tensor_f(pred.shape());
    const double inv_den2 = 1.0 / (den * den);
    const std::uint8_t* y = target.bits().data();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dnum = y[i] ? 1.0 : 0.0;
        const double dden = y[i] ? 0.0 : 1.0;
        out.grad[i] = -(dnum * den - num * dden) * inv_den2;
    }
    return out;
}

loss_result combined_loss(const tensor_f& pred, const binary_mask& target,
                          const loss_config& cfg) {
    loss_result t = tversky_loss(pred, target, cfg);
    const loss_result j = soft_jaccard_loss(pred, target, cfg);
    t.value = cfg.lambda1 * t.value + cfg.lambda2 * j.value;
    for (std::size_t i = 0; i < t.grad.size(); ++i) {
        t.grad[i] = cfg.lambda1 * t.grad[i] + cfg.lambda2 * j.grad[i];
    }
    return t;
}

double mean_combined_loss(const std::vector<tensor_f>& preds,
                          const std::vector<binary_mask>& targets,
                          const loss_config& cfg) {
    if (preds.size() != targets.size()) {
        throw dimension_error("mean_combined_loss: " + std::to_string(preds.size()) +
                              " predictions vs " + std::to_string(targets.size()) +
                              " targets");
    }
    if (preds.empty()) {
        throw range_error("mean_combined_loss: empty batch");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        total += combined_loss(preds[i], targets[i], cfg).value;
    }
    return total / static_cast<double>(preds.size());
}

}  // namespace tatl
