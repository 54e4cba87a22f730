#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tatl/losses.hpp"
#include "tatl/nnet.hpp"
#include "tatl/training.hpp"

namespace tatl {

// Knobs for the bound-score estimator.  `k_candidates` is the number of
// candidate initializations compared (it enters the score only through
// sqrt(log K)); compare_inits overrides it with the actual candidate count.
struct bound_inputs {
    double c = 0.01;                 // SGD step scale assumed by the bound
    std::size_t k_candidates = 4;
    std::size_t power_iters = 30;    // per-sample power-iteration budget
    double power_tol = 1e-4;
    double fd_step = 1e-4;           // Hessian-vector finite-difference step
    std::uint64_t seed = 0;

    void validate() const;
};

// The gamma statistics of one candidate at one dataset.
struct gamma_stats {
    double gamma_hat = 0.0;
    double gamma_plus = 0.0;
    double gamma_minus = 0.0;
    double mean_hessian_norm = 0.0;
    double empirical_risk = 0.0;
    bool clamped = false;  // gamma_minus fell to the 1e-6 floor
};

struct candidate_stats {
    std::string name;
    double empirical_risk = 0.0;
    double mean_hessian_norm = 0.0;
    double gamma_hat = 0.0;
    double gamma_plus = 0.0;
    double gamma_minus = 0.0;
    bool clamped = false;
    double bound_score = 0.0;
};

struct bound_report {
    std::vector<candidate_stats> candidates;
    std::string selected;  // argmin bound_score, ties broken by name order
    std::size_t m = 0;
    double c = 0.0;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> assumptions;
};

// Mean combined loss of the network at `params` over the dataset.  The
// summation is order-independent (sorted compensated sum), so permuting the
// dataset cannot change the result.
double empirical_risk(const param_set& params, const net_config& cfg,
                      const std::vector<labeled_sample>& data, const loss_config& loss = {});

// Gradient of some scalar loss as a function of a flat weight vector.
using grad_fn = std::function<std::vector<double>(std::span<const double>)>;

// Hessian-vector product by central differences of the gradient:
//   (grad(w + h v) - grad(w - h v)) / (2 h),  h = fd_step * (1 + |w|) / |v|.
std::vector<double> hessian_vec(const grad_fn& grad, std::span<const double> w,
                                std::span<const double> v, double fd_step);

// The same product for the combined segmentation loss of one sample at one
// parameter set.
std::vector<double> hessian_vec(const param_set& params, const net_config& cfg,
                                const labeled_sample& sample, std::span<const double> v,
                                double fd_step, const loss_config& loss = {});

// Symmetric linear operator as a callable.
using matvec_fn = std::function<std::vector<double>(std::span<const double>)>;

// Power iteration from a seeded random start; returns the magnitude of the
// Rayleigh quotient after convergence (successive-estimate change below tol)
// or after `iters` applications.
double spectral_norm(const matvec_fn& op, std::size_t dim, std::size_t iters, double tol,
                     std::uint64_t seed);

// gamma_hat = mean per-sample Hessian norm + sqrt(empirical risk), and
// gamma_plus/minus = gamma_hat +/- m^(-1/4) with the documented 1e-6 clamp
// on gamma_minus.  Pure arithmetic over precomputed per-sample norms.
gamma_stats make_gamma_stats(const std::vector<double>& per_sample_norms, double risk);

// Full statistic for a parameter set: per-sample Hessian spectral norms via
// matrix-free power iteration, then the gamma arithmetic above.
gamma_stats gamma_hat(const param_set& params, const net_config& cfg,
                      const std::vector<labeled_sample>& data, const bound_inputs& in,
                      const loss_config& loss = {});

// The comparative score
//   (1 + 1/(c g-)) * risk^{c g+ / (1 + c g+)} * sqrt(log k) / m^{1 / (1 + c g+)}
// with natural log, 0^p defined as 0, and sqrt(log k) clamped at 0 for k < 2.
// Lower is better; the dropped big-O constants make it comparative only.
double bound_score(double gamma_plus, double gamma_minus, double risk, std::size_t m,
                   std::size_t k, double c);

// Scores every candidate on the same data and selects the argmin.
bound_report compare_inits(const std::vector<std::pair<std::string, const param_set*>>& candidates,
                           const net_config& cfg, const std::vector<labeled_sample>& data,
                           const bound_inputs& in, const loss_config& loss = {});

std::string bound_report_json(const bound_report& report);
void write_bound_report(const bound_report& report, const std::filesystem::path& path);

}  // namespace tatl
